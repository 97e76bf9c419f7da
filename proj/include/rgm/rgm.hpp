#pragma once

#include <rgm/env.hpp>
#include <rgm/nn.hpp>

#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace rgm {

enum class RgmVariant { Standard, WithTargetNetwork, NoAttention };

RgmVariant parse_rgm_variant(const std::string& name);
std::string to_string(RgmVariant variant);

struct RgmConfig {
  Index state_dim = 2;
  int num_actions = 4;
  Index d_model = 64;
  int heads = 4;
  int layers = 4;
  Index ff_dim = 128;
  bool layer_norm = true;
  RgmVariant variant = RgmVariant::Standard;
  int target_sync_period = 100;
};

/// Return generating model: embeds every step of a trajectory as
/// [state features | one-hot action | reward], adds sinusoidal positions,
/// runs a stack of encoder layers over the whole trajectory, scores each
/// position with a linear head and normalizes the scores with a softmax over
/// positions. The result is one coefficient per step, beta_1..beta_T.
class ReturnGeneratingModel {
 public:
  ReturnGeneratingModel() = default;
  ReturnGeneratingModel(const RgmConfig& config, Rng& rng);

  [[nodiscard]] Index feature_dim() const { return config_.state_dim + config_.num_actions + 1; }
  [[nodiscard]] Tensord step_features(const Trajectory& trajectory) const;

  /// [T x d] step embedding plus position encoding.
  [[nodiscard]] Var embed(std::span<const Var> bound, const Trajectory& trajectory) const;

  /// [T x 1] nonnegative coefficients summing to one.
  [[nodiscard]] Var generate_beta(std::span<const Var> bound, const Trajectory& trajectory) const;

  /// Tape-free convenience wrapper around generate_beta.
  [[nodiscard]] std::vector<double> beta(const Trajectory& trajectory) const;

  [[nodiscard]] const RgmConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<EncoderLayer>& layers() const { return layers_; }
  [[nodiscard]] const Linear& embedding() const { return embed_; }

  ParameterSet params;

 private:
  RgmConfig config_;
  Linear embed_;
  std::vector<EncoderLayer> layers_;
  Linear head_;
};

/// G_t = sum_{l >= t} beta_l * r_l, differentiable through beta ([T x 1]).
Var rgm_return(const Var& beta, std::span<const double> rewards);

/// Plain evaluation of the same suffix sum by reverse accumulation.
std::vector<double> rgm_return(std::span<const double> rewards, std::span<const double> beta);

/// Copies live into target when step is a multiple of period; returns
/// whether a copy happened.
bool target_sync(const ReturnGeneratingModel& live, ReturnGeneratingModel& target, std::uint64_t step, int period);

/// -sum beta log beta (natural log).
double beta_entropy(std::span<const double> beta);

}  // namespace rgm
