#pragma once

#include <rgm/autodiff.hpp>
#include <rgm/rng.hpp>

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace rgm {

using Tape = ad::Tape<double>;
using Var = ad::Var<double>;
using GradientMap = ad::GradientMap<double>;

struct Parameter {
  std::string name;
  Tensord value;
};

/// Ordered, named collection of trainable tensors. Layers refer to their
/// weights by index; a forward pass receives the matching span of bound Vars,
/// which may be tape leaves or computed nodes (e.g. updated weights).
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensord value);

  [[nodiscard]] std::size_t size() const { return params_.size(); }
  [[nodiscard]] bool empty() const { return params_.empty(); }
  [[nodiscard]] Parameter& operator[](std::size_t i) { return params_[i]; }
  [[nodiscard]] const Parameter& operator[](std::size_t i) const { return params_[i]; }
  [[nodiscard]] std::optional<std::size_t> find(const std::string& name) const;
  [[nodiscard]] Index scalar_count() const;
  [[nodiscard]] std::vector<Tensord> values() const;
  [[nodiscard]] std::vector<Tensord> zeros_like() const;

  std::vector<Var> bind(Tape& tape) const;
  std::vector<Var> bind_constant(Tape& tape) const;

  /// Copies values from another set with identical names and shapes.
  void assign(const ParameterSet& other);
  [[nodiscard]] bool same_layout(const ParameterSet& other) const;
  [[nodiscard]] bool all_finite() const;

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  [[nodiscard]] auto begin() const { return params_.begin(); }
  [[nodiscard]] auto end() const { return params_.end(); }

 private:
  std::vector<Parameter> params_;
};

/// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)].
Tensord uniform_init(Index rows, Index cols, Index fan_in, Rng& rng);

class Linear {
 public:
  Linear() = default;
  Linear(ParameterSet& params, const std::string& name, Index in_dim, Index out_dim, Rng& rng);

  [[nodiscard]] Var forward(std::span<const Var> bound, const Var& x) const;
  [[nodiscard]] Tensord evaluate(const ParameterSet& params, const Tensord& x) const;

  [[nodiscard]] Index in_dim() const { return in_dim_; }
  [[nodiscard]] Index out_dim() const { return out_dim_; }
  [[nodiscard]] std::size_t weight_index() const { return weight_; }
  [[nodiscard]] std::size_t bias_index() const { return weight_ + 1; }

 private:
  Index in_dim_ = 0;
  Index out_dim_ = 0;
  std::size_t weight_ = 0;
};

/// Affine layers with ReLU between them; the last layer is left linear.
class Mlp {
 public:
  Mlp() = default;
  Mlp(ParameterSet& params, const std::string& name, const std::vector<Index>& dims, Rng& rng);

  [[nodiscard]] Var forward(std::span<const Var> bound, const Var& x) const;
  [[nodiscard]] Tensord evaluate(const ParameterSet& params, const Tensord& x) const;

  [[nodiscard]] const std::vector<Linear>& layers() const { return layers_; }
  [[nodiscard]] Index in_dim() const { return layers_.front().in_dim(); }
  [[nodiscard]] Index out_dim() const { return layers_.back().out_dim(); }

 private:
  std::vector<Linear> layers_;
};

class LayerNorm {
 public:
  static constexpr double kEpsilon = 1e-5;

  LayerNorm() = default;
  LayerNorm(ParameterSet& params, const std::string& name, Index dim);

  [[nodiscard]] Var forward(std::span<const Var> bound, const Var& x) const;

 private:
  std::size_t gain_ = 0;
};

struct EncoderConfig {
  Index d_model = 64;
  int heads = 4;
  Index ff_dim = 128;
  bool layer_norm = true;
  // false swaps self-attention for a position-wise stack with the same
  // parameter shapes (the attention ablation)
  bool attention = true;
};

/// Post-norm transformer encoder layer: x1 = LN(x + MHA(x)),
/// out = LN(x1 + FF(x1)).
class EncoderLayer {
 public:
  EncoderLayer() = default;
  EncoderLayer(ParameterSet& params, const std::string& name, const EncoderConfig& config, Rng& rng);

  [[nodiscard]] Var forward(std::span<const Var> bound, const Var& x) const;

  /// Per-head [T x T] attention weights for input x (empty without attention).
  [[nodiscard]] std::vector<Var> attention_weights(std::span<const Var> bound, const Var& x) const;

  [[nodiscard]] const EncoderConfig& config() const { return config_; }

 private:
  [[nodiscard]] Var attend(std::span<const Var> bound, const Var& x, std::vector<Var>* weights) const;
  [[nodiscard]] Var mix_positionwise(std::span<const Var> bound, const Var& x) const;

  EncoderConfig config_;
  Linear query_, key_, value_, output_;
  Linear ff_in_, ff_out_;
  LayerNorm norm_attn_, norm_ff_;
};

/// Sinusoidal encoding: row p, column 2i = sin(p / 10000^(2i/d)),
/// column 2i+1 = cos(same). Requires even d.
Tensord position_encoding(Index length, Index d);

enum class OptimizerKind { Sgd, RmsProp, Adam };
enum class UpdateDirection { Ascent, Descent };

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::Sgd;
  double learning_rate = 1e-3;
  double rms_decay = 0.99;
  double rms_epsilon = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
};

OptimizerKind parse_optimizer_kind(const std::string& name);
std::string to_string(OptimizerKind kind);

class Optimizer {
 public:
  Optimizer() = default;
  Optimizer(OptimizerConfig config, const ParameterSet& params);

  /// Applies one update; grads must align with params in order and shape.
  void step(ParameterSet& params, std::span<const Tensord> grads, UpdateDirection direction);

  [[nodiscard]] const OptimizerConfig& config() const { return config_; }
  [[nodiscard]] std::uint64_t steps() const { return steps_; }

 private:
  OptimizerConfig config_;
  std::vector<Tensord> first_;
  std::vector<Tensord> second_;
  std::uint64_t steps_ = 0;
};

double global_norm(std::span<const Tensord> grads);

/// Rescales grads in place when their global norm exceeds max_norm (> 0).
/// Returns the norm before clipping.
double clip_global_norm(std::span<Tensord> grads, double max_norm);

}  // namespace rgm
