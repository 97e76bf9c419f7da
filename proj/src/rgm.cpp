#include <rgm/rgm.hpp>

#include <cmath>

namespace rgm {

RgmVariant parse_rgm_variant(const std::string& name) {
  if (name == "standard") return RgmVariant::Standard;
  if (name == "with_target_network") return RgmVariant::WithTargetNetwork;
  if (name == "no_attention") return RgmVariant::NoAttention;
  throw std::invalid_argument("unknown RGM variant '" + name + "' (expected standard, with_target_network or no_attention)");
}

std::string to_string(RgmVariant variant) {
  switch (variant) {
    case RgmVariant::Standard: return "standard";
    case RgmVariant::WithTargetNetwork: return "with_target_network";
    case RgmVariant::NoAttention: return "no_attention";
  }
  return "standard";
}

ReturnGeneratingModel::ReturnGeneratingModel(const RgmConfig& config, Rng& rng) : config_(config) {
  if (config.layers < 0) throw std::invalid_argument("RGM: negative layer count");
  if (config.d_model % 2 != 0) throw std::invalid_argument("RGM: d_model must be even for position encoding");
  if (config.variant == RgmVariant::WithTargetNetwork && config.target_sync_period < 1) {
    throw std::invalid_argument("RGM: target sync period must be >= 1");
  }
  embed_ = Linear(params, "rgm.embed", feature_dim(), config.d_model, rng);
  EncoderConfig enc;
  enc.d_model = config.d_model;
  enc.heads = config.heads;
  enc.ff_dim = config.ff_dim;
  enc.layer_norm = config.layer_norm;
  enc.attention = config.variant != RgmVariant::NoAttention;
  for (int i = 0; i < config.layers; ++i) {
    layers_.emplace_back(params, "rgm.encoder" + std::to_string(i), enc, rng);
  }
  head_ = Linear(params, "rgm.head", config.d_model, 1, rng);
}

Tensord ReturnGeneratingModel::step_features(const Trajectory& trajectory) const {
  const Index T = trajectory.size();
  if (T == 0) throw std::invalid_argument("RGM: empty trajectory");
  if (trajectory.features.cols() != config_.state_dim) {
    throw ShapeError("RGM: trajectory features have " + std::to_string(trajectory.features.cols()) +
                     " columns, model expects " + std::to_string(config_.state_dim));
  }
  Tensord f = Tensord::Zero(T, feature_dim());
  f.leftCols(config_.state_dim) = trajectory.features;
  for (Index t = 0; t < T; ++t) {
    const Transition& s = trajectory.steps[static_cast<std::size_t>(t)];
    if (s.action < 0 || s.action >= config_.num_actions) throw std::invalid_argument("RGM: action out of range");
    f(t, config_.state_dim + s.action) = 1.0;
    f(t, feature_dim() - 1) = s.reward;
  }
  if (!f.allFinite()) throw NumericalError("RGM: non-finite step features");
  return f;
}

Var ReturnGeneratingModel::embed(std::span<const Var> bound, const Trajectory& trajectory) const {
  Tape& tape = *bound.front().tape();
  const Var x = tape.constant(step_features(trajectory));
  return embed_.forward(bound, x) + tape.constant(position_encoding(trajectory.size(), config_.d_model));
}

Var ReturnGeneratingModel::generate_beta(std::span<const Var> bound, const Trajectory& trajectory) const {
  Var h = embed(bound, trajectory);
  for (const EncoderLayer& layer : layers_) h = layer.forward(bound, h);
  const Var beta = ad::softmax(head_.forward(bound, h), 0);
  if (!beta.value().allFinite()) throw NumericalError("RGM: non-finite coefficients");
  return beta;
}

std::vector<double> ReturnGeneratingModel::beta(const Trajectory& trajectory) const {
  Tape tape;
  const std::vector<Var> eta = params.bind_constant(tape);
  const Var b = generate_beta(eta, trajectory);
  return {b.value().data(), b.value().data() + b.value().size()};
}

Var rgm_return(const Var& beta, std::span<const double> rewards) {
  if (beta.cols() != 1 || beta.rows() != static_cast<Index>(rewards.size())) {
    throw ShapeError("rgm_return: beta " + shape_string(beta.value()) + " for " + std::to_string(rewards.size()) +
                     " rewards");
  }
  Tensord r(beta.rows(), 1);
  for (Index t = 0; t < r.rows(); ++t) r(t, 0) = rewards[static_cast<std::size_t>(t)];
  return ad::suffix_sum(beta * beta.tape()->constant(std::move(r)));
}

std::vector<double> rgm_return(std::span<const double> rewards, std::span<const double> beta) {
  if (rewards.size() != beta.size()) {
    throw std::invalid_argument("rgm_return: " + std::to_string(beta.size()) + " coefficients for " +
                                std::to_string(rewards.size()) + " rewards");
  }
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc += beta[t] * rewards[t];
    g[t] = acc;
  }
  return g;
}

bool target_sync(const ReturnGeneratingModel& live, ReturnGeneratingModel& target, std::uint64_t step, int period) {
  if (period < 1) throw std::invalid_argument("target_sync: period must be >= 1");
  if (!live.params.same_layout(target.params)) throw ShapeError("target_sync: live and target layouts differ");
  if (step % static_cast<std::uint64_t>(period) != 0) return false;
  target.params.assign(live.params);
  return true;
}

double beta_entropy(std::span<const double> beta) {
  double h = 0.0;
  for (double b : beta) {
    if (b > 0.0) h -= b * std::log(b);
  }
  return h;
}

}  // namespace rgm
