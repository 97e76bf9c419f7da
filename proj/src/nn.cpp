#include <rgm/nn.hpp>

#include <cmath>
#include <stdexcept>

namespace rgm {

std::size_t ParameterSet::add(std::string name, Tensord value) {
  if (find(name)) throw std::invalid_argument("ParameterSet: duplicate parameter '" + name + "'");
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

std::optional<std::size_t> ParameterSet::find(const std::string& name) const {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (params_[i].name == name) return i;
  }
  return std::nullopt;
}

Index ParameterSet::scalar_count() const {
  Index n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

std::vector<Tensord> ParameterSet::values() const {
  std::vector<Tensord> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.value);
  return out;
}

std::vector<Tensord> ParameterSet::zeros_like() const {
  std::vector<Tensord> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(Tensord::Zero(p.value.rows(), p.value.cols()));
  return out;
}

std::vector<Var> ParameterSet::bind(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.variable(p.value));
  return out;
}

std::vector<Var> ParameterSet::bind_constant(Tape& tape) const {
  std::vector<Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(tape.constant(p.value));
  return out;
}

bool ParameterSet::same_layout(const ParameterSet& other) const {
  if (other.size() != size()) return false;
  for (std::size_t i = 0; i < size(); ++i) {
    const auto& a = params_[i];
    const auto& b = other.params_[i];
    if (a.name != b.name || a.value.rows() != b.value.rows() || a.value.cols() != b.value.cols()) return false;
  }
  return true;
}

void ParameterSet::assign(const ParameterSet& other) {
  if (!same_layout(other)) throw ShapeError("ParameterSet::assign: layouts differ");
  for (std::size_t i = 0; i < size(); ++i) params_[i].value = other.params_[i].value;
}

bool ParameterSet::all_finite() const {
  for (const auto& p : params_) {
    if (!p.value.allFinite()) return false;
  }
  return true;
}

Tensord uniform_init(Index rows, Index cols, Index fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  Tensord m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

// ---------------------------------------------------------------------------

Linear::Linear(ParameterSet& params, const std::string& name, Index in_dim, Index out_dim, Rng& rng)
    : in_dim_(in_dim), out_dim_(out_dim) {
  if (in_dim <= 0 || out_dim <= 0) throw std::invalid_argument("Linear '" + name + "': dimensions must be positive");
  weight_ = params.add(name + ".weight", uniform_init(in_dim, out_dim, in_dim, rng));
  params.add(name + ".bias", uniform_init(1, out_dim, in_dim, rng));
}

Var Linear::forward(std::span<const Var> bound, const Var& x) const {
  if (x.cols() != in_dim_) {
    throw ShapeError("linear: input " + shape_string(x.value()) + " needs " + std::to_string(in_dim_) + " columns");
  }
  const Var y = ad::matmul(x, bound[weight_]);
  return y + ad::broadcast(bound[weight_ + 1], y.rows(), y.cols());
}

Tensord Linear::evaluate(const ParameterSet& params, const Tensord& x) const {
  if (x.cols() != in_dim_) {
    throw ShapeError("linear: input " + shape_string(x) + " needs " + std::to_string(in_dim_) + " columns");
  }
  Tensord y = x * params[weight_].value;
  y.rowwise() += params[weight_ + 1].value.row(0);
  return y;
}

Mlp::Mlp(ParameterSet& params, const std::string& name, const std::vector<Index>& dims, Rng& rng) {
  if (dims.size() < 2) throw std::invalid_argument("Mlp '" + name + "': need at least input and output dims");
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    layers_.emplace_back(params, name + ".layer" + std::to_string(i), dims[i], dims[i + 1], rng);
  }
}

Var Mlp::forward(std::span<const Var> bound, const Var& x) const {
  Var h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].forward(bound, h);
    if (i + 1 < layers_.size()) h = ad::relu(h);
  }
  return h;
}

Tensord Mlp::evaluate(const ParameterSet& params, const Tensord& x) const {
  Tensord h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].evaluate(params, h);
    if (i + 1 < layers_.size()) h = h.cwiseMax(0.0);
  }
  return h;
}

// ---------------------------------------------------------------------------

LayerNorm::LayerNorm(ParameterSet& params, const std::string& name, Index dim) {
  gain_ = params.add(name + ".gain", Tensord::Ones(1, dim));
  params.add(name + ".shift", Tensord::Zero(1, dim));
}

Var LayerNorm::forward(std::span<const Var> bound, const Var& x) const {
  const Index rows = x.rows();
  const Index cols = x.cols();
  const Var centered = x - ad::broadcast(ad::mean(x, 1), rows, cols);
  const Var variance = ad::mean(centered * centered, 1);
  const Var scale = ad::sqrt(ad::shift(variance, kEpsilon));
  const Var normed = centered / ad::broadcast(scale, rows, cols);
  return normed * ad::broadcast(bound[gain_], rows, cols) + ad::broadcast(bound[gain_ + 1], rows, cols);
}

// ---------------------------------------------------------------------------

EncoderLayer::EncoderLayer(ParameterSet& params, const std::string& name, const EncoderConfig& config, Rng& rng)
    : config_(config) {
  if (config.heads <= 0 || config.d_model % config.heads != 0) {
    throw std::invalid_argument("EncoderLayer '" + name + "': d_model " + std::to_string(config.d_model) +
                                " not divisible by " + std::to_string(config.heads) + " heads");
  }
  const Index d = config.d_model;
  query_ = Linear(params, name + ".query", d, d, rng);
  key_ = Linear(params, name + ".key", d, d, rng);
  value_ = Linear(params, name + ".value", d, d, rng);
  output_ = Linear(params, name + ".output", d, d, rng);
  ff_in_ = Linear(params, name + ".ff_in", d, config.ff_dim, rng);
  ff_out_ = Linear(params, name + ".ff_out", config.ff_dim, d, rng);
  if (config.layer_norm) {
    norm_attn_ = LayerNorm(params, name + ".norm_attn", d);
    norm_ff_ = LayerNorm(params, name + ".norm_ff", d);
  }
}

Var EncoderLayer::attend(std::span<const Var> bound, const Var& x, std::vector<Var>* weights) const {
  const Index head_dim = config_.d_model / config_.heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  const Var q = query_.forward(bound, x);
  const Var k = key_.forward(bound, x);
  const Var v = value_.forward(bound, x);
  std::vector<Var> heads;
  heads.reserve(config_.heads);
  for (int h = 0; h < config_.heads; ++h) {
    const Index at = h * head_dim;
    const Var qh = ad::slice(q, 1, at, head_dim);
    const Var kh = ad::slice(k, 1, at, head_dim);
    const Var vh = ad::slice(v, 1, at, head_dim);
    const Var w = ad::softmax(scale * ad::matmul(qh, ad::transpose(kh)), 1);
    if (weights) weights->push_back(w);
    heads.push_back(ad::matmul(w, vh));
  }
  const Var joined = heads.size() == 1 ? heads.front() : ad::concat(std::span<const Var>(heads), 1);
  return output_.forward(bound, joined);
}

Var EncoderLayer::mix_positionwise(std::span<const Var> bound, const Var& x) const {
  Var h = ad::relu(query_.forward(bound, x));
  h = ad::relu(key_.forward(bound, h));
  h = ad::relu(value_.forward(bound, h));
  return output_.forward(bound, h);
}

Var EncoderLayer::forward(std::span<const Var> bound, const Var& x) const {
  if (x.cols() != config_.d_model) {
    throw ShapeError("encoder layer: input " + shape_string(x.value()) + " needs " +
                     std::to_string(config_.d_model) + " columns");
  }
  const Var mixed = config_.attention ? attend(bound, x, nullptr) : mix_positionwise(bound, x);
  Var h = x + mixed;
  if (config_.layer_norm) h = norm_attn_.forward(bound, h);
  const Var ff = ff_out_.forward(bound, ad::relu(ff_in_.forward(bound, h)));
  Var out = h + ff;
  if (config_.layer_norm) out = norm_ff_.forward(bound, out);
  return out;
}

std::vector<Var> EncoderLayer::attention_weights(std::span<const Var> bound, const Var& x) const {
  std::vector<Var> weights;
  if (config_.attention) (void)attend(bound, x, &weights);
  return weights;
}

Tensord position_encoding(Index length, Index d) {
  if (length < 1) throw std::invalid_argument("position_encoding: length must be >= 1");
  if (d < 2 || d % 2 != 0) throw std::invalid_argument("position_encoding: dimension must be even, got " + std::to_string(d));
  Tensord pe(length, d);
  for (Index p = 0; p < length; ++p) {
    for (Index i = 0; i < d / 2; ++i) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(i) / static_cast<double>(d));
      const double angle = static_cast<double>(p) * freq;
      pe(p, 2 * i) = std::sin(angle);
      pe(p, 2 * i + 1) = std::cos(angle);
    }
  }
  return pe;
}

// ---------------------------------------------------------------------------

OptimizerKind parse_optimizer_kind(const std::string& name) {
  if (name == "sgd") return OptimizerKind::Sgd;
  if (name == "rmsprop") return OptimizerKind::RmsProp;
  if (name == "adam") return OptimizerKind::Adam;
  throw std::invalid_argument("unknown optimizer '" + name + "' (expected sgd, rmsprop or adam)");
}

std::string to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::Sgd: return "sgd";
    case OptimizerKind::RmsProp: return "rmsprop";
    case OptimizerKind::Adam: return "adam";
  }
  return "sgd";
}

Optimizer::Optimizer(OptimizerConfig config, const ParameterSet& params) : config_(config) {
  if (config_.kind != OptimizerKind::Sgd) second_ = params.zeros_like();
  if (config_.kind == OptimizerKind::Adam) first_ = params.zeros_like();
}

void Optimizer::step(ParameterSet& params, std::span<const Tensord> grads, UpdateDirection direction) {
  if (grads.size() != params.size()) {
    throw std::invalid_argument("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensord& p = params[i].value;
    if (grads[i].rows() != p.rows() || grads[i].cols() != p.cols()) {
      throw std::invalid_argument("optimizer: missing or misshapen gradient for '" + params[i].name + "'");
    }
  }
  ++steps_;
  const double sign = direction == UpdateDirection::Ascent ? 1.0 : -1.0;
  const double lr = config_.learning_rate;
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensord& p = params[i].value;
    const Tensord& g = grads[i];
    switch (config_.kind) {
      case OptimizerKind::Sgd:
        p += (sign * lr) * g;
        break;
      case OptimizerKind::RmsProp: {
        Tensord& v = second_[i];
        v = config_.rms_decay * v + (1.0 - config_.rms_decay) * g.cwiseProduct(g);
        p.array() += sign * lr * g.array() / (v.array().sqrt() + config_.rms_epsilon);
        break;
      }
      case OptimizerKind::Adam: {
        Tensord& m = first_[i];
        Tensord& v = second_[i];
        m = config_.beta1 * m + (1.0 - config_.beta1) * g;
        v = config_.beta2 * v + (1.0 - config_.beta2) * g.cwiseProduct(g);
        const double t = static_cast<double>(steps_);
        const double c1 = 1.0 - std::pow(config_.beta1, t);
        const double c2 = 1.0 - std::pow(config_.beta2, t);
        p.array() += sign * lr * (m.array() / c1) / ((v.array() / c2).sqrt() + config_.adam_epsilon);
        break;
      }
    }
  }
}

double global_norm(std::span<const Tensord> grads) {
  double sq = 0.0;
  for (const auto& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

double clip_global_norm(std::span<Tensord> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& g : grads) g *= scale;
  }
  return norm;
}

}  // namespace rgm
