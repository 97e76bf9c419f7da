#include "gradcheck_suite.hpp"

#include <rgm/nn.hpp>

#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <numeric>

using namespace rgm;
using testing_support::random_tensor;

namespace {

EncoderConfig small_encoder(bool attention = true) {
  EncoderConfig c;
  c.d_model = 8;
  c.heads = 2;
  c.ff_dim = 12;
  c.attention = attention;
  return c;
}

Tensord run(const EncoderLayer& layer, const ParameterSet& p, const Tensord& x) {
  Tape tape;
  const std::vector<Var> b = p.bind_constant(tape);
  return layer.forward(b, tape.constant(x)).value();
}

}  // namespace

TEST_CASE("mlp with zero weights outputs zeros") {
  Rng rng(1, Stream::Test);
  ParameterSet p;
  const Mlp mlp(p, "m", {2, 5, 5, 3}, rng);
  for (auto& q : p) q.value.setZero();
  const Tensord y = mlp.evaluate(p, random_tensor(4, 2, rng));
  CHECK(y == Tensord::Zero(4, 3));
}

TEST_CASE("single identity layer passes its input through") {
  Rng rng(2, Stream::Test);
  ParameterSet p;
  const Mlp mlp(p, "m", {3, 3}, rng);
  p[0].value = Tensord::Identity(3, 3);
  p[1].value.setZero();
  const Tensord x = random_tensor(5, 3, rng);
  CHECK(mlp.evaluate(p, x) == x);
  Tape tape;
  CHECK(mlp.forward(p.bind(tape), tape.constant(x)).value() == x);
}

TEST_CASE("mlp forward rejects a wrong input width") {
  Rng rng(3, Stream::Test);
  ParameterSet p;
  const Mlp mlp(p, "m", {2, 4, 1}, rng);
  Tape tape;
  CHECK_THROWS_AS((void)mlp.forward(p.bind(tape), tape.constant(Tensord::Ones(3, 3))), ShapeError);
}

TEST_CASE("random 2-3-1 mlp passes finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, Stream::Test);
    ParameterSet p;
    const Mlp mlp(p, "m", {2, 3, 1}, rng);
    const Tensord x = random_tensor(1, 2, rng);
    ad::MultiObjective<double> f = [&](Tape& tape, std::span<const Var> v) {
      return ad::sum(mlp.forward(v, tape.constant(x)));
    };
    CHECK(ad::finite_diff_check<double>(f, p.values(), 1e-5) < 1e-4);
  }
}

TEST_CASE("single-position attention weight is exactly one") {
  Rng rng(4, Stream::Test);
  ParameterSet p;
  const EncoderLayer layer(p, "enc", small_encoder(), rng);
  Tape tape;
  const auto w = layer.attention_weights(p.bind_constant(tape), tape.constant(random_tensor(1, 8, rng)));
  REQUIRE(w.size() == 2);
  for (const Var& h : w) CHECK(h.value() == Tensord::Ones(1, 1));
}

TEST_CASE("identical input rows give identical output rows") {
  Rng rng(5, Stream::Test);
  ParameterSet p;
  const EncoderLayer layer(p, "enc", small_encoder(), rng);
  const Tensord row = random_tensor(1, 8, rng);
  const Tensord y = run(layer, p, row.replicate(5, 1));
  // equal up to summation order inside vectorized reductions
  for (Index t = 1; t < 5; ++t) CHECK((y.row(t) - y.row(0)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("attention layer on a 4x8 input with 2 heads passes finite differences") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, Stream::Test);
    ParameterSet p;
    const EncoderLayer layer(p, "enc", small_encoder(), rng);
    std::vector<Tensord> xs = p.values();
    xs.push_back(random_tensor(4, 8, rng));
    ad::MultiObjective<double> f = [&](Tape& tape, std::span<const Var> v) {
      (void)tape;
      return ad::sum(ad::exp(layer.forward(v.first(p.size()), v[p.size()])));
    };
    CHECK(ad::finite_diff_check<double>(f, xs, 1e-5) < 1e-4);
  }
}

TEST_CASE("attention rows are distributions") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, Stream::Test);
    ParameterSet p;
    const EncoderLayer layer(p, "enc", small_encoder(), rng);
    Tape tape;
    const auto w = layer.attention_weights(p.bind_constant(tape), tape.constant(random_tensor(6, 8, rng, -3, 3)));
    for (const Var& h : w) {
      CHECK(h.value().minCoeff() >= 0.0);
      for (Index i = 0; i < h.rows(); ++i) CHECK(std::abs(h.value().row(i).sum() - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("encoder is permutation equivariant without positions, not with them") {
  Rng rng(6, Stream::Test);
  ParameterSet p;
  const EncoderLayer layer(p, "enc", small_encoder(), rng);
  const Tensord x = random_tensor(5, 8, rng);
  const std::vector<Index> perm{3, 0, 4, 1, 2};
  Tensord xp(5, 8);
  for (Index i = 0; i < 5; ++i) xp.row(i) = x.row(perm[static_cast<std::size_t>(i)]);
  const Tensord y = run(layer, p, x);
  const Tensord yp = run(layer, p, xp);
  double diff = 0.0;
  for (Index i = 0; i < 5; ++i) diff = std::max(diff, (yp.row(i) - y.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff());
  CHECK(diff < 1e-12);

  const Tensord pe = position_encoding(5, 8);
  const Tensord z = run(layer, p, x + pe);
  const Tensord zp = run(layer, p, xp + pe);
  double broken = 0.0;
  for (Index i = 0; i < 5; ++i) broken = std::max(broken, (zp.row(i) - z.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff());
  CHECK(broken > 1e-6);
}

TEST_CASE("encoder rejects head counts that do not divide the model width") {
  Rng rng(7, Stream::Test);
  ParameterSet p;
  EncoderConfig c = small_encoder();
  c.heads = 3;
  CHECK_THROWS_AS(EncoderLayer(p, "enc", c, rng), std::invalid_argument);
}

TEST_CASE("encoder rejects a mis-shaped input") {
  Rng rng(8, Stream::Test);
  ParameterSet p;
  const EncoderLayer layer(p, "enc", small_encoder(), rng);
  CHECK_THROWS_AS(run(layer, p, Tensord::Ones(3, 6)), ShapeError);
}

TEST_CASE("position-wise replacement keeps the parameter count and shapes") {
  Rng r1(9, Stream::Test);
  Rng r2(9, Stream::Test);
  ParameterSet with;
  ParameterSet without;
  const EncoderLayer a(with, "enc", small_encoder(true), r1);
  const EncoderLayer b(without, "enc", small_encoder(false), r2);
  CHECK(with.scalar_count() == without.scalar_count());
  CHECK(with.same_layout(without));
  Tape tape;
  CHECK(b.attention_weights(without.bind_constant(tape), tape.constant(Tensord::Ones(2, 8))).empty());
  (void)a;
}

TEST_CASE("layer norm can be switched off") {
  Rng r1(10, Stream::Test);
  ParameterSet p;
  EncoderConfig c = small_encoder();
  c.layer_norm = false;
  const EncoderLayer layer(p, "enc", c, r1);
  for (const auto& q : p) CHECK(q.name.find("norm") == std::string::npos);
  const Tensord y = run(layer, p, random_tensor(3, 8, r1));
  CHECK(y.allFinite());
}

TEST_CASE("position encoding of position zero alternates 0 and 1") {
  const Tensord pe = position_encoding(3, 8);
  for (Index i = 0; i < 8; ++i) CHECK(pe(0, i) == (i % 2 == 0 ? 0.0 : 1.0));
}

TEST_CASE("position encoding entries lie in [-1, 1]") {
  const Tensord pe = position_encoding(500, 64);
  CHECK(pe.maxCoeff() <= 1.0);
  CHECK(pe.minCoeff() >= -1.0);
}

TEST_CASE("position encoding rows are distinct up to T = 10000") {
  for (Index d : {4, 8, 64}) {
    const Tensord pe = position_encoding(10000, d);
    std::vector<Index> order(10000);
    std::iota(order.begin(), order.end(), 0);
    auto row_less = [&](Index a, Index b) {
      return std::lexicographical_compare(pe.row(a).data(), pe.row(a).data() + d, pe.row(b).data(), pe.row(b).data() + d);
    };
    std::sort(order.begin(), order.end(), row_less);
    bool distinct = true;
    for (std::size_t i = 1; i < order.size(); ++i) distinct = distinct && row_less(order[i - 1], order[i]);
    CHECK(distinct);
  }
}

TEST_CASE("position encoding rejects odd widths and empty lengths") {
  CHECK_THROWS_AS(position_encoding(4, 5), std::invalid_argument);
  CHECK_THROWS_AS(position_encoding(0, 4), std::invalid_argument);
}

TEST_CASE("zero gradients leave parameters unchanged for every optimizer") {
  for (OptimizerKind kind : {OptimizerKind::Sgd, OptimizerKind::RmsProp, OptimizerKind::Adam}) {
    Rng rng(11, Stream::Test);
    ParameterSet p;
    const Mlp mlp(p, "m", {2, 3, 1}, rng);
    const std::vector<Tensord> before = p.values();
    Optimizer opt(OptimizerConfig{kind, 0.1}, p);
    for (int i = 0; i < 3; ++i) {
      opt.step(p, p.zeros_like(), UpdateDirection::Ascent);
      opt.step(p, p.zeros_like(), UpdateDirection::Descent);
    }
    for (std::size_t i = 0; i < p.size(); ++i) CHECK(p[i].value == before[i]);
  }
}

TEST_CASE("sgd ascent step") {
  ParameterSet p;
  p.add("p", Tensord::Zero(1, 2));
  Optimizer opt(OptimizerConfig{OptimizerKind::Sgd, 0.1}, p);
  Tensord g(1, 2);
  g << 1.0, -2.0;
  opt.step(p, std::span<const Tensord>(&g, 1), UpdateDirection::Ascent);
  CHECK(p[0].value(0, 0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(p[0].value(0, 1) == doctest::Approx(-0.2).epsilon(1e-15));
  opt.step(p, std::span<const Tensord>(&g, 1), UpdateDirection::Descent);
  CHECK(p[0].value.cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("adam with a constant gradient matches the textbook recurrences and its step tends to alpha") {
  const double alpha = 1e-3;
  const double b1 = 0.9;
  const double b2 = 0.999;
  const double eps = 1e-8;
  const double g = 0.37;
  ParameterSet p;
  p.add("x", Tensord::Zero(1, 1));
  Optimizer opt(OptimizerConfig{OptimizerKind::Adam, alpha}, p);
  double x = 0.0;
  double m = 0.0;
  double v = 0.0;
  double last_step = 0.0;
  const Tensord grad = Tensord::Constant(1, 1, g);
  for (int t = 1; t <= 1000; ++t) {
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double step = alpha * (m / (1 - std::pow(b1, t))) / (std::sqrt(v / (1 - std::pow(b2, t))) + eps);
    x += step;
    const double before = p[0].value(0, 0);
    opt.step(p, std::span<const Tensord>(&grad, 1), UpdateDirection::Ascent);
    last_step = p[0].value(0, 0) - before;
  }
  CHECK(p[0].value(0, 0) == doctest::Approx(x).epsilon(1e-12));
  CHECK(last_step == doctest::Approx(alpha).epsilon(1e-6));
}

TEST_CASE("rmsprop follows its recurrence") {
  ParameterSet p;
  p.add("x", Tensord::Zero(1, 1));
  OptimizerConfig c{OptimizerKind::RmsProp, 0.01};
  Optimizer opt(c, p);
  double x = 0.0;
  double v = 0.0;
  for (double g : {0.5, -1.0, 2.0}) {
    v = c.rms_decay * v + (1 - c.rms_decay) * g * g;
    x -= c.learning_rate * g / (std::sqrt(v) + c.rms_epsilon);
    const Tensord grad = Tensord::Constant(1, 1, g);
    opt.step(p, std::span<const Tensord>(&grad, 1), UpdateDirection::Descent);
  }
  CHECK(p[0].value(0, 0) == doctest::Approx(x).epsilon(1e-14));
}

TEST_CASE("optimizer rejects missing or mis-shaped gradients") {
  ParameterSet p;
  p.add("a", Tensord::Zero(2, 2));
  p.add("b", Tensord::Zero(1, 2));
  Optimizer opt(OptimizerConfig{OptimizerKind::Sgd, 0.1}, p);
  std::vector<Tensord> one{Tensord::Zero(2, 2)};
  CHECK_THROWS(opt.step(p, one, UpdateDirection::Ascent));
  std::vector<Tensord> bad{Tensord::Zero(2, 2), Tensord::Zero(2, 1)};
  CHECK_THROWS(opt.step(p, bad, UpdateDirection::Ascent));
}

TEST_CASE("optimizer steps are deterministic") {
  auto run_once = [] {
    Rng rng(12, Stream::Test);
    ParameterSet p;
    const Mlp mlp(p, "m", {2, 4, 2}, rng);
    Optimizer opt(OptimizerConfig{OptimizerKind::Adam, 0.01}, p);
    for (int i = 0; i < 5; ++i) {
      std::vector<Tensord> g;
      for (const auto& q : p) g.push_back(random_tensor(q.value.rows(), q.value.cols(), rng));
      opt.step(p, g, UpdateDirection::Descent);
    }
    return p.values();
  };
  const auto a = run_once();
  const auto b = run_once();
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(std::memcmp(a[i].data(), b[i].data(), sizeof(double) * static_cast<std::size_t>(a[i].size())) == 0);
  }
}

TEST_CASE("global norm clipping rescales only above the threshold") {
  std::vector<Tensord> g{Tensord::Constant(1, 1, 3.0), Tensord::Constant(1, 1, 4.0)};
  CHECK(clip_global_norm(g, 10.0) == 5.0);
  CHECK(g[0](0, 0) == 3.0);
  CHECK(clip_global_norm(g, 1.0) == 5.0);
  CHECK(global_norm(g) == doctest::Approx(1.0).epsilon(1e-15));
}

TEST_CASE("parameter names are unique and lookups work") {
  ParameterSet p;
  p.add("w", Tensord::Zero(1, 1));
  CHECK_THROWS_AS(p.add("w", Tensord::Zero(1, 1)), std::invalid_argument);
  CHECK(p.find("w").has_value());
  CHECK_FALSE(p.find("missing").has_value());
}

TEST_CASE("composite layers pass finite differences on 100 seeds") {
  for (const auto& c : gradcheck_suite::composite_cases()) {
    if (c.name == "rgm_pipeline") continue;  // covered by the rgm tests
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) worst = std::max(worst, c.worst_error(seed));
    INFO(c.name << " worst " << worst);
    CHECK(worst < 1e-4);
  }
}
