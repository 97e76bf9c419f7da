#include "gradcheck_suite.hpp"

#include <doctest.h>

#include <cstring>

using namespace rgm;
using testing_support::random_tensor;

namespace {

Tensord mat(Index r, Index c, std::initializer_list<double> v) {
  Tensord m(r, c);
  std::copy(v.begin(), v.end(), m.data());
  return m;
}

bool bitwise_equal(const Tensord& a, const Tensord& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() &&
         std::memcmp(a.data(), b.data(), sizeof(double) * static_cast<std::size_t>(a.size())) == 0;
}

}  // namespace

TEST_CASE("softmax of equal logits is uniform") {
  Tape tape;
  const Var y = ad::softmax(tape.constant(Tensord::Zero(3, 1)), 0);
  for (Index i = 0; i < 3; ++i) CHECK(y.value()(i, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("matmul by identity returns the operand") {
  Tape tape;
  const Tensord m = mat(2, 2, {1.5, -2.0, 3.25, 4.0});
  const Var y = ad::matmul(tape.constant(Tensord::Identity(2, 2)), tape.constant(m));
  CHECK(y.value() == m);
}

TEST_CASE("relu clamps negatives and keeps zero") {
  Tape tape;
  const Var y = ad::relu(tape.constant(mat(1, 3, {-1.5, 0.0, 2.0})));
  CHECK(y.value() == mat(1, 3, {0.0, 0.0, 2.0}));
}

TEST_CASE("backward of sum(x*x) is 2x") {
  Tape tape;
  const Var x = tape.variable(mat(1, 2, {1.0, 2.0}));
  const GradientMap g = ad::backward(tape, ad::sum(x * x), {x});
  CHECK(g.at(x) == mat(1, 2, {2.0, 4.0}));
}

TEST_CASE("objective independent of x gives zero gradient") {
  Tape tape;
  const Var x = tape.variable(mat(1, 2, {1.0, 2.0}));
  const Var c = ad::sum(tape.constant(mat(1, 2, {3.0, 4.0})));
  const GradientMap g = ad::backward(tape, c, {x});
  CHECK(g.at(x) == Tensord::Zero(1, 2));
}

TEST_CASE("backward rejects non-scalar objectives and non-leaf targets") {
  Tape tape;
  const Var x = tape.variable(Tensord::Ones(2, 2));
  const Var y = x * x;
  CHECK_THROWS_AS(ad::backward(tape, y, {x}), ShapeError);
  CHECK_THROWS_AS(ad::backward(tape, ad::sum(y), {y}), std::invalid_argument);
  const Var c = tape.constant(Tensord::Ones(1, 1));
  CHECK_THROWS_AS(ad::backward(tape, ad::sum(y), {c}), std::invalid_argument);
}

TEST_CASE("shape errors name the primitive and the shapes") {
  Tape tape;
  const Var a = tape.variable(Tensord::Ones(2, 3));
  const Var b = tape.variable(Tensord::Ones(2, 3));
  try {
    (void)ad::matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS((void)(a + tape.variable(Tensord::Ones(3, 2))), ShapeError);
  CHECK_THROWS_AS((void)ad::softmax(a, 2), ShapeError);
}

TEST_CASE("log and sqrt reject nonpositive inputs") {
  Tape tape;
  CHECK_THROWS_AS((void)ad::log(tape.constant(mat(1, 2, {1.0, 0.0}))), DomainError);
  CHECK_THROWS_AS((void)ad::sqrt(tape.constant(mat(1, 2, {-1.0, 4.0}))), DomainError);
}

TEST_CASE("operands from different tapes are rejected") {
  Tape t1;
  Tape t2;
  CHECK_THROWS_AS((void)(t1.constant(Tensord::Ones(1, 1)) + t2.constant(Tensord::Ones(1, 1))), ShapeError);
}

TEST_CASE("finite_diff_check of a linear function is exact") {
  Rng rng(7, Stream::Test);
  ad::Objective<double> f = [](Tape&, const Var& x) { return ad::sum(x); };
  CHECK(ad::finite_diff_check<double>(f, random_tensor(3, 4, rng), 1e-5) < 1e-10);
}

TEST_CASE("finite_diff_check of sum(relu(x)) away from zero") {
  Rng rng(8, Stream::Test);
  Tensord x = random_tensor(4, 4, rng);
  for (Index i = 0; i < x.size(); ++i) {
    if (std::abs(x.data()[i]) < 0.05) x.data()[i] = 0.3;
  }
  ad::Objective<double> f = [](Tape&, const Var& v) { return ad::sum(ad::relu(v)); };
  CHECK(ad::finite_diff_check<double>(f, x, 1e-5) < 1e-6);
}

TEST_CASE("softmax cross-path composite on 3x3 inputs") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, Stream::Test);
    const Tensord w = random_tensor(3, 3, rng);
    ad::Objective<double> f = [&](Tape& tape, const Var& x) {
      const Var p = ad::softmax(x, 1);
      // x reaches the output both through the softmax and directly
      return ad::sum(ad::log(p) * x + ad::matmul(p, tape.constant(w)));
    };
    CHECK(ad::finite_diff_check<double>(f, random_tensor(3, 3, rng, -2.0, 2.0), 1e-5) < 1e-4);
  }
}

TEST_CASE("every primitive passes finite differences on 100 seeds") {
  for (const auto& c : gradcheck_suite::primitive_cases()) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) worst = std::max(worst, c.worst_error(seed));
    INFO(c.name << " worst " << worst);
    CHECK(worst < 1e-4);
  }
}

TEST_CASE("vector_jacobian_product with zero cotangent is zero") {
  Tape tape;
  const Var x = tape.variable(Tensord::Constant(2, 3, 0.7));
  const Var y = ad::exp(x) * x;
  const GradientMap g = ad::vector_jacobian_product(tape, y, Tensord(Tensord::Zero(2, 3)), std::span<const Var>(&x, 1));
  CHECK(g.at(x) == Tensord::Zero(2, 3));
}

TEST_CASE("vector_jacobian_product of the identity map returns the cotangent") {
  Tape tape;
  Rng rng(3, Stream::Test);
  const Var x = tape.variable(random_tensor(2, 3, rng));
  const Tensord v = random_tensor(2, 3, rng);
  const GradientMap g = ad::vector_jacobian_product(tape, x, v, std::span<const Var>(&x, 1));
  CHECK(g.at(x) == v);
}

TEST_CASE("vector_jacobian_product through W x is the outer product v x^T") {
  Rng rng(4, Stream::Test);
  Tape tape;
  const Var w = tape.variable(random_tensor(3, 4, rng));
  const Tensord x = random_tensor(4, 1, rng);
  const Tensord v = random_tensor(3, 1, rng);
  const Var y = ad::matmul(w, tape.constant(x));
  const GradientMap g = ad::vector_jacobian_product(tape, y, v, std::span<const Var>(&w, 1));
  CHECK(g.at(w) == Tensord(v * x.transpose()));
}

TEST_CASE("vector_jacobian_product rejects a mis-shaped cotangent") {
  Tape tape;
  const Var x = tape.variable(Tensord::Ones(2, 2));
  CHECK_THROWS_AS(ad::vector_jacobian_product(tape, x, Tensord(Tensord::Ones(1, 2)), std::span<const Var>(&x, 1)), ShapeError);
}

TEST_CASE("vector_jacobian_product equals backward of the weighted sum bitwise") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed, Stream::Test);
    const Tensord x0 = random_tensor(3, 4, rng);
    const Tensord v = random_tensor(3, 2, rng);
    const Tensord w = random_tensor(4, 2, rng);
    Tape tape;
    const Var x = tape.variable(x0);
    const Var y = ad::softmax(ad::matmul(ad::relu(x), tape.constant(w)), 1);
    const Tensord a = ad::vector_jacobian_product(tape, y, v, std::span<const Var>(&x, 1)).at(x);
    const Tensord b = ad::backward(tape, ad::sum(y * tape.constant(v)), {x}).at(x);
    CHECK(bitwise_equal(a, b));
  }
}

TEST_CASE("jacobian_vector_product is the transpose of the vector_jacobian_product") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed, Stream::Test);
    Tape tape;
    const Var a = tape.variable(random_tensor(3, 4, rng));
    const Var b = tape.variable(random_tensor(4, 2, rng, 0.5, 1.5));
    const Var h = ad::log_softmax(ad::matmul(ad::relu(a), b), 1);
    const Var y = ad::suffix_sum(ad::sqrt(ad::exp(h) + ad::broadcast(ad::mean(b, 0), 3, 2))) / ad::exp(h);
    const Tensord da = random_tensor(3, 4, rng);
    const Tensord db = random_tensor(4, 2, rng);
    const Tensord w = random_tensor(3, 2, rng);
    const std::vector<Var> leaves{a, b};
    const std::vector<Tensord> tangents{da, db};
    const Tensord jv = ad::jacobian_vector_product(tape, std::span<const Var>(leaves), std::span<const Tensord>(tangents),
                                                   std::span<const Var>(&y, 1))
                           .front();
    const GradientMap vj = ad::vector_jacobian_product(tape, y, w, std::span<const Var>(leaves));
    const double lhs = jv.cwiseProduct(w).sum();
    const double rhs = vj.at(a).cwiseProduct(da).sum() + vj.at(b).cwiseProduct(db).sum();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
  }
}

TEST_CASE("jacobian_vector_product matches a central difference along the tangent") {
  Rng rng(11, Stream::Test);
  const Tensord x0 = random_tensor(2, 5, rng);
  const Tensord d = random_tensor(2, 5, rng);
  auto f = [](Tape& tape, const Var& x) {
    return ad::concat({ad::softmax(x, 0), ad::maximum(x, tape.constant(Tensord::Zero(2, 5))) * x}, 1);
  };
  Tape tape;
  const Var x = tape.variable(x0);
  const Var y = f(tape, x);
  const Tensord jv = ad::jacobian_vector_product(tape, std::span<const Var>(&x, 1), std::span<const Tensord>(&d, 1),
                                                 std::span<const Var>(&y, 1))
                         .front();
  const double h = 1e-6;
  Tape up;
  Tape down;
  const Tensord fd = (f(up, up.variable(x0 + h * d)).value() - f(down, down.variable(x0 - h * d)).value()) / (2 * h);
  CHECK((jv - fd).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("replaying the tape reproduces every node bitwise") {
  Rng rng(5, Stream::Test);
  Tape tape;
  const Var x = tape.variable(random_tensor(4, 3, rng));
  const Var w = tape.variable(random_tensor(3, 3, rng));
  (void)ad::sum(ad::log_softmax(ad::matmul(x, w), 1) * ad::suffix_sum(x));
  CHECK(tape.replay_matches());
}

TEST_CASE("repeated use of a value accumulates exactly") {
  Rng rng(6, Stream::Test);
  const Tensord x0 = random_tensor(2, 3, rng);
  auto g_of = [&](bool twice) {
    Tape tape;
    const Var x = tape.variable(x0);
    auto g = [&]() { return ad::sum(ad::exp(x) * x); };
    const Var obj = twice ? g() + g() : g();
    return ad::backward(tape, obj, {x}).at(x);
  };
  CHECK(bitwise_equal(g_of(true), Tensord(2.0 * g_of(false))));
}

TEST_CASE("requested ids appear once each with their leaf shape") {
  Tape tape;
  const Var a = tape.variable(Tensord::Ones(2, 3));
  const Var b = tape.variable(Tensord::Ones(3, 1));
  const GradientMap g = ad::backward(tape, ad::sum(ad::matmul(a, b)), {a, b, a});
  CHECK(g.size() == 2);
  CHECK(g.at(a).rows() == 2);
  CHECK(g.at(a).cols() == 3);
  CHECK(g.at(b).rows() == 3);
}
