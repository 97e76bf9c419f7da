#pragma once

#include <rgm/autodiff.hpp>

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace rgm::ad {

template <typename Scalar>
using MultiObjective = std::function<Var<Scalar>(Tape<Scalar>&, std::span<const Var<Scalar>>)>;

template <typename Scalar>
using Objective = std::function<Var<Scalar>(Tape<Scalar>&, const Var<Scalar>&)>;

/// Largest |g_ad - g_fd| / max(1, |g_fd|) over every component of every input,
/// with g_fd from central differences of the given step.
template <typename Scalar>
Scalar finite_diff_check(const MultiObjective<Scalar>& f, const std::vector<Tensor<Scalar>>& xs, Scalar step) {
  if (!(step > Scalar(0))) throw std::invalid_argument("finite_diff_check: step must be positive");

  std::vector<Tensor<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    vars.reserve(xs.size());
    for (const auto& x : xs) vars.push_back(tape.variable(x));
    const Var<Scalar> y = f(tape, vars);
    analytic = backward(tape, y, std::span<const Var<Scalar>>(vars)).release();
  }

  auto eval = [&](const std::vector<Tensor<Scalar>>& at) {
    Tape<Scalar> tape;
    std::vector<Var<Scalar>> vars;
    vars.reserve(at.size());
    for (const auto& x : at) vars.push_back(tape.variable(x));
    return f(tape, vars).item();
  };

  Scalar worst = 0;
  std::vector<Tensor<Scalar>> probe = xs;
  for (std::size_t k = 0; k < xs.size(); ++k) {
    for (Index i = 0; i < xs[k].size(); ++i) {
      const Scalar x0 = xs[k].data()[i];
      probe[k].data()[i] = x0 + step;
      const Scalar up = eval(probe);
      probe[k].data()[i] = x0 - step;
      const Scalar down = eval(probe);
      probe[k].data()[i] = x0;
      const Scalar fd = (up - down) / (Scalar(2) * step);
      const Scalar err = std::abs(analytic[k].data()[i] - fd) / std::max(Scalar(1), std::abs(fd));
      worst = std::max(worst, err);
    }
  }
  return worst;
}

template <typename Scalar>
Scalar finite_diff_check(const Objective<Scalar>& f, const Tensor<Scalar>& x, Scalar step) {
  MultiObjective<Scalar> wrapped = [&](Tape<Scalar>& tape, std::span<const Var<Scalar>> vars) {
    return f(tape, vars[0]);
  };
  return finite_diff_check<Scalar>(wrapped, std::vector<Tensor<Scalar>>{x}, step);
}

}  // namespace rgm::ad
