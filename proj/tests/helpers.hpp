#pragma once

#include <rgm/env.hpp>
#include <rgm/rng.hpp>
#include <rgm/tensor.hpp>

#include <cstdint>
#include <vector>

namespace testing_support {

inline rgm::Tensord random_tensor(rgm::Index rows, rgm::Index cols, rgm::Rng& rng, double lo = -1.0, double hi = 1.0) {
  rgm::Tensord t(rows, cols);
  for (rgm::Index i = 0; i < t.size(); ++i) t.data()[i] = rng.uniform(lo, hi);
  return t;
}

/// Synthetic trajectory with random features in [0,1], uniform actions and
/// rewards in [reward_lo, reward_hi]. States chain by construction.
inline rgm::Trajectory random_trajectory(rgm::Index length, rgm::Index state_dim, int num_actions, rgm::Rng& rng,
                                         double reward_lo = -1.0, double reward_hi = 1.0) {
  rgm::Trajectory tau;
  tau.features = random_tensor(length, state_dim, rng, 0.0, 1.0);
  for (rgm::Index t = 0; t < length; ++t) {
    rgm::Transition s;
    s.state = {{static_cast<int>(t), 0}, static_cast<int>(t)};
    s.next_state = {{static_cast<int>(t) + 1, 0}, static_cast<int>(t) + 1};
    s.action = static_cast<int>(rng.uniform() * num_actions) % num_actions;
    s.reward = rng.uniform(reward_lo, reward_hi);
    s.done = t + 1 == length;
    tau.steps.push_back(s);
    tau.log_probs.push_back(0.0);
  }
  tau.terminal = true;
  return tau;
}

}  // namespace testing_support
