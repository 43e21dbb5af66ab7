#pragma once

#include <cstdint>
#include <vector>

#include "lot/features.hpp"

namespace lot {

/// Feature-trajectory generator with the early-lock-in pattern: incorrect
/// trajectories settle on a wrong choice within the first `early_fraction`
/// of their states, correct ones keep exploring until the last
/// `late_fraction`.
struct SyntheticConfig {
  int questions = 200;
  int trajectories_per_question = 20;
  int k = 4;
  int min_states = 8;
  int max_states = 12;
  double min_p_correct = 0.2;
  double max_p_correct = 0.7;
  double early_fraction = 0.4;
  double late_fraction = 0.2;
  double noise = 0.05;
  std::uint64_t seed = 1;
  std::string id_prefix = "syn";
};

/// Slots 0..T-1 per question; question ids are zero-padded so id order is
/// generation order.
std::vector<FeatureTrajectory> synthetic_trajectories(const SyntheticConfig& cfg);

}  // namespace lot
