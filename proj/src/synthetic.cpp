#include "lot/synthetic.hpp"

#include <cmath>
#include <cstdio>

#include "lot/error.hpp"
#include "lot/random.hpp"

namespace lot {

namespace {

std::vector<double> exploring_state(Rng& rng, int k) {
  std::vector<double> raw(static_cast<std::size_t>(k));
  for (auto& d : raw) d = 1.0 + 2.0 * std::exp(0.3 * rng.normal());
  return raw;
}

std::vector<double> settled_state(Rng& rng, int k, int target, double noise) {
  std::vector<double> raw(static_cast<std::size_t>(k));
  for (int j = 0; j < k; ++j) {
    raw[static_cast<std::size_t>(j)] =
        j == target ? 1.0 + 0.2 * std::exp(noise * rng.normal()) : 3.5 * std::exp(noise * rng.normal());
  }
  return raw;
}

}  // namespace

std::vector<FeatureTrajectory> synthetic_trajectories(const SyntheticConfig& cfg) {
  if (cfg.k < 2 || cfg.questions < 1 || cfg.trajectories_per_question < 1 || cfg.min_states < 2 ||
      cfg.max_states < cfg.min_states) {
    throw ArgumentError("invalid synthetic configuration");
  }
  Rng rng(cfg.seed);
  std::vector<FeatureTrajectory> out;
  out.reserve(static_cast<std::size_t>(cfg.questions * cfg.trajectories_per_question));
  for (int q = 0; q < cfg.questions; ++q) {
    char id[64];
    std::snprintf(id, sizeof(id), "%s-%05d", cfg.id_prefix.c_str(), q);
    const double p_correct = rng.uniform(cfg.min_p_correct, cfg.max_p_correct);
    for (int t = 0; t < cfg.trajectories_per_question; ++t) {
      const int n = cfg.min_states + static_cast<int>(rng.index(static_cast<std::uint64_t>(cfg.max_states - cfg.min_states + 1)));
      const bool correct = rng.uniform() < p_correct;
      int target = 0;
      int settle = n;
      if (correct) {
        // First state whose progress fraction lies in the final window.
        settle = std::min(n, static_cast<int>(std::floor((1.0 - cfg.late_fraction) * n)) + 1 +
                                 static_cast<int>(rng.index(2)));
      } else {
        target = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(cfg.k - 1)));
        const int last_early = std::max(1, static_cast<int>(std::floor(cfg.early_fraction * n)));
        settle = 1 + static_cast<int>(rng.index(static_cast<std::uint64_t>(last_early)));
      }
      std::vector<StateFeature> states;
      std::vector<double> perplexities;
      for (int i = 1; i <= n; ++i) {
        auto raw = i >= settle ? settled_state(rng, cfg.k, target, cfg.noise) : exploring_state(rng, cfg.k);
        states.push_back(make_state_feature(std::move(raw), i));
        perplexities.push_back(1.0 + 4.0 * std::exp(0.3 * rng.normal()));
      }
      out.push_back(assemble_feature_trajectory(id, t, std::move(states), std::move(perplexities), target));
    }
  }
  return out;
}

}  // namespace lot
