#pragma once

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lot/dataset.hpp"
#include "lot/model_client.hpp"

namespace lot {

struct Trajectory;

/// Log-probabilities are floored at ln(1e-300) before use.
inline constexpr double kMinLogProb = -690.7755278982137;

/// Perplexity of a scored continuation: exp(-mean token logprob).
double state_distance(const ScoredContinuation& scored);
double state_distance(std::span<const double> token_logprobs);

/// Perplexity-distance vector of one state over the k choices, and its
/// unit-l1 normalization.
struct StateFeature {
  std::vector<double> raw;
  std::vector<double> normalized;
  int state_index = 0;

  int k() const { return static_cast<int>(raw.size()); }
};

/// Validates raw distances (finite, >= 1) and normalizes them.
StateFeature make_state_feature(std::vector<double> raw, int state_index);

/// Continuations are the choice text after a single space.
StateFeature state_feature(const std::string& prefix, const std::vector<std::string>& choices,
                           const Scorer& scorer, int state_index);

struct AnchorFeature {
  int choice_index = 0;
  std::vector<double> vector;
};

/// Landmark for choice j: zero at j, 1/k elsewhere.
AnchorFeature anchor_feature(int j, int k);

/// Lowest index among the minima.
int argmin_index(std::span<const double> v);

/// 1 when the nearest choice of `state` matches that of `final_state`.
int consistency(const StateFeature& state, const StateFeature& final_state);

/// Entropy (nats) of a normalized feature; 0 ln 0 is taken as 0.
double uncertainty(std::span<const double> normalized);
double uncertainty(const StateFeature& f);

/// Length-normalized perplexity of a thought given the previous state.
double thought_perplexity(const ScoredContinuation& scored_thought);

struct FeatureTrajectory {
  std::string question_id;
  int slot = 0;
  int k = 0;
  std::vector<StateFeature> features;  // s_1..s_n
  std::vector<int> consistency;
  std::vector<double> uncertainty;
  std::vector<double> thought_perplexities;
  std::optional<StateFeature> initial_state;  // s_0, diagnostics only
  int predicted_index = 0;
  bool answer_fallback = false;
  bool is_correct = false;

  int n() const { return static_cast<int>(features.size()); }
  void validate() const;
};

/// Derive consistency and uncertainty from the state features.
FeatureTrajectory assemble_feature_trajectory(std::string question_id, int slot,
                                              std::vector<StateFeature> features,
                                              std::vector<double> thought_perplexities,
                                              int predicted_index);

struct FeaturizeOptions {
  bool include_initial_state = false;
};

/// Score every state against every choice plus every thought against its
/// preceding state. An undetermined prediction is resolved by the final
/// state's argmin and flagged.
FeatureTrajectory featurize_trajectory(const Trajectory& traj, const Question& q,
                                       const Scorer& scorer, const FeaturizeOptions& opts = {});

/// Column layout entry: either (trajectory, state) or an anchor.
struct ColumnRef {
  int trajectory = -1;
  int state = -1;  // 1-based
  int anchor = -1;

  bool is_anchor() const { return anchor >= 0; }
  bool operator==(const ColumnRef&) const = default;
};

/// k x (sum n_t + k) matrix, stored column-wise.
struct FeatureMatrix {
  int k = 0;
  std::vector<std::vector<double>> columns;
  std::vector<ColumnRef> layout;

  std::size_t cols() const { return columns.size(); }
};

FeatureMatrix build_feature_matrix(std::span<const FeatureTrajectory> ftrajs, int k);

nlohmann::json to_json(const FeatureTrajectory& f);
FeatureTrajectory feature_trajectory_from_json(const nlohmann::json& j);

void write_feature_trajectories(const std::filesystem::path& path,
                                const std::vector<FeatureTrajectory>& fs);
std::vector<FeatureTrajectory> read_feature_trajectories(const std::filesystem::path& path);

}  // namespace lot
