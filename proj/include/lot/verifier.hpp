#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lot/features.hpp"

namespace lot {

struct SummaryScheme {
  int bins = 10;
  int k_max = 5;

  std::size_t length() const { return static_cast<std::size_t>((k_max + 1) * bins); }
  bool operator==(const SummaryScheme&) const = default;
};

/// Fixed-length view of a trajectory: per progress bin, k_max reordered
/// feature slots followed by the mean consistency.
struct TrajectorySummary {
  SummaryScheme scheme;
  std::vector<double> values;
};

/// Slot order within a state: distance to the trajectory's own prediction
/// first, the rest ascending; padded with 1/k_max or truncated to k_max.
std::vector<double> reorder_feature(std::span<const double> normalized, int predicted_index, int k_max);

TrajectorySummary summarize_trajectory(const FeatureTrajectory& ftraj, const SummaryScheme& scheme = {});

struct ForestParams {
  int trees = 100;
  int max_depth = 8;
  int min_leaf = 2;
  std::uint64_t seed = 7;
  int workers = 0;  // 0: hardware concurrency; output does not depend on it

  void validate() const;
};

struct TreeNode {
  int feature = -1;  // -1 for a leaf
  double threshold = 0.0;
  int left = -1;   // value <= threshold
  int right = -1;
  double fraction = 0.0;  // share of class 1 among training rows at the node
};

struct DecisionTree {
  std::vector<TreeNode> nodes;  // nodes[0] is the root

  double predict(std::span<const double> x) const;
};

struct VerifierModel {
  ForestParams params;
  SummaryScheme scheme;
  std::size_t input_length = 0;
  std::size_t training_rows = 0;
  std::vector<std::string> tags;  // dataset / model provenance of the training data
  std::vector<DecisionTree> trees;
};

struct LabeledSummary {
  TrajectorySummary summary;
  bool is_correct = false;
};

/// Random forest with bootstrap rows, sqrt(p) candidate features per split
/// and Gini impurity. Tree t draws from splitmix64(seed + t).
VerifierModel train_verifier(std::span<const LabeledSummary> data, const ForestParams& params,
                             std::vector<std::string> tags = {});

enum class ScoreMode { soft, binary };
std::string_view to_string(ScoreMode m);
ScoreMode parse_score_mode(std::string_view s);

/// Soft mode: mean leaf fraction over trees. Binary mode: 1 when that mean
/// is at least 0.5.
double verifier_score(const VerifierModel& m, const TrajectorySummary& s, ScoreMode mode = ScoreMode::soft);

struct VoteOutcome {
  int chosen_index = 0;
  std::vector<double> tallies;
  bool fallback_used = false;
};

/// Score-weighted plurality; ties go to the lowest index. All-zero scores
/// fall back to counting votes. `k` of 0 sizes the tally by the largest
/// prediction.
VoteOutcome weighted_vote(std::span<const int> predictions, std::span<const double> scores, int k = 0);
VoteOutcome majority_vote(std::span<const int> predictions, int k = 0);

struct VotingPoint {
  int q = 0;
  double weighted_accuracy = 0.0;
  double unweighted_accuracy = 0.0;
};

/// Per q, vote over the first q slots of every question (questions in id
/// order); accuracy is the share of questions whose vote lands on choice 0.
std::vector<VotingPoint> evaluate_voting(std::span<const FeatureTrajectory> ftrajs, const VerifierModel& model,
                                         std::span<const int> q_values, ScoreMode mode = ScoreMode::soft);

struct TransferResult {
  std::vector<std::string> train_tags;
  std::string eval_tag;
  int q = 0;
  double weighted_accuracy = 0.0;
  double unweighted_accuracy = 0.0;
  double delta() const { return weighted_accuracy - unweighted_accuracy; }
};

TransferResult evaluate_transfer(const VerifierModel& model, std::span<const FeatureTrajectory> ftrajs,
                                 std::string eval_tag, int q, ScoreMode mode = ScoreMode::soft);

/// Area under the ROC curve via the rank-sum statistic; ties count half.
double roc_auc(std::span<const double> scores, const std::vector<bool>& labels);

nlohmann::json to_json(const VerifierModel& m);
VerifierModel verifier_from_json(const nlohmann::json& j);
void save_verifier(const std::filesystem::path& path, const VerifierModel& m);
VerifierModel load_verifier(const std::filesystem::path& path);

}  // namespace lot
