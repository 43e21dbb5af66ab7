#include "lot/verifier.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <thread>

#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/landscape.hpp"
#include "lot/random.hpp"

namespace lot {

using nlohmann::json;

std::vector<double> reorder_feature(std::span<const double> normalized, int predicted_index, int k_max) {
  if (k_max < 1) throw ArgumentError("k_max must be >= 1");
  if (predicted_index < 0 || static_cast<std::size_t>(predicted_index) >= normalized.size()) {
    throw ArgumentError("predicted index outside the feature");
  }
  std::vector<double> rest;
  for (std::size_t j = 0; j < normalized.size(); ++j) {
    if (static_cast<int>(j) != predicted_index) rest.push_back(normalized[j]);
  }
  std::sort(rest.begin(), rest.end());
  std::vector<double> out{normalized[static_cast<std::size_t>(predicted_index)]};
  out.insert(out.end(), rest.begin(), rest.end());
  out.resize(static_cast<std::size_t>(k_max), 1.0 / k_max);
  return out;
}

TrajectorySummary summarize_trajectory(const FeatureTrajectory& ftraj, const SummaryScheme& scheme) {
  if (scheme.bins < 1 || scheme.k_max < 1) throw ArgumentError("summary needs bins >= 1 and k_max >= 1");
  const int n = ftraj.n();
  if (n < 1) throw ArgumentError("summary of an empty trajectory");
  const auto B = static_cast<std::size_t>(scheme.bins);
  const auto K = static_cast<std::size_t>(scheme.k_max);
  const std::size_t width = K + 1;
  std::vector<double> sums(B * width, 0.0);
  std::vector<int> counts(B, 0);
  for (int i = 1; i <= n; ++i) {
    const auto b = static_cast<std::size_t>(progress_bin(i, n, scheme.bins));
    const auto& f = ftraj.features[static_cast<std::size_t>(i - 1)];
    const auto slots = reorder_feature(f.normalized, ftraj.predicted_index, scheme.k_max);
    for (std::size_t s = 0; s < K; ++s) sums[b * width + s] += slots[s];
    sums[b * width + K] += ftraj.consistency[static_cast<std::size_t>(i - 1)];
    ++counts[b];
  }
  TrajectorySummary out;
  out.scheme = scheme;
  out.values.resize(B * width);
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t src = b;
    if (counts[b] == 0) {
      // Nearest non-empty bin, earlier one on ties.
      for (std::size_t d = 1; d < B; ++d) {
        if (b >= d && counts[b - d] > 0) {
          src = b - d;
          break;
        }
        if (b + d < B && counts[b + d] > 0) {
          src = b + d;
          break;
        }
      }
    }
    for (std::size_t s = 0; s < width; ++s) {
      out.values[b * width + s] = sums[src * width + s] / counts[src];
    }
  }
  return out;
}

void ForestParams::validate() const {
  if (trees < 1) throw ArgumentError("forest needs at least one tree");
  if (max_depth < 1) throw ArgumentError("max_depth must be >= 1");
  if (min_leaf < 1) throw ArgumentError("min_leaf must be >= 1");
}

double DecisionTree::predict(std::span<const double> x) const {
  int i = 0;
  for (;;) {
    const auto& node = nodes[static_cast<std::size_t>(i)];
    if (node.feature < 0) return node.fraction;
    i = x[static_cast<std::size_t>(node.feature)] <= node.threshold ? node.left : node.right;
  }
}

namespace {

struct TreeBuilder {
  const std::vector<std::vector<double>>& x;
  const std::vector<int>& y;
  const ForestParams& params;
  Rng rng;
  DecisionTree tree;
  std::vector<std::size_t> features;

  int build(std::vector<std::size_t>& rows, int depth) {
    const auto node_id = static_cast<int>(tree.nodes.size());
    tree.nodes.emplace_back();
    double positives = 0.0;
    for (auto r : rows) positives += y[r];
    const double n = static_cast<double>(rows.size());
    const double p = positives / n;
    tree.nodes[static_cast<std::size_t>(node_id)].fraction = p;
    const double parent_gini = 2.0 * p * (1.0 - p);
    if (depth >= params.max_depth || rows.size() < static_cast<std::size_t>(2 * params.min_leaf) ||
        parent_gini == 0.0) {
      return node_id;
    }

    // Candidate features: the first m of a partial shuffle.
    const std::size_t p_total = features.size();
    const auto m = std::max<std::size_t>(1, static_cast<std::size_t>(std::sqrt(static_cast<double>(p_total))));
    for (std::size_t i = 0; i < m; ++i) {
      const auto j = i + rng.index(p_total - i);
      std::swap(features[i], features[j]);
    }

    double best_gini = parent_gini - 1e-12;
    int best_feature = -1;
    double best_threshold = 0.0;
    std::vector<std::size_t> order(rows);
    const auto min_leaf = static_cast<std::size_t>(params.min_leaf);
    for (std::size_t fi = 0; fi < m; ++fi) {
      const auto f = features[fi];
      std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x[a][f] < x[b][f] || (x[a][f] == x[b][f] && a < b);
      });
      double left_pos = 0.0;
      for (std::size_t cut = 1; cut < order.size(); ++cut) {
        left_pos += y[order[cut - 1]];
        const double lo = x[order[cut - 1]][f];
        const double hi = x[order[cut]][f];
        if (lo == hi || cut < min_leaf || order.size() - cut < min_leaf) continue;
        const double nl = static_cast<double>(cut);
        const double nr = n - nl;
        const double pl = left_pos / nl;
        const double pr = (positives - left_pos) / nr;
        const double g = (nl * 2.0 * pl * (1.0 - pl) + nr * 2.0 * pr * (1.0 - pr)) / n;
        if (g < best_gini) {
          best_gini = g;
          best_feature = static_cast<int>(f);
          best_threshold = lo + (hi - lo) / 2.0;
          if (!(best_threshold < hi)) best_threshold = lo;
        }
      }
    }
    if (best_feature < 0) return node_id;

    std::vector<std::size_t> left;
    std::vector<std::size_t> right;
    for (auto r : rows) {
      (x[r][static_cast<std::size_t>(best_feature)] <= best_threshold ? left : right).push_back(r);
    }
    rows.clear();
    rows.shrink_to_fit();
    const int l = build(left, depth + 1);
    const int r = build(right, depth + 1);
    auto& node = tree.nodes[static_cast<std::size_t>(node_id)];
    node.feature = best_feature;
    node.threshold = best_threshold;
    node.left = l;
    node.right = r;
    return node_id;
  }
};

}  // namespace

VerifierModel train_verifier(std::span<const LabeledSummary> data, const ForestParams& params,
                             std::vector<std::string> tags) {
  params.validate();
  if (data.size() < 20) {
    throw TrainingError("verifier training needs at least 20 trajectories, got " + std::to_string(data.size()));
  }
  const std::size_t p = data.front().summary.values.size();
  std::vector<std::vector<double>> x;
  std::vector<int> y;
  int positives = 0;
  for (const auto& d : data) {
    if (d.summary.values.size() != p || !(d.summary.scheme == data.front().summary.scheme)) {
      throw ArgumentError("training summaries differ in scheme or length");
    }
    x.push_back(d.summary.values);
    y.push_back(d.is_correct ? 1 : 0);
    positives += y.back();
  }
  if (positives == 0 || positives == static_cast<int>(y.size())) {
    throw TrainingError("training data has a single correctness class; sample more trajectories or questions");
  }

  VerifierModel model;
  model.params = params;
  model.scheme = data.front().summary.scheme;
  model.input_length = p;
  model.training_rows = data.size();
  model.tags = std::move(tags);
  model.trees.resize(static_cast<std::size_t>(params.trees));
  const int workers = params.workers > 0 ? params.workers
                                         : static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
  parallel_for(model.trees.size(), workers, [&](std::size_t t) {
    TreeBuilder builder{x, y, params, Rng(splitmix64(params.seed + t)), {}, {}};
    builder.features.resize(p);
    std::iota(builder.features.begin(), builder.features.end(), std::size_t{0});
    std::vector<std::size_t> rows(x.size());
    for (auto& r : rows) r = builder.rng.index(x.size());
    builder.build(rows, 0);
    model.trees[t] = std::move(builder.tree);
  });
  return model;
}

std::string_view to_string(ScoreMode m) { return m == ScoreMode::soft ? "soft" : "binary"; }

ScoreMode parse_score_mode(std::string_view s) {
  if (s == "soft") return ScoreMode::soft;
  if (s == "binary") return ScoreMode::binary;
  throw ConfigError("unknown score mode '" + std::string(s) + "' (soft|binary)");
}

double verifier_score(const VerifierModel& m, const TrajectorySummary& s, ScoreMode mode) {
  if (s.values.size() != m.input_length) {
    throw ArgumentError("summary length " + std::to_string(s.values.size()) + " does not match model input " +
                        std::to_string(m.input_length));
  }
  if (m.trees.empty()) throw ArgumentError("verifier has no trees");
  double sum = 0.0;
  for (const auto& t : m.trees) sum += t.predict(s.values);
  const double soft = sum / static_cast<double>(m.trees.size());
  if (mode == ScoreMode::binary) return soft >= 0.5 ? 1.0 : 0.0;
  return soft;
}

VoteOutcome weighted_vote(std::span<const int> predictions, std::span<const double> scores, int k) {
  if (predictions.empty()) throw ArgumentError("vote over no trajectories");
  if (predictions.size() != scores.size()) throw ArgumentError("votes and scores differ in length");
  int size = k;
  for (int p : predictions) {
    if (p < 0 || (k > 0 && p >= k)) throw ArgumentError("prediction " + std::to_string(p) + " out of range");
    size = std::max(size, p + 1);
  }
  bool all_zero = true;
  for (double s : scores) {
    if (!(s >= 0.0) || !std::isfinite(s)) throw ArgumentError("vote scores must be finite and non-negative");
    if (s > 0.0) all_zero = false;
  }
  VoteOutcome out;
  out.fallback_used = all_zero;
  out.tallies.assign(static_cast<std::size_t>(size), 0.0);
  for (std::size_t i = 0; i < predictions.size(); ++i) {
    out.tallies[static_cast<std::size_t>(predictions[i])] += all_zero ? 1.0 : scores[i];
  }
  out.chosen_index = static_cast<int>(std::max_element(out.tallies.begin(), out.tallies.end()) - out.tallies.begin());
  return out;
}

VoteOutcome majority_vote(std::span<const int> predictions, int k) {
  std::vector<double> ones(predictions.size(), 1.0);
  return weighted_vote(predictions, ones, k);
}

std::vector<VotingPoint> evaluate_voting(std::span<const FeatureTrajectory> ftrajs, const VerifierModel& model,
                                         std::span<const int> q_values, ScoreMode mode) {
  std::map<std::string, std::vector<const FeatureTrajectory*>> by_question;
  for (const auto& f : ftrajs) by_question[f.question_id].push_back(&f);
  if (by_question.empty()) throw SizeError("no trajectories to vote over");
  std::map<const FeatureTrajectory*, double> scores;
  for (auto& [id, list] : by_question) {
    std::sort(list.begin(), list.end(), [](auto* a, auto* b) { return a->slot < b->slot; });
    for (auto* f : list) scores[f] = verifier_score(model, summarize_trajectory(*f, model.scheme), mode);
  }
  std::vector<VotingPoint> out;
  for (int q : q_values) {
    if (q < 1) throw ArgumentError("q must be >= 1");
    VotingPoint pt;
    pt.q = q;
    for (const auto& [id, list] : by_question) {
      if (list.size() < static_cast<std::size_t>(q)) {
        throw SizeError("question " + id + " has " + std::to_string(list.size()) + " trajectories, q=" +
                        std::to_string(q) + " requested");
      }
      std::vector<int> preds;
      std::vector<double> s;
      for (int i = 0; i < q; ++i) {
        preds.push_back(list[static_cast<std::size_t>(i)]->predicted_index);
        s.push_back(scores[list[static_cast<std::size_t>(i)]]);
      }
      const int k = list.front()->k;
      if (weighted_vote(preds, s, k).chosen_index == 0) pt.weighted_accuracy += 1.0;
      if (majority_vote(preds, k).chosen_index == 0) pt.unweighted_accuracy += 1.0;
    }
    pt.weighted_accuracy /= static_cast<double>(by_question.size());
    pt.unweighted_accuracy /= static_cast<double>(by_question.size());
    out.push_back(pt);
  }
  return out;
}

TransferResult evaluate_transfer(const VerifierModel& model, std::span<const FeatureTrajectory> ftrajs,
                                 std::string eval_tag, int q, ScoreMode mode) {
  const int qs[] = {q};
  const auto pt = evaluate_voting(ftrajs, model, qs, mode).front();
  return {model.tags, std::move(eval_tag), q, pt.weighted_accuracy, pt.unweighted_accuracy};
}

double roc_auc(std::span<const double> scores, const std::vector<bool>& labels) {
  if (scores.size() != labels.size()) throw ArgumentError("scores and labels differ in length");
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  double pos = 0.0;
  for (std::size_t i = 0; i < idx.size();) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = (static_cast<double>(i + 1) + static_cast<double>(j)) / 2.0;
    for (std::size_t t = i; t < j; ++t) {
      if (labels[idx[t]]) {
        rank_sum += avg_rank;
        pos += 1.0;
      }
    }
    i = j;
  }
  const double neg = static_cast<double>(scores.size()) - pos;
  if (pos == 0.0 || neg == 0.0) throw DegenerateError("AUC needs both classes");
  return (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
}

json to_json(const VerifierModel& m) {
  json trees = json::array();
  for (const auto& t : m.trees) {
    json feature = json::array(), threshold = json::array(), left = json::array(), right = json::array(),
         fraction = json::array();
    for (const auto& n : t.nodes) {
      feature.push_back(n.feature);
      threshold.push_back(n.threshold);
      left.push_back(n.left);
      right.push_back(n.right);
      fraction.push_back(n.fraction);
    }
    trees.push_back({{"feature", feature},
                     {"threshold", threshold},
                     {"left", left},
                     {"right", right},
                     {"fraction", fraction}});
  }
  return {{"format", "lot-forest-v1"},
          {"hyperparameters",
           {{"trees", m.params.trees},
            {"max_depth", m.params.max_depth},
            {"min_leaf", m.params.min_leaf},
            {"feature_subsample", "sqrt"},
            {"criterion", "gini"},
            {"seed", m.params.seed}}},
          {"summary", {{"bins", m.scheme.bins}, {"k_max", m.scheme.k_max}}},
          {"input_length", m.input_length},
          {"training_rows", m.training_rows},
          {"tags", m.tags},
          {"trees", trees}};
}

VerifierModel verifier_from_json(const json& j) {
  try {
    if (j.at("format").get<std::string>() != "lot-forest-v1") throw ValidationError("unknown verifier format");
    VerifierModel m;
    const auto& hp = j.at("hyperparameters");
    m.params.trees = hp.at("trees").get<int>();
    m.params.max_depth = hp.at("max_depth").get<int>();
    m.params.min_leaf = hp.at("min_leaf").get<int>();
    m.params.seed = hp.at("seed").get<std::uint64_t>();
    m.scheme.bins = j.at("summary").at("bins").get<int>();
    m.scheme.k_max = j.at("summary").at("k_max").get<int>();
    m.input_length = j.at("input_length").get<std::size_t>();
    m.training_rows = j.at("training_rows").get<std::size_t>();
    m.tags = j.at("tags").get<std::vector<std::string>>();
    for (const auto& t : j.at("trees")) {
      DecisionTree tree;
      const auto feature = t.at("feature").get<std::vector<int>>();
      const auto threshold = t.at("threshold").get<std::vector<double>>();
      const auto left = t.at("left").get<std::vector<int>>();
      const auto right = t.at("right").get<std::vector<int>>();
      const auto fraction = t.at("fraction").get<std::vector<double>>();
      const auto n = feature.size();
      if (threshold.size() != n || left.size() != n || right.size() != n || fraction.size() != n || n == 0) {
        throw ValidationError("malformed tree arrays");
      }
      for (std::size_t i = 0; i < n; ++i) {
        const bool leaf = feature[i] < 0;
        if (!leaf && (left[i] <= static_cast<int>(i) || right[i] <= static_cast<int>(i) ||
                      left[i] >= static_cast<int>(n) || right[i] >= static_cast<int>(n) ||
                      static_cast<std::size_t>(feature[i]) >= m.input_length)) {
          throw ValidationError("tree node " + std::to_string(i) + " is malformed");
        }
        if (!(fraction[i] >= 0.0 && fraction[i] <= 1.0)) throw ValidationError("leaf fraction outside [0,1]");
        tree.nodes.push_back({feature[i], threshold[i], left[i], right[i], fraction[i]});
      }
      m.trees.push_back(std::move(tree));
    }
    return m;
  } catch (const json::exception& e) {
    throw ValidationError(std::string("verifier model: ") + e.what());
  }
}

void save_verifier(const std::filesystem::path& path, const VerifierModel& m) {
  write_file_atomic(path, to_json(m).dump() + "\n");
}

VerifierModel load_verifier(const std::filesystem::path& path) {
  try {
    return verifier_from_json(json::parse(read_file(path)));
  } catch (const json::exception& e) {
    throw ParseError(e.what(), 1);
  }
}

}  // namespace lot
