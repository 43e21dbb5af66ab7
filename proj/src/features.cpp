#include "lot/features.hpp"

#include <cmath>
#include <sstream>

#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/trajectory.hpp"

namespace lot {

using nlohmann::json;

double state_distance(std::span<const double> token_logprobs) {
  if (token_logprobs.empty()) throw ArgumentError("distance of an empty continuation");
  double sum = 0.0;
  for (double lp : token_logprobs) {
    if (std::isnan(lp)) throw ArgumentError("NaN token log-probability");
    sum += std::max(lp, kMinLogProb);
  }
  return std::exp(-sum / static_cast<double>(token_logprobs.size()));
}

double state_distance(const ScoredContinuation& scored) {
  return state_distance(std::span<const double>(scored.token_logprobs));
}

double thought_perplexity(const ScoredContinuation& scored_thought) {
  return state_distance(scored_thought);
}

StateFeature make_state_feature(std::vector<double> raw, int state_index) {
  if (raw.size() < 2) throw ArgumentError("state feature needs k >= 2 distances");
  double sum = 0.0;
  for (double d : raw) {
    if (!std::isfinite(d) || d < 1.0) {
      throw ArgumentError("perplexity distance " + std::to_string(d) + " is not a finite value >= 1");
    }
    sum += d;
  }
  StateFeature f;
  f.normalized.reserve(raw.size());
  for (double d : raw) f.normalized.push_back(d / sum);
  f.raw = std::move(raw);
  f.state_index = state_index;
  return f;
}

StateFeature state_feature(const std::string& prefix, const std::vector<std::string>& choices,
                           const Scorer& scorer, int state_index) {
  if (choices.size() < 2) throw ArgumentError("state feature needs k >= 2 choices");
  std::vector<double> raw(choices.size());
  parallel_for(choices.size(), scorer.max_inflight(), [&](std::size_t j) {
    raw[j] = state_distance(scorer.score(prefix, " " + choices[j]));
  });
  return make_state_feature(std::move(raw), state_index);
}

AnchorFeature anchor_feature(int j, int k) {
  if (k < 2) throw ArgumentError("anchor needs k >= 2");
  if (j < 0 || j >= k) throw ArgumentError("anchor index " + std::to_string(j) + " out of range");
  AnchorFeature a;
  a.choice_index = j;
  a.vector.assign(static_cast<std::size_t>(k), 1.0 / k);
  a.vector[static_cast<std::size_t>(j)] = 0.0;
  return a;
}

int argmin_index(std::span<const double> v) {
  if (v.empty()) throw ArgumentError("argmin of an empty vector");
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] < v[best]) best = i;
  }
  return static_cast<int>(best);
}

int consistency(const StateFeature& state, const StateFeature& final_state) {
  if (state.k() != final_state.k()) throw ArgumentError("consistency: dimension mismatch");
  return argmin_index(state.normalized) == argmin_index(final_state.normalized) ? 1 : 0;
}

double uncertainty(std::span<const double> normalized) {
  double sum = 0.0;
  for (double d : normalized) {
    if (!(d >= 0.0)) throw ArgumentError("uncertainty: negative entry");
    sum += d;
  }
  if (normalized.empty() || std::abs(sum - 1.0) > 1e-9) {
    throw ArgumentError("uncertainty: input is not normalized (sum " + std::to_string(sum) + ")");
  }
  double h = 0.0;
  for (double d : normalized) {
    if (d > 0.0) h -= d * std::log(d);
  }
  return std::max(h, 0.0);
}

double uncertainty(const StateFeature& f) { return uncertainty(std::span<const double>(f.normalized)); }

void FeatureTrajectory::validate() const {
  const auto n_states = features.size();
  if (n_states == 0) throw ValidationError("feature trajectory " + question_id + " has no states");
  if (consistency.size() != n_states || uncertainty.size() != n_states ||
      thought_perplexities.size() != n_states) {
    throw ValidationError("feature trajectory " + question_id + ": series lengths differ");
  }
  for (const auto& f : features) {
    if (f.k() != k) throw ValidationError("feature trajectory " + question_id + ": mixed k");
  }
  if (predicted_index < 0 || predicted_index >= k) {
    throw ValidationError("feature trajectory " + question_id + ": prediction out of range");
  }
}

FeatureTrajectory assemble_feature_trajectory(std::string question_id, int slot,
                                              std::vector<StateFeature> features,
                                              std::vector<double> thought_perplexities,
                                              int predicted_index) {
  if (features.empty()) throw ArgumentError("feature trajectory needs at least one state");
  FeatureTrajectory out;
  out.question_id = std::move(question_id);
  out.slot = slot;
  out.k = features.front().k();
  const StateFeature& last = features.back();
  for (const auto& f : features) {
    out.consistency.push_back(consistency(f, last));
    out.uncertainty.push_back(uncertainty(f));
  }
  out.features = std::move(features);
  out.thought_perplexities = std::move(thought_perplexities);
  out.predicted_index = predicted_index;
  out.is_correct = predicted_index == 0;
  out.validate();
  return out;
}

FeatureTrajectory featurize_trajectory(const Trajectory& traj, const Question& q, const Scorer& scorer,
                                       const FeaturizeOptions& opts) {
  if (q.correct_index != 0) throw ArgumentError("question " + q.id + " is not canonicalized");
  if (traj.thoughts.empty()) throw ArgumentError("trajectory for " + q.id + " has no thoughts");
  const int n = traj.n();
  const auto k = static_cast<std::size_t>(q.k());
  const int first_state = opts.include_initial_state ? 0 : 1;
  const auto states = static_cast<std::size_t>(n - first_state + 1);

  // Jobs: states x choices distances, then one perplexity per thought.
  std::vector<std::string> state_texts(static_cast<std::size_t>(n) + 1);
  for (int i = 0; i <= n; ++i) state_texts[static_cast<std::size_t>(i)] = traj.state_text(i);
  std::vector<double> distances(states * k);
  std::vector<double> perplexities(static_cast<std::size_t>(n));
  const std::size_t distance_jobs = states * k;
  parallel_for(distance_jobs + perplexities.size(), scorer.max_inflight(), [&](std::size_t job) {
    try {
      if (job < distance_jobs) {
        const auto s = job / k;
        const auto j = job % k;
        const auto state = static_cast<std::size_t>(first_state) + s;
        distances[job] = state_distance(scorer.score(state_texts[state], " " + q.choices[j]));
      } else {
        const auto t = job - distance_jobs;
        perplexities[t] = thought_perplexity(
            scorer.score(state_texts[t], " " + traj.thoughts[t].text));
      }
    } catch (const Error& e) {
      const auto where =
          "question " + q.id + " slot " + std::to_string(traj.slot) + " " +
          (job < distance_jobs ? "state " + std::to_string(first_state + static_cast<int>(job / k)) +
                                     " choice " + std::to_string(job % k)
                               : "thought " + std::to_string(job - distance_jobs + 1)) +
          ": " + e.what();
      if (dynamic_cast<const CapabilityError*>(&e)) throw CapabilityError(where);
      if (auto* te = dynamic_cast<const TransportError*>(&e)) throw TransportError(where, te->attempts());
      throw ValidationError(where);
    }
  });

  std::vector<StateFeature> features;
  std::optional<StateFeature> initial;
  for (std::size_t s = 0; s < states; ++s) {
    const int index = first_state + static_cast<int>(s);
    std::vector<double> raw(distances.begin() + static_cast<long>(s * k),
                            distances.begin() + static_cast<long>((s + 1) * k));
    auto f = make_state_feature(std::move(raw), index);
    if (index == 0) {
      initial = std::move(f);
    } else {
      features.push_back(std::move(f));
    }
  }

  int predicted = 0;
  bool fallback = false;
  if (traj.predicted_index) {
    predicted = *traj.predicted_index;
  } else {
    predicted = argmin_index(features.back().normalized);
    fallback = true;
  }
  auto out = assemble_feature_trajectory(traj.question_id, traj.slot, std::move(features),
                                         std::move(perplexities), predicted);
  out.initial_state = std::move(initial);
  out.answer_fallback = fallback || traj.answer_fallback;
  return out;
}

FeatureMatrix build_feature_matrix(std::span<const FeatureTrajectory> ftrajs, int k) {
  if (k < 2) throw ArgumentError("feature matrix needs k >= 2");
  FeatureMatrix m;
  m.k = k;
  for (std::size_t t = 0; t < ftrajs.size(); ++t) {
    const auto& ft = ftrajs[t];
    if (ft.k != k) {
      throw ArgumentError("feature matrix: trajectory " + ft.question_id + " has k=" +
                          std::to_string(ft.k) + ", expected " + std::to_string(k));
    }
    for (const auto& f : ft.features) {
      m.columns.push_back(f.normalized);
      m.layout.push_back({static_cast<int>(t), f.state_index, -1});
    }
  }
  for (int j = 0; j < k; ++j) {
    m.columns.push_back(anchor_feature(j, k).vector);
    m.layout.push_back({-1, -1, j});
  }
  return m;
}

json to_json(const FeatureTrajectory& f) {
  json raw = json::array();
  json normalized = json::array();
  for (const auto& s : f.features) {
    raw.push_back(s.raw);
    normalized.push_back(s.normalized);
  }
  json j{{"question_id", f.question_id},
         {"slot", f.slot},
         {"k", f.k},
         {"raw_distances", raw},
         {"normalized", normalized},
         {"consistency", f.consistency},
         {"uncertainty", f.uncertainty},
         {"thought_perplexity", f.thought_perplexities},
         {"predicted", f.predicted_index},
         {"answer_fallback", f.answer_fallback},
         {"is_correct", f.is_correct}};
  j["initial_state"] = f.initial_state ? json(f.initial_state->raw) : json(nullptr);
  return j;
}

FeatureTrajectory feature_trajectory_from_json(const json& j) {
  std::vector<StateFeature> features;
  int index = 1;
  for (const auto& raw : j.at("raw_distances")) {
    features.push_back(make_state_feature(raw.get<std::vector<double>>(), index++));
  }
  auto out = assemble_feature_trajectory(j.at("question_id").get<std::string>(), j.value("slot", 0),
                                         std::move(features),
                                         j.at("thought_perplexity").get<std::vector<double>>(),
                                         j.at("predicted").get<int>());
  out.answer_fallback = j.value("answer_fallback", false);
  if (j.contains("initial_state") && !j.at("initial_state").is_null()) {
    out.initial_state = make_state_feature(j.at("initial_state").get<std::vector<double>>(), 0);
  }
  return out;
}

void write_feature_trajectories(const std::filesystem::path& path,
                                const std::vector<FeatureTrajectory>& fs) {
  std::string out;
  for (const auto& f : fs) out += to_json(f).dump() + "\n";
  write_file_atomic(path, out);
}

std::vector<FeatureTrajectory> read_feature_trajectories(const std::filesystem::path& path) {
  std::vector<FeatureTrajectory> out;
  std::istringstream in(read_file(path));
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    if (raw.empty()) continue;
    try {
      out.push_back(feature_trajectory_from_json(json::parse(raw)));
    } catch (const json::exception& e) {
      throw ParseError(e.what(), line);
    }
  }
  return out;
}

}  // namespace lot
