// Acceptance suite: one pass/fail line per criterion, non-zero exit on any
// failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "lot/error.hpp"
#include "lot/features.hpp"
#include "lot/landscape.hpp"
#include "lot/pipeline.hpp"
#include "lot/random.hpp"
#include "lot/stats.hpp"
#include "lot/synthetic.hpp"
#include "lot/trajectory.hpp"
#include "lot/verifier.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace lot;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Collects failed expectations for one criterion.
class Check {
 public:
  void expect(bool ok, const std::string& what) {
    if (!ok && failures_.size() < 5) failures_.push_back(what);
    if (!ok) ++count_;
  }
  template <class... Args>
  void note(const char* fmt, Args... args) {
    char buf[256];
    std::snprintf(buf, sizeof buf, fmt, args...);
    if (!notes_.empty()) notes_ += "; ";
    notes_ += buf;
  }
  bool ok() const { return count_ == 0; }
  std::string summary() const {
    std::string s = notes_;
    for (const auto& f : failures_) s += (s.empty() ? "" : "; ") + f;
    if (count_ > failures_.size()) s += "; +" + std::to_string(count_ - failures_.size()) + " more";
    return s;
  }

 private:
  std::vector<std::string> failures_;
  std::size_t count_ = 0;
  std::string notes_;
};

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

void distance_forms(Check& c) {
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int T = 1 + static_cast<int>(rng.index(50));
    std::vector<double> lp;
    double product = 1.0;
    for (int t = 0; t < T; ++t) {
      const double p = rng.uniform(0.01, 1.0);
      lp.push_back(std::log(p));
      product *= p;
    }
    const double a = state_distance(lp);
    const double b = std::pow(product, -1.0 / T);
    const double rel = std::abs(a - b) / b;
    worst = std::max(worst, rel);
    c.expect(rel <= 1e-9, "trial " + std::to_string(trial) + " relative gap " + fmt(rel));
  }
  const double elapsed = seconds_since(t0);
  c.expect(elapsed < 1.0, "runtime " + fmt(elapsed) + " s");
  c.note("max relative gap %.2e", worst);
}

void normalization(Check& c) {
  Rng rng(202);
  double worst = 0.0;
  for (int trial = 0; trial < 10000; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(9));
    std::vector<double> raw;
    for (int j = 0; j < k; ++j) {
      std::vector<double> lp(1 + rng.index(20));
      for (auto& v : lp) v = -rng.uniform(0.0, 12.0);
      raw.push_back(state_distance(lp));
      c.expect(raw.back() >= 1.0, "raw distance below 1 in trial " + std::to_string(trial));
    }
    const auto f = make_state_feature(raw, 1);
    const double sum = std::accumulate(f.normalized.begin(), f.normalized.end(), 0.0);
    worst = std::max(worst, std::abs(sum - 1.0));
    c.expect(std::abs(sum - 1.0) <= 1e-12, "sum " + fmt(sum) + " in trial " + std::to_string(trial));
  }
  c.note("max |sum-1| %.2e", worst);
}

void anchors(Check& c) {
  for (int k = 2; k <= 10; ++k) {
    for (int j = 0; j < k; ++j) {
      std::vector<double> expected(static_cast<std::size_t>(k), 1.0 / k);
      expected[static_cast<std::size_t>(j)] = 0.0;
      c.expect(anchor_feature(j, k).vector == expected, "anchor " + std::to_string(j) + " of " + std::to_string(k));
      for (int l = 0; l < k; ++l) {
        if (l == j) continue;
        const auto a = anchor_feature(j, k).vector;
        const auto b = anchor_feature(l, k).vector;
        double d = 0.0;
        for (std::size_t i = 0; i < a.size(); ++i) d += std::abs(a[i] - b[i]);
        c.expect(d == 2.0 / k, "l1(" + std::to_string(j) + "," + std::to_string(l) + ") for k=" + std::to_string(k));
      }
    }
  }
}

Trajectory random_trajectory(Rng& rng, int idx) {
  static const char* words[] = {"weigh", "consider", "compare", "recall", "check", "note", "so", "then"};
  Trajectory t;
  t.question_id = "q";
  t.slot = idx;
  t.prompt = "Question: which one?";
  const int n = 1 + static_cast<int>(rng.index(6));
  for (int i = 0; i < n; ++i) {
    std::string text;
    const int len = 2 + static_cast<int>(rng.index(5));
    for (int w = 0; w < len; ++w) text += std::string(w ? " " : "") + words[rng.index(8)];
    t.thoughts.push_back({text + ".", i + 1});
  }
  t.answer_fallback = true;
  return t;
}

void metrics(Check& c) {
  for (int k = 2; k <= 10; ++k) {
    const std::vector<double> u(static_cast<std::size_t>(k), 1.0 / k);
    const double h = uncertainty(u);
    c.expect(std::abs(h - std::log(k)) <= 1e-12, "uniform entropy for k=" + std::to_string(k) + " is " + fmt(h));
  }

  MockScript script;
  script.hash_spread = 1.0;
  auto model = make_mock_model(script);
  const Scorer scorer(*model);
  Rng rng(404);
  int featurized = 0;
  for (int trial = 0; trial < 200; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(4));
    Question q{"q", "which one?", {}, 0, {}};
    for (int j = 0; j < k; ++j) {
      q.choices.push_back("option " + std::string(1, static_cast<char>('a' + j)) + std::to_string(trial));
      q.permutation.push_back(j);
    }
    const auto ft = featurize_trajectory(random_trajectory(rng, trial), q, scorer);
    ++featurized;
    c.expect(!ft.consistency.empty() && ft.consistency.back() == 1,
             "final-state consistency in trajectory " + std::to_string(trial));
  }
  SyntheticConfig syn;
  syn.questions = 20;
  syn.trajectories_per_question = 5;
  for (const auto& ft : synthetic_trajectories(syn)) {
    ++featurized;
    c.expect(ft.consistency.back() == 1, "final-state consistency in " + ft.question_id);
  }

  // Strictly increasing transforms of the raw distances leave every argmin,
  // hence every consistency flag, unchanged.
  for (int transform = 0; transform < 100; ++transform) {
    const double scale = rng.uniform(1.0, 5.0);
    const double power = rng.uniform(0.2, 4.0);
    const double rate = rng.uniform(0.01, 0.5);
    auto g = [&](double d) { return 1.0 + scale * std::pow(d - 1.0, power) + (std::exp(rate * (d - 1.0)) - 1.0); };
    const int k = 2 + static_cast<int>(rng.index(9));
    const int n = 2 + static_cast<int>(rng.index(10));
    std::vector<std::vector<double>> raws;
    for (int i = 0; i < n; ++i) {
      std::vector<double> raw;
      for (int j = 0; j < k; ++j) raw.push_back(1.0 + rng.uniform(0.0, 20.0));
      raws.push_back(raw);
    }
    std::vector<StateFeature> before, after;
    for (int i = 0; i < n; ++i) {
      before.push_back(make_state_feature(raws[static_cast<std::size_t>(i)], i + 1));
      std::vector<double> moved;
      for (double d : raws[static_cast<std::size_t>(i)]) moved.push_back(g(d));
      after.push_back(make_state_feature(moved, i + 1));
    }
    for (int i = 0; i < n; ++i) {
      const auto ui = static_cast<std::size_t>(i);
      c.expect(consistency(before[ui], before.back()) == consistency(after[ui], after.back()),
               "transform " + std::to_string(transform) + " changed consistency at state " + std::to_string(i + 1));
    }
  }
  c.note("%d featurized trajectories", featurized);
}

void tsne_quality(Check& c) {
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const auto data = oracle::gaussian_clusters(seed, 50, 5);
    TsneParams params;
    params.seed = seed;
    TsneDiagnostics diag;
    const auto t0 = Clock::now();
    const auto y = tsne(data.points, params, &diag);
    const double elapsed = seconds_since(t0);
    const double purity = oracle::knn_purity(y, data.labels, 10);
    const auto s = std::to_string(seed);
    c.expect(purity >= 0.9, "seed " + s + " purity " + fmt(purity));
    c.expect(diag.final_kl < diag.initial_kl,
             "seed " + s + " KL " + fmt(diag.initial_kl) + " -> " + fmt(diag.final_kl));
    c.expect(elapsed < 30.0, "seed " + s + " runtime " + fmt(elapsed) + " s");
    c.note("seed %d purity %.3f KL %.3f->%.3f %.2fs", static_cast<int>(seed), purity, diag.initial_kl, diag.final_kl,
           elapsed);
  }
}

void convergence(Check& c) {
  Rng rng(606);
  double worst_clean = 0.0, worst_noisy = 0.0;
  for (int fixture = 0; fixture < 20; ++fixture) {
    const double amplitude = rng.uniform(0.5, 20.0);
    const double rate = rng.uniform(0.6, 1.3);
    const int n = 5 + static_cast<int>(rng.index(26));
    std::vector<double> clean, noisy, scaled;
    const double lambda = rng.uniform(0.01, 100.0);
    for (int i = 1; i <= n; ++i) {
      clean.push_back(amplitude * std::pow(rate, i));
      noisy.push_back(clean.back() * std::exp(0.01 * rng.normal()));
      scaled.push_back(lambda * clean.back());
    }
    const auto fc = convergence_coefficient(clean);
    const auto fn = convergence_coefficient(noisy);
    worst_clean = std::max(worst_clean, std::abs(fc.e_beta - rate));
    worst_noisy = std::max(worst_noisy, std::abs(fn.e_beta - rate));
    const auto id = std::to_string(fixture);
    c.expect(std::abs(fc.e_beta - rate) <= 1e-6, "noiseless fixture " + id + " e^beta " + fmt(fc.e_beta));
    c.expect(std::abs(fn.e_beta - rate) <= 0.01, "noisy fixture " + id + " e^beta " + fmt(fn.e_beta));

    std::vector<double> noisy_scaled;
    for (double d : noisy) noisy_scaled.push_back(lambda * d);
    c.expect(std::abs(convergence_coefficient(noisy_scaled).beta - fn.beta) <= 1e-12,
             "beta moved under scaling in fixture " + id);
    c.expect(std::abs(convergence_coefficient(scaled).beta - fc.beta) <= 1e-12,
             "beta moved under scaling in noiseless fixture " + id);
  }
  c.note("max error noiseless %.2e, noisy %.2e", worst_clean, worst_noisy);
}

void speed(Check& c) {
  Rng rng(707);
  for (int trial = 0; trial < 200; ++trial) {
    const double angle = rng.uniform(0.0, 2.0 * M_PI);
    const Point2 origin{rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)};
    std::vector<Point2> line;
    double t = 0.0;
    const int n = 2 + static_cast<int>(rng.index(20));
    for (int i = 0; i < n; ++i) {
      line.push_back({origin.x + t * std::cos(angle), origin.y + t * std::sin(angle)});
      t += rng.uniform(0.1, 3.0);
    }
    const double s = path_speed(line).speed;
    c.expect(s == 1.0, "collinear path " + std::to_string(trial) + " speed " + fmt(s) +
                           (s == 1.0 ? "" : " (1 - " + fmt(1.0 - s) + ")"));

    std::vector<Point2> loop;
    for (int i = 0; i < n; ++i) loop.push_back({rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)});
    loop.push_back(loop.front());
    const double l = path_speed(loop).speed;
    c.expect(l == 0.0, "closed loop " + std::to_string(trial) + " speed " + fmt(l));
  }
  for (int trial = 0; trial < 10000; ++trial) {
    std::vector<Point2> path;
    const int n = 2 + static_cast<int>(rng.index(30));
    for (int i = 0; i < n; ++i) path.push_back({rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)});
    const double s = path_speed(path).speed;
    c.expect(s >= 0.0 && s <= 1.0, "random path " + std::to_string(trial) + " speed " + fmt(s));
  }
}

DensityGrid random_grid(Rng& rng, double sparsity) {
  DensityGrid g;
  g.size = 10;
  g.bounds = {0.0, 10.0, 0.0, 10.0};
  g.values.resize(100);
  double total = 0.0;
  for (auto& v : g.values) {
    v = rng.uniform() < sparsity ? 0.0 : rng.uniform();
    total += v;
  }
  if (total == 0.0) {
    g.values[0] = 1.0;
    total = 1.0;
  }
  for (auto& v : g.values) v /= total;
  return g;
}

void intersection(Check& c) {
  Rng rng(808);
  double worst_self = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto a = random_grid(rng, 0.3);
    const auto b = random_grid(rng, 0.3);
    const auto id = std::to_string(trial);
    const double self = histogram_intersection(a, a);
    worst_self = std::max(worst_self, std::abs(self - 1.0));
    c.expect(std::abs(self - 1.0) <= 1e-12, "self intersection " + fmt(self) + " on grid " + id);
    c.expect(histogram_intersection(a, b) == histogram_intersection(b, a), "asymmetric on grid " + id);
    c.expect(histogram_intersection(a, b) == oracle::intersection(a, b), "oracle mismatch on grid " + id);

    // Split the cells between two grids to get disjoint supports.
    auto left = a, right = b;
    for (std::size_t i = 0; i < 100; ++i) (i % 2 == 0 ? right : left).values[i] = 0.0;
    c.expect(histogram_intersection(left, right) == 0.0, "disjoint grids overlap on trial " + id);
  }
  c.note("max |self-1| %.2e", worst_self);
}

struct SyntheticSplit {
  std::vector<FeatureTrajectory> train;
  std::vector<FeatureTrajectory> eval;
};

SyntheticSplit synthetic_split() {
  SyntheticConfig cfg;
  cfg.questions = 200;
  cfg.trajectories_per_question = 20;
  cfg.seed = 11;
  cfg.id_prefix = "train";
  SyntheticSplit s;
  s.train = synthetic_trajectories(cfg);
  cfg.seed = 12;
  cfg.id_prefix = "eval";
  s.eval = synthetic_trajectories(cfg);
  return s;
}

std::vector<LabeledSummary> labeled(const std::vector<FeatureTrajectory>& fts) {
  std::vector<LabeledSummary> out;
  for (const auto& f : fts) out.push_back({summarize_trajectory(f), f.is_correct});
  return out;
}

double eval_auc(const VerifierModel& m, const std::vector<FeatureTrajectory>& eval) {
  std::vector<double> scores;
  std::vector<bool> labels;
  for (const auto& f : eval) {
    scores.push_back(verifier_score(m, summarize_trajectory(f)));
    labels.push_back(f.is_correct);
  }
  return roc_auc(scores, labels);
}

void verifier(Check& c) {
  const auto t0 = Clock::now();
  const auto split = synthetic_split();
  const auto train = labeled(split.train);
  const auto model = train_verifier(train, ForestParams{});
  const double auc = eval_auc(model, split.eval);
  c.expect(auc >= 0.9, "held-out AUC " + fmt(auc));

  const std::vector<int> q10{10};
  const auto pts = evaluate_voting(split.eval, model, q10);
  c.expect(pts[0].weighted_accuracy >= pts[0].unweighted_accuracy,
           "weighted " + fmt(pts[0].weighted_accuracy) + " < unweighted " + fmt(pts[0].unweighted_accuracy));

  auto permuted = train;
  std::vector<bool> labels;
  for (const auto& r : permuted) labels.push_back(r.is_correct);
  Rng rng(909);
  rng.shuffle(labels.begin(), labels.end());
  for (std::size_t i = 0; i < permuted.size(); ++i) permuted[i].is_correct = labels[i];
  const double null_auc = eval_auc(train_verifier(permuted, ForestParams{}), split.eval);
  c.expect(null_auc >= 0.4 && null_auc <= 0.6, "permuted-label AUC " + fmt(null_auc));

  const double elapsed = seconds_since(t0);
  c.expect(elapsed < 120.0, "runtime " + fmt(elapsed) + " s");
  c.note("AUC %.3f, q=10 weighted %.3f vs %.3f, permuted AUC %.3f, %.1fs", auc, pts[0].weighted_accuracy,
         pts[0].unweighted_accuracy, null_auc, elapsed);
}

void scaling(Check& c) {
  const auto split = synthetic_split();
  const auto model = train_verifier(labeled(split.train), ForestParams{});
  std::vector<int> qs(20);
  std::iota(qs.begin(), qs.end(), 1);
  const auto pts = evaluate_voting(split.eval, model, qs);
  const double lift = pts.back().weighted_accuracy - pts.front().weighted_accuracy;
  c.expect(lift >= 0.05, "weighted accuracy gain q=1..20 " + fmt(lift));
  std::vector<double> x, gap;
  for (const auto& p : pts) {
    x.push_back(p.q);
    gap.push_back(p.weighted_accuracy - p.unweighted_accuracy);
  }
  const double slope = oracle::ols_slope(x, gap);
  c.expect(slope >= 0.0, "gap trend slope " + fmt(slope));
  c.note("weighted %.3f -> %.3f, gap at q=20 %.3f, gap slope %.2e", pts.front().weighted_accuracy,
         pts.back().weighted_accuracy, gap.back(), slope);
}

std::map<std::string, std::string> run_files(const fs::path& run_dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(run_dir)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), run_dir).generic_string();
    if (rel == "manifest.json" || rel == ".lock") continue;
    out[rel] = testing::slurp(e.path());
  }
  return out;
}

void smoke(Check& c) {
  testing::TempDir dir("acceptance-smoke");
  write_demo(dir / "demo", 10);
  std::vector<std::map<std::string, std::string>> files;
  std::vector<RunManifest> manifests;
  for (const std::string name : {"a", "b"}) {
    RunConfig cfg;
    load_config_file(cfg, dir / "demo" / "config.ini");
    cfg.run_dir = dir / ("run-" + name);
    cfg.cache_dir = dir / ("cache-" + name);
    const auto t0 = Clock::now();
    {
      Pipeline p(cfg);
      const auto& m = p.run_all();
      for (auto s : kStages) c.expect(m.complete(s), "run " + name + " stage " + std::string(to_string(s)));
    }
    const double elapsed = seconds_since(t0);
    c.expect(elapsed < 60.0, "run " + name + " took " + fmt(elapsed) + " s");
    c.note("run %s %.2fs", name.c_str(), elapsed);

    const auto& rd = cfg.run_dir;
    const auto svg = testing::slurp(rd / "landscape" / "landscape.svg");
    c.expect(svg.find("<svg") != std::string::npos && svg.find("</svg>") != std::string::npos, "landscape svg");
    const auto png = testing::slurp(rd / "landscape" / "landscape.png");
    c.expect(png.rfind("\x89PNG\r\n\x1a\n", 0) == 0, "landscape png signature");
    int grids = 0;
    for (const auto& e : fs::directory_iterator(rd / "landscape" / "grids")) {
      read_grid(e.path());
      ++grids;
    }
    c.expect(grids > 0, "no grid exports");
    try {
      load_verifier(rd / "verifier" / "model.json");
      const auto report = nlohmann::json::parse(testing::slurp(rd / "stats" / "report.json"));
      c.expect(report.is_object(), "report is not an object");
    } catch (const std::exception& e) {
      c.expect(false, std::string("artifact unreadable: ") + e.what());
    }
    c.expect(!testing::slurp(rd / "stats" / "report.txt").empty(), "empty report text");
    files.push_back(run_files(rd));
    manifests.push_back(load_manifest(rd));
  }
  c.expect(files[0] == files[1], "artifacts differ between identical runs");
  for (auto s : kStages) {
    c.expect(manifests[0].stages.at(s).artifacts == manifests[1].stages.at(s).artifacts,
             "artifact digests differ for stage " + std::string(to_string(s)));
  }

  RunConfig cfg;
  load_config_file(cfg, dir / "demo" / "config.ini");
  cfg.run_dir = dir / "run-a";
  cfg.cache_dir = dir / "cache-a";
  const auto before = testing::slurp(cfg.run_dir / "manifest.json");
  Pipeline again(cfg);
  again.run_all();
  c.expect(again.executed().empty(), "rerun executed stages");
  c.expect(run_files(cfg.run_dir) == files[0], "rerun changed artifacts");
  c.expect(testing::slurp(cfg.run_dir / "manifest.json") == before, "rerun changed the manifest");
  c.note("%zu files compared", files[0].size());
}

void self_consistency(Check& c) {
  Rng rng(1212);
  int ties = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(5));
    const int q = 1 + static_cast<int>(rng.index(20));
    std::vector<int> votes;
    for (int i = 0; i < q; ++i) votes.push_back(static_cast<int>(rng.index(static_cast<std::uint64_t>(k))));
    const double w = trial % 10 == 0 ? 0.0 : rng.uniform(0.01, 1.0);
    const std::vector<double> scores(votes.size(), w);
    const auto weighted = weighted_vote(votes, scores, k);
    const auto majority = majority_vote(votes, k);
    const int expected = oracle::plurality(votes);
    std::map<int, int> counts;
    for (int v : votes) ++counts[v];
    int top = 0, at_top = 0;
    for (const auto& [v, n] : counts) top = std::max(top, n);
    for (const auto& [v, n] : counts) at_top += n == top ? 1 : 0;
    ties += at_top > 1 ? 1 : 0;
    const auto id = std::to_string(trial);
    c.expect(weighted.chosen_index == majority.chosen_index, "weighted != majority in fixture " + id);
    c.expect(weighted.chosen_index == expected, "weighted != plurality oracle in fixture " + id);
  }
  c.note("%d fixtures with tied counts", ties);
}

}  // namespace

int main() {
  const std::vector<std::pair<std::string, std::function<void(Check&)>>> criteria{
      {"distance forms agree", distance_forms},
      {"normalized features sum to one, raw distances >= 1", normalization},
      {"anchor vectors and spacing", anchors},
      {"uncertainty and consistency exactness", metrics},
      {"t-SNE cluster purity and KL descent", tsne_quality},
      {"convergence coefficient recovery", convergence},
      {"path speed bounds", speed},
      {"histogram intersection", intersection},
      {"verifier on the synthetic generator", verifier},
      {"voting scales with q", scaling},
      {"end-to-end mock run", smoke},
      {"equal weights reduce to majority vote", self_consistency},
  };
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    Check c;
    const auto t0 = Clock::now();
    try {
      criteria[i].second(c);
    } catch (const std::exception& e) {
      c.expect(false, std::string("exception: ") + e.what());
    }
    const double elapsed = seconds_since(t0);
    failed += c.ok() ? 0 : 1;
    std::printf("[%s] %2zu %-52s %8.2fs  %s\n", c.ok() ? "PASS" : "FAIL", i + 1, criteria[i].first.c_str(), elapsed,
                c.summary().c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
  return failed == 0 ? 0 : 1;
}
