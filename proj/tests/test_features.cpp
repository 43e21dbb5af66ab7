#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include "lot/error.hpp"
#include "lot/features.hpp"
#include "lot/random.hpp"
#include "lot/trajectory.hpp"
#include "support.hpp"

using namespace lot;

namespace {

Trajectory make_traj(std::vector<std::string> thoughts, std::optional<int> predicted = std::nullopt) {
  Trajectory t;
  t.question_id = "q";
  t.prompt = "Question: pick.";
  for (std::size_t i = 0; i < thoughts.size(); ++i) t.thoughts.push_back({thoughts[i], static_cast<int>(i) + 1});
  t.predicted_index = predicted;
  t.answer_fallback = !predicted.has_value();
  return t;
}

const Question kTwo{"q", "pick", {"alpha", "beta"}, 0, {0, 1}};

}  // namespace

TEST_CASE("state distance examples") {
  const std::vector<double> certain{0.0, 0.0, 0.0};
  CHECK(state_distance(certain) == 1.0);
  const std::vector<double> two{std::log(0.5), std::log(0.25)};
  // Product 1/8 over two tokens: 8^(1/2).
  CHECK(state_distance(two) == doctest::Approx(std::pow(0.125, -0.5)).epsilon(1e-14));
  CHECK(state_distance(two) == doctest::Approx(2.828427).epsilon(1e-6));
  const std::vector<double> eighths(3, std::log(0.125));
  CHECK(state_distance(eighths) == doctest::Approx(8.0).epsilon(1e-14));
  CHECK_THROWS_AS(state_distance(std::vector<double>{}), ArgumentError);
}

TEST_CASE("log-probabilities are floored") {
  const std::vector<double> lp{-std::numeric_limits<double>::infinity()};
  const double d = state_distance(lp);
  CHECK(std::isfinite(d));
  CHECK(d == doctest::Approx(1e300).epsilon(1e-9));
}

TEST_CASE("thought perplexity") {
  ScoredContinuation s;
  s.token_logprobs = {0.0, 0.0};
  CHECK(thought_perplexity(s) == 1.0);
  s.token_logprobs = {std::log(0.2)};
  CHECK(thought_perplexity(s) == doctest::Approx(5.0).epsilon(1e-14));
  s.token_logprobs = {std::log(0.2), std::log(0.2)};
  CHECK(thought_perplexity(s) == doctest::Approx(5.0).epsilon(1e-14));
  s.token_logprobs.clear();
  CHECK_THROWS_AS(thought_perplexity(s), ArgumentError);
}

TEST_CASE("normalization examples") {
  auto eq = make_state_feature({3.0, 3.0}, 1);
  CHECK(eq.normalized == std::vector<double>{0.5, 0.5});
  auto f = make_state_feature({2.0, 6.0}, 1);
  CHECK(f.normalized[0] == 0.25);
  CHECK(f.normalized[1] == 0.75);
  auto scaled = make_state_feature({8.0, 24.0}, 1);
  CHECK(scaled.normalized == f.normalized);
  CHECK_THROWS_AS(make_state_feature({0.5, 2.0}, 1), ArgumentError);
  CHECK_THROWS_AS(make_state_feature({2.0}, 1), ArgumentError);
  CHECK_THROWS_AS(make_state_feature({2.0, std::nan("")}, 1), ArgumentError);
}

TEST_CASE("anchors") {
  CHECK(anchor_feature(0, 3).vector == std::vector<double>{0.0, 1.0 / 3, 1.0 / 3});
  CHECK(anchor_feature(1, 3).vector == std::vector<double>{1.0 / 3, 0.0, 1.0 / 3});
  CHECK(anchor_feature(1, 2).vector == std::vector<double>{0.5, 0.0});
  CHECK_THROWS_AS(anchor_feature(3, 3), ArgumentError);
  CHECK_THROWS_AS(anchor_feature(-1, 3), ArgumentError);
  CHECK_THROWS_AS(anchor_feature(0, 1), ArgumentError);
}

TEST_CASE("consistency") {
  auto a = make_state_feature({1.0, 9.0}, 1);
  auto b = make_state_feature({9.0, 1.0}, 2);
  CHECK(consistency(a, a) == 1);
  CHECK(consistency(a, b) == 0);
  auto c = make_state_feature({1.0, 2.0, 3.0}, 1);
  CHECK_THROWS_AS(consistency(a, c), ArgumentError);
  // Ties go to the lowest index.
  CHECK(argmin_index(std::vector<double>{0.3, 0.2, 0.2}) == 1);
}

TEST_CASE("uncertainty") {
  CHECK(uncertainty(std::vector<double>(4, 0.25)) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(uncertainty(std::vector<double>{1.0, 0.0}) == 0.0);
  const double oracle = -(0.25 * std::log(0.25) + 0.75 * std::log(0.75));
  CHECK(uncertainty(std::vector<double>{0.25, 0.75}) == doctest::Approx(oracle).epsilon(1e-15));
  CHECK(uncertainty(std::vector<double>{0.25, 0.75}) == doctest::Approx(0.562335).epsilon(1e-6));
  CHECK_THROWS_AS(uncertainty(std::vector<double>{0.5, 0.6}), ArgumentError);
  CHECK_THROWS_AS(uncertainty(std::vector<double>{1.5, -0.5}), ArgumentError);
}

TEST_CASE("uncertainty stays within [0, ln k] on random features") {
  Rng rng(3);
  for (int trial = 0; trial < 2000; ++trial) {
    const int k = 2 + static_cast<int>(rng.index(9));
    std::vector<double> raw;
    for (int j = 0; j < k; ++j) raw.push_back(1.0 + rng.uniform() * 50.0);
    const auto f = make_state_feature(raw, 1);
    const double h = uncertainty(f);
    CHECK(h >= 0.0);
    CHECK(h <= std::log(k) + 1e-12);
  }
}

TEST_CASE("single-state trajectory is self-consistent") {
  auto m = make_mock_model(MockScript{});
  Scorer scorer(*m);
  const auto ft = featurize_trajectory(make_traj({"The answer is A."}, 0), kTwo, scorer);
  CHECK(ft.n() == 1);
  CHECK(ft.consistency == std::vector<int>{1});
  CHECK(ft.thought_perplexities.size() == 1);
  CHECK(ft.is_correct);
}

TEST_CASE("a flip at the last state shows as inconsistency") {
  MockScript s;
  s.score_rules = {{"", "alpha", 0.8}, {"", "beta", 0.5}, {"Flip.", "beta", 0.95}};
  auto m = make_mock_model(s);
  Scorer scorer(*m);
  const auto ft = featurize_trajectory(make_traj({"Consider.", "Maybe.", "Flip."}), kTwo, scorer);
  REQUIRE(ft.n() == 3);
  CHECK(ft.consistency == std::vector<int>{0, 0, 1});
  CHECK(ft.features[0].raw[0] == doctest::Approx(1.25));
  CHECK(ft.features[0].raw[1] == doctest::Approx(2.0));
  CHECK(ft.features[2].raw[1] == doctest::Approx(1.0 / 0.95));
  // No declaration: the final-state argmin decides and is flagged.
  CHECK(ft.predicted_index == 1);
  CHECK(ft.answer_fallback);
  CHECK_FALSE(ft.is_correct);
  for (int i = 0; i < 3; ++i) CHECK(ft.features[static_cast<std::size_t>(i)].state_index == i + 1);
}

TEST_CASE("uniform scripted distances give maximal uncertainty") {
  MockScript s;
  s.default_probability = 0.3;
  auto m = make_mock_model(s);
  Scorer scorer(*m);
  const Question q{"q", "pick", {"w", "x", "y", "z"}, 0, {0, 1, 2, 3}};
  FeaturizeOptions opts;
  opts.include_initial_state = true;
  const auto ft = featurize_trajectory(make_traj({"One.", "Two.", "Three."}, 2), q, scorer, opts);
  for (double u : ft.uncertainty) CHECK(u == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  REQUIRE(ft.initial_state.has_value());
  CHECK(ft.initial_state->state_index == 0);
  CHECK(ft.n() == 3);
  // Thought 1 is scored against s_0, thought i against s_{i-1}.
  for (double p : ft.thought_perplexities) CHECK(p == doctest::Approx(1.0 / 0.3));
}

TEST_CASE("featurization uses the cache and is deterministic") {
  testing::TempDir dir("feat-cache");
  MockScript s;
  s.hash_spread = 1.0;
  auto m = make_mock_model(s);
  ScoreCache cache(dir.path(), "mock");
  Scorer scorer(*m, &cache);
  const auto t = make_traj({"a b.", "c d."}, 1);
  const auto first = featurize_trajectory(t, kTwo, scorer);
  const auto requests = m->score_requests();
  CHECK(requests == 2 * 2 + 2);
  const auto second = featurize_trajectory(t, kTwo, scorer);
  CHECK(m->score_requests() == requests);
  CHECK(to_json(first) == to_json(second));
}

TEST_CASE("featurization errors carry context") {
  MockScript s;
  s.supports_logprobs = false;
  auto m = make_mock_model(s);
  Scorer scorer(*m);
  try {
    featurize_trajectory(make_traj({"x."}, 0), kTwo, scorer);
    FAIL("expected a capability error");
  } catch (const CapabilityError& e) {
    CHECK(std::string(e.what()).find("question q") != std::string::npos);
  }
  const Question unordered{"q", "pick", {"a", "b"}, 1, {0, 1}};
  auto ok = make_mock_model(MockScript{});
  Scorer s2(*ok);
  CHECK_THROWS_AS(featurize_trajectory(make_traj({"x."}, 0), unordered, s2), ArgumentError);
}

TEST_CASE("feature matrix shape and anchor columns") {
  auto tiny = assemble_feature_trajectory("a", 0, {make_state_feature({1.0, 2.0}, 1)}, {1.0}, 0);
  const std::vector<FeatureTrajectory> one{tiny};
  const auto m1 = build_feature_matrix(one, 2);
  CHECK(m1.cols() == 3);
  CHECK(m1.k == 2);

  std::vector<FeatureTrajectory> two;
  for (int r = 0; r < 2; ++r) {
    std::vector<StateFeature> fs;
    for (int i = 1; i <= 3; ++i) fs.push_back(make_state_feature({1.0 * i, 2.0, 3.0, 4.0}, i));
    two.push_back(assemble_feature_trajectory("t" + std::to_string(r), r, fs, {1.0, 1.0, 1.0}, 0));
  }
  const auto m = build_feature_matrix(two, 4);
  CHECK(m.cols() == 10);
  for (int j = 0; j < 4; ++j) {
    CHECK(m.columns[static_cast<std::size_t>(6 + j)] == anchor_feature(j, 4).vector);
    CHECK(m.layout[static_cast<std::size_t>(6 + j)].anchor == j);
  }
  CHECK(m.layout[4] == ColumnRef{1, 2, -1});
  CHECK(m.columns[4] == two[1].features[1].normalized);
  CHECK_THROWS_AS(build_feature_matrix(two, 3), ArgumentError);
}

TEST_CASE("feature trajectories roundtrip") {
  testing::TempDir dir("feat-rt");
  auto ft = assemble_feature_trajectory("a", 2,
                                        {make_state_feature({1.1, 2.3}, 1), make_state_feature({3.0, 1.7}, 2)},
                                        {1.5, 2.5}, 1);
  ft.answer_fallback = true;
  ft.initial_state = make_state_feature({1.0, 1.0}, 0);
  write_feature_trajectories(dir / "f.jsonl", {ft});
  const auto back = read_feature_trajectories(dir / "f.jsonl");
  REQUIRE(back.size() == 1);
  CHECK(to_json(back[0]) == to_json(ft));
  CHECK(back[0].features[1].normalized == ft.features[1].normalized);
}
