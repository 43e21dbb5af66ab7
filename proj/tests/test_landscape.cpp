#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "lot/error.hpp"
#include "lot/features.hpp"
#include "lot/landscape.hpp"
#include "lot/random.hpp"
#include "lot/stats.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace lot;

namespace {

FeatureTrajectory uniform_traj(const std::string& id, int n, int k, bool correct) {
  std::vector<StateFeature> fs;
  for (int i = 1; i <= n; ++i) fs.push_back(make_state_feature(std::vector<double>(static_cast<std::size_t>(k), 2.0), i));
  return assemble_feature_trajectory(id, 0, fs, std::vector<double>(static_cast<std::size_t>(n), 3.0), correct ? 0 : 1);
}

// Index of the grid cell holding the largest value.
std::pair<int, int> peak_cell(const DensityGrid& g) {
  const auto it = std::max_element(g.values.begin(), g.values.end());
  const auto idx = static_cast<int>(it - g.values.begin());
  return {idx / g.size, idx % g.size};
}

int count(const std::string& hay, const std::string& needle) {
  int n = 0;
  for (auto pos = hay.find(needle); pos != std::string::npos; pos = hay.find(needle, pos + 1)) ++n;
  return n;
}

}  // namespace

TEST_CASE("t-SNE separates well-spaced clusters") {
  const auto c = oracle::gaussian_clusters(21);
  TsneParams p;
  TsneDiagnostics diag;
  const auto y = tsne(c.points, p, &diag);
  REQUIRE(y.size() == 150);
  CHECK(oracle::knn_purity(y, c.labels, 10) >= 0.9);
  CHECK(diag.final_kl < diag.initial_kl);
  CHECK(diag.effective_perplexity == 30.0);
  CHECK(diag.max_entropy_error < 1e-4);
}

TEST_CASE("t-SNE is deterministic per seed") {
  const auto c = oracle::gaussian_clusters(4, 10);
  TsneParams p;
  p.iterations = 300;
  const auto a = tsne(c.points, p);
  const auto b = tsne(c.points, p);
  CHECK(a == b);
  p.seed = 8;
  CHECK_FALSE(tsne(c.points, p) == a);
}

TEST_CASE("t-SNE caps the perplexity for small inputs and handles identical points") {
  const std::vector<std::vector<double>> same(12, std::vector<double>{0.25, 0.25, 0.5});
  TsneParams p;
  p.iterations = 250;
  TsneDiagnostics diag;
  const auto y = tsne(same, p, &diag);
  CHECK(diag.effective_perplexity == doctest::Approx(11.0 / 3.0));
  for (const auto& pt : y) {
    CHECK(std::isfinite(pt.x));
    CHECK(std::isfinite(pt.y));
  }
}

TEST_CASE("t-SNE input validation") {
  TsneParams p;
  CHECK_THROWS_AS(tsne({{1.0}, {2.0}, {3.0}}, p), SizeError);
  CHECK_THROWS_AS(tsne({{1.0}, {2.0}, {3.0}, {std::nan("")}}, p), DomainError);
  p.iterations = 10;
  CHECK_THROWS_AS(tsne({{1.0}, {2.0}, {3.0}, {4.0}}, p), ConfigError);
  FeatureMatrix small;
  small.k = 2;
  small.columns.assign(5, {0.5, 0.5});
  CHECK_THROWS_AS(tsne_embed(small, TsneParams{}), SizeError);
}

TEST_CASE("PCA on a line has no second-component variance") {
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 10; ++i) pts.push_back({1.0 * i, 2.0 * i, -1.0 * i});
  const auto r = pca(pts);
  CHECK(r.explained_variance_ratio(0) == doctest::Approx(1.0));
  CHECK(r.eigenvalues[1] == doctest::Approx(0.0).epsilon(1e-12).scale(1.0));
  for (const auto& c : r.coords) CHECK(std::abs(c.y) < 1e-9);
  // The largest loading of each component is positive.
  CHECK(r.components[0][1] > 0.0);
}

TEST_CASE("PCA spectrum is rotation invariant") {
  Rng rng(5);
  std::vector<std::vector<double>> pts;
  for (int i = 0; i < 40; ++i) pts.push_back({rng.normal() * 3.0, rng.normal(), rng.normal() * 0.2});
  const double c = std::cos(0.7), s = std::sin(0.7);
  auto rotated = pts;
  for (auto& p : rotated) p = {c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]};
  const auto a = pca(pts);
  const auto b = pca(rotated);
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a.explained_variance_ratio(i) == doctest::Approx(b.explained_variance_ratio(i)).epsilon(1e-10));
  }
}

TEST_CASE("PCA of two points preserves their separation") {
  const auto r = pca({{0.0, 0.0, 1.0}, {3.0, 4.0, 1.0}});
  const double dx = r.coords[0].x - r.coords[1].x;
  const double dy = r.coords[0].y - r.coords[1].y;
  CHECK(std::sqrt(dx * dx + dy * dy) == doctest::Approx(5.0));
  CHECK_THROWS_AS(pca({{1.0, 2.0}, {1.0, 2.0}}), DegenerateError);
}

TEST_CASE("progress bins") {
  auto bins_of = [](int n) {
    std::vector<int> out;
    for (int i = 1; i <= n; ++i) out.push_back(progress_bin(i, n, 5));
    return out;
  };
  CHECK(bins_of(5) == std::vector<int>{0, 1, 2, 3, 4});
  CHECK(bins_of(1) == std::vector<int>{4});
  CHECK(bins_of(10) == std::vector<int>{0, 0, 1, 1, 2, 2, 3, 3, 4, 4});
  CHECK(bins_of(3) == std::vector<int>{1, 3, 4});

  const auto assigned = assign_progress_bins(uniform_traj("t", 10, 2, true), 5);
  for (const auto& b : assigned) CHECK(b.states.size() == 2);
  CHECK(assigned[4].lower == 80.0);
  CHECK(assigned[4].upper == 100.0);
  CHECK_THROWS_AS(progress_bin(0, 5, 5), ArgumentError);
  CHECK_THROWS_AS(progress_bin(1, 5, 0), ArgumentError);
}

TEST_CASE("progress bins match the fraction rule on every (i, n, B)") {
  for (int bins = 1; bins <= 10; ++bins) {
    for (int n = 1; n <= 40; ++n) {
      for (int i = 1; i <= n; ++i) {
        const int b = progress_bin(i, n, bins);
        const double f = static_cast<double>(i) / n;
        // Left-open, right-closed: b/B < f <= (b+1)/B, checked in integers.
        CHECK(b * n < i * bins);
        CHECK(i * bins <= (b + 1) * n);
        CHECK(f > 0.0);
      }
    }
  }
}

TEST_CASE("shared bounds pad the extent") {
  const std::vector<Point2> pts{{0.0, 0.0}, {10.0, 2.0}};
  const auto b = shared_bounds(pts);
  CHECK(b == Bounds{-0.5, 10.5, -0.1, 2.1});
  const std::vector<Point2> flat{{0.0, 1.0}, {4.0, 1.0}};
  const auto f = shared_bounds(flat);
  CHECK(f.ymax - f.ymin == doctest::Approx(0.4));
  const std::vector<Point2> single{{2.0, 3.0}};
  CHECK(shared_bounds(single) == Bounds{1.5, 2.5, 2.5, 3.5});
}

TEST_CASE("a single point gives a unimodal grid peaked at it") {
  const Bounds b{0.0, 10.0, 0.0, 10.0};
  const std::vector<Point2> pt{{2.3, 7.6}};
  const auto g = density_map(pt, b, 20, CorrectnessClass::correct);
  REQUIRE(g.has_value());
  CHECK(g->total_mass() == doctest::Approx(1.0).epsilon(1e-12));
  const auto [row, col] = peak_cell(*g);
  CHECK(row == 15);  // 7.6 / 0.5
  CHECK(col == 4);   // 2.3 / 0.5
  // Values fall off monotonically away from the peak along its row.
  for (int c = col + 1; c + 1 < g->size; ++c) CHECK(g->at(row, c) >= g->at(row, c + 1));
  for (int c = col; c > 0; --c) CHECK(g->at(row, c) >= g->at(row, c - 1));
}

TEST_CASE("density grids: identical inputs, multiplicity and empty sets") {
  Rng rng(8);
  std::vector<Point2> pts;
  for (int i = 0; i < 30; ++i) pts.push_back({rng.normal(), rng.normal()});
  const auto b = shared_bounds(pts);
  const auto a = density_map(pts, b, 30, CorrectnessClass::correct);
  const auto a2 = density_map(pts, b, 30, CorrectnessClass::incorrect);
  CHECK(a->values == a2->values);
  CHECK(histogram_intersection(*a, *a2) == doctest::Approx(1.0).epsilon(1e-12));

  auto doubled = pts;
  doubled.insert(doubled.end(), pts.begin(), pts.end());
  const auto d = density_map(doubled, b, 30, CorrectnessClass::correct);
  // Duplicates raise the sample size, so the bandwidth shrinks by 2^(-1/6).
  CHECK(d->bandwidth == doctest::Approx(a->bandwidth * std::pow(2.0, -1.0 / 6.0)).epsilon(1e-12));
  CHECK(d->total_mass() == doctest::Approx(1.0).epsilon(1e-12));
  const std::vector<double> twos(pts.size(), 2.0);
  const auto w = density_map(pts, twos, b, 30, CorrectnessClass::correct);
  for (std::size_t i = 0; i < a->values.size(); ++i) {
    CHECK(w->values[i] == doctest::Approx(a->values[i]).epsilon(1e-12));
  }

  CHECK_FALSE(density_map(std::vector<Point2>{}, b, 30, CorrectnessClass::correct).has_value());
}

TEST_CASE("grid files roundtrip exactly") {
  testing::TempDir dir("grid");
  Rng rng(2);
  std::vector<Point2> pts;
  for (int i = 0; i < 12; ++i) pts.push_back({rng.uniform(), rng.uniform()});
  auto g = *density_map(pts, shared_bounds(pts), 17, CorrectnessClass::incorrect, 3);
  write_grid(dir / "g.grid", g);
  const auto back = read_grid(dir / "g.grid");
  CHECK(back.values == g.values);
  CHECK(back.bounds == g.bounds);
  CHECK(back.bandwidth == g.bandwidth);
  CHECK(back.size == 17);
  CHECK(back.bin == 3);
  CHECK(back.correctness == CorrectnessClass::incorrect);
  testing::write_text(dir / "bad.grid", "no header\n");
  CHECK_THROWS_AS(read_grid(dir / "bad.grid"), ParseError);
}

TEST_CASE("embeddings roundtrip through csv") {
  testing::TempDir dir("emb");
  Embedding2D e;
  e.coords = {{0.1, -2.5}, {1.0 / 3.0, 4.0}, {5.0, 6.0}};
  e.layout = {{0, 1, -1}, {0, 2, -1}, {-1, -1, 0}};
  e.projector = "tsne";
  e.seed = 7;
  write_embedding(dir / "e.csv", e);
  const auto back = read_embedding(dir / "e.csv");
  CHECK(back.coords == e.coords);
  CHECK(back.layout == e.layout);
  CHECK(back.projector == "tsne");
  CHECK(back.seed == 7);
}

TEST_CASE("landscape bundle and rendering") {
  testing::TempDir dir("render");
  std::vector<FeatureTrajectory> ft;
  Rng rng(1);
  for (int t = 0; t < 6; ++t) {
    std::vector<StateFeature> fs;
    for (int i = 1; i <= 5; ++i) fs.push_back(make_state_feature({1.0 + rng.uniform() * 3, 1.0 + rng.uniform() * 3, 2.0}, i));
    ft.push_back(assemble_feature_trajectory("q" + std::to_string(t), 0, fs, std::vector<double>(5, 2.0), 0));
  }
  const auto F = build_feature_matrix(ft, 3);
  const auto emb = pca_embed(F);
  const auto bundle = build_landscape(emb, ft, 5, 40);
  REQUIRE(bundle.grids.size() == 5);
  CHECK(bundle.anchors.size() == 3);
  CHECK(bundle.anchors[1] == emb.coords[emb.coords.size() - 2]);
  for (const auto& cell : bundle.grids) {
    CHECK(cell[0].has_value());
    CHECK_FALSE(cell[1].has_value());
  }

  const auto svg = render_landscape_svg(bundle, "demo & test");
  CHECK(count(svg, "<g class=\"panel\"") == 10);
  CHECK(count(svg, "class=\"empty\"") == 5);
  CHECK(svg.find("no incorrect states") != std::string::npos);
  CHECK(svg.find("0-20% states") != std::string::npos);
  CHECK(svg.find("80-100% states") != std::string::npos);
  CHECK(svg.find("demo &amp; test") != std::string::npos);
  CHECK(count(svg, "<path") > 0);

  const auto files = render_landscape(bundle, dir / "out", "t");
  CHECK(files.grids.size() == 5);
  const auto png = testing::slurp(files.png);
  REQUIRE(png.size() > 8);
  CHECK(png.substr(1, 3) == "PNG");
  for (std::size_t b = 0; b < files.grids.size(); ++b) {
    CHECK(read_grid(files.grids[b]).values == bundle.grids[b][0]->values);
  }

  testing::write_text(dir / "blocker", "file");
  CHECK_THROWS_AS(render_landscape(bundle, dir / "blocker" / "sub", "t"), Error);
}

TEST_CASE("metrics by bin") {
  SUBCASE("uniform features give ln k uncertainty everywhere") {
    std::vector<FeatureTrajectory> ft{uniform_traj("a", 7, 4, true), uniform_traj("b", 3, 4, false)};
    for (const auto& m : aggregate_metrics_by_bin(ft, 5)) {
      CHECK(m.uncertainty == doctest::Approx(std::log(4.0)));
      CHECK(m.perplexity == doctest::Approx(3.0));
    }
  }
  SUBCASE("hand-computed means") {
    // a: n=2, states favour 1 then 0 (consistency 0, 1); b: n=1 incorrect.
    auto a = assemble_feature_trajectory("a", 0,
                                         {make_state_feature({3.0, 1.0}, 1), make_state_feature({1.0, 3.0}, 2)},
                                         {2.0, 4.0}, 0);
    auto b = assemble_feature_trajectory("b", 0, {make_state_feature({1.0, 1.0}, 1)}, {6.0}, 1);
    const std::vector<FeatureTrajectory> ft{a, b};
    const auto rows = aggregate_metrics_by_bin(ft, 2);
    REQUIRE(rows.size() == 3);
    CHECK(rows[0].bin == 0);
    CHECK(rows[0].correctness == CorrectnessClass::correct);
    CHECK(rows[0].count == 1);
    CHECK(rows[0].consistency == 0.0);
    CHECK(rows[0].perplexity == 2.0);
    CHECK(rows[1].bin == 1);
    CHECK(rows[1].correctness == CorrectnessClass::correct);
    CHECK(rows[1].consistency == 1.0);
    const double h = -(0.25 * std::log(0.25) + 0.75 * std::log(0.75));
    CHECK(rows[1].uncertainty == doctest::Approx(h));
    CHECK(rows[2].correctness == CorrectnessClass::incorrect);
    CHECK(rows[2].uncertainty == doctest::Approx(std::log(2.0)));
    CHECK(rows[2].perplexity == 6.0);

    const auto csv = metrics_table_csv(rows);
    CHECK(csv.rfind("bin,class,count,consistency,uncertainty,perplexity\n", 0) == 0);
    CHECK(csv.find("1,incorrect,1,1,") != std::string::npos);
    const auto svg = render_metrics_svg(rows, 2);
    CHECK(svg.find("<svg") == 0);
  }
  SUBCASE("the final bin of every trajectory carries its forced consistency") {
    Rng rng(9);
    std::vector<FeatureTrajectory> ft;
    for (int t = 0; t < 20; ++t) {
      const int n = 1 + static_cast<int>(rng.index(9));
      std::vector<StateFeature> fs;
      for (int i = 1; i <= n; ++i) fs.push_back(make_state_feature({1.0 + rng.uniform(), 1.0 + rng.uniform()}, i));
      ft.push_back(assemble_feature_trajectory("t", 0, fs, std::vector<double>(static_cast<std::size_t>(n), 1.0), 0));
    }
    const auto rows = aggregate_metrics_by_bin(ft, 5);
    CHECK(rows.back().bin == 4);
    CHECK(rows.back().consistency > 0.0);
  }
}
