#include "lot/landscape.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "lot/error.hpp"
#include "lot/io.hpp"

namespace lot {

using nlohmann::json;

int progress_bin(int i, int n, int bins) {
  if (n < 1 || bins < 1) throw ArgumentError("progress_bin needs n >= 1 and bins >= 1");
  if (i < 1 || i > n) throw ArgumentError("state index " + std::to_string(i) + " outside 1.." + std::to_string(n));
  // ceil(i * bins / n) - 1, in integers so fractions on bin edges are exact.
  const long long num = static_cast<long long>(i) * bins;
  return static_cast<int>((num + n - 1) / n) - 1;
}

std::vector<ProgressBin> assign_progress_bins(const FeatureTrajectory& ftraj, int bins) {
  if (bins < 1) throw ArgumentError("bins must be >= 1");
  std::vector<ProgressBin> out(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    out[static_cast<std::size_t>(b)].index = b;
    out[static_cast<std::size_t>(b)].lower = 100.0 * b / bins;
    out[static_cast<std::size_t>(b)].upper = 100.0 * (b + 1) / bins;
  }
  const int n = ftraj.n();
  for (int i = 1; i <= n; ++i) out[static_cast<std::size_t>(progress_bin(i, n, bins))].states.push_back(i);
  return out;
}

std::string_view to_string(CorrectnessClass c) {
  return c == CorrectnessClass::correct ? "correct" : "incorrect";
}

Bounds shared_bounds(std::span<const Point2> coords) {
  if (coords.empty()) throw ArgumentError("bounds of an empty point set");
  Bounds b{coords[0].x, coords[0].x, coords[0].y, coords[0].y};
  for (const auto& p : coords) {
    b.xmin = std::min(b.xmin, p.x);
    b.xmax = std::max(b.xmax, p.x);
    b.ymin = std::min(b.ymin, p.y);
    b.ymax = std::max(b.ymax, p.y);
  }
  const double w = b.xmax - b.xmin;
  const double h = b.ymax - b.ymin;
  const double extent = std::max(w, h);
  // A flat axis borrows the margin of the other one; a single point gets 0.5.
  const double fallback = extent > 0.0 ? 0.05 * extent : 0.5;
  const double mx = w > 0.0 ? 0.05 * w : fallback;
  const double my = h > 0.0 ? 0.05 * h : fallback;
  b.xmin -= mx;
  b.xmax += mx;
  b.ymin -= my;
  b.ymax += my;
  return b;
}

double DensityGrid::total_mass() const {
  double s = 0.0;
  for (double v : values) s += v;
  return s * cell_area();
}

std::optional<DensityGrid> density_map(std::span<const Point2> points, std::span<const double> weights,
                                       const Bounds& bounds, int grid_size, CorrectnessClass cls, int bin) {
  if (grid_size < 1) throw ArgumentError("grid size must be >= 1");
  if (!(bounds.xmax > bounds.xmin && bounds.ymax > bounds.ymin)) throw ArgumentError("empty bounds");
  if (weights.size() != points.size()) throw ArgumentError("weights and points differ in length");
  if (points.empty()) return std::nullopt;

  double wsum = 0.0;
  double wsq = 0.0;
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!(weights[i] > 0.0)) throw ArgumentError("density weights must be positive");
    wsum += weights[i];
    wsq += weights[i] * weights[i];
    mx += weights[i] * points[i].x;
    my += weights[i] * points[i].y;
  }
  mx /= wsum;
  my /= wsum;
  double vx = 0.0;
  double vy = 0.0;
  for (std::size_t i = 0; i < points.size(); ++i) {
    vx += weights[i] * (points[i].x - mx) * (points[i].x - mx);
    vy += weights[i] * (points[i].y - my) * (points[i].y - my);
  }
  vx /= wsum;
  vy /= wsum;

  DensityGrid g;
  g.size = grid_size;
  g.bounds = bounds;
  g.correctness = cls;
  g.bin = bin;
  const double n_eff = wsum * wsum / wsq;
  double h = std::sqrt(0.5 * (vx + vy)) * std::pow(n_eff, -1.0 / 6.0);
  // Floor at one cell so a tight cluster still lands mass on cell centres.
  const double cell = std::max(g.cell_width(), g.cell_height());
  if (!std::isfinite(h) || h < cell) h = std::max(cell, h > 0.0 && std::isfinite(h) ? h : 0.05 * cell * grid_size);
  g.bandwidth = h;

  const auto G = static_cast<std::size_t>(grid_size);
  g.values.assign(G * G, 0.0);
  std::vector<double> fx(G);
  std::vector<double> fy(G);
  const double inv2h2 = 1.0 / (2.0 * h * h);
  const double norm = 1.0 / (2.0 * std::numbers::pi * h * h);
  for (std::size_t i = 0; i < points.size(); ++i) {
    for (std::size_t c = 0; c < G; ++c) {
      const double cx = bounds.xmin + (static_cast<double>(c) + 0.5) * g.cell_width() - points[i].x;
      const double cy = bounds.ymin + (static_cast<double>(c) + 0.5) * g.cell_height() - points[i].y;
      fx[c] = std::exp(-cx * cx * inv2h2);
      fy[c] = std::exp(-cy * cy * inv2h2);
    }
    const double w = weights[i] / wsum * norm;
    for (std::size_t r = 0; r < G; ++r) {
      const double wy = w * fy[r];
      double* row = g.values.data() + r * G;
      for (std::size_t c = 0; c < G; ++c) row[c] += wy * fx[c];
    }
  }
  const double mass = g.total_mass();
  if (!(mass > 0.0)) throw DomainError("density grid has zero mass");
  for (auto& v : g.values) v /= mass;
  return g;
}

std::optional<DensityGrid> density_map(std::span<const Point2> points, const Bounds& bounds, int grid_size,
                                       CorrectnessClass cls, int bin) {
  std::vector<double> ones(points.size(), 1.0);
  return density_map(points, ones, bounds, grid_size, cls, bin);
}

void write_grid(const std::filesystem::path& path, const DensityGrid& grid) {
  json header{{"bounds", {grid.bounds.xmin, grid.bounds.xmax, grid.bounds.ymin, grid.bounds.ymax}},
              {"G", grid.size},
              {"bandwidth", grid.bandwidth},
              {"class", to_string(grid.correctness)},
              {"bin", grid.bin}};
  std::string out = "# " + header.dump() + "\n";
  for (int r = 0; r < grid.size; ++r) {
    for (int c = 0; c < grid.size; ++c) {
      if (c > 0) out += ' ';
      out += format_double(grid.at(r, c));
    }
    out += '\n';
  }
  write_file_atomic(path, out);
}

DensityGrid read_grid(const std::filesystem::path& path) {
  std::istringstream in(read_file(path));
  std::string line;
  if (!std::getline(in, line) || line.rfind("# ", 0) != 0) throw ParseError("missing grid header", 1);
  DensityGrid g;
  try {
    const auto header = json::parse(line.substr(2));
    const auto b = header.at("bounds").get<std::vector<double>>();
    if (b.size() != 4) throw ParseError("bounds must have 4 entries", 1);
    g.bounds = {b[0], b[1], b[2], b[3]};
    g.size = header.at("G").get<int>();
    g.bandwidth = header.at("bandwidth").get<double>();
    g.correctness = header.at("class").get<std::string>() == "correct" ? CorrectnessClass::correct
                                                                      : CorrectnessClass::incorrect;
    g.bin = header.at("bin").get<int>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("grid header: ") + e.what(), 1);
  }
  g.values.reserve(static_cast<std::size_t>(g.size) * static_cast<std::size_t>(g.size));
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream row(line);
    std::string tok;
    while (row >> tok) {
      try {
        g.values.push_back(std::stod(tok));
      } catch (const std::exception&) {
        throw ParseError("bad grid value '" + tok + "'", line_no);
      }
    }
  }
  if (g.values.size() != static_cast<std::size_t>(g.size) * static_cast<std::size_t>(g.size)) {
    throw ParseError("grid has " + std::to_string(g.values.size()) + " values", line_no);
  }
  return g;
}

LandscapeBundle build_landscape(const Embedding2D& emb, std::span<const FeatureTrajectory> ftrajs, int bins,
                                int grid_size) {
  if (bins < 1) throw ArgumentError("bins must be >= 1");
  if (emb.coords.size() != emb.layout.size()) throw ArgumentError("embedding has no column layout");
  LandscapeBundle bundle;
  bundle.bins = bins;
  bundle.k = ftrajs.empty() ? 0 : ftrajs.front().k;
  bundle.bounds = shared_bounds(emb.coords);
  bundle.anchors.assign(static_cast<std::size_t>(bundle.k), Point2{});

  std::vector<std::array<std::vector<Point2>, 2>> members(static_cast<std::size_t>(bins));
  for (std::size_t c = 0; c < emb.coords.size(); ++c) {
    const auto& ref = emb.layout[c];
    if (ref.is_anchor()) {
      if (ref.anchor < bundle.k) bundle.anchors[static_cast<std::size_t>(ref.anchor)] = emb.coords[c];
      continue;
    }
    if (ref.trajectory < 0 || static_cast<std::size_t>(ref.trajectory) >= ftrajs.size()) {
      throw ArgumentError("embedding column references unknown trajectory");
    }
    const auto& ft = ftrajs[static_cast<std::size_t>(ref.trajectory)];
    if (ref.state < 1) continue;
    const int b = progress_bin(ref.state, ft.n(), bins);
    const std::size_t cls = ft.is_correct ? 0 : 1;
    members[static_cast<std::size_t>(b)][cls].push_back(emb.coords[c]);
  }
  bundle.grids.resize(static_cast<std::size_t>(bins));
  for (int b = 0; b < bins; ++b) {
    for (std::size_t cls = 0; cls < 2; ++cls) {
      bundle.grids[static_cast<std::size_t>(b)][cls] =
          density_map(members[static_cast<std::size_t>(b)][cls], bundle.bounds, grid_size,
                      cls == 0 ? CorrectnessClass::correct : CorrectnessClass::incorrect, b);
    }
  }
  return bundle;
}

std::vector<BinMetrics> aggregate_metrics_by_bin(std::span<const FeatureTrajectory> ftrajs, int bins) {
  if (bins < 1) throw ArgumentError("bins must be >= 1");
  std::vector<std::array<BinMetrics, 2>> acc(static_cast<std::size_t>(bins));
  for (const auto& ft : ftrajs) {
    const std::size_t cls = ft.is_correct ? 0 : 1;
    for (int i = 1; i <= ft.n(); ++i) {
      auto& m = acc[static_cast<std::size_t>(progress_bin(i, ft.n(), bins))][cls];
      const auto s = static_cast<std::size_t>(i - 1);
      ++m.count;
      m.consistency += ft.consistency[s];
      m.uncertainty += ft.uncertainty[s];
      m.perplexity += ft.thought_perplexities[s];
    }
  }
  std::vector<BinMetrics> out;
  for (int b = 0; b < bins; ++b) {
    for (std::size_t cls = 0; cls < 2; ++cls) {
      auto m = acc[static_cast<std::size_t>(b)][cls];
      if (m.count == 0) continue;
      const auto n = static_cast<double>(m.count);
      m.bin = b;
      m.correctness = cls == 0 ? CorrectnessClass::correct : CorrectnessClass::incorrect;
      m.consistency /= n;
      m.uncertainty /= n;
      m.perplexity /= n;
      out.push_back(m);
    }
  }
  return out;
}

std::string metrics_table_csv(const std::vector<BinMetrics>& rows) {
  std::string out = "bin,class,count,consistency,uncertainty,perplexity\n";
  for (const auto& r : rows) {
    out += std::to_string(r.bin) + "," + std::string(to_string(r.correctness)) + "," +
           std::to_string(r.count) + "," + format_double(r.consistency) + "," +
           format_double(r.uncertainty) + "," + format_double(r.perplexity) + "\n";
  }
  return out;
}

}  // namespace lot
