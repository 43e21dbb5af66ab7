#include "lot/stats.hpp"

#include <boost/math/distributions/students_t.hpp>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>

#include "lot/error.hpp"

namespace lot {

RegressionFit convergence_coefficient(std::span<const double> distances) {
  const std::size_t n = distances.size();
  if (n < 3) throw SizeError("convergence fit needs at least 3 distances, got " + std::to_string(n));
  std::vector<double> ly(n);
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(distances[i] > 0.0) || !std::isfinite(distances[i])) {
      throw DomainError("convergence fit needs finite positive distances");
    }
    ly[i] = std::log(distances[i]);
    mx += static_cast<double>(i + 1);
    my += ly[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0.0;
  double sxx = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double dx = static_cast<double>(i + 1) - mx;
    sxy += dx * (ly[i] - my);
    sxx += dx * dx;
  }
  RegressionFit fit;
  fit.beta = sxy / sxx;
  fit.alpha = my - fit.beta * mx;
  fit.e_beta = std::exp(fit.beta);
  for (std::size_t i = 0; i < n; ++i) {
    const double r = ly[i] - fit.alpha - fit.beta * static_cast<double>(i + 1);
    fit.residual_sse += r * r;
  }
  return fit;
}

SpeedResult path_speed(std::span<const Point2> coords) {
  if (coords.size() < 2) throw SizeError("path speed needs at least 2 points");
  SpeedResult out;
  for (std::size_t i = 1; i < coords.size(); ++i) {
    out.path_length += std::hypot(coords[i].x - coords[i - 1].x, coords[i].y - coords[i - 1].y);
  }
  out.displacement = std::hypot(coords.back().x - coords.front().x, coords.back().y - coords.front().y);
  if (out.path_length == 0.0) {
    out.degenerate = true;
    return out;
  }
  // The segment sum carries up to ~n ulps of rounding; a displacement within
  // that of the path length is a straight path.
  const double slack = 4.0 * static_cast<double>(coords.size()) * std::numeric_limits<double>::epsilon();
  out.speed = out.displacement >= out.path_length * (1.0 - slack) ? 1.0 : out.displacement / out.path_length;
  return out;
}

double histogram_intersection(const DensityGrid& a, const DensityGrid& b) {
  if (a.size != b.size || !(a.bounds == b.bounds) || a.values.size() != b.values.size()) {
    throw ArgumentError("histogram intersection needs grids with the same shape and bounds");
  }
  double s = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) s += std::min(a.values[i], b.values[i]);
  return s * a.cell_area();
}

namespace {

double two_sided_t_p(double t, double df) {
  if (std::isinf(t)) return 0.0;
  const boost::math::students_t dist(df);
  return std::min(1.0, 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t))));
}

std::pair<double, double> mean_var(std::span<const double> v) {
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, s / static_cast<double>(v.size() - 1)};
}

std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

}  // namespace

Correlation pearson_correlation(std::span<const double> x, std::span<const double> y) {
  if (x.size() != y.size()) throw ArgumentError("correlation inputs differ in length");
  const std::size_t n = x.size();
  if (n < 3) throw SizeError("correlation needs at least 3 pairs");
  double mx = 0.0;
  double my = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxx = 0.0;
  double syy = 0.0;
  double sxy = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    sxx += (x[i] - mx) * (x[i] - mx);
    syy += (y[i] - my) * (y[i] - my);
    sxy += (x[i] - mx) * (y[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw DegenerateError("correlation of a constant series");
  Correlation c;
  c.n = n;
  c.r = std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
  const double df = static_cast<double>(n - 2);
  const double denom = 1.0 - c.r * c.r;
  c.p_value = denom <= 0.0 ? 0.0 : two_sided_t_p(c.r * std::sqrt(df / denom), df);
  return c;
}

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw SizeError("Welch test needs at least 2 values per group");
  const auto [ma, va] = mean_var(a);
  const auto [mb, vb] = mean_var(b);
  const double sa = va / static_cast<double>(a.size());
  const double sb = vb / static_cast<double>(b.size());
  WelchResult w;
  if (sa + sb == 0.0) {
    w.t = ma == mb ? 0.0 : std::copysign(INFINITY, ma - mb);
    w.df = static_cast<double>(a.size() + b.size() - 2);
    w.p_value = ma == mb ? 1.0 : 0.0;
    return w;
  }
  w.t = (ma - mb) / std::sqrt(sa + sb);
  w.df = (sa + sb) * (sa + sb) /
         (sa * sa / static_cast<double>(a.size() - 1) + sb * sb / static_cast<double>(b.size() - 1));
  w.p_value = two_sided_t_p(w.t, w.df);
  return w;
}

double group_difference_test(std::span<const double> a, std::span<const double> b) {
  return welch_t_test(a, b).p_value;
}

std::string_view to_string(DistanceMode m) {
  switch (m) {
    case DistanceMode::final_state: return "final-state";
    case DistanceMode::correct_component: return "correct-component";
    case DistanceMode::embedded: return "embedded";
  }
  return "final-state";
}

DistanceMode parse_distance_mode(std::string_view s) {
  if (s == "final-state") return DistanceMode::final_state;
  if (s == "correct-component") return DistanceMode::correct_component;
  if (s == "embedded") return DistanceMode::embedded;
  throw ConfigError("unknown distance mode '" + std::string(s) + "' (final-state|correct-component|embedded)");
}

std::vector<double> convergence_distances(const FeatureTrajectory& ftraj, DistanceMode mode,
                                          std::span<const Point2> coords) {
  std::vector<double> d;
  const auto n = static_cast<std::size_t>(ftraj.n());
  switch (mode) {
    case DistanceMode::correct_component:
      for (const auto& f : ftraj.features) d.push_back(f.normalized[0]);
      break;
    case DistanceMode::final_state: {
      const auto& last = ftraj.features.back().normalized;
      for (std::size_t i = 0; i + 1 < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < last.size(); ++j) {
          const double diff = ftraj.features[i].normalized[j] - last[j];
          s += diff * diff;
        }
        d.push_back(std::sqrt(s));
      }
      break;
    }
    case DistanceMode::embedded:
      if (coords.size() != n) throw ArgumentError("embedded distances need one coordinate per state");
      for (std::size_t i = 0; i + 1 < n; ++i) {
        d.push_back(std::hypot(coords[i].x - coords[n - 1].x, coords[i].y - coords[n - 1].y));
      }
      break;
  }
  return d;
}

ObservationReport observation_report(std::span<const FeatureTrajectory> ftrajs, const Embedding2D& emb,
                                     const ReportOptions& opts) {
  if (ftrajs.empty()) throw SizeError("report over no trajectories");
  if (emb.coords.size() != emb.layout.size()) throw ArgumentError("embedding has no column layout");
  ObservationReport rep;
  rep.options = opts;
  rep.trajectories = ftrajs.size();

  std::vector<std::vector<Point2>> paths(ftrajs.size());
  for (std::size_t c = 0; c < emb.coords.size(); ++c) {
    const auto& ref = emb.layout[c];
    if (ref.is_anchor()) continue;
    if (ref.trajectory < 0 || static_cast<std::size_t>(ref.trajectory) >= ftrajs.size()) {
      throw ArgumentError("embedding column references unknown trajectory");
    }
    paths[static_cast<std::size_t>(ref.trajectory)].push_back(emb.coords[c]);
  }

  std::array<std::vector<double>, 2> e_beta;
  std::array<std::vector<double>, 2> speeds;
  std::array<std::size_t, 2> counts{0, 0};
  std::vector<double> all_speeds;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> per_question;  // speeds, correct
  for (std::size_t t = 0; t < ftrajs.size(); ++t) {
    const auto& ft = ftrajs[t];
    const std::size_t cls = ft.is_correct ? 0 : 1;
    ++counts[cls];
    if (paths[t].size() != static_cast<std::size_t>(ft.n())) {
      throw ArgumentError("embedding does not cover trajectory " + ft.question_id);
    }
    auto d = convergence_distances(ft, opts.distance, paths[t]);
    if (d.size() >= 3) {
      for (auto& v : d) v = std::max(v, opts.distance_floor);
      e_beta[cls].push_back(convergence_coefficient(d).e_beta);
    }
    auto& q = per_question[ft.question_id];
    q.second.push_back(ft.is_correct ? 1.0 : 0.0);
    if (paths[t].size() >= 2) {
      const double s = path_speed(paths[t]).speed;
      speeds[cls].push_back(s);
      all_speeds.push_back(s);
      q.first.push_back(s);
    }
  }
  rep.questions = per_question.size();
  rep.accuracy = static_cast<double>(counts[0]) / static_cast<double>(ftrajs.size());
  auto fill = [&](ClassStats& cs, std::size_t cls) {
    cs.trajectories = counts[cls];
    cs.fitted = e_beta[cls].size();
    cs.mean_e_beta = mean_of(e_beta[cls]);
    cs.mean_speed = mean_of(speeds[cls]);
  };
  fill(rep.correct, 0);
  fill(rep.incorrect, 1);
  rep.mean_speed = mean_of(all_speeds);

  // Density overlap between the classes, pooled and per progress bin.
  const Bounds bounds = shared_bounds(emb.coords);
  std::array<std::vector<Point2>, 2> pooled;
  for (std::size_t t = 0; t < ftrajs.size(); ++t) {
    auto& dst = pooled[ftrajs[t].is_correct ? 0 : 1];
    dst.insert(dst.end(), paths[t].begin(), paths[t].end());
  }
  const auto gc = density_map(pooled[0], bounds, opts.grid_size, CorrectnessClass::correct);
  const auto gi = density_map(pooled[1], bounds, opts.grid_size, CorrectnessClass::incorrect);
  if (gc && gi) rep.intersection_all = histogram_intersection(*gc, *gi);
  const auto bundle = build_landscape(emb, ftrajs, opts.bins, opts.grid_size);
  for (const auto& cell : bundle.grids) {
    rep.intersection_by_bin.push_back(cell[0] && cell[1] ? std::optional(histogram_intersection(*cell[0], *cell[1]))
                                                         : std::nullopt);
  }

  if (e_beta[0].size() >= 2 && e_beta[1].size() >= 2) rep.convergence_test = welch_t_test(e_beta[0], e_beta[1]);

  std::vector<double> qs;
  std::vector<double> qa;
  for (const auto& [id, v] : per_question) {
    if (v.first.empty()) continue;
    qs.push_back(*mean_of(v.first));
    qa.push_back(*mean_of(v.second));
  }
  if (qs.size() >= 3) {
    try {
      rep.speed_accuracy = pearson_correlation(qs, qa);
    } catch (const DegenerateError&) {
    }
  }
  return rep;
}

namespace {

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(nullptr);
}

nlohmann::ordered_json class_json(const ClassStats& c) {
  return {{"trajectories", c.trajectories},
          {"fitted", c.fitted},
          {"mean_e_beta", opt_json(c.mean_e_beta)},
          {"mean_speed", opt_json(c.mean_speed)}};
}

std::string fmt(const std::optional<double>& v) {
  if (!v) return "n/a";
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.4g", *v);
  return buf;
}

}  // namespace

nlohmann::ordered_json to_json(const ObservationReport& r) {
  nlohmann::ordered_json bins = nlohmann::ordered_json::array();
  for (const auto& v : r.intersection_by_bin) bins.push_back(opt_json(v));
  nlohmann::ordered_json conv = nullptr;
  if (r.convergence_test) {
    conv = {{"test", "welch-t"},
            {"t", r.convergence_test->t},
            {"df", r.convergence_test->df},
            {"p_value", r.convergence_test->p_value}};
  }
  nlohmann::ordered_json corr = nullptr;
  if (r.speed_accuracy) {
    corr = {{"test", "pearson-t"},
            {"r", r.speed_accuracy->r},
            {"n", r.speed_accuracy->n},
            {"p_value", r.speed_accuracy->p_value}};
  }
  return {{"method", r.options.method},
          {"model", r.options.model},
          {"dataset", r.options.dataset},
          {"distance_mode", to_string(r.options.distance)},
          {"grid_size", r.options.grid_size},
          {"questions", r.questions},
          {"trajectories", r.trajectories},
          {"accuracy", r.accuracy},
          {"correct", class_json(r.correct)},
          {"incorrect", class_json(r.incorrect)},
          {"mean_speed", opt_json(r.mean_speed)},
          {"histogram_intersection", {{"all_states", opt_json(r.intersection_all)}, {"by_bin", bins}}},
          {"convergence_difference", conv},
          {"speed_accuracy_correlation", corr}};
}

std::string report_text(const ObservationReport& r) {
  std::string out;
  out += "method " + r.options.method + " | model " + r.options.model + " | dataset " + r.options.dataset + "\n";
  out += "questions " + std::to_string(r.questions) + ", trajectories " + std::to_string(r.trajectories) +
         ", accuracy " + fmt(r.accuracy) + "\n\n";
  out += "convergence coefficient e^beta (" + std::string(to_string(r.options.distance)) + ")\n";
  out += "  correct    " + fmt(r.correct.mean_e_beta) + "  (n=" + std::to_string(r.correct.fitted) + ")\n";
  out += "  incorrect  " + fmt(r.incorrect.mean_e_beta) + "  (n=" + std::to_string(r.incorrect.fitted) + ")\n";
  out += "  welch-t p  " + (r.convergence_test ? fmt(r.convergence_test->p_value) : std::string("n/a")) + "\n\n";
  out += "path speed\n";
  out += "  all " + fmt(r.mean_speed) + ", correct " + fmt(r.correct.mean_speed) + ", incorrect " +
         fmt(r.incorrect.mean_speed) + "\n";
  out += "  speed~accuracy pearson r " +
         (r.speed_accuracy ? fmt(r.speed_accuracy->r) + ", p " + fmt(r.speed_accuracy->p_value) : std::string("n/a")) +
         "\n\n";
  out += "histogram intersection, correct vs incorrect (G=" + std::to_string(r.options.grid_size) + ")\n";
  out += "  all states " + fmt(r.intersection_all) + "\n";
  for (std::size_t b = 0; b < r.intersection_by_bin.size(); ++b) {
    out += "  bin " + std::to_string(b) + "      " + fmt(r.intersection_by_bin[b]) + "\n";
  }
  return out;
}

}  // namespace lot
