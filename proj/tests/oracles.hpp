#pragma once

// Independent reference computations used by the unit and acceptance tests.

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <vector>

#include "lot/landscape.hpp"
#include "lot/random.hpp"

namespace oracle {

struct Clusters {
  std::vector<std::vector<double>> points;
  std::vector<int> labels;
};

/// `per_cluster` points around each of 3 centres spaced 10 apart in `dim`
/// dimensions, unit-variance noise.
inline Clusters gaussian_clusters(std::uint64_t seed, int per_cluster = 50, int dim = 5) {
  lot::Rng rng(seed);
  Clusters c;
  for (int label = 0; label < 3; ++label) {
    for (int i = 0; i < per_cluster; ++i) {
      std::vector<double> p(static_cast<std::size_t>(dim));
      for (int d = 0; d < dim; ++d) p[static_cast<std::size_t>(d)] = (d == label ? 10.0 : 0.0) + rng.normal();
      c.points.push_back(std::move(p));
      c.labels.push_back(label);
    }
  }
  return c;
}

/// Mean share of each point's k nearest neighbours (brute-force scan) that
/// carry its label.
inline double knn_purity(const std::vector<lot::Point2>& y, const std::vector<int>& labels, int k) {
  const std::size_t n = y.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<std::pair<double, std::size_t>> d;
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const double dx = y[i].x - y[j].x;
      const double dy = y[i].y - y[j].y;
      d.emplace_back(dx * dx + dy * dy, j);
    }
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    int same = 0;
    for (int t = 0; t < k; ++t) same += labels[d[static_cast<std::size_t>(t)].second] == labels[i] ? 1 : 0;
    total += static_cast<double>(same) / k;
  }
  return total / static_cast<double>(n);
}

/// Cell-by-cell sum of minimum masses.
inline double intersection(const lot::DensityGrid& a, const lot::DensityGrid& b) {
  double s = 0.0;
  for (int r = 0; r < a.size; ++r) {
    for (int c = 0; c < a.size; ++c) s += std::min(a.at(r, c), b.at(r, c));
  }
  return s * a.cell_area();
}

/// Textbook two-pass OLS slope of y on x.
inline double ols_slope(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(x.begin(), x.end(), 0.0) / n;
  const double my = std::accumulate(y.begin(), y.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  return sxy / sxx;
}

/// Plain vote count; the most frequent index wins, lowest index on ties.
inline int plurality(const std::vector<int>& votes) {
  std::map<int, int> counts;
  for (int v : votes) ++counts[v];
  int best = -1, best_count = -1;
  for (const auto& [v, c] : counts) {
    if (c > best_count) {
      best = v;
      best_count = c;
    }
  }
  return best;
}

/// AUC as the share of (positive, negative) pairs ranked correctly, ties half.
inline double pairwise_auc(const std::vector<double>& scores, const std::vector<bool>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (!labels[i]) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j]) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

}  // namespace oracle
