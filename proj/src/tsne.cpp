#include <Eigen/Dense>
#include <cmath>
#include <limits>
#include <sstream>

#include "lot/error.hpp"
#include "lot/io.hpp"
#include "lot/landscape.hpp"
#include "lot/random.hpp"

namespace lot {

using nlohmann::json;

void TsneParams::validate() const {
  if (!(perplexity >= 2.0)) throw ConfigError("t-SNE perplexity must be >= 2");
  if (iterations < 250) throw ConfigError("t-SNE needs at least 250 iterations");
  if (!(learning_rate > 0.0)) throw ConfigError("t-SNE learning rate must be > 0");
  if (!(early_exaggeration >= 1.0)) throw ConfigError("t-SNE exaggeration must be >= 1");
  if (!(init_scale > 0.0)) throw ConfigError("t-SNE init scale must be > 0");
}

namespace {

using Matrix = std::vector<double>;  // row-major N x N

Matrix squared_distances(const std::vector<std::vector<double>>& x) {
  const std::size_t n = x.size();
  Matrix d(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      double s = 0.0;
      for (std::size_t c = 0; c < x[i].size(); ++c) {
        const double diff = x[i][c] - x[j][c];
        s += diff * diff;
      }
      d[i * n + j] = s;
      d[j * n + i] = s;
    }
  }
  return d;
}

// Row-conditional Gaussian affinities whose entropy matches ln(perplexity).
Matrix conditional_affinities(const Matrix& dist, std::size_t n, double perplexity,
                              double* max_entropy_error) {
  const double target = std::log(perplexity);
  Matrix p(n * n, 0.0);
  std::vector<double> shifted(n);
  *max_entropy_error = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j != i) dmin = std::min(dmin, dist[i * n + j]);
    }
    for (std::size_t j = 0; j < n; ++j) shifted[j] = j == i ? 0.0 : dist[i * n + j] - dmin;

    double beta = 1.0;
    double lo = 0.0;
    double hi = std::numeric_limits<double>::infinity();
    double entropy = 0.0;
    for (int iter = 0; iter < 200; ++iter) {
      double sum = 0.0;
      double weighted = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        if (j == i) continue;
        const double v = std::exp(-beta * shifted[j]);
        p[i * n + j] = v;
        sum += v;
        weighted += v * shifted[j];
      }
      entropy = std::log(sum) + beta * weighted / sum;
      const double diff = entropy - target;
      if (std::abs(diff) < 1e-10) break;
      if (diff > 0.0) {
        lo = beta;
        beta = std::isinf(hi) ? beta * 2.0 : 0.5 * (beta + hi);
      } else {
        hi = beta;
        beta = 0.5 * (beta + lo);
      }
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < n; ++j) sum += p[i * n + j];
    for (std::size_t j = 0; j < n; ++j) p[i * n + j] /= sum;
    *max_entropy_error = std::max(*max_entropy_error, std::abs(entropy - target));
  }
  return p;
}

double kl_divergence(const Matrix& p, const std::vector<double>& y, std::size_t n) {
  Matrix num(n * n, 0.0);
  double sum_q = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double dx = y[2 * i] - y[2 * j];
      const double dy = y[2 * i + 1] - y[2 * j + 1];
      const double v = 1.0 / (1.0 + dx * dx + dy * dy);
      num[i * n + j] = v;
      sum_q += 2.0 * v;
    }
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const double pij = p[i * n + j];
      if (pij <= 0.0) continue;
      const double q = std::max(num[std::min(i, j) * n + std::max(i, j)] / sum_q, 1e-300);
      kl += pij * std::log(pij / q);
    }
  }
  return kl;
}

void check_finite(const std::vector<std::vector<double>>& points) {
  for (const auto& p : points) {
    for (double v : p) {
      if (!std::isfinite(v)) throw DomainError("non-finite value in projector input");
    }
  }
}

}  // namespace

std::vector<Point2> tsne(const std::vector<std::vector<double>>& points, const TsneParams& params,
                         TsneDiagnostics* diagnostics) {
  params.validate();
  const std::size_t n = points.size();
  if (n < 4) throw SizeError("t-SNE needs at least 4 points");
  check_finite(points);

  const double perplexity = std::min(params.perplexity, static_cast<double>(n - 1) / 3.0);
  const Matrix dist = squared_distances(points);
  double entropy_error = 0.0;
  Matrix p = conditional_affinities(dist, n, perplexity, &entropy_error);

  // Symmetrize and normalize to a joint distribution.
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (p[i * n + j] + p[j * n + i]) / (2.0 * static_cast<double>(n));
      p[i * n + j] = v;
      p[j * n + i] = v;
    }
    p[i * n + i] = 0.0;
  }

  Rng rng(params.seed);
  std::vector<double> y(2 * n);
  for (auto& v : y) v = params.init_scale * rng.normal();

  const double initial_kl = kl_divergence(p, y, n);

  std::vector<double> update(2 * n, 0.0);
  std::vector<double> gains(2 * n, 1.0);
  std::vector<double> grad(2 * n, 0.0);
  Matrix num(n * n, 0.0);
  for (int iter = 0; iter < params.iterations; ++iter) {
    const double exaggeration =
        iter < params.exaggeration_iterations ? params.early_exaggeration : 1.0;
    const double momentum =
        iter < params.momentum_switch_iteration ? params.initial_momentum : params.final_momentum;

    double sum_q = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double dx = y[2 * i] - y[2 * j];
        const double dy = y[2 * i + 1] - y[2 * j + 1];
        const double v = 1.0 / (1.0 + dx * dx + dy * dy);
        num[i * n + j] = v;
        sum_q += 2.0 * v;
      }
    }
    std::fill(grad.begin(), grad.end(), 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = i + 1; j < n; ++j) {
        const double v = num[i * n + j];
        const double mult = (exaggeration * p[i * n + j] - v / sum_q) * v;
        const double fx = mult * (y[2 * i] - y[2 * j]);
        const double fy = mult * (y[2 * i + 1] - y[2 * j + 1]);
        grad[2 * i] += fx;
        grad[2 * i + 1] += fy;
        grad[2 * j] -= fx;
        grad[2 * j + 1] -= fy;
      }
    }
    for (std::size_t c = 0; c < 2 * n; ++c) {
      const double g = 4.0 * grad[c];
      gains[c] = (g > 0.0) != (update[c] > 0.0) ? gains[c] + 0.2 : gains[c] * 0.8;
      gains[c] = std::max(gains[c], 0.01);
      update[c] = momentum * update[c] - params.learning_rate * gains[c] * g;
      y[c] += update[c];
    }
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      mx += y[2 * i];
      my += y[2 * i + 1];
    }
    mx /= static_cast<double>(n);
    my /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      y[2 * i] -= mx;
      y[2 * i + 1] -= my;
    }
  }

  if (diagnostics != nullptr) {
    diagnostics->effective_perplexity = perplexity;
    diagnostics->max_entropy_error = entropy_error;
    diagnostics->initial_kl = initial_kl;
    diagnostics->final_kl = kl_divergence(p, y, n);
  }
  std::vector<Point2> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = {y[2 * i], y[2 * i + 1]};
    if (!std::isfinite(out[i].x) || !std::isfinite(out[i].y)) {
      throw DomainError("t-SNE diverged to a non-finite coordinate");
    }
  }
  return out;
}

Embedding2D tsne_embed(const FeatureMatrix& F, const TsneParams& params, TsneDiagnostics* diagnostics) {
  if (F.k < 2) throw ArgumentError("t-SNE input needs k >= 2");
  if (F.cols() < 10) {
    throw SizeError("t-SNE needs at least 10 columns, got " + std::to_string(F.cols()));
  }
  Embedding2D emb;
  emb.coords = tsne(F.columns, params, diagnostics);
  emb.layout = F.layout;
  emb.projector = "tsne";
  emb.seed = params.seed;
  return emb;
}

double PcaResult::explained_variance_ratio(std::size_t i) const {
  double total = 0.0;
  for (double v : eigenvalues) total += std::max(v, 0.0);
  if (total <= 0.0 || i >= eigenvalues.size()) return 0.0;
  return std::max(eigenvalues[i], 0.0) / total;
}

PcaResult pca(const std::vector<std::vector<double>>& points) {
  const std::size_t n = points.size();
  if (n < 2) throw SizeError("PCA needs at least 2 points");
  check_finite(points);
  const std::size_t dim = points.front().size();
  if (dim < 1) throw ArgumentError("PCA input has zero dimensions");
  bool all_same = true;
  for (const auto& p : points) {
    if (p.size() != dim) throw ArgumentError("PCA input rows have different lengths");
    if (p != points.front()) all_same = false;
  }
  if (all_same) throw DegenerateError("PCA input has rank 0 (all points identical)");

  Eigen::MatrixXd x(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dim));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t c = 0; c < dim; ++c) {
      x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = points[i][c];
    }
  }
  const Eigen::RowVectorXd mean = x.colwise().mean();
  x.rowwise() -= mean;
  const Eigen::MatrixXd cov = (x.transpose() * x) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DegenerateError("PCA eigen-decomposition failed");

  PcaResult out;
  const auto& values = solver.eigenvalues();  // ascending
  const auto& vectors = solver.eigenvectors();
  const auto d = static_cast<Eigen::Index>(dim);
  for (Eigen::Index i = d - 1; i >= 0; --i) out.eigenvalues.push_back(values(i));

  for (std::size_t comp = 0; comp < 2; ++comp) {
    std::vector<double> v(dim, 0.0);
    if (static_cast<Eigen::Index>(comp) < d) {
      const Eigen::Index col = d - 1 - static_cast<Eigen::Index>(comp);
      std::size_t largest = 0;
      for (std::size_t c = 0; c < dim; ++c) {
        v[c] = vectors(static_cast<Eigen::Index>(c), col);
        if (std::abs(v[c]) > std::abs(v[largest])) largest = c;
      }
      if (v[largest] < 0.0) {
        for (auto& e : v) e = -e;
      }
    }
    out.components[comp] = std::move(v);
  }
  out.coords.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    double px = 0.0;
    double py = 0.0;
    for (std::size_t c = 0; c < dim; ++c) {
      const double centered = x(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c));
      px += centered * out.components[0][c];
      py += centered * out.components[1][c];
    }
    out.coords[i] = {px, py};
  }
  return out;
}

Embedding2D pca_embed(const FeatureMatrix& F) {
  if (F.cols() < 3) throw SizeError("PCA projector needs at least 3 columns");
  Embedding2D emb;
  emb.coords = pca(F.columns).coords;
  emb.layout = F.layout;
  emb.projector = "pca";
  return emb;
}

void write_embedding(const std::filesystem::path& path, const Embedding2D& emb) {
  json meta{{"projector", emb.projector}, {"seed", emb.seed}, {"points", emb.coords.size()}};
  std::string out = "# " + meta.dump() + "\n";
  out += "x,y,trajectory,state,anchor\n";
  for (std::size_t i = 0; i < emb.coords.size(); ++i) {
    const ColumnRef ref = i < emb.layout.size() ? emb.layout[i] : ColumnRef{};
    out += format_double(emb.coords[i].x) + "," + format_double(emb.coords[i].y) + "," +
           std::to_string(ref.trajectory) + "," + std::to_string(ref.state) + "," +
           std::to_string(ref.anchor) + "\n";
  }
  write_file_atomic(path, out);
}

Embedding2D read_embedding(const std::filesystem::path& path) {
  Embedding2D emb;
  emb.projector = "external";
  std::istringstream in(read_file(path));
  std::string line;
  std::size_t line_no = 0;
  bool layout_complete = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    if (line.rfind("# ", 0) == 0) {
      try {
        const auto meta = json::parse(line.substr(2));
        emb.projector = meta.value("projector", emb.projector);
        emb.seed = meta.value("seed", emb.seed);
      } catch (const json::exception&) {
      }
      continue;
    }
    if (line[0] == '#' || std::isalpha(static_cast<unsigned char>(line[0]))) continue;
    std::vector<std::string> fields;
    std::stringstream ss(line);
    std::string field;
    while (std::getline(ss, field, ',')) fields.push_back(field);
    if (fields.size() < 2) throw ParseError("expected x,y", line_no);
    try {
      emb.coords.push_back({std::stod(fields[0]), std::stod(fields[1])});
      if (fields.size() >= 5) {
        emb.layout.push_back({std::stoi(fields[2]), std::stoi(fields[3]), std::stoi(fields[4])});
      } else {
        layout_complete = false;
      }
    } catch (const std::exception&) {
      throw ParseError("non-numeric coordinate", line_no);
    }
    if (!std::isfinite(emb.coords.back().x) || !std::isfinite(emb.coords.back().y)) {
      throw ParseError("non-finite coordinate", line_no);
    }
  }
  if (!layout_complete) emb.layout.clear();
  return emb;
}

}  // namespace lot
