#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lot/features.hpp"

namespace lot {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  bool operator==(const Point2&) const = default;
};

/// One 2D point per feature-matrix column.
struct Embedding2D {
  std::vector<Point2> coords;
  std::vector<ColumnRef> layout;
  std::string projector;
  std::uint64_t seed = 0;
};

// ---------------------------------------------------------------------------
// Projection

struct TsneParams {
  double perplexity = 30.0;  // capped at (N-1)/3
  int iterations = 1000;
  double early_exaggeration = 12.0;
  int exaggeration_iterations = 250;
  double learning_rate = 200.0;
  double initial_momentum = 0.5;
  double final_momentum = 0.8;
  int momentum_switch_iteration = 250;
  double init_scale = 1e-4;
  std::uint64_t seed = 7;

  void validate() const;
};

struct TsneDiagnostics {
  double effective_perplexity = 0.0;
  double max_entropy_error = 0.0;  // |H(P_i) - ln(perplexity)| over rows
  double initial_kl = 0.0;
  double final_kl = 0.0;
};

/// Exact t-SNE of row points (each a vector of equal length) into 2D.
std::vector<Point2> tsne(const std::vector<std::vector<double>>& points, const TsneParams& params,
                         TsneDiagnostics* diagnostics = nullptr);

/// Needs at least 10 columns.
Embedding2D tsne_embed(const FeatureMatrix& F, const TsneParams& params,
                       TsneDiagnostics* diagnostics = nullptr);

struct PcaResult {
  std::vector<Point2> coords;
  std::vector<double> eigenvalues;  // descending, full spectrum
  std::array<std::vector<double>, 2> components;

  double explained_variance_ratio(std::size_t i) const;
};

/// Top two principal components of centered points. Each component is
/// signed so that its largest-magnitude loading is positive.
PcaResult pca(const std::vector<std::vector<double>>& points);

/// Needs at least 3 columns; throws DegenerateError on rank-0 input.
Embedding2D pca_embed(const FeatureMatrix& F);

void write_embedding(const std::filesystem::path& path, const Embedding2D& emb);
/// Reads an embedding written by write_embedding or an external projector
/// (CSV with x,y per column, in feature-matrix order).
Embedding2D read_embedding(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Progress bins

/// 0-based bin of 1-based state i out of n: fraction i/n in ((b)/B, (b+1)/B].
int progress_bin(int i, int n, int bins);

struct ProgressBin {
  int index = 0;
  double lower = 0.0;  // percent
  double upper = 0.0;
  std::vector<int> states;  // 1-based
};

std::vector<ProgressBin> assign_progress_bins(const FeatureTrajectory& ftraj, int bins = 5);

// ---------------------------------------------------------------------------
// Density

enum class CorrectnessClass { correct, incorrect };
std::string_view to_string(CorrectnessClass c);

struct Bounds {
  double xmin = 0.0;
  double xmax = 1.0;
  double ymin = 0.0;
  double ymax = 1.0;

  bool operator==(const Bounds&) const = default;
};

/// Bounding box of all coordinates padded by 5% of the extent per side.
Bounds shared_bounds(std::span<const Point2> coords);

struct DensityGrid {
  int size = 0;  // G: grid is G x G, row-major with y as the row
  Bounds bounds;
  double bandwidth = 0.0;
  CorrectnessClass correctness = CorrectnessClass::correct;
  int bin = -1;  // -1: all states
  std::vector<double> values;

  double cell_width() const { return (bounds.xmax - bounds.xmin) / size; }
  double cell_height() const { return (bounds.ymax - bounds.ymin) / size; }
  double cell_area() const { return cell_width() * cell_height(); }
  double at(int row, int col) const { return values[static_cast<std::size_t>(row * size + col)]; }
  double total_mass() const;
};

/// Gaussian KDE on a G x G grid evaluated at cell centres and normalized to
/// integrate to 1. Bandwidth follows Scott's rule with the effective sample
/// size (sum w)^2 / sum w^2, so uniform multiplicities cancel. Returns nullopt
/// for an empty member set.
std::optional<DensityGrid> density_map(std::span<const Point2> points, std::span<const double> weights,
                                       const Bounds& bounds, int grid_size, CorrectnessClass cls,
                                       int bin = -1);
std::optional<DensityGrid> density_map(std::span<const Point2> points, const Bounds& bounds,
                                       int grid_size, CorrectnessClass cls, int bin = -1);

/// Matrix file: a '# ' header line with JSON {bounds, G, bandwidth, class,
/// bin} followed by G rows of G values.
void write_grid(const std::filesystem::path& path, const DensityGrid& grid);
DensityGrid read_grid(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Bundles, metrics and rendering

struct LandscapeBundle {
  int bins = 5;
  int k = 0;
  Bounds bounds;
  std::vector<Point2> anchors;  // anchors[j] is choice j (0 = correct)
  // grids[bin][class]; nullopt where the class has no states in the bin.
  std::vector<std::array<std::optional<DensityGrid>, 2>> grids;
};

/// Build per-bin density grids for each correctness class from an embedding
/// of `build_feature_matrix(ftrajs, k)`.
LandscapeBundle build_landscape(const Embedding2D& emb, std::span<const FeatureTrajectory> ftrajs,
                                int bins, int grid_size);

struct BinMetrics {
  int bin = 0;
  CorrectnessClass correctness = CorrectnessClass::correct;
  std::size_t count = 0;
  double consistency = 0.0;
  double uncertainty = 0.0;
  double perplexity = 0.0;
};

/// Mean metrics per (bin, class); classes without states in a bin are omitted.
std::vector<BinMetrics> aggregate_metrics_by_bin(std::span<const FeatureTrajectory> ftrajs, int bins = 5);

std::string metrics_table_csv(const std::vector<BinMetrics>& rows);

/// One panel per (bin, class), vector output. Correct states in blue,
/// incorrect in red; the correct-answer anchor is drawn as a filled star and
/// the others as hollow crosses.
std::string render_landscape_svg(const LandscapeBundle& bundle, const std::string& title);

/// Raster fallback of the same panel layout.
void render_landscape_png(const LandscapeBundle& bundle, const std::filesystem::path& path);

std::string render_metrics_svg(const std::vector<BinMetrics>& rows, int bins);

struct LandscapeFiles {
  std::filesystem::path svg;
  std::filesystem::path png;
  std::vector<std::filesystem::path> grids;
};

/// Writes landscape.svg, landscape.png and grids/bin<b>_<class>.grid under
/// `dir`; throws lot::Error when the directory is not writable.
LandscapeFiles render_landscape(const LandscapeBundle& bundle, const std::filesystem::path& dir,
                                const std::string& title);

}  // namespace lot
