#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lot/features.hpp"
#include "lot/landscape.hpp"

namespace lot {

/// OLS fit of ln d_i = alpha + beta * i over i = 1..n.
struct RegressionFit {
  double alpha = 0.0;
  double beta = 0.0;
  double e_beta = 1.0;
  double residual_sse = 0.0;
};

RegressionFit convergence_coefficient(std::span<const double> distances);

struct SpeedResult {
  double speed = 0.0;
  double displacement = 0.0;
  double path_length = 0.0;
  bool degenerate = false;  // zero-length path; speed reported as 0
};

SpeedResult path_speed(std::span<const Point2> coords);

/// Sum over cells of min(mass_a, mass_b); grids must share G and bounds.
double histogram_intersection(const DensityGrid& a, const DensityGrid& b);

struct Correlation {
  double r = 0.0;
  double p_value = 1.0;
  std::size_t n = 0;
};

/// Two-sided p from t = r sqrt((n-2)/(1-r^2)) with n-2 degrees of freedom.
Correlation pearson_correlation(std::span<const double> x, std::span<const double> y);

struct WelchResult {
  double t = 0.0;
  double df = 0.0;
  double p_value = 1.0;
};

WelchResult welch_t_test(std::span<const double> a, std::span<const double> b);

/// Two-sided Welch p-value.
double group_difference_test(std::span<const double> a, std::span<const double> b);

/// Distance sequence used for the convergence coefficient.
enum class DistanceMode {
  final_state,        // ||f_i - f_n||_2 in feature space, i < n
  correct_component,  // normalized distance to choice 0, i <= n
  embedded,           // 2D distance to the embedded final state, i < n
};
std::string_view to_string(DistanceMode m);
DistanceMode parse_distance_mode(std::string_view s);

/// `coords` holds the trajectory's embedded states s_1..s_n (embedded mode only).
std::vector<double> convergence_distances(const FeatureTrajectory& ftraj, DistanceMode mode,
                                          std::span<const Point2> coords = {});

struct ReportOptions {
  std::string method = "cot";
  std::string model = "unknown";
  std::string dataset = "unknown";
  DistanceMode distance = DistanceMode::final_state;
  int bins = 5;
  int grid_size = 50;
  double distance_floor = 1e-12;
};

struct ClassStats {
  std::size_t trajectories = 0;
  std::size_t fitted = 0;  // trajectories with enough points for a fit
  std::optional<double> mean_e_beta;
  std::optional<double> mean_speed;
};

struct ObservationReport {
  ReportOptions options;
  std::size_t questions = 0;
  std::size_t trajectories = 0;
  double accuracy = 0.0;  // share of trajectories predicting choice 0
  ClassStats correct;
  ClassStats incorrect;
  std::optional<double> mean_speed;
  std::optional<double> intersection_all;  // correct vs incorrect, all states
  std::vector<std::optional<double>> intersection_by_bin;
  std::optional<WelchResult> convergence_test;  // e^beta correct vs incorrect
  std::optional<Correlation> speed_accuracy;    // per question
};

/// `emb` must be an embedding of build_feature_matrix(ftrajs, k).
ObservationReport observation_report(std::span<const FeatureTrajectory> ftrajs, const Embedding2D& emb,
                                     const ReportOptions& opts = {});

nlohmann::ordered_json to_json(const ObservationReport& r);
std::string report_text(const ObservationReport& r);

}  // namespace lot
