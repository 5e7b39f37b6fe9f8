#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ual/dataset.hpp"

namespace ual {

inline constexpr double kDefaultAlpha = 0.1;
inline constexpr double kDefaultMaxSmoothing = 0.99;

/// Per-sample label-smoothing values solved from uncertainty scores.
///
/// values[i] == min(beta * uncertainties[i], max_smoothing) and the mean of
/// `values` equals `alpha`.
struct SmoothingPlan {
  double alpha = kDefaultAlpha;
  double max_smoothing = kDefaultMaxSmoothing;  // v_t
  double beta = 0.0;
  std::vector<std::string> sample_ids;
  std::vector<double> uncertainties;
  std::vector<double> values;

  std::size_t size() const noexcept { return values.size(); }
  std::size_t truncated_count() const noexcept;
  double mean_value() const noexcept;

  bool operator==(const SmoothingPlan&) const = default;
};

/// Truncated linear map from an uncertainty score to a smoothing value.
inline double map_uncertainty(double u, double beta, double max_smoothing) noexcept {
  const double scaled = beta * u;
  return scaled < max_smoothing ? scaled : max_smoothing;
}

/// Mean of map_uncertainty over `us` for a given beta.
double mean_smoothing(std::span<const double> us, double beta, double max_smoothing) noexcept;

/// Largest attainable mean: max_smoothing times the fraction of positive scores.
double smoothing_supremum(std::span<const double> us, double max_smoothing) noexcept;

/// Smallest beta >= 0 with mean_smoothing(us, beta, max_smoothing) == alpha.
///
/// Walks the sorted breakpoints max_smoothing/u_i and solves the linear piece
/// that brackets alpha in closed form. Falls back to bisection if the closed
/// form misses the target by more than 1e-12.
///
/// Throws EmptyDataset, InfeasibleConstraint, or InputError for negative
/// scores or an out-of-range max_smoothing.
double solve_beta(std::span<const double> us, double alpha, double max_smoothing);

/// Solves beta for the dataset's scores and materializes the plan.
/// Throws MissingUncertainty when any sample lacks a score.
SmoothingPlan build_plan(const Dataset& dataset, double alpha, double max_smoothing);

/// Text serialization; see docs/formats.md.
std::string serialize_plan(const SmoothingPlan& plan);
SmoothingPlan parse_plan(const std::string& text);
void save_plan(const std::filesystem::path& path, const SmoothingPlan& plan);
SmoothingPlan load_plan(const std::filesystem::path& path);

}  // namespace ual
