#include "ual/smoothing.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "ual/error.hpp"
#include "ual/io.hpp"

namespace ual {

namespace {

constexpr double kMeanTolerance = 1e-12;
constexpr char kPlanFormat[] = "ual-plan/1";

void check_inputs(std::span<const double> us, double alpha, double max_smoothing) {
  if (us.empty()) throw EmptyDataset();
  if (!(max_smoothing > 0.0 && max_smoothing < 1.0)) {
    throw InputError("max smoothing must lie in (0, 1), got " + io::format_double(max_smoothing));
  }
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) {
    throw InputError("alpha must be a finite non-negative number, got " + io::format_double(alpha));
  }
  for (double u : us) {
    if (!(u >= 0.0) || !std::isfinite(u)) {
      throw InputError("uncertainty scores must be finite and non-negative, got " + io::format_double(u));
    }
  }
}

double bisect_beta(std::span<const double> us, double alpha, double max_smoothing, double hi) {
  double lo = 0.0;
  for (int iter = 0; iter < 200 && lo < hi; ++iter) {
    const double mid = lo + 0.5 * (hi - lo);
    if (mid <= lo || mid >= hi) break;
    if (mean_smoothing(us, mid, max_smoothing) >= alpha) {
      hi = mid;
    } else {
      lo = mid;
    }
  }
  return hi;
}

}  // namespace

std::size_t SmoothingPlan::truncated_count() const noexcept {
  return static_cast<std::size_t>(
      std::count_if(values.begin(), values.end(), [&](double v) { return v >= max_smoothing; }));
}

double SmoothingPlan::mean_value() const noexcept {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

double mean_smoothing(std::span<const double> us, double beta, double max_smoothing) noexcept {
  if (us.empty()) return 0.0;
  double total = 0.0;
  for (double u : us) total += map_uncertainty(u, beta, max_smoothing);
  return total / static_cast<double>(us.size());
}

double smoothing_supremum(std::span<const double> us, double max_smoothing) noexcept {
  if (us.empty()) return 0.0;
  const auto positive = std::count_if(us.begin(), us.end(), [](double u) { return u > 0.0; });
  return max_smoothing * static_cast<double>(positive) / static_cast<double>(us.size());
}

double solve_beta(std::span<const double> us, double alpha, double max_smoothing) {
  check_inputs(us, alpha, max_smoothing);

  const double supremum = smoothing_supremum(us, max_smoothing);
  if (alpha > supremum) throw InfeasibleConstraint(alpha, supremum);
  if (alpha == 0.0) return 0.0;

  std::vector<double> w;
  w.reserve(us.size());
  for (double u : us) {
    if (u > 0.0) w.push_back(u);
  }
  std::sort(w.begin(), w.end(), std::greater<>());
  const std::size_t m = w.size();
  const double n = static_cast<double>(us.size());
  const double target = n * alpha;
  const double cap = max_smoothing;

  // suffix[k] = sum of w[k..m), accumulated smallest first.
  std::vector<double> suffix(m + 1, 0.0);
  for (std::size_t k = m; k-- > 0;) suffix[k] = suffix[k + 1] + w[k];

  const double last_breakpoint = cap / w[m - 1];
  double beta = last_breakpoint;
  // With the k largest scores truncated: n*g(beta) = k*cap + beta*suffix[k]
  // on [cap/w[k-1], cap/w[k]].
  for (std::size_t k = 0; k < m; ++k) {
    const double next_breakpoint = cap / w[k];
    const double at_next = static_cast<double>(k) * cap + next_breakpoint * suffix[k];
    if (target <= at_next) {
      const double lower = k == 0 ? 0.0 : cap / w[k - 1];
      beta = (target - static_cast<double>(k) * cap) / suffix[k];
      beta = std::clamp(beta, lower, next_breakpoint);
      break;
    }
  }

  if (std::abs(mean_smoothing(us, beta, cap) - alpha) > kMeanTolerance) {
    beta = bisect_beta(us, alpha, cap, last_breakpoint);
  }
  return beta;
}

SmoothingPlan build_plan(const Dataset& dataset, double alpha, double max_smoothing) {
  if (dataset.empty()) throw EmptyDataset();
  SmoothingPlan plan;
  plan.alpha = alpha;
  plan.max_smoothing = max_smoothing;
  plan.sample_ids.reserve(dataset.size());
  plan.uncertainties.reserve(dataset.size());
  for (const auto& s : dataset) {
    if (!s.uncertainty) throw MissingUncertainty(s.id);
    plan.sample_ids.push_back(s.id);
    plan.uncertainties.push_back(*s.uncertainty);
  }
  plan.beta = solve_beta(plan.uncertainties, alpha, max_smoothing);
  plan.values.reserve(dataset.size());
  for (double u : plan.uncertainties) plan.values.push_back(map_uncertainty(u, plan.beta, max_smoothing));
  return plan;
}

std::string serialize_plan(const SmoothingPlan& plan) {
  std::ostringstream out;
  out << "format: " << kPlanFormat << '\n';
  out << "alpha: " << io::format_double(plan.alpha) << '\n';
  out << "v_t: " << io::format_double(plan.max_smoothing) << '\n';
  out << "beta: " << io::format_double(plan.beta) << '\n';
  out << "count: " << plan.size() << '\n';
  out << "---\n";
  for (std::size_t i = 0; i < plan.size(); ++i) {
    const auto& id = plan.sample_ids[i];
    if (id.find_first_of("\t\r\n") != std::string::npos) {
      throw FormatError("sample id '" + id + "' contains a tab or newline");
    }
    out << id << '\t' << io::format_double(plan.uncertainties[i]) << '\t'
        << io::format_double(plan.values[i]) << '\n';
  }
  return out.str();
}

SmoothingPlan parse_plan(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  SmoothingPlan plan;
  std::size_t count = 0;
  bool have[5] = {false, false, false, false, false};
  auto fail = [&](const std::string& why) {
    throw FormatError("plan line " + std::to_string(line_no) + ": " + why);
  };

  while (std::getline(in, line)) {
    ++line_no;
    if (line == "---") break;
    const auto colon = line.find(": ");
    if (colon == std::string::npos) fail("expected 'key: value'");
    const std::string key = line.substr(0, colon);
    const std::string value = line.substr(colon + 2);
    if (key == "format") {
      if (value != kPlanFormat) fail("unsupported format '" + value + "'");
      have[0] = true;
    } else if (key == "alpha") {
      plan.alpha = io::parse_double(value);
      have[1] = true;
    } else if (key == "v_t") {
      plan.max_smoothing = io::parse_double(value);
      have[2] = true;
    } else if (key == "beta") {
      plan.beta = io::parse_double(value);
      have[3] = true;
    } else if (key == "count") {
      count = static_cast<std::size_t>(std::stoull(value));
      have[4] = true;
    } else {
      fail("unknown key '" + key + "'");
    }
  }
  if (line != "---") fail("missing '---' header terminator");
  for (bool h : have) {
    if (!h) fail("header is missing a required key");
  }

  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? t1 : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) fail("expected 'id<TAB>u<TAB>v'");
    plan.sample_ids.push_back(line.substr(0, t1));
    plan.uncertainties.push_back(io::parse_double(std::string_view(line).substr(t1 + 1, t2 - t1 - 1)));
    plan.values.push_back(io::parse_double(std::string_view(line).substr(t2 + 1)));
  }
  if (plan.size() != count) {
    throw FormatError("plan declares " + std::to_string(count) + " records but contains " +
                      std::to_string(plan.size()));
  }
  return plan;
}

void save_plan(const std::filesystem::path& path, const SmoothingPlan& plan) {
  io::write_file_atomic(path, serialize_plan(plan));
}

SmoothingPlan load_plan(const std::filesystem::path& path) { return parse_plan(io::read_file(path)); }

}  // namespace ual
