#pragma once

#include <cstdint>
#include <nlohmann/json.hpp>
#include <optional>

#include "mixflow/common/types.hpp"

namespace mixflow::metrics {

// Median pairwise Euclidean distance over the union of both sets.
double median_heuristic(const Matrix& x, const Matrix& y);

// Square root of the unbiased MMD^2 estimate (clipped at 0) with the
// Gaussian kernel exp(-||a - b||^2 / (2 h^2)). h defaults to the median
// heuristic. `used_bandwidth`, if given, receives h.
double mmd(const Matrix& x, const Matrix& y, std::optional<double> bandwidth = std::nullopt,
           double* used_bandwidth = nullptr);

// Square root of 2 E||x - y|| - E||x - x'|| - E||y - y'|| (V-statistic, clipped at 0).
double energy_distance(const Matrix& x, const Matrix& y);

struct MetricReport {
  double mmd = 0.0;
  double w1 = 0.0;
  double w2 = 0.0;
  double ed = 0.0;
  Eigen::Index n_x = 0;
  Eigen::Index n_y = 0;
  double bandwidth = 0.0;
  Eigen::Index cap = 0;
};

inline constexpr Eigen::Index kDefaultMetricCap = 2000;

// All four metrics on one shared subsample: both sets are reduced (seeded,
// without replacement) to min(cap, |X|, |Y|) points, so W1/W2 use the exact
// assignment solver.
MetricReport report(const Matrix& x, const Matrix& y, std::uint64_t seed = 0,
                    Eigen::Index cap = kDefaultMetricCap);

nlohmann::json to_json(const MetricReport& r);

}  // namespace mixflow::metrics
