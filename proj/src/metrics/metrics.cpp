#include "mixflow/metrics/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <vector>

#include "mixflow/common/error.hpp"
#include "mixflow/common/rng.hpp"
#include "mixflow/ot/wasserstein.hpp"

namespace mixflow::metrics {

namespace {

void check_sets(const Matrix& x, const Matrix& y, const char* what) {
  if (x.rows() == 0 || y.rows() == 0)
    throw ValidationError(std::string(what) + ": point sets must be nonempty");
  if (x.cols() != y.cols())
    throw ShapeError(std::string(what) + ": point dimensions differ (" + std::to_string(x.cols()) +
                     " vs " + std::to_string(y.cols()) + ")");
}

double mean_pairwise_distance(const Matrix& a, const Matrix& b) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) total += (a.row(i) - b.row(j)).norm();
  return total / (static_cast<double>(a.rows()) * static_cast<double>(b.rows()));
}

// Sum of k(a_i, b_j) over all pairs, skipping i == j when `skip_diagonal`.
double kernel_sum(const Matrix& a, const Matrix& b, double gamma, bool skip_diagonal) {
  double total = 0.0;
  for (Eigen::Index i = 0; i < a.rows(); ++i)
    for (Eigen::Index j = 0; j < b.rows(); ++j) {
      if (skip_diagonal && i == j) continue;
      total += std::exp(-gamma * (a.row(i) - b.row(j)).squaredNorm());
    }
  return total;
}

Matrix subsample(const Matrix& x, Eigen::Index n, std::uint64_t seed) {
  if (x.rows() <= n) return x;
  std::vector<Eigen::Index> idx(static_cast<std::size_t>(x.rows()));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed);
  // partial Fisher-Yates, then keep the chosen rows in original order
  for (Eigen::Index k = 0; k < n; ++k) {
    std::uniform_int_distribution<Eigen::Index> pick(k, x.rows() - 1);
    std::swap(idx[k], idx[pick(rng)]);
  }
  std::sort(idx.begin(), idx.begin() + n);
  Matrix out(n, x.cols());
  for (Eigen::Index k = 0; k < n; ++k) out.row(k) = x.row(idx[k]);
  return out;
}

}  // namespace

double median_heuristic(const Matrix& x, const Matrix& y) {
  Matrix all(x.rows() + y.rows(), x.cols());
  all << x, y;
  std::vector<double> d;
  d.reserve(static_cast<std::size_t>(all.rows() * (all.rows() - 1) / 2));
  for (Eigen::Index i = 0; i < all.rows(); ++i)
    for (Eigen::Index j = i + 1; j < all.rows(); ++j) d.push_back((all.row(i) - all.row(j)).norm());
  if (d.empty()) return 0.0;
  auto mid = d.begin() + static_cast<std::ptrdiff_t>(d.size() / 2);
  std::nth_element(d.begin(), mid, d.end());
  double med = *mid;
  if (d.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d.begin(), mid));
  return med;
}

double mmd(const Matrix& x, const Matrix& y, std::optional<double> bandwidth,
           double* used_bandwidth) {
  check_sets(x, y, "mmd");
  if (x.rows() < 2 || y.rows() < 2) throw ValidationError("mmd: need at least 2 points per set");
  const double h = bandwidth ? *bandwidth : median_heuristic(x, y);
  if (!(h > 0.0) || !std::isfinite(h))
    throw ValidationError(
        "mmd: kernel bandwidth is zero (all points identical); pass an explicit bandwidth");
  if (used_bandwidth) *used_bandwidth = h;
  const double gamma = 1.0 / (2.0 * h * h);
  const double m = static_cast<double>(x.rows()), n = static_cast<double>(y.rows());
  const double kxx = kernel_sum(x, x, gamma, true) / (m * (m - 1.0));
  const double kyy = kernel_sum(y, y, gamma, true) / (n * (n - 1.0));
  const double kxy = kernel_sum(x, y, gamma, false) / (m * n);
  return std::sqrt(std::max(0.0, kxx + kyy - 2.0 * kxy));
}

double energy_distance(const Matrix& x, const Matrix& y) {
  check_sets(x, y, "energy_distance");
  const double ed2 = 2.0 * mean_pairwise_distance(x, y) - mean_pairwise_distance(x, x) -
                     mean_pairwise_distance(y, y);
  return std::sqrt(std::max(0.0, ed2));
}

MetricReport report(const Matrix& x, const Matrix& y, std::uint64_t seed, Eigen::Index cap) {
  check_sets(x, y, "report");
  if (cap < 2) throw ValidationError("report: cap must be at least 2");
  const Eigen::Index n = std::min({cap, x.rows(), y.rows()});
  const Matrix xs = subsample(x, n, derive_seed(seed, {1}));
  const Matrix ys = subsample(y, n, derive_seed(seed, {2}));
  MetricReport r;
  r.n_x = xs.rows();
  r.n_y = ys.rows();
  r.cap = cap;
  r.w1 = ot::empirical_wasserstein(xs, ys, 1);
  r.w2 = ot::empirical_wasserstein(xs, ys, 2);
  r.ed = energy_distance(xs, ys);
  if (n >= 2) {
    const double h = median_heuristic(xs, ys);
    r.bandwidth = h;
    r.mmd = h > 0.0 ? mmd(xs, ys, h) : 0.0;
  }
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  return {{"mmd", r.mmd}, {"w1", r.w1},   {"w2", r.w2},   {"ed", r.ed},
          {"n_x", r.n_x}, {"n_y", r.n_y}, {"bandwidth", r.bandwidth}, {"cap", r.cap}};
}

}  // namespace mixflow::metrics
