#include "mixflow/ot/transport.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numeric>
#include <sstream>
#include <vector>

#include "mixflow/common/error.hpp"
#include "mixflow/ot/assignment.hpp"

namespace mixflow::ot {

CostMatrix::CostMatrix(Matrix entries, CostMetric metric)
    : entries_(std::move(entries)), metric_(metric) {
  if (entries_.rows() == 0 || entries_.cols() == 0)
    throw ShapeError("cost matrix must be at least 1x1");
  if (!entries_.allFinite()) throw ValidationError("cost matrix has non-finite entries");
  if (entries_.minCoeff() < 0.0) throw ValidationError("cost matrix has negative entries");
}

CostMatrix CostMatrix::between(const Matrix& from, const Matrix& to, CostMetric metric) {
  return CostMatrix(metric == CostMetric::sq_euclidean ? sq_euclidean_cost(from, to)
                                                       : euclidean_cost(from, to),
                    metric);
}

Matrix TransportPlan::coupling() const { return p.asDiagonal() * v; }

Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic> TransportPlan::support(
    double threshold_factor) const {
  const double thr = threshold_factor * p.maxCoeff();
  return (coupling().array() > thr).matrix();
}

Eigen::Index TransportPlan::support_size(double threshold_factor) const {
  return support(threshold_factor).count();
}

void require_simplex(const Vector& w, const char* name, double tol) {
  if (w.size() == 0) throw ValidationError(std::string(name) + ": empty weight vector");
  if (!w.allFinite()) throw ValidationError(std::string(name) + ": non-finite weight");
  if (w.minCoeff() < -tol) throw ValidationError(std::string(name) + ": negative weight");
  if (std::abs(w.sum() - 1.0) > tol) {
    std::ostringstream os;
    os.precision(17);
    os << name << ": weights sum to " << w.sum() << ", not 1 (infeasible marginals)";
    throw ValidationError(os.str());
  }
}

Vector scaled_dual(const Vector& u, const Vector& w, const Vector& p) {
  Vector z(u.size() + w.size());
  z.head(u.size()) = p.cwiseProduct(u);
  z.tail(w.size()) = w;
  return z;
}

double dual_objective(const DualSolution& dual, const Vector& q) {
  const Eigen::Index I = dual.z.size() - q.size();
  return dual.z.head(I).sum() + q.dot(dual.z.tail(q.size()));
}

double dual_violation(const CostMatrix& cost, const Vector& p, const Vector& z) {
  double worst = 0.0;
  const Eigen::Index I = cost.rows();
  for (Eigen::Index i = 0; i < I; ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j)
      worst = std::max(worst, z(i) + p(i) * z(I + j) - p(i) * cost(i, j));
  return worst;
}

namespace {

// Value a + b*eps for an infinitesimal eps; compared lexicographically with a
// small tolerance on the real part.
struct Lex {
  double v = 0.0;
  double e = 0.0;
};

constexpr double kLexTol = 1e-13;

bool lex_less(const Lex& a, const Lex& b) {
  if (std::abs(a.v - b.v) > kLexTol) return a.v < b.v;
  return a.e < b.e;
}

struct Cell {
  int i = 0;
  int j = 0;
  Lex x;
};

class TransportSimplex {
 public:
  TransportSimplex(const Matrix& c, const Vector& p, const Vector& q, const TransportOptions& opt)
      : c_(c), p_(p), q_(q), opt_(opt), I_(static_cast<int>(c.rows())),
        J_(static_cast<int>(c.cols())) {}

  TransportResult run() {
    northwest_corner();
    const double price_tol = 1e-12 * (1.0 + c_.cwiseAbs().maxCoeff());
    const long long cap = opt_.max_pivots > 0
                              ? opt_.max_pivots
                              : 1000LL + 50LL * (I_ + J_) * std::max(I_, J_);
    long long pivots = 0;
    while (true) {
      build_tree();
      compute_potentials();
      int ei = -1, ej = -1;
      if (!choose_entering(price_tol, ei, ej)) break;
      if (++pivots > cap)
        throw NumericalError("solve_transport: pivot limit exceeded (possible cycling)");
      pivot(ei, ej);
    }
    TransportResult res;
    res.pivots = pivots;
    Matrix pi = exact_flows();
    const double thr = 1e-10 * p_.maxCoeff();
    res.degenerate = (pi.array() > thr).count() < I_ + J_ - 1;
    if (res.degenerate && opt_.strict_dual) strict_complementary(pi, thr);
    // anchor: coupling potential of row 0 is zero
    const double shift = u_(0);
    u_.array() -= shift;
    w_.array() += shift;

    res.plan.p = p_;
    res.plan.q = q_;
    res.plan.v = Matrix::Zero(I_, J_);
    for (int i = 0; i < I_; ++i) {
      if (p_(i) > 0.0) {
        res.plan.v.row(i) = pi.row(i) / p_(i);
      } else {
        // Massless row: any distribution satisfies the constraints; put it
        // on the cheapest basic cell.
        int best = -1;
        for (const Cell& cell : basis_)
          if (cell.i == i && (best < 0 || c_(i, cell.j) < c_(i, best))) best = cell.j;
        res.plan.v(i, best) = 1.0;
      }
    }
    res.plan.objective = (pi.array() * c_.array()).sum();
    res.dual.z = scaled_dual(u_, w_, p_);
    res.dual.objective = dual_objective(res.dual, q_);
    return res;
  }

 private:
  int row_node(int i) const { return i; }
  int col_node(int j) const { return I_ + j; }

  void northwest_corner() {
    std::vector<Lex> a(I_), b(J_);
    for (int i = 0; i < I_; ++i) a[i] = {p_(i), 1.0};
    for (int j = 0; j < J_; ++j) b[j] = {q_(j), j == J_ - 1 ? static_cast<double>(I_) : 0.0};
    int i = 0, j = 0;
    basis_.clear();
    while (i < I_ && j < J_) {
      Lex x = lex_less(a[i], b[j]) ? a[i] : b[j];
      basis_.push_back({i, j, x});
      a[i] = {a[i].v - x.v, a[i].e - x.e};
      b[j] = {b[j].v - x.v, b[j].e - x.e};
      if (i == I_ - 1 && j == J_ - 1) break;
      if (j == J_ - 1 || (i < I_ - 1 && lex_less(a[i], b[j])))
        ++i;  // row exhausted
      else
        ++j;
    }
    if (static_cast<int>(basis_.size()) != I_ + J_ - 1)
      throw NumericalError("solve_transport: initial basis has wrong size");
  }

  void build_tree() {
    adj_.assign(I_ + J_, {});
    for (int k = 0; k < static_cast<int>(basis_.size()); ++k) {
      adj_[row_node(basis_[k].i)].push_back(k);
      adj_[col_node(basis_[k].j)].push_back(k);
    }
  }

  int other_end(int node, const Cell& cell) const {
    return node < I_ ? col_node(cell.j) : row_node(cell.i);
  }

  void compute_potentials() {
    u_ = Vector::Zero(I_);
    w_ = Vector::Zero(J_);
    std::vector<char> seen(I_ + J_, 0);
    std::deque<int> queue{row_node(0)};
    seen[row_node(0)] = 1;
    while (!queue.empty()) {
      int n = queue.front();
      queue.pop_front();
      for (int k : adj_[n]) {
        const Cell& cell = basis_[k];
        int m = other_end(n, cell);
        if (seen[m]) continue;
        seen[m] = 1;
        if (n < I_)
          w_(cell.j) = c_(cell.i, cell.j) - u_(cell.i);
        else
          u_(cell.i) = c_(cell.i, cell.j) - w_(cell.j);
        queue.push_back(m);
      }
    }
  }

  bool choose_entering(double tol, int& ei, int& ej) const {
    double best = -tol;
    std::vector<char> basic(static_cast<std::size_t>(I_) * J_, 0);
    for (const Cell& cell : basis_) basic[cell.i * J_ + cell.j] = 1;
    for (int i = 0; i < I_; ++i)
      for (int j = 0; j < J_; ++j) {
        if (basic[i * J_ + j]) continue;
        const double r = c_(i, j) - u_(i) - w_(j);
        if (opt_.bland) {
          if (r < -tol) {
            ei = i;
            ej = j;
            return true;
          }
        } else if (r < best) {
          best = r;
          ei = i;
          ej = j;
        }
      }
    return ei >= 0;
  }

  // Basis cells on the tree path from column `j` to row `i`, in order.
  std::vector<int> tree_path(int i, int j) const {
    const int start = col_node(j), goal = row_node(i);
    std::vector<int> via(I_ + J_, -1);
    std::vector<char> seen(I_ + J_, 0);
    std::deque<int> queue{start};
    seen[start] = 1;
    while (!queue.empty()) {
      int n = queue.front();
      queue.pop_front();
      if (n == goal) break;
      for (int k : adj_[n]) {
        int m = other_end(n, basis_[k]);
        if (seen[m]) continue;
        seen[m] = 1;
        via[m] = k;
        queue.push_back(m);
      }
    }
    std::vector<int> path;
    for (int n = goal; n != start;) {
      int k = via[n];
      if (k < 0) throw NumericalError("solve_transport: basis is not a spanning tree");
      path.push_back(k);
      n = other_end(n, basis_[k]);
    }
    std::reverse(path.begin(), path.end());
    return path;
  }

  void pivot(int ei, int ej) {
    std::vector<int> path = tree_path(ei, ej);
    // Cells alternate -, +, -, ... starting next to the entering column.
    int leave = -1;
    for (std::size_t s = 0; s < path.size(); s += 2) {
      const Cell& cand = basis_[path[s]];
      if (leave < 0 || lex_less(cand.x, basis_[leave].x)) leave = path[s];
    }
    const Lex theta = basis_[leave].x;
    for (std::size_t s = 0; s < path.size(); ++s) {
      Cell& cell = basis_[path[s]];
      const double sign = (s % 2 == 0) ? -1.0 : 1.0;
      cell.x.v += sign * theta.v;
      cell.x.e += sign * theta.e;
    }
    basis_[leave] = {ei, ej, theta};
  }

  // Unperturbed basic solution of the current basis by leaf elimination.
  Matrix exact_flows() const {
    std::vector<double> rem(I_ + J_);
    for (int i = 0; i < I_; ++i) rem[row_node(i)] = p_(i);
    for (int j = 0; j < J_; ++j) rem[col_node(j)] = q_(j);
    std::vector<int> deg(I_ + J_);
    for (int n = 0; n < I_ + J_; ++n) deg[n] = static_cast<int>(adj_[n].size());
    std::vector<char> done(basis_.size(), 0);
    std::deque<int> leaves;
    for (int n = 0; n < I_ + J_; ++n)
      if (deg[n] == 1) leaves.push_back(n);
    Matrix pi = Matrix::Zero(I_, J_);
    while (!leaves.empty()) {
      int n = leaves.front();
      leaves.pop_front();
      if (deg[n] != 1) continue;
      int k = -1;
      for (int cand : adj_[n])
        if (!done[cand]) k = cand;
      const Cell& cell = basis_[k];
      const double flow = rem[n];
      pi(cell.i, cell.j) = flow;
      done[k] = 1;
      int m = other_end(n, cell);
      rem[m] -= flow;
      rem[n] = 0.0;
      --deg[n];
      if (--deg[m] == 1) leaves.push_back(m);
    }
    const double floor = -1e-12;
    if (pi.minCoeff() < floor) throw NumericalError("solve_transport: negative basic flow");
    return pi.cwiseMax(0.0);
  }

  // Moves the dual inside the optimal face so that constraints between
  // different support components hold strictly.
  void strict_complementary(const Matrix& pi, double thr) {
    std::vector<int> parent(I_ + J_);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[x] != x) x = parent[x] = parent[parent[x]];
      return x;
    };
    for (int i = 0; i < I_; ++i)
      for (int j = 0; j < J_; ++j)
        if (pi(i, j) > thr) parent[find(row_node(i))] = find(col_node(j));
    std::vector<int> comp(I_ + J_, -1);
    int K = 0;
    for (int n = 0; n < I_ + J_; ++n) {
      int r = find(n);
      if (comp[r] < 0) comp[r] = K++;
      comp[n] = comp[r];
    }
    if (K <= 1) return;
    struct Edge {
      int from, to;
      double r;
    };
    std::vector<Edge> edges;
    double hi = 0.0;
    for (int i = 0; i < I_; ++i)
      for (int j = 0; j < J_; ++j) {
        const int ci = comp[row_node(i)], cj = comp[col_node(j)];
        if (ci == cj) continue;
        const double r = std::max(0.0, c_(i, j) - u_(i) - w_(j));
        edges.push_back({cj, ci, r});
        hi = std::max(hi, r);
      }
    // a_ci - a_cj <= r - t: shortest paths with edge cj -> ci of weight r - t.
    auto solve = [&](double t, std::vector<double>& dist) {
      dist.assign(K, 0.0);
      for (int round = 0; round < K; ++round) {
        bool changed = false;
        for (const Edge& e : edges)
          if (dist[e.from] + e.r - t < dist[e.to] - 1e-15) {
            dist[e.to] = dist[e.from] + e.r - t;
            changed = true;
          }
        if (!changed) return true;
      }
      return false;
    };
    std::vector<double> dist;
    double lo = 0.0, up = hi;
    if (solve(up, dist)) {
      lo = up;
    } else {
      for (int it = 0; it < 60; ++it) {
        const double mid = 0.5 * (lo + up);
        if (solve(mid, dist))
          lo = mid;
        else
          up = mid;
      }
    }
    if (lo <= 1e-12) return;
    if (!solve(0.5 * lo, dist)) return;
    for (int i = 0; i < I_; ++i) u_(i) += dist[comp[row_node(i)]];
    for (int j = 0; j < J_; ++j) w_(j) -= dist[comp[col_node(j)]];
  }

  const Matrix& c_;
  const Vector& p_;
  const Vector& q_;
  TransportOptions opt_;
  int I_, J_;
  std::vector<Cell> basis_;
  std::vector<std::vector<int>> adj_;
  Vector u_, w_;
};

}  // namespace

TransportResult solve_transport(const CostMatrix& cost, const Vector& p, const Vector& q,
                                const TransportOptions& options) {
  if (p.size() != cost.rows() || q.size() != cost.cols()) {
    std::ostringstream os;
    os << "solve_transport: cost is " << cost.rows() << "x" << cost.cols()
       << " but marginals have lengths " << p.size() << " and " << q.size();
    throw ShapeError(os.str());
  }
  require_simplex(p, "p");
  require_simplex(q, "q");
  // Clean tiny negatives and renormalize both marginals onto the same total.
  Vector pc = p.cwiseMax(0.0), qc = q.cwiseMax(0.0);
  pc /= pc.sum();
  qc /= qc.sum();
  TransportSimplex simplex(cost.entries(), pc, qc, options);
  TransportResult res = simplex.run();
  res.plan.p = p;
  res.plan.q = q;
  return res;
}

}  // namespace mixflow::ot
