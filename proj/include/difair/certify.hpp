#ifndef DIFAIR_CERTIFY_HPP
#define DIFAIR_CERTIFY_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "difair/attack.hpp"
#include "difair/fair_metric.hpp"
#include "difair/matrix.hpp"
#include "difair/mlp.hpp"

namespace difair {

// Per-point penalized worst case r_lambda(x) = sup_{x'} d_Y(h(x), h(x')) -
// lambda * d_X(x, x') over the restricted support {candidates} U {x}. The
// clamp at zero is exactly the x' = x member of the support.
inline double r_lambda(const MlpModel& model, const FairMetric& metric, double lambda,
                       const DenseVector& x, const std::vector<DenseVector>& candidates) {
  const DenseVector hx = forward(model, x);
  double best = 0.0;
  for (const DenseVector& c : candidates) {
    const double v = mean_sq_logit_diff(hx, forward(model, c)) -
                     lambda * fair_distance(metric, x, c);
    best = std::max(best, v);
  }
  return best;
}

// Gradient-ascent surrogate of r_lambda for continuous inputs; a lower bound
// on the true sup.
inline double r_lambda(const MlpModel& model, const FairMetric& metric, double lambda,
                       const DenseVector& x, const AttackConfig& cfg) {
  const DenseVector xp = worst_case_sensei(model, metric, lambda, x, cfg);
  const double v = mean_sq_logit_diff(forward(model, x), forward(model, xp)) -
                   lambda * fair_distance(metric, x, xp);
  return std::max(0.0, v);
}

struct PerPointWorst {
  DenseVector x;
  DenseVector x_prime;
  double d_y = 0.0;
  double d_x = 0.0;
};

struct CertificationResult {
  double r_hat = 0.0;
  double lambda_star = 0.0;
  double epsilon = 0.0;
  std::string mode;  // "candidate_set" or "attack"
  std::vector<PerPointWorst> per_point;
};

namespace detail {

// Golden-section search for the minimum of a convex function on [0, hi].
// Returns the best evaluated point (endpoints included).
template <typename F>
inline std::pair<double, double> golden_min(F&& g, double hi, int iters = 200) {
  const double phi = (std::sqrt(5.0) - 1.0) / 2.0;
  double a = 0.0, b = hi;
  double best_x = 0.0, best_v = g(0.0);
  const double vb = g(hi);
  if (vb < best_v) {
    best_v = vb;
    best_x = hi;
  }
  double x1 = b - phi * (b - a), x2 = a + phi * (b - a);
  double v1 = g(x1), v2 = g(x2);
  for (int it = 0; it < iters; ++it) {
    if (v1 < best_v) { best_v = v1; best_x = x1; }
    if (v2 < best_v) { best_v = v2; best_x = x2; }
    if (v1 <= v2) {
      b = x2; x2 = x1; v2 = v1;
      x1 = b - phi * (b - a);
      v1 = g(x1);
    } else {
      a = x1; x1 = x2; v1 = v2;
      x2 = a + phi * (b - a);
      v2 = g(x2);
    }
  }
  return {best_x, best_v};
}

struct Selection {
  std::vector<std::size_t> choice;  // per input: candidate index, or SIZE_MAX for self
  double mean_dy = 0.0;
  double mean_cost = 0.0;
};

// Per-point argmax of d_Y - lambda d_X over candidates-or-self.
inline Selection select_at(const DenseMatrix& dy, const DenseMatrix& cost, double lambda) {
  Selection s;
  const std::size_t n = dy.rows, m = dy.cols;
  s.choice.assign(n, static_cast<std::size_t>(-1));
  for (std::size_t i = 0; i < n; ++i) {
    double best = 0.0;  // self: d_Y = 0, d_X = 0
    for (std::size_t j = 0; j < m; ++j) {
      const double v = dy(i, j) - lambda * cost(i, j);
      if (v > best) {
        best = v;
        s.choice[i] = j;
      }
    }
    if (s.choice[i] != static_cast<std::size_t>(-1)) {
      s.mean_dy += dy(i, s.choice[i]);
      s.mean_cost += cost(i, s.choice[i]);
    }
  }
  s.mean_dy /= double(n);
  s.mean_cost /= double(n);
  return s;
}

}  // namespace detail

// Empirical DIF regularizer through the dual form, restricted to a finite
// candidate support (exact for the restricted problem): minimizes
// g(lambda) = lambda * eps + mean_i r_lambda(x_i) by golden-section search
// over [0, max d_Y / eps] (capped at 1e6 when eps = 0).
inline CertificationResult empirical_dif(const MlpModel& model,
                                         const std::vector<DenseVector>& inputs,
                                         const FairMetric& metric, double eps,
                                         const std::vector<DenseVector>& candidates) {
  if (inputs.empty()) throw std::invalid_argument("empirical_dif: no inputs");
  if (candidates.empty()) throw std::invalid_argument("empirical_dif: empty candidate set");
  if (eps < 0.0) throw std::invalid_argument("empirical_dif: eps must be >= 0");
  const std::size_t n = inputs.size(), m = candidates.size();

  std::vector<DenseVector> h_in(n), h_cand(m);
  for (std::size_t i = 0; i < n; ++i) h_in[i] = forward(model, inputs[i]);
  for (std::size_t j = 0; j < m; ++j) h_cand[j] = forward(model, candidates[j]);

  DenseMatrix dy(n, m), cost(n, m);
  double max_dy = 0.0, max_cost = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      dy(i, j) = mean_sq_logit_diff(h_in[i], h_cand[j]);
      cost(i, j) = fair_distance(metric, inputs[i], candidates[j]);
      max_dy = std::max(max_dy, dy(i, j));
      max_cost = std::max(max_cost, cost(i, j));
    }
  }

  CertificationResult res;
  res.epsilon = eps;
  res.mode = "candidate_set";

  const double lambda_bar = eps > 0.0 ? max_dy / eps : 1e6;
  auto g = [&](double lam) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = 0.0;
      for (std::size_t j = 0; j < m; ++j)
        best = std::max(best, dy(i, j) - lam * cost(i, j));
      s += best;
    }
    return lam * eps + s / double(n);
  };

  if (max_dy == 0.0) {
    res.r_hat = 0.0;
    res.lambda_star = 0.0;
  } else {
    const auto [lam, val] = detail::golden_min(g, lambda_bar);
    res.lambda_star = lam;
    res.r_hat = val;
  }

  // The per-point worst-case map must be primal-feasible (mean cost <= eps)
  // for the Markov certification; nudge lambda above the optimum until the
  // argmax selection's mean cost fits the budget.
  const double slack = 1e-12 * std::max(1.0, max_cost);
  double lam_hat = res.lambda_star;
  detail::Selection sel = detail::select_at(dy, cost, lam_hat);
  for (int grow = 0; sel.mean_cost > eps + slack && grow < 80; ++grow) {
    lam_hat = lam_hat * (grow < 2 ? 1.0 + 1e-9 : 2.0) + 1e-300;
    sel = detail::select_at(dy, cost, lam_hat);
  }

  res.per_point.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.per_point[i].x = inputs[i];
    if (sel.choice[i] == static_cast<std::size_t>(-1)) {
      res.per_point[i].x_prime = inputs[i];
      res.per_point[i].d_y = 0.0;
      res.per_point[i].d_x = 0.0;
    } else {
      res.per_point[i].x_prime = candidates[sel.choice[i]];
      res.per_point[i].d_y = dy(i, sel.choice[i]);
      res.per_point[i].d_x = cost(i, sel.choice[i]);
    }
  }
  return res;
}

// Attack-mode variant for continuous inputs: the per-point sup is replaced by
// the gradient-ascent surrogate, so the result is a lower bound on the
// restricted-support value and is reported as mode "attack".
inline CertificationResult empirical_dif(const MlpModel& model,
                                         const std::vector<DenseVector>& inputs,
                                         const FairMetric& metric, double eps,
                                         const AttackConfig& attack_cfg) {
  if (inputs.empty()) throw std::invalid_argument("empirical_dif: no inputs");
  if (eps < 0.0) throw std::invalid_argument("empirical_dif: eps must be >= 0");
  const std::size_t n = inputs.size();

  std::vector<DenseVector> h_in(n);
  for (std::size_t i = 0; i < n; ++i) h_in[i] = forward(model, inputs[i]);

  struct Probe {
    double mean_r = 0.0;
    double mean_dy = 0.0;
    double mean_cost = 0.0;
    std::vector<DenseVector> points;
    std::vector<double> dys, costs;
  };
  auto probe = [&](double lam) {
    Probe p;
    p.points.resize(n);
    p.dys.resize(n);
    p.costs.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      DenseVector xp = worst_case_sensei(model, metric, lam, inputs[i], attack_cfg);
      const double dyv = mean_sq_logit_diff(h_in[i], forward(model, xp));
      const double cv = fair_distance(metric, inputs[i], xp);
      p.points[i] = std::move(xp);
      p.dys[i] = dyv;
      p.costs[i] = cv;
      p.mean_r += std::max(0.0, dyv - lam * cv);
      p.mean_dy += dyv;
      p.mean_cost += cv;
    }
    p.mean_r /= double(n);
    p.mean_dy /= double(n);
    p.mean_cost /= double(n);
    return p;
  };

  const Probe at0 = probe(0.0);
  double max_dy = 0.0;
  for (double v : at0.dys) max_dy = std::max(max_dy, v);

  CertificationResult res;
  res.epsilon = eps;
  res.mode = "attack";

  const double lambda_bar = eps > 0.0 ? max_dy / eps : 1e6;
  auto g = [&](double lam) { return lam * eps + probe(lam).mean_r; };
  if (max_dy == 0.0) {
    res.r_hat = 0.0;
    res.lambda_star = 0.0;
  } else {
    const auto [lam, val] = detail::golden_min(g, lambda_bar);
    res.lambda_star = lam;
    res.r_hat = val;
  }

  double lam_hat = res.lambda_star;
  Probe sel = probe(lam_hat);
  for (int grow = 0; sel.mean_cost > eps + 1e-12 && grow < 80; ++grow) {
    lam_hat = lam_hat * (grow < 2 ? 1.0 + 1e-9 : 2.0) + 1e-300;
    sel = probe(lam_hat);
  }

  res.per_point.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    res.per_point[i].x = inputs[i];
    res.per_point[i].x_prime = sel.points[i];
    res.per_point[i].d_y = sel.dys[i];
    res.per_point[i].d_x = sel.costs[i];
  }
  return res;
}

// ---- exact linear-program oracle on tiny instances ----
//
// maximize sum_ij P_ij d_Y(h(x_i), h(c_j))
// s.t.     sum_j P_ij = 1/n for all i,
//          sum_ij P_ij d_X(x_i, c_j) <= eps,  P >= 0,
// with each row additionally offered its own input as a zero-cost column.

namespace detail {

struct LpInstance {
  std::size_t n = 0, m = 0;      // m includes the self column (index m-1 per row)
  DenseMatrix dy, cost;          // n x m
};

inline LpInstance build_lp_instance(const MlpModel& model,
                                    const std::vector<DenseVector>& inputs,
                                    const std::vector<DenseVector>& candidates,
                                    const FairMetric& metric) {
  LpInstance inst;
  inst.n = inputs.size();
  inst.m = candidates.size() + 1;
  inst.dy = DenseMatrix(inst.n, inst.m);
  inst.cost = DenseMatrix(inst.n, inst.m);
  std::vector<DenseVector> h_in(inst.n), h_cand(candidates.size());
  for (std::size_t i = 0; i < inst.n; ++i) h_in[i] = forward(model, inputs[i]);
  for (std::size_t j = 0; j < candidates.size(); ++j)
    h_cand[j] = forward(model, candidates[j]);
  for (std::size_t i = 0; i < inst.n; ++i) {
    for (std::size_t j = 0; j < candidates.size(); ++j) {
      inst.dy(i, j) = mean_sq_logit_diff(h_in[i], h_cand[j]);
      inst.cost(i, j) = fair_distance(metric, inputs[i], candidates[j]);
    }
    inst.dy(i, inst.m - 1) = 0.0;   // self
    inst.cost(i, inst.m - 1) = 0.0;
  }
  return inst;
}

// Every vertex of the transportation-with-one-knapsack polytope has at most
// one split row: either all rows place their 1/n on a single column (budget
// possibly slack), or exactly one row splits across two columns with the
// budget tight. Enumerate both families.
inline double lp_vertex_enumeration(const LpInstance& inst, double eps) {
  const std::size_t n = inst.n, m = inst.m;
  const double w = 1.0 / double(n);
  const double budget_tol = 1e-12 * std::max(1.0, eps);
  double best = 0.0;

  std::vector<std::size_t> assign(n, 0);
  // Single-assignment vertices.
  for (;;) {
    double c = 0.0, v = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      c += w * inst.cost(i, assign[i]);
      v += w * inst.dy(i, assign[i]);
    }
    if (c <= eps + budget_tol) best = std::max(best, v);
    std::size_t pos = 0;
    while (pos < n && ++assign[pos] == m) assign[pos++] = 0;
    if (pos == n) break;
  }

  // One split row, budget tight.
  if (n >= 1) {
    std::vector<std::size_t> others(n > 1 ? n - 1 : 0, 0);
    for (std::size_t r = 0; r < n; ++r) {
      std::fill(others.begin(), others.end(), 0);
      for (;;) {
        double s_cost = 0.0, s_val = 0.0;
        {
          std::size_t oi = 0;
          for (std::size_t i = 0; i < n; ++i) {
            if (i == r) continue;
            s_cost += w * inst.cost(i, others[oi]);
            s_val += w * inst.dy(i, others[oi]);
            ++oi;
          }
        }
        const double rem = eps - s_cost;
        for (std::size_t a = 0; a < m; ++a) {
          for (std::size_t b = a + 1; b < m; ++b) {
            const double ca = inst.cost(r, a), cb = inst.cost(r, b);
            if (std::abs(ca - cb) < 1e-300) continue;
            double wa = (rem - w * cb) / (ca - cb);
            if (wa < -1e-12 * w || wa > w * (1.0 + 1e-12)) continue;
            wa = std::clamp(wa, 0.0, w);
            const double wb = w - wa;
            best = std::max(best, s_val + wa * inst.dy(r, a) + wb * inst.dy(r, b));
          }
        }
        if (others.empty()) break;
        std::size_t pos = 0;
        while (pos < others.size() && ++others[pos] == m) others[pos++] = 0;
        if (pos == others.size()) break;
      }
    }
  }
  return best;
}

// Dense two-phase primal simplex with Bland's rule, written for the tiny
// instances this oracle accepts. Maximizes c^T x s.t. A x = b, x >= 0
// (requires b >= 0).
inline double simplex_solve(const std::vector<std::vector<double>>& a,
                            const std::vector<double>& b, const std::vector<double>& c) {
  const std::size_t rows = a.size(), cols = c.size();
  const std::size_t total = cols + rows;  // artificials appended
  std::vector<std::vector<double>> t(rows + 1, std::vector<double>(total + 1, 0.0));
  std::vector<std::size_t> basis(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) t[i][j] = a[i][j];
    t[i][cols + i] = 1.0;
    t[i][total] = b[i];
    basis[i] = cols + i;
  }
  // Phase 1 objective: minimize sum of artificials (stored as maximize -sum).
  for (std::size_t j = 0; j <= total; ++j) {
    double s = 0.0;
    for (std::size_t i = 0; i < rows; ++i) s += t[i][j];
    t[rows][j] = -s;
  }
  for (std::size_t i = 0; i < rows; ++i) t[rows][cols + i] = 0.0;

  auto pivot = [&](std::size_t pr, std::size_t pc) {
    const double pv = t[pr][pc];
    for (double& v : t[pr]) v /= pv;
    for (std::size_t i = 0; i <= rows; ++i) {
      if (i == pr) continue;
      const double f = t[i][pc];
      if (f == 0.0) continue;
      for (std::size_t j = 0; j <= total; ++j) t[i][j] -= f * t[pr][j];
    }
    basis[pr] = pc;
  };
  // Objective row holds z_j - c_j; a column with a negative entry improves
  // the (maximization) objective, optimal when none remains.
  auto run = [&](std::size_t active_cols) {
    for (int guard = 0; guard < 100000; ++guard) {
      std::size_t pc = active_cols;
      for (std::size_t j = 0; j < active_cols; ++j) {  // Bland: lowest index
        if (t[rows][j] < -1e-11) {
          pc = j;
          break;
        }
      }
      if (pc == active_cols) return;
      std::size_t pr = rows;
      double best_ratio = 0.0;
      for (std::size_t i = 0; i < rows; ++i) {
        if (t[i][pc] > 1e-11) {
          const double ratio = t[i][total] / t[i][pc];
          if (pr == rows || ratio < best_ratio - 1e-15 ||
              (std::abs(ratio - best_ratio) <= 1e-15 && basis[i] < basis[pr])) {
            pr = i;
            best_ratio = ratio;
          }
        }
      }
      if (pr == rows) throw std::runtime_error("simplex: unbounded");
      pivot(pr, pc);
    }
    throw std::runtime_error("simplex: iteration limit");
  };

  run(total);
  if (t[rows][total] < -1e-9) throw std::runtime_error("simplex: infeasible");
  // Drive any artificial still in the basis out of it (degenerate rows).
  for (std::size_t i = 0; i < rows; ++i) {
    if (basis[i] >= cols) {
      std::size_t pc = cols;
      for (std::size_t j = 0; j < cols; ++j) {
        if (std::abs(t[i][j]) > 1e-11) {
          pc = j;
          break;
        }
      }
      if (pc < cols) pivot(i, pc);
    }
  }

  // Phase 2 objective row (z_j - c_j for the real objective).
  for (std::size_t j = 0; j <= total; ++j) t[rows][j] = 0.0;
  for (std::size_t j = 0; j < cols; ++j) t[rows][j] = -c[j];
  for (std::size_t i = 0; i < rows; ++i) {
    if (basis[i] < cols && t[rows][basis[i]] != 0.0) {
      const double f = t[rows][basis[i]];
      for (std::size_t j = 0; j <= total; ++j) t[rows][j] -= f * t[i][j];
    }
  }
  run(cols);

  double value = 0.0;
  for (std::size_t i = 0; i < rows; ++i) {
    if (basis[i] < cols) value += c[basis[i]] * t[i][total];
  }
  return value;
}

inline double lp_simplex(const LpInstance& inst, double eps) {
  const std::size_t n = inst.n, m = inst.m;
  const std::size_t vars = n * m + 1;  // plans + budget slack
  std::vector<std::vector<double>> a(n + 1, std::vector<double>(vars, 0.0));
  std::vector<double> b(n + 1, 0.0), c(vars, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      a[i][i * m + j] = 1.0;
      a[n][i * m + j] = inst.cost(i, j);
      c[i * m + j] = inst.dy(i, j);
    }
    b[i] = 1.0 / double(n);
  }
  a[n][vars - 1] = 1.0;
  b[n] = eps;
  return simplex_solve(a, b, c);
}

}  // namespace detail

enum class LpSolver { VertexEnumeration, Simplex };

inline double lp_oracle(const MlpModel& model, const std::vector<DenseVector>& inputs,
                        const std::vector<DenseVector>& candidates, const FairMetric& metric,
                        double eps, LpSolver solver = LpSolver::VertexEnumeration) {
  if (inputs.empty()) throw std::invalid_argument("lp_oracle: no inputs");
  if (inputs.size() > 6 || candidates.size() > 6) {
    throw std::invalid_argument("lp_oracle: instance too large (n, m <= 6)");
  }
  if (eps < 0.0) throw std::invalid_argument("lp_oracle: eps must be >= 0");
  const detail::LpInstance inst = detail::build_lp_instance(model, inputs, candidates, metric);
  return solver == LpSolver::VertexEnumeration ? detail::lp_vertex_enumeration(inst, eps)
                                               : detail::lp_simplex(inst, eps);
}

// ---- Markov tail certification ----

struct TailCheckRow {
  double tau = 0.0;
  double fraction = 0.0;
  double bound = 0.0;  // delta / tau
  bool pass = false;
};

// With delta = r_hat and the per-point worst-case map of the certification,
// the fraction of points with d_Y >= tau must not exceed delta/tau.
inline std::vector<TailCheckRow> markov_tail_check(const CertificationResult& cert,
                                                   const std::vector<double>& taus) {
  std::vector<TailCheckRow> out;
  out.reserve(taus.size());
  const double n = double(cert.per_point.size());
  for (double tau : taus) {
    TailCheckRow row;
    row.tau = tau;
    std::size_t count = 0;
    for (const PerPointWorst& p : cert.per_point)
      if (p.d_y >= tau) ++count;
    row.fraction = n > 0.0 ? double(count) / n : 0.0;
    row.bound = cert.r_hat / tau;
    row.pass = row.fraction <= row.bound + 1e-9;
    out.push_back(row);
  }
  return out;
}

inline std::vector<TailCheckRow> markov_tail_check(const MlpModel& model,
                                                   const std::vector<DenseVector>& inputs,
                                                   const FairMetric& metric, double eps,
                                                   const std::vector<double>& taus,
                                                   const std::vector<DenseVector>& candidates) {
  return markov_tail_check(empirical_dif(model, inputs, metric, eps, candidates), taus);
}

inline std::vector<TailCheckRow> markov_tail_check(const MlpModel& model,
                                                   const std::vector<DenseVector>& inputs,
                                                   const FairMetric& metric, double eps,
                                                   const std::vector<double>& taus,
                                                   const AttackConfig& attack_cfg) {
  return markov_tail_check(empirical_dif(model, inputs, metric, eps, attack_cfg), taus);
}

}  // namespace difair

#endif  // DIFAIR_CERTIFY_HPP
