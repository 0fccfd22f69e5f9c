#ifndef DIFAIR_FAIR_METRIC_HPP
#define DIFAIR_FAIR_METRIC_HPP

#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "difair/matrix.hpp"

namespace difair {

// Fair input distance d(x, x') = (x - x')^T (I - A A^T) (x - x'), the squared
// Mahalanobis form with the sensitive subspace span(A) projected out. A has
// orthonormal columns; k = 0 means the plain squared Euclidean distance.
struct FairMetric {
  std::size_t dim = 0;
  DenseMatrix basis;  // dim x k, orthonormal columns

  FairMetric() = default;
  FairMetric(std::size_t d, DenseMatrix a) : dim(d), basis(std::move(a)) {
    if (basis.rows != dim) throw std::invalid_argument("FairMetric: basis row mismatch");
    if (basis.cols > dim) throw std::invalid_argument("FairMetric: k exceeds dim");
  }

  static FairMetric identity(std::size_t d) { return FairMetric(d, DenseMatrix(d, 0)); }

  std::size_t subspace_dim() const { return basis.cols; }
};

// A A^T v (component of v inside the sensitive subspace).
inline DenseVector project_onto(const FairMetric& m, const DenseVector& v) {
  check_size(v, m.dim, "project_onto");
  if (m.basis.cols == 0) return DenseVector(m.dim, 0.0);
  const DenseVector coeff = matvec_t(m.basis, v);
  return matvec(m.basis, coeff);
}

// (I - A A^T) v.
inline DenseVector project_out(const FairMetric& m, const DenseVector& v) {
  DenseVector p = project_onto(m, v);
  DenseVector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] - p[i];
  return out;
}

inline double fair_distance(const FairMetric& m, const DenseVector& x,
                            const DenseVector& xp) {
  check_size(x, m.dim, "fair_distance");
  check_size(xp, m.dim, "fair_distance");
  DenseVector r(m.dim);
  for (std::size_t i = 0; i < m.dim; ++i) r[i] = x[i] - xp[i];
  const DenseVector p = project_out(m, r);
  return dot(p, p);
}

// Members of one group are considered interchangeable; their within-group
// variation defines sensitive directions.
struct ComparableGroup {
  std::vector<DenseVector> members;
};

// Sensitive-subspace learning from comparable groups: center each group at
// its mean, stack the centered members as rows, and take the top-k
// right-singular vectors.
inline FairMetric learn_subspace_face(const std::vector<ComparableGroup>& groups,
                                      std::size_t k) {
  if (k < 1) throw std::invalid_argument("learn_subspace_face: k must be >= 1");
  std::size_t total = 0, dim = 0;
  for (const auto& g : groups) {
    if (g.members.size() < 2) {
      throw std::invalid_argument("learn_subspace_face: each group needs >= 2 members");
    }
    for (const auto& v : g.members) {
      if (dim == 0) dim = v.size();
      check_size(v, dim, "learn_subspace_face");
      ++total;
    }
  }
  if (total < k) throw std::invalid_argument("learn_subspace_face: fewer members than k");

  DenseMatrix rows(total, dim);
  std::size_t r = 0;
  for (const auto& g : groups) {
    DenseVector mean(dim, 0.0);
    for (const auto& v : g.members)
      for (std::size_t i = 0; i < dim; ++i) mean[i] += v[i];
    for (double& v : mean) v /= double(g.members.size());
    for (const auto& v : g.members) {
      for (std::size_t i = 0; i < dim; ++i) rows(r, i) = v[i] - mean[i];
      ++r;
    }
  }

  if (gram_rank(rows) < k) {
    throw std::invalid_argument(
        "learn_subspace_face: centered data has rank below k (no attainable direction)");
  }
  return FairMetric(dim, svd_top_k(rows, k));
}

// ---- logistic regression used by the tabular metric ----

struct LogisticFit {
  DenseVector weights;  // per feature
  double intercept = 0.0;
  std::size_t iterations = 0;
  double grad_norm = 0.0;
};

// Full-batch gradient descent with Armijo backtracking on the ridge-penalized
// logistic loss. The ridge keeps coefficients bounded on separable data.
inline LogisticFit fit_logistic(const DenseMatrix& x, const std::vector<int>& y,
                                double ridge = 1e-4, double grad_tol = 1e-6,
                                std::size_t max_iters = 10000) {
  const std::size_t n = x.rows, d = x.cols;
  if (y.size() != n) throw std::invalid_argument("fit_logistic: label count mismatch");
  LogisticFit fit;
  fit.weights.assign(d, 0.0);

  DenseVector z(n, 0.0);
  auto objective = [&](const DenseVector& w, double b, DenseVector& margins) {
    for (std::size_t i = 0; i < n; ++i) {
      const double* row = x.row_ptr(i);
      double s = b;
      for (std::size_t j = 0; j < d; ++j) s += row[j] * w[j];
      margins[i] = s;
    }
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double sgn = y[i] == 1 ? 1.0 : -1.0;
      const double m = sgn * margins[i];
      // log(1 + exp(-m)) without overflow
      loss += m > 0.0 ? std::log1p(std::exp(-m)) : -m + std::log1p(std::exp(m));
    }
    loss /= double(n);
    for (std::size_t j = 0; j < d; ++j) loss += 0.5 * ridge * w[j] * w[j];
    return loss;
  };

  double loss = objective(fit.weights, fit.intercept, z);
  DenseVector gw(d, 0.0);
  double step = 1.0;  // carried across iterations, grown after acceptance
  for (std::size_t it = 0; it < max_iters; ++it) {
    std::fill(gw.begin(), gw.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const double p = 1.0 / (1.0 + std::exp(-z[i]));
      const double r = p - (y[i] == 1 ? 1.0 : 0.0);
      const double* row = x.row_ptr(i);
      for (std::size_t j = 0; j < d; ++j) gw[j] += r * row[j];
      gb += r;
    }
    for (std::size_t j = 0; j < d; ++j) gw[j] = gw[j] / double(n) + ridge * fit.weights[j];
    gb /= double(n);

    double gnorm_sq = gb * gb;
    for (double v : gw) gnorm_sq += v * v;
    fit.grad_norm = std::sqrt(gnorm_sq);
    fit.iterations = it;
    if (fit.grad_norm <= grad_tol) return fit;

    step = std::min(step * 2.0, 1024.0);
    DenseVector wtry(d);
    DenseVector ztry(n);
    for (int back = 0; back < 80; ++back) {
      for (std::size_t j = 0; j < d; ++j) wtry[j] = fit.weights[j] - step * gw[j];
      const double btry = fit.intercept - step * gb;
      const double ltry = objective(wtry, btry, ztry);
      if (ltry <= loss - 1e-4 * step * gnorm_sq) {
        fit.weights = wtry;
        fit.intercept = btry;
        z = ztry;
        loss = ltry;
        break;
      }
      step *= 0.5;
    }
  }
  fit.iterations = max_iters;
  return fit;
}

// Tabular sensitive subspace: the indicator of the gender column, the
// indicator of the race column, and the coefficients of a logistic
// regression predicting gender from the remaining features (with zero in
// the gender coordinate), orthonormalized with a rank cutoff.
inline FairMetric tabular_sensitive_metric(const DenseMatrix& features,
                                           std::size_t gender_col, std::size_t race_col) {
  const std::size_t n = features.rows, d = features.cols;
  if (gender_col >= d || race_col >= d || gender_col == race_col) {
    throw std::invalid_argument("tabular_sensitive_metric: bad protected column indices");
  }
  std::vector<int> gender(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double v = features(i, gender_col);
    if (v != 0.0 && v != 1.0) {
      throw std::invalid_argument("tabular_sensitive_metric: gender column not binary");
    }
    gender[i] = v == 1.0 ? 1 : 0;
  }

  DenseMatrix rest(n, d - 1);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t j = 0; j < d; ++j) {
      if (j == gender_col) continue;
      rest(i, c++) = features(i, j);
    }
  }
  const LogisticFit fit = fit_logistic(rest, gender);

  DenseVector w_lr(d, 0.0);
  {
    std::size_t c = 0;
    for (std::size_t j = 0; j < d; ++j) {
      if (j == gender_col) continue;
      w_lr[j] = fit.weights[c++];
    }
  }
  DenseVector e_gender(d, 0.0), e_race(d, 0.0);
  e_gender[gender_col] = 1.0;
  e_race[race_col] = 1.0;
  const DenseMatrix basis = gram_schmidt({e_gender, e_race, w_lr}, d);
  return FairMetric(d, basis);
}

// ---- serialization ----
//
// Text format: "fair_metric 1", then "dim k", then the basis in column-major
// order, one column per line, 17 significant digits.

inline void save_fair_metric(const FairMetric& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_fair_metric: cannot open " + path);
  out << "fair_metric 1\n" << m.dim << ' ' << m.basis.cols << '\n';
  char buf[64];
  for (std::size_t j = 0; j < m.basis.cols; ++j) {
    for (std::size_t i = 0; i < m.dim; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", m.basis(i, j));
      out << buf << (i + 1 == m.dim ? '\n' : ' ');
    }
  }
  if (!out) throw std::runtime_error("save_fair_metric: write failed for " + path);
}

inline FairMetric load_fair_metric(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_fair_metric: cannot open " + path);
  std::string magic;
  int version = 0;
  std::size_t dim = 0, k = 0;
  in >> magic >> version >> dim >> k;
  if (!in || magic != "fair_metric" || version != 1) {
    throw std::runtime_error("load_fair_metric: bad header in " + path);
  }
  DenseMatrix basis(dim, k);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < dim; ++i) in >> basis(i, j);
  if (!in) throw std::runtime_error("load_fair_metric: truncated file " + path);
  return FairMetric(dim, std::move(basis));
}

}  // namespace difair

#endif  // DIFAIR_FAIR_METRIC_HPP
