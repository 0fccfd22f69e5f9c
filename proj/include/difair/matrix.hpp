#ifndef DIFAIR_MATRIX_HPP
#define DIFAIR_MATRIX_HPP

#include <cblas.h>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace difair {

using DenseVector = std::vector<double>;

// Row-major dense matrix of 64-bit floats; the substrate for all numerics.
struct DenseMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  DenseMatrix() = default;
  DenseMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  DenseMatrix(std::size_t r, std::size_t c, std::vector<double> values)
      : rows(r), cols(c), data(std::move(values)) {
    if (data.size() != rows * cols) {
      throw std::invalid_argument("DenseMatrix: data length does not match shape");
    }
  }

  double& operator()(std::size_t i, std::size_t j) { return data[i * cols + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data[i * cols + j]; }

  double* row_ptr(std::size_t i) { return data.data() + i * cols; }
  const double* row_ptr(std::size_t i) const { return data.data() + i * cols; }

  bool all_finite() const {
    for (double v : data) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }
};

inline void check_size(const DenseVector& v, std::size_t n, const char* what) {
  if (v.size() != n) {
    throw std::invalid_argument(std::string(what) + ": expected length " +
                                std::to_string(n) + ", got " + std::to_string(v.size()));
  }
}

inline double dot(const DenseVector& a, const DenseVector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const DenseVector& a) { return std::sqrt(dot(a, a)); }

// y = M x
inline DenseVector matvec(const DenseMatrix& m, const DenseVector& x) {
  check_size(x, m.cols, "matvec");
  DenseVector y(m.rows, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double* row = m.row_ptr(i);
    double s = 0.0;
    for (std::size_t j = 0; j < m.cols; ++j) s += row[j] * x[j];
    y[i] = s;
  }
  return y;
}

// y = M^T x
inline DenseVector matvec_t(const DenseMatrix& m, const DenseVector& x) {
  check_size(x, m.rows, "matvec_t");
  DenseVector y(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i) {
    const double xi = x[i];
    const double* row = m.row_ptr(i);
    for (std::size_t j = 0; j < m.cols; ++j) y[j] += row[j] * xi;
  }
  return y;
}

inline DenseMatrix transpose(const DenseMatrix& m) {
  DenseMatrix t(m.cols, m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) t(j, i) = m(i, j);
  return t;
}

// C = alpha * op(A) * op(B) + beta * C, via CBLAS. Shapes are validated
// against C, which must be preallocated.
inline void gemm(double alpha, const DenseMatrix& a, bool trans_a, const DenseMatrix& b,
                 bool trans_b, double beta, DenseMatrix& c) {
  const std::size_t am = trans_a ? a.cols : a.rows;
  const std::size_t ak = trans_a ? a.rows : a.cols;
  const std::size_t bk = trans_b ? b.cols : b.rows;
  const std::size_t bn = trans_b ? b.rows : b.cols;
  if (ak != bk || c.rows != am || c.cols != bn) {
    throw std::invalid_argument("gemm: inner or output dimensions mismatch");
  }
  if (am == 0 || bn == 0) return;
  cblas_dgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, static_cast<int>(am),
              static_cast<int>(bn), static_cast<int>(ak), alpha, a.data.data(),
              static_cast<int>(a.cols), b.data.data(), static_cast<int>(b.cols), beta,
              c.data.data(), static_cast<int>(c.cols));
}

// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
// eigenvalues in descending order with matching orthonormal eigenvector
// columns. Intended for the small Gram matrices behind svd_top_k.
struct SymmetricEigen {
  DenseVector values;   // descending
  DenseMatrix vectors;  // n x n, column k is the eigenvector of values[k]
};

inline SymmetricEigen jacobi_eigen(DenseMatrix s) {
  if (s.rows != s.cols) throw std::invalid_argument("jacobi_eigen: matrix not square");
  const std::size_t n = s.rows;
  DenseMatrix v(n, n);
  for (std::size_t i = 0; i < n; ++i) v(i, i) = 1.0;

  auto off_diag_sq = [&]() {
    double t = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) t += s(i, j) * s(i, j);
    return t;
  };

  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i) scale = std::max(scale, std::abs(s(i, i)));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) scale = std::max(scale, std::abs(s(i, j)));
  const double tol = (scale > 0.0 ? scale : 1.0) * 1e-15;

  for (int sweep = 0; sweep < 100 && off_diag_sq() > tol * tol * double(n * n); ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = s(p, q);
        if (std::abs(apq) <= tol * 1e-2) continue;
        const double app = s(p, p), aqq = s(q, q);
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double sn = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double skp = s(k, p), skq = s(k, q);
          s(k, p) = c * skp - sn * skq;
          s(k, q) = sn * skp + c * skq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double spk = s(p, k), sqk = s(q, k);
          s(p, k) = c * spk - sn * sqk;
          s(q, k) = sn * spk + c * sqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p), vkq = v(k, q);
          v(k, p) = c * vkp - sn * vkq;
          v(k, q) = sn * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i;
    for (std::size_t j = i + 1; j < n; ++j)
      if (s(order[j], order[j]) > s(order[best], order[best])) best = j;
    std::swap(order[i], order[best]);
  }

  SymmetricEigen out;
  out.values.resize(n);
  out.vectors = DenseMatrix(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    out.values[k] = s(order[k], order[k]);
    // Deterministic sign: largest-magnitude component positive.
    std::size_t arg = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (std::abs(v(i, order[k])) > std::abs(v(arg, order[k]))) arg = i;
    const double sign = v(arg, order[k]) < 0.0 ? -1.0 : 1.0;
    for (std::size_t i = 0; i < n; ++i) out.vectors(i, k) = sign * v(i, order[k]);
  }
  return out;
}

// Top-k right-singular vectors of m, as orthonormal columns. Computed from
// the symmetric eigendecomposition of the Gram matrix m^T m; the matrices
// here are desk-scale so a general SVD is not needed.
inline DenseMatrix svd_top_k(const DenseMatrix& m, std::size_t k) {
  if (k > std::min(m.rows, m.cols)) {
    throw std::invalid_argument("svd_top_k: k exceeds min(rows, cols)");
  }
  DenseMatrix gram(m.cols, m.cols);
  gemm(1.0, m, true, m, false, 0.0, gram);
  SymmetricEigen eig = jacobi_eigen(gram);
  DenseMatrix basis(m.cols, k);
  for (std::size_t j = 0; j < k; ++j) {
    double nrm = 0.0;
    for (std::size_t i = 0; i < m.cols; ++i) nrm += eig.vectors(i, j) * eig.vectors(i, j);
    nrm = std::sqrt(nrm);
    for (std::size_t i = 0; i < m.cols; ++i) basis(i, j) = eig.vectors(i, j) / nrm;
  }
  return basis;
}

// Number of eigenvalues of m^T m above a relative cutoff; the numerical rank
// used by the subspace learners.
inline std::size_t gram_rank(const DenseMatrix& m, double rel_cutoff = 1e-10) {
  DenseMatrix gram(m.cols, m.cols);
  gemm(1.0, m, true, m, false, 0.0, gram);
  SymmetricEigen eig = jacobi_eigen(gram);
  const double top = eig.values.empty() ? 0.0 : eig.values.front();
  if (!(top > 0.0)) return 0;
  std::size_t r = 0;
  for (double v : eig.values)
    if (v > top * rel_cutoff) ++r;
  return r;
}

// Modified Gram-Schmidt with a rank cutoff; returns orthonormal columns
// spanning the input vectors. Vectors whose residual drops below the cutoff
// (relative to their original norm, floored at 1) are dropped.
inline DenseMatrix gram_schmidt(const std::vector<DenseVector>& vecs, std::size_t dim,
                                double cutoff = 1e-10) {
  std::vector<DenseVector> basis;
  for (const DenseVector& v0 : vecs) {
    check_size(v0, dim, "gram_schmidt");
    DenseVector v = v0;
    const double orig = std::max(1.0, norm2(v0));
    for (const DenseVector& u : basis) {
      const double c = dot(u, v);
      for (std::size_t i = 0; i < dim; ++i) v[i] -= c * u[i];
    }
    const double nrm = norm2(v);
    if (nrm <= cutoff * orig) continue;
    for (std::size_t i = 0; i < dim; ++i) v[i] /= nrm;
    basis.push_back(std::move(v));
  }
  DenseMatrix out(dim, basis.size());
  for (std::size_t j = 0; j < basis.size(); ++j)
    for (std::size_t i = 0; i < dim; ++i) out(i, j) = basis[j][i];
  return out;
}

}  // namespace difair

#endif  // DIFAIR_MATRIX_HPP
