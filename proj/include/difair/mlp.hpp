#ifndef DIFAIR_MLP_HPP
#define DIFAIR_MLP_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>

#include "difair/matrix.hpp"
#include "difair/rng.hpp"

namespace difair {

enum class Activation { Relu };

// One-hidden-layer network: logits = w2 * act(w1 * x + b1) + b2.
struct MlpModel {
  DenseMatrix w1;  // hidden x input
  DenseVector b1;  // hidden
  DenseMatrix w2;  // classes x hidden
  DenseVector b2;  // classes
  Activation activation = Activation::Relu;

  std::size_t input_dim() const { return w1.cols; }
  std::size_t hidden_dim() const { return w1.rows; }
  std::size_t num_classes() const { return w2.rows; }

  void validate() const {
    if (b1.size() != w1.rows || w2.cols != w1.rows || b2.size() != w2.rows) {
      throw std::invalid_argument("MlpModel: inconsistent layer shapes");
    }
    if (num_classes() < 2) throw std::invalid_argument("MlpModel: need >= 2 classes");
  }
};

// Glorot-uniform weights, zero biases. Draw order is w1 row-major then w2
// row-major, so a given seed fully determines the model.
inline MlpModel init_mlp(std::size_t input, std::size_t hidden, std::size_t classes,
                         Rng& rng) {
  MlpModel m;
  m.w1 = DenseMatrix(hidden, input);
  m.b1.assign(hidden, 0.0);
  m.w2 = DenseMatrix(classes, hidden);
  m.b2.assign(classes, 0.0);
  const double lim1 = std::sqrt(6.0 / double(input + hidden));
  for (double& w : m.w1.data) w = rng.uniform(-lim1, lim1);
  const double lim2 = std::sqrt(6.0 / double(hidden + classes));
  for (double& w : m.w2.data) w = rng.uniform(-lim2, lim2);
  m.validate();
  return m;
}

// ReLU subgradient at 0 is 0.
inline double relu(double v) { return v > 0.0 ? v : 0.0; }
inline double relu_mask(double pre) { return pre > 0.0 ? 1.0 : 0.0; }

struct ForwardTrace {
  DenseVector pre;     // w1 x + b1
  DenseVector hidden;  // act(pre)
  DenseVector logits;  // w2 hidden + b2
};

inline ForwardTrace forward_trace(const MlpModel& m, const DenseVector& x) {
  check_size(x, m.input_dim(), "forward");
  ForwardTrace t;
  t.pre = matvec(m.w1, x);
  for (std::size_t i = 0; i < t.pre.size(); ++i) t.pre[i] += m.b1[i];
  t.hidden.resize(t.pre.size());
  for (std::size_t i = 0; i < t.pre.size(); ++i) t.hidden[i] = relu(t.pre[i]);
  t.logits = matvec(m.w2, t.hidden);
  for (std::size_t i = 0; i < t.logits.size(); ++i) t.logits[i] += m.b2[i];
  return t;
}

inline DenseVector forward(const MlpModel& m, const DenseVector& x) {
  return forward_trace(m, x).logits;
}

inline DenseVector softmax(const DenseVector& logits) {
  const double mx = *std::max_element(logits.begin(), logits.end());
  DenseVector p(logits.size());
  double z = 0.0;
  for (std::size_t k = 0; k < logits.size(); ++k) {
    p[k] = std::exp(logits[k] - mx);
    z += p[k];
  }
  for (double& v : p) v /= z;
  return p;
}

// -log softmax(logits)[label], computed via log-sum-exp.
inline double cross_entropy_loss(const DenseVector& logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw std::invalid_argument("cross_entropy_loss: label out of range");
  }
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double v : logits) z += std::exp(v - mx);
  return (mx - logits[static_cast<std::size_t>(label)]) + std::log(z);
}

// Mean squared logit difference, the output-space distance d(a, b) =
// (1/K) * ||a - b||^2.
inline double mean_sq_logit_diff(const DenseVector& a, const DenseVector& b) {
  if (a.size() != b.size()) {
    throw std::invalid_argument("mean_sq_logit_diff: length mismatch");
  }
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = a[k] - b[k];
    s += d * d;
  }
  return s / double(a.size());
}

struct Gradients {
  DenseMatrix w1;
  DenseVector b1;
  DenseMatrix w2;
  DenseVector b2;
  DenseVector input;  // gradient with respect to x
};

// Backward pass from an arbitrary d(objective)/d(logits) seed. All gradient
// operations (loss backprop, input gradients, logit-difference penalties)
// reduce to this.
inline Gradients backward_from_logits(const MlpModel& m, const DenseVector& x,
                                      const ForwardTrace& t, const DenseVector& dlogits) {
  Gradients g;
  g.w2 = DenseMatrix(m.w2.rows, m.w2.cols);
  for (std::size_t k = 0; k < m.w2.rows; ++k)
    for (std::size_t j = 0; j < m.w2.cols; ++j) g.w2(k, j) = dlogits[k] * t.hidden[j];
  g.b2 = dlogits;
  DenseVector dpre = matvec_t(m.w2, dlogits);
  for (std::size_t j = 0; j < dpre.size(); ++j) {
    if (!(t.pre[j] > 0.0)) dpre[j] = 0.0;
  }
  g.w1 = DenseMatrix(m.w1.rows, m.w1.cols);
  for (std::size_t j = 0; j < m.w1.rows; ++j)
    for (std::size_t i = 0; i < m.w1.cols; ++i) g.w1(j, i) = dpre[j] * x[i];
  g.b1 = dpre;
  g.input = matvec_t(m.w1, dpre);
  return g;
}

// Loss and exact parameter/input gradients of the cross-entropy at (x, label).
inline std::pair<double, Gradients> backprop(const MlpModel& m, const DenseVector& x,
                                             int label) {
  m.validate();
  const ForwardTrace t = forward_trace(m, x);
  const double loss = cross_entropy_loss(t.logits, label);
  DenseVector dlogits = softmax(t.logits);
  dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return {loss, backward_from_logits(m, x, t, dlogits)};
}

// d/dx of the cross-entropy loss at label.
inline DenseVector input_gradient_loss(const MlpModel& m, const DenseVector& x, int label) {
  const ForwardTrace t = forward_trace(m, x);
  if (label < 0 || static_cast<std::size_t>(label) >= t.logits.size()) {
    throw std::invalid_argument("input_gradient_loss: label out of range");
  }
  DenseVector dlogits = softmax(t.logits);
  dlogits[static_cast<std::size_t>(label)] -= 1.0;
  return backward_from_logits(m, x, t, dlogits).input;
}

// d/dx of the mean squared logit difference against fixed reference logits.
inline DenseVector input_gradient_logit_sqdiff(const MlpModel& m, const DenseVector& x,
                                               const DenseVector& ref_logits) {
  const ForwardTrace t = forward_trace(m, x);
  if (ref_logits.size() != t.logits.size()) {
    throw std::invalid_argument("input_gradient_logit_sqdiff: reference length mismatch");
  }
  const double scale = 2.0 / double(t.logits.size());
  DenseVector dlogits(t.logits.size());
  for (std::size_t k = 0; k < t.logits.size(); ++k)
    dlogits[k] = scale * (t.logits[k] - ref_logits[k]);
  return backward_from_logits(m, x, t, dlogits).input;
}

// ---- batched variants (row-per-example), used by the training loops ----

// The ReLU mask is recoverable from the activations (hidden > 0 iff pre > 0),
// so only the activations and logits are kept.
struct BatchForward {
  DenseMatrix hidden;  // B x hidden
  DenseMatrix logits;  // B x classes
};

// In-place variant reusing preallocated buffers; the hot path of the
// training-time attacks.
inline void batch_forward_into(const MlpModel& m, const DenseMatrix& x, BatchForward& out) {
  if (x.cols != m.input_dim()) {
    throw std::invalid_argument("batch_forward: feature dimension mismatch");
  }
  if (out.hidden.rows != x.rows || out.hidden.cols != m.hidden_dim()) {
    out.hidden = DenseMatrix(x.rows, m.hidden_dim());
    out.logits = DenseMatrix(x.rows, m.num_classes());
  }
  gemm(1.0, x, false, m.w1, true, 0.0, out.hidden);
  for (std::size_t b = 0; b < x.rows; ++b) {
    double* row = out.hidden.row_ptr(b);
    for (std::size_t j = 0; j < m.hidden_dim(); ++j) row[j] = relu(row[j] + m.b1[j]);
  }
  gemm(1.0, out.hidden, false, m.w2, true, 0.0, out.logits);
  for (std::size_t b = 0; b < x.rows; ++b)
    for (std::size_t k = 0; k < m.num_classes(); ++k) out.logits(b, k) += m.b2[k];
}

inline BatchForward batch_forward(const MlpModel& m, const DenseMatrix& x) {
  BatchForward out;
  batch_forward_into(m, x, out);
  return out;
}

struct ParamGradients {
  DenseMatrix w1;
  DenseVector b1;
  DenseMatrix w2;
  DenseVector b2;

  explicit ParamGradients(const MlpModel& m)
      : w1(m.w1.rows, m.w1.cols), b1(m.b1.size(), 0.0), w2(m.w2.rows, m.w2.cols),
        b2(m.b2.size(), 0.0) {}
};

// Accumulates parameter gradients for the summed objective whose per-example
// logit gradients are the rows of dlogits. Pass accumulate=false to overwrite.
inline void batch_backward_params(const MlpModel& m, const DenseMatrix& x,
                                  const BatchForward& fwd, const DenseMatrix& dlogits,
                                  ParamGradients& g, bool accumulate) {
  const double beta = accumulate ? 1.0 : 0.0;
  gemm(1.0, dlogits, true, fwd.hidden, false, beta, g.w2);
  if (!accumulate) std::fill(g.b2.begin(), g.b2.end(), 0.0);
  for (std::size_t b = 0; b < x.rows; ++b)
    for (std::size_t k = 0; k < m.num_classes(); ++k) g.b2[k] += dlogits(b, k);
  DenseMatrix dpre(x.rows, m.hidden_dim());
  gemm(1.0, dlogits, false, m.w2, false, 0.0, dpre);
  for (std::size_t i = 0; i < dpre.data.size(); ++i) {
    if (!(fwd.hidden.data[i] > 0.0)) dpre.data[i] = 0.0;
  }
  gemm(1.0, dpre, true, x, false, beta, g.w1);
  if (!accumulate) std::fill(g.b1.begin(), g.b1.end(), 0.0);
  for (std::size_t b = 0; b < x.rows; ++b)
    for (std::size_t j = 0; j < m.hidden_dim(); ++j) g.b1[j] += dpre(b, j);
}

// Per-example input gradients (B x input) for the given logit-gradient rows,
// reusing caller buffers.
inline void batch_backward_inputs_into(const MlpModel& m, const BatchForward& fwd,
                                       const DenseMatrix& dlogits, DenseMatrix& dpre,
                                       DenseMatrix& dx) {
  if (dpre.rows != dlogits.rows || dpre.cols != m.hidden_dim()) {
    dpre = DenseMatrix(dlogits.rows, m.hidden_dim());
    dx = DenseMatrix(dlogits.rows, m.input_dim());
  }
  gemm(1.0, dlogits, false, m.w2, false, 0.0, dpre);
  for (std::size_t i = 0; i < dpre.data.size(); ++i) {
    if (!(fwd.hidden.data[i] > 0.0)) dpre.data[i] = 0.0;
  }
  gemm(1.0, dpre, false, m.w1, false, 0.0, dx);
}

inline DenseMatrix batch_backward_inputs(const MlpModel& m, const BatchForward& fwd,
                                         const DenseMatrix& dlogits) {
  DenseMatrix dpre, dx;
  batch_backward_inputs_into(m, fwd, dlogits, dpre, dx);
  return dx;
}

// ---- serialization ----
//
// Text format, one header line then row-major values with 17 significant
// digits (bit-exact round trip for binary64):
//   mlp 1 <input> <hidden> <classes> relu
//   <hidden lines of w1, input values each>
//   <b1 line>
//   <classes lines of w2, hidden values each>
//   <b2 line>

inline void save_mlp(const MlpModel& m, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_mlp: cannot open " + path);
  out << "mlp 1 " << m.input_dim() << ' ' << m.hidden_dim() << ' ' << m.num_classes()
      << " relu\n";
  char buf[64];
  auto emit_row = [&](const double* row, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      std::snprintf(buf, sizeof buf, "%.17g", row[i]);
      out << buf << (i + 1 == n ? '\n' : ' ');
    }
  };
  for (std::size_t j = 0; j < m.hidden_dim(); ++j) emit_row(m.w1.row_ptr(j), m.input_dim());
  emit_row(m.b1.data(), m.b1.size());
  for (std::size_t k = 0; k < m.num_classes(); ++k) emit_row(m.w2.row_ptr(k), m.hidden_dim());
  emit_row(m.b2.data(), m.b2.size());
  if (!out) throw std::runtime_error("save_mlp: write failed for " + path);
}

inline MlpModel load_mlp(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_mlp: cannot open " + path);
  std::string magic, act;
  int version = 0;
  std::size_t input = 0, hidden = 0, classes = 0;
  in >> magic >> version >> input >> hidden >> classes >> act;
  if (!in || magic != "mlp" || version != 1 || act != "relu") {
    throw std::runtime_error("load_mlp: bad header in " + path);
  }
  MlpModel m;
  m.w1 = DenseMatrix(hidden, input);
  m.b1.assign(hidden, 0.0);
  m.w2 = DenseMatrix(classes, hidden);
  m.b2.assign(classes, 0.0);
  for (double& v : m.w1.data) in >> v;
  for (double& v : m.b1) in >> v;
  for (double& v : m.w2.data) in >> v;
  for (double& v : m.b2) in >> v;
  if (!in) throw std::runtime_error("load_mlp: truncated file " + path);
  m.validate();
  return m;
}

}  // namespace difair

#endif  // DIFAIR_MLP_HPP
