#ifndef DIFAIR_ATTACK_HPP
#define DIFAIR_ATTACK_HPP

#include <cmath>
#include <cstddef>
#include <vector>

#include "difair/fair_metric.hpp"
#include "difair/matrix.hpp"
#include "difair/mlp.hpp"

namespace difair {

// Projected gradient-ascent schedule: a subspace phase confined to the
// sensitive subspace (zero fair cost), then a free phase on the penalized
// objective. Steps are L2-normalized, so each accepted step moves exactly
// the step size; iteration counts and step sizes follow the adv_step /
// adv_epoch / l2_attack / adv_epoch_full hyperparameters.
struct AttackConfig {
  double subspace_step = 0.0;
  std::size_t subspace_iters = 0;
  double full_step = 0.0;
  std::size_t full_iters = 0;
};

struct AttackStepRecord {
  int phase = 0;  // 1 = subspace, 2 = full
  double objective = 0.0;
  bool pattern_changed = false;  // ReLU activation pattern crossed a kink
};
using AttackTrace = std::vector<AttackStepRecord>;

namespace detail {

inline void flip_to_canonical_sign(DenseVector& v) {
  std::size_t arg = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  if (!v.empty() && v[arg] < 0.0)
    for (double& x : v) x = -x;
}

inline std::vector<char> relu_pattern(const DenseVector& pre) {
  std::vector<char> p(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) p[i] = pre[i] > 0.0 ? 1 : 0;
  return p;
}

// J * a for the logit Jacobian J = w2 diag(mask) w1 at the given activation
// pattern.
inline DenseVector jacobian_apply(const MlpModel& m, const std::vector<char>& mask,
                                  const DenseVector& a) {
  DenseVector t = matvec(m.w1, a);
  for (std::size_t j = 0; j < t.size(); ++j)
    if (!mask[j]) t[j] = 0.0;
  return matvec(m.w2, t);
}

inline DenseVector jacobian_apply_t(const MlpModel& m, const std::vector<char>& mask,
                                    const DenseVector& y) {
  DenseVector t = matvec_t(m.w2, y);
  for (std::size_t j = 0; j < t.size(); ++j)
    if (!mask[j]) t[j] = 0.0;
  return matvec_t(m.w1, t);
}

// The squared-logit-difference objective has a stationary point exactly at
// the attack start, so the first step needs a symmetry-breaking direction.
// Within the sensitive subspace the steepest second-order growth direction
// of d_Y is the top right-singular vector of J*A; returns empty when J*A
// vanishes (e.g. a constant model).
inline DenseVector subspace_kick(const MlpModel& m, const FairMetric& metric,
                                 const std::vector<char>& mask) {
  const std::size_t k = metric.basis.cols;
  if (k == 0) return {};
  DenseMatrix ja(m.num_classes(), k);
  DenseVector col(metric.dim);
  for (std::size_t j = 0; j < k; ++j) {
    for (std::size_t i = 0; i < metric.dim; ++i) col[i] = metric.basis(i, j);
    const DenseVector jc = jacobian_apply(m, mask, col);
    for (std::size_t r = 0; r < jc.size(); ++r) ja(r, j) = jc[r];
  }
  DenseMatrix gram(k, k);
  gemm(1.0, ja, true, ja, false, 0.0, gram);
  const SymmetricEigen eig = jacobi_eigen(gram);
  if (!(eig.values.front() > 1e-30)) return {};
  DenseVector v(k);
  for (std::size_t i = 0; i < k; ++i) v[i] = eig.vectors(i, 0);
  DenseVector dir = matvec(metric.basis, v);
  const double nrm = norm2(dir);
  for (double& x : dir) x /= nrm;
  flip_to_canonical_sign(dir);
  return dir;
}

// Full-space analogue via power iteration on J^T J.
inline DenseVector full_kick(const MlpModel& m, const std::vector<char>& mask) {
  const std::size_t d = m.input_dim();
  DenseVector u(d, 0.0);
  double best = 0.0;
  DenseVector ek(m.num_classes(), 0.0);
  for (std::size_t k = 0; k < m.num_classes(); ++k) {
    ek[k] = 1.0;
    DenseVector row = jacobian_apply_t(m, mask, ek);
    ek[k] = 0.0;
    const double nrm = norm2(row);
    if (nrm > best) {
      best = nrm;
      u = row;
    }
  }
  if (!(best > 1e-15)) return {};
  for (int it = 0; it < 80; ++it) {
    DenseVector ju = jacobian_apply(m, mask, u);
    u = jacobian_apply_t(m, mask, ju);
    const double nrm = norm2(u);
    if (!(nrm > 0.0)) return {};
    for (double& x : u) x /= nrm;
  }
  flip_to_canonical_sign(u);
  return u;
}

}  // namespace detail

// Worst case for the regularizer's inner problem: maximize
// d_Y(h(x), h(z)) - lambda * d_X(x, z). The returned point never scores
// below the start (x itself is the fallback), and identical inputs produce
// bit-identical output.
inline DenseVector worst_case_sensei(const MlpModel& model, const FairMetric& metric,
                                     double lambda, const DenseVector& x,
                                     const AttackConfig& cfg, AttackTrace* trace = nullptr) {
  model.validate();
  check_size(x, metric.dim, "worst_case_sensei");
  const ForwardTrace start = forward_trace(model, x);
  const DenseVector& ref = start.logits;
  const std::size_t d = x.size();

  DenseVector z = x;
  bool moved = false;
  std::vector<char> pattern = detail::relu_pattern(start.pre);

  auto objective = [&](const DenseVector& p) {
    return mean_sq_logit_diff(forward(model, p), ref) - lambda * fair_distance(metric, x, p);
  };
  auto record = [&](int phase, const ForwardTrace& t) {
    if (!trace) return;
    std::vector<char> now = detail::relu_pattern(t.pre);
    const bool changed = now != pattern;
    pattern = std::move(now);
    trace->push_back({phase, mean_sq_logit_diff(t.logits, ref) -
                                 lambda * fair_distance(metric, x, z),
                      changed});
  };

  if (metric.basis.cols > 0 && cfg.subspace_iters > 0 && cfg.subspace_step > 0.0) {
    for (std::size_t it = 0; it < cfg.subspace_iters; ++it) {
      ForwardTrace t = forward_trace(model, z);
      DenseVector g = backward_from_logits(model, z, t, [&] {
                        DenseVector dl(t.logits.size());
                        const double s = 2.0 / double(t.logits.size());
                        for (std::size_t k = 0; k < dl.size(); ++k)
                          dl[k] = s * (t.logits[k] - ref[k]);
                        return dl;
                      }()).input;
      DenseVector dir = project_onto(metric, g);
      const double nrm = norm2(dir);
      if (nrm > 1e-300) {
        for (double& v : dir) v /= nrm;
      } else if (!moved) {
        dir = detail::subspace_kick(model, metric, detail::relu_pattern(t.pre));
        if (dir.empty()) break;
      } else {
        break;  // stationary within the subspace
      }
      for (std::size_t i = 0; i < d; ++i) z[i] += cfg.subspace_step * dir[i];
      moved = true;
      if (trace) record(1, forward_trace(model, z));
    }
  }

  if (cfg.full_iters > 0 && cfg.full_step > 0.0) {
    for (std::size_t it = 0; it < cfg.full_iters; ++it) {
      ForwardTrace t = forward_trace(model, z);
      DenseVector dl(t.logits.size());
      const double s = 2.0 / double(t.logits.size());
      for (std::size_t k = 0; k < dl.size(); ++k) dl[k] = s * (t.logits[k] - ref[k]);
      DenseVector g = backward_from_logits(model, z, t, dl).input;
      DenseVector r(d);
      for (std::size_t i = 0; i < d; ++i) r[i] = z[i] - x[i];
      const DenseVector pen = project_out(metric, r);
      for (std::size_t i = 0; i < d; ++i) g[i] -= 2.0 * lambda * pen[i];
      const double nrm = norm2(g);
      DenseVector dir;
      if (nrm > 1e-300) {
        dir = g;
        for (double& v : dir) v /= nrm;
      } else if (!moved) {
        dir = detail::full_kick(model, detail::relu_pattern(t.pre));
        if (dir.empty()) break;
      } else {
        break;
      }
      for (std::size_t i = 0; i < d; ++i) z[i] += cfg.full_step * dir[i];
      moved = true;
      if (trace) record(2, forward_trace(model, z));
    }
  }

  return objective(z) > 0.0 ? z : x;
}

// Worst case for the DRO inner problem: maximize
// loss(label, h(z)) - lambda * d_X(x, z).
inline DenseVector worst_case_sensr(const MlpModel& model, const FairMetric& metric,
                                    double lambda, const DenseVector& x, int label,
                                    const AttackConfig& cfg, AttackTrace* trace = nullptr) {
  model.validate();
  check_size(x, metric.dim, "worst_case_sensr");
  const std::size_t d = x.size();
  DenseVector z = x;
  std::vector<char> pattern = detail::relu_pattern(forward_trace(model, x).pre);

  auto objective = [&](const DenseVector& p) {
    return cross_entropy_loss(forward(model, p), label) -
           lambda * fair_distance(metric, x, p);
  };
  auto record = [&](int phase, const ForwardTrace& t) {
    if (!trace) return;
    std::vector<char> now = detail::relu_pattern(t.pre);
    const bool changed = now != pattern;
    pattern = std::move(now);
    trace->push_back({phase, cross_entropy_loss(t.logits, label) -
                                 lambda * fair_distance(metric, x, z),
                      changed});
  };

  if (metric.basis.cols > 0 && cfg.subspace_iters > 0 && cfg.subspace_step > 0.0) {
    for (std::size_t it = 0; it < cfg.subspace_iters; ++it) {
      DenseVector dir = project_onto(metric, input_gradient_loss(model, z, label));
      const double nrm = norm2(dir);
      if (!(nrm > 1e-300)) break;
      for (double& v : dir) v /= nrm;
      for (std::size_t i = 0; i < d; ++i) z[i] += cfg.subspace_step * dir[i];
      if (trace) record(1, forward_trace(model, z));
    }
  }
  if (cfg.full_iters > 0 && cfg.full_step > 0.0) {
    for (std::size_t it = 0; it < cfg.full_iters; ++it) {
      DenseVector g = input_gradient_loss(model, z, label);
      DenseVector r(d);
      for (std::size_t i = 0; i < d; ++i) r[i] = z[i] - x[i];
      const DenseVector pen = project_out(metric, r);
      for (std::size_t i = 0; i < d; ++i) g[i] -= 2.0 * lambda * pen[i];
      const double nrm = norm2(g);
      if (!(nrm > 1e-300)) break;
      for (double& v : g) v /= nrm;
      for (std::size_t i = 0; i < d; ++i) z[i] += cfg.full_step * g[i];
      if (trace) record(2, forward_trace(model, z));
    }
  }

  return objective(z) > objective(x) ? z : x;
}

// ---- batched lockstep attacks, used by the training loops ----

struct BatchAttackResult {
  DenseMatrix adversarial;  // B x d
  DenseVector fair_cost;    // d_X(x_b, x'_b)
  DenseVector output_diff;  // d_Y(h(x_b), h(x'_b)) (sensei) or adv loss (sensr)
};

namespace detail {

enum class AttackObjective { LogitDiff, Loss };

inline BatchAttackResult batch_attack(const MlpModel& model, const FairMetric& metric,
                                      double lambda, const DenseMatrix& x,
                                      const std::vector<int>& labels,
                                      const AttackConfig& cfg, AttackObjective obj) {
  const std::size_t bsz = x.rows, d = x.cols, kk = metric.basis.cols;
  const std::size_t classes = model.num_classes(), hidden = model.hidden_dim();
  const BatchForward fwd0 = batch_forward(model, x);
  const DenseMatrix& ref = fwd0.logits;

  auto fill_dlogits = [&](const DenseMatrix& logits, DenseMatrix& dl) {
    if (obj == AttackObjective::LogitDiff) {
      const double s = 2.0 / double(classes);
      for (std::size_t i = 0; i < dl.data.size(); ++i)
        dl.data[i] = s * (logits.data[i] - ref.data[i]);
    } else {
      for (std::size_t b = 0; b < bsz; ++b) {
        DenseVector row(logits.row_ptr(b), logits.row_ptr(b) + classes);
        const DenseVector p = softmax(row);
        for (std::size_t k = 0; k < classes; ++k) dl(b, k) = p[k];
        dl(b, static_cast<std::size_t>(labels[b])) -= 1.0;
      }
    }
  };

  std::vector<char> moved(bsz, 0);
  DenseMatrix u(bsz, kk);  // subspace coordinates of the perturbation

  if (kk > 0 && cfg.subspace_iters > 0 && cfg.subspace_step > 0.0) {
    DenseMatrix w1a(hidden, kk);
    gemm(1.0, model.w1, false, metric.basis, false, 0.0, w1a);
    DenseMatrix pre0(bsz, hidden);  // w1 x + b1, kept unrectified
    gemm(1.0, x, false, model.w1, true, 0.0, pre0);
    for (std::size_t b = 0; b < bsz; ++b)
      for (std::size_t j = 0; j < hidden; ++j) pre0(b, j) += model.b1[j];

    DenseMatrix pre(bsz, hidden), hid(bsz, hidden), logits(bsz, classes);
    DenseMatrix dl(bsz, classes), dpre(bsz, hidden), gu(bsz, kk);
    for (std::size_t it = 0; it < cfg.subspace_iters; ++it) {
      pre = pre0;
      gemm(1.0, u, false, w1a, true, 1.0, pre);
      for (std::size_t i = 0; i < pre.data.size(); ++i) hid.data[i] = relu(pre.data[i]);
      gemm(1.0, hid, false, model.w2, true, 0.0, logits);
      for (std::size_t b = 0; b < bsz; ++b)
        for (std::size_t k = 0; k < classes; ++k) logits(b, k) += model.b2[k];
      fill_dlogits(logits, dl);
      gemm(1.0, dl, false, model.w2, false, 0.0, dpre);
      for (std::size_t i = 0; i < dpre.data.size(); ++i)
        if (!(pre.data[i] > 0.0)) dpre.data[i] = 0.0;
      gemm(1.0, dpre, false, w1a, false, 0.0, gu);

      for (std::size_t b = 0; b < bsz; ++b) {
        double nrm = 0.0;
        for (std::size_t j = 0; j < kk; ++j) nrm += gu(b, j) * gu(b, j);
        nrm = std::sqrt(nrm);
        if (nrm > 1e-300) {
          for (std::size_t j = 0; j < kk; ++j)
            u(b, j) += cfg.subspace_step * gu(b, j) / nrm;
          moved[b] = 1;
        } else if (!moved[b] && obj == AttackObjective::LogitDiff) {
          std::vector<char> mask(hidden);
          for (std::size_t j = 0; j < hidden; ++j) mask[j] = pre(b, j) > 0.0 ? 1 : 0;
          const DenseVector dir = subspace_kick(model, metric, mask);
          if (dir.empty()) continue;
          const DenseVector coeff = matvec_t(metric.basis, dir);
          for (std::size_t j = 0; j < kk; ++j) u(b, j) += cfg.subspace_step * coeff[j];
          moved[b] = 1;
        }
      }
    }
  }

  DenseMatrix z = x;
  if (kk > 0) gemm(1.0, u, false, metric.basis, true, 1.0, z);

  if (cfg.full_iters > 0 && cfg.full_step > 0.0) {
    BatchForward fwd;
    DenseMatrix dl(bsz, classes), dpre, g, r(bsz, d), ru(bsz, kk);
    for (std::size_t it = 0; it < cfg.full_iters; ++it) {
      batch_forward_into(model, z, fwd);
      fill_dlogits(fwd.logits, dl);
      batch_backward_inputs_into(model, fwd, dl, dpre, g);
      if (lambda != 0.0) {
        for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = z.data[i] - x.data[i];
        if (kk > 0) {
          gemm(1.0, r, false, metric.basis, false, 0.0, ru);
          gemm(-1.0, ru, false, metric.basis, true, 1.0, r);
        }
        for (std::size_t i = 0; i < g.data.size(); ++i)
          g.data[i] -= 2.0 * lambda * r.data[i];
      }
      for (std::size_t b = 0; b < bsz; ++b) {
        double nrm = 0.0;
        const double* gr = g.row_ptr(b);
        for (std::size_t j = 0; j < d; ++j) nrm += gr[j] * gr[j];
        nrm = std::sqrt(nrm);
        if (nrm > 1e-300) {
          for (std::size_t j = 0; j < d; ++j) z(b, j) += cfg.full_step * gr[j] / nrm;
          moved[b] = 1;
        } else if (!moved[b] && obj == AttackObjective::LogitDiff) {
          std::vector<char> mask(hidden);
          for (std::size_t j = 0; j < hidden; ++j)
            mask[j] = fwd.hidden(b, j) > 0.0 ? 1 : 0;
          const DenseVector dir = full_kick(model, mask);
          if (dir.empty()) continue;
          for (std::size_t j = 0; j < d; ++j) z(b, j) += cfg.full_step * dir[j];
          moved[b] = 1;
        }
      }
    }
  }

  BatchAttackResult out;
  out.adversarial = std::move(z);
  out.fair_cost.assign(bsz, 0.0);
  out.output_diff.assign(bsz, 0.0);
  const BatchForward fwd_end = batch_forward(model, out.adversarial);
  DenseVector xb(d), zb(d);
  for (std::size_t b = 0; b < bsz; ++b) {
    xb.assign(x.row_ptr(b), x.row_ptr(b) + d);
    zb.assign(out.adversarial.row_ptr(b), out.adversarial.row_ptr(b) + d);
    const double cost = fair_distance(metric, xb, zb);
    if (obj == AttackObjective::LogitDiff) {
      double dy = 0.0;
      for (std::size_t k = 0; k < classes; ++k) {
        const double diff = fwd_end.logits(b, k) - ref(b, k);
        dy += diff * diff;
      }
      dy /= double(classes);
      if (dy - lambda * cost > 0.0) {
        out.fair_cost[b] = cost;
        out.output_diff[b] = dy;
      } else {
        for (std::size_t j = 0; j < d; ++j) out.adversarial(b, j) = x(b, j);
      }
    } else {
      DenseVector lz(fwd_end.logits.row_ptr(b), fwd_end.logits.row_ptr(b) + classes);
      DenseVector lx(ref.row_ptr(b), ref.row_ptr(b) + classes);
      const double adv = cross_entropy_loss(lz, labels[b]);
      const double clean = cross_entropy_loss(lx, labels[b]);
      if (adv - lambda * cost > clean) {
        out.fair_cost[b] = cost;
        out.output_diff[b] = adv;
      } else {
        for (std::size_t j = 0; j < d; ++j) out.adversarial(b, j) = x(b, j);
        out.output_diff[b] = clean;
      }
    }
  }
  return out;
}

}  // namespace detail

inline BatchAttackResult worst_case_sensei_batch(const MlpModel& model,
                                                 const FairMetric& metric, double lambda,
                                                 const DenseMatrix& x,
                                                 const AttackConfig& cfg) {
  return detail::batch_attack(model, metric, lambda, x, {}, cfg,
                              detail::AttackObjective::LogitDiff);
}

inline BatchAttackResult worst_case_sensr_batch(const MlpModel& model,
                                                const FairMetric& metric, double lambda,
                                                const DenseMatrix& x,
                                                const std::vector<int>& labels,
                                                const AttackConfig& cfg) {
  return detail::batch_attack(model, metric, lambda, x, labels, cfg,
                              detail::AttackObjective::Loss);
}

}  // namespace difair

#endif  // DIFAIR_ATTACK_HPP
