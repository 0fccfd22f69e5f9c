#ifndef DIFAIR_TRAINERS_HPP
#define DIFAIR_TRAINERS_HPP

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <functional>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "difair/attack.hpp"
#include "difair/fair_metric.hpp"
#include "difair/matrix.hpp"
#include "difair/mlp.hpp"
#include "difair/rng.hpp"

namespace difair {

enum class TrainMethod { Erm, Sensei, Sensr, Clp };

inline const char* method_name(TrainMethod m) {
  switch (m) {
    case TrainMethod::Erm: return "erm";
    case TrainMethod::Sensei: return "sensei";
    case TrainMethod::Sensr: return "sensr";
    case TrainMethod::Clp: return "clp";
  }
  return "?";
}

inline TrainMethod parse_method(const std::string& s) {
  if (s == "erm") return TrainMethod::Erm;
  if (s == "sensei") return TrainMethod::Sensei;
  if (s == "sensr") return TrainMethod::Sensr;
  if (s == "clp") return TrainMethod::Clp;
  throw std::invalid_argument("unknown training method: " + s);
}

enum class Optimizer { Sgd, Adam };

inline Optimizer parse_optimizer(const std::string& s) {
  if (s == "sgd") return Optimizer::Sgd;
  if (s == "adam") return Optimizer::Adam;
  throw std::invalid_argument("unknown optimizer: " + s);
}

struct TrainConfig {
  std::size_t steps = 1;   // epoch
  std::size_t batch = 1;   // batch_size
  double lr = 1e-3;        // lr
  AttackConfig attack;     // adv_step / adv_epoch / l2_attack / adv_epoch_full
  double eps = 0.0;        // ro (transport budget)
  double rho = 0.0;        // fair_reg
  std::uint64_t seed = 0;
  TrainMethod method = TrainMethod::Erm;
  std::optional<double> lambda_clamp;
  Optimizer optimizer = Optimizer::Sgd;
  std::size_t log_every = 100;
};

// First/second-moment buffers for Adam, shaped like the model parameters.
struct AdamState {
  ParamGradients m1;
  ParamGradients m2;
  std::size_t t = 0;

  explicit AdamState(const MlpModel& model) : m1(model), m2(model) {}
};

// Joint optimization variable (theta, lambda).
struct DualState {
  MlpModel model;
  double lambda = 0.0;
  std::size_t step_count = 0;
  std::optional<AdamState> adam;
};

struct Batch {
  DenseMatrix x;            // B x d
  std::vector<int> labels;  // B
};

// Maps an example to its counterfactual; the RNG covers generators that pick
// among several counterfactuals.
using CounterfactualFn = std::function<DenseVector(const DenseVector&, Rng&)>;

// Dual ascent step on the transport budget: lambda rises when the mean fair
// cost of the worst-case examples exceeds eps.
inline double lambda_budget_update(double lambda, double lr, double rho, double eps,
                                   double mean_cost) {
  return std::max(0.0, lambda - lr * rho * (eps - mean_cost));
}

inline double apply_lambda_clamp(double lambda, const std::optional<double>& clamp) {
  return clamp ? std::min(lambda, *clamp) : lambda;
}

struct StepResult {
  DualState state;
  double loss = 0.0;
  double mean_fair_cost = 0.0;
};

namespace detail {

inline double batch_mean_ce(const DenseMatrix& logits, const std::vector<int>& labels) {
  double s = 0.0;
  DenseVector row(logits.cols);
  for (std::size_t b = 0; b < logits.rows; ++b) {
    row.assign(logits.row_ptr(b), logits.row_ptr(b) + logits.cols);
    s += cross_entropy_loss(row, labels[b]);
  }
  return s / double(logits.rows);
}

inline void fill_ce_dlogits(const DenseMatrix& logits, const std::vector<int>& labels,
                            DenseMatrix& dl) {
  DenseVector row(logits.cols);
  for (std::size_t b = 0; b < logits.rows; ++b) {
    row.assign(logits.row_ptr(b), logits.row_ptr(b) + logits.cols);
    const DenseVector p = softmax(row);
    for (std::size_t k = 0; k < logits.cols; ++k) dl(b, k) = p[k];
    dl(b, static_cast<std::size_t>(labels[b])) -= 1.0;
  }
}

// Applies one descent step on the batch-mean gradient (g holds the summed
// gradients; batch the count). Plain SGD by default; Adam keeps moment
// buffers inside the state.
inline void apply_update(DualState& state, const ParamGradients& g, std::size_t batch,
                         const TrainConfig& cfg) {
  MlpModel& m = state.model;
  const double inv_b = 1.0 / double(batch);
  if (cfg.optimizer == Optimizer::Sgd) {
    const double scale = cfg.lr * inv_b;
    for (std::size_t i = 0; i < m.w1.data.size(); ++i) m.w1.data[i] -= scale * g.w1.data[i];
    for (std::size_t i = 0; i < m.b1.size(); ++i) m.b1[i] -= scale * g.b1[i];
    for (std::size_t i = 0; i < m.w2.data.size(); ++i) m.w2.data[i] -= scale * g.w2.data[i];
    for (std::size_t i = 0; i < m.b2.size(); ++i) m.b2[i] -= scale * g.b2[i];
    return;
  }
  if (!state.adam) state.adam.emplace(m);
  AdamState& a = *state.adam;
  a.t += 1;
  const double b1 = 0.9, b2 = 0.999, eps_hat = 1e-8;
  const double c1 = 1.0 - std::pow(b1, double(a.t));
  const double c2 = 1.0 - std::pow(b2, double(a.t));
  auto update = [&](double* w, double* m1, double* m2, const double* grad, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      const double gi = grad[i] * inv_b;
      m1[i] = b1 * m1[i] + (1.0 - b1) * gi;
      m2[i] = b2 * m2[i] + (1.0 - b2) * gi * gi;
      w[i] -= cfg.lr * (m1[i] / c1) / (std::sqrt(m2[i] / c2) + eps_hat);
    }
  };
  update(m.w1.data.data(), a.m1.w1.data.data(), a.m2.w1.data.data(), g.w1.data.data(),
         m.w1.data.size());
  update(m.b1.data(), a.m1.b1.data(), a.m2.b1.data(), g.b1.data(), m.b1.size());
  update(m.w2.data.data(), a.m1.w2.data.data(), a.m2.w2.data.data(), g.w2.data.data(),
         m.w2.data.size());
  update(m.b2.data(), a.m1.b2.data(), a.m2.b2.data(), g.b2.data(), m.b2.size());
}

inline bool all_zero(const DenseMatrix& m) {
  for (double v : m.data)
    if (v != 0.0) return false;
  return true;
}

// Shared step for the paired-output penalty methods (sensei and clp):
// mean over the batch of grad[ ce(y, h(x)) + rho * d_Y(h(x), h(paired_x)) ].
inline StepResult paired_penalty_step(const DualState& state, const Batch& batch,
                                      const DenseMatrix& paired, double rho,
                                      const TrainConfig& cfg) {
  const MlpModel& m = state.model;
  const std::size_t bsz = batch.x.rows, classes = m.num_classes();
  const BatchForward fwd_x = batch_forward(m, batch.x);
  const BatchForward fwd_p = batch_forward(m, paired);

  DenseMatrix dl_x(bsz, classes);
  fill_ce_dlogits(fwd_x.logits, batch.labels, dl_x);
  DenseMatrix dl_p(bsz, classes);
  const double s = rho * 2.0 / double(classes);
  for (std::size_t i = 0; i < dl_p.data.size(); ++i) {
    const double diff = fwd_p.logits.data[i] - fwd_x.logits.data[i];
    dl_p.data[i] = s * diff;
    dl_x.data[i] -= s * diff;
  }

  ParamGradients g(m);
  batch_backward_params(m, batch.x, fwd_x, dl_x, g, false);
  if (!all_zero(dl_p)) batch_backward_params(m, paired, fwd_p, dl_p, g, true);

  StepResult out{state, batch_mean_ce(fwd_x.logits, batch.labels), 0.0};
  sgd_apply(out.state.model, g, cfg.lr / double(bsz));
  out.state.step_count += 1;
  return out;
}

}  // namespace detail

// Vanilla mini-batch SGD on the mean cross-entropy.
inline StepResult erm_step(const DualState& state, const Batch& batch,
                           const TrainConfig& cfg) {
  const MlpModel& m = state.model;
  const BatchForward fwd = batch_forward(m, batch.x);
  DenseMatrix dl(batch.x.rows, m.num_classes());
  detail::fill_ce_dlogits(fwd.logits, batch.labels, dl);
  ParamGradients g(m);
  batch_backward_params(m, batch.x, fwd, dl, g, false);
  StepResult out{state, detail::batch_mean_ce(fwd.logits, batch.labels), 0.0};
  detail::sgd_apply(out.state.model, g, cfg.lr / double(batch.x.rows));
  out.state.step_count += 1;
  return out;
}

// One step of the sensitive-set-invariance trainer: worst-case examples at
// lambda_t, dual update on the budget, then SGD on
// ce + rho * d_Y(h(x), h(x')) with x' held fixed.
inline StepResult sensei_step(const DualState& state, const Batch& batch,
                              const FairMetric& metric, const TrainConfig& cfg) {
  if (cfg.rho == 0.0) return erm_step(state, batch, cfg);
  const BatchAttackResult atk =
      worst_case_sensei_batch(state.model, metric, state.lambda, batch.x, cfg.attack);
  double mean_cost = 0.0;
  for (double c : atk.fair_cost) mean_cost += c;
  mean_cost /= double(batch.x.rows);

  StepResult out = detail::paired_penalty_step(state, batch, atk.adversarial, cfg.rho, cfg);
  out.mean_fair_cost = mean_cost;
  out.state.lambda = apply_lambda_clamp(
      lambda_budget_update(state.lambda, cfg.lr, cfg.rho, cfg.eps, mean_cost),
      cfg.lambda_clamp);
  return out;
}

// One step of the DRO trainer: SGD on the loss at the worst-case examples,
// same budget rule for lambda (with unit multiplier, since the DRO
// Lagrangian carries no rho).
inline StepResult sensr_step(const DualState& state, const Batch& batch,
                             const FairMetric& metric, const TrainConfig& cfg) {
  const MlpModel& m = state.model;
  const std::size_t bsz = batch.x.rows;
  const BatchAttackResult atk = worst_case_sensr_batch(m, metric, state.lambda, batch.x,
                                                       batch.labels, cfg.attack);
  double mean_cost = 0.0;
  for (double c : atk.fair_cost) mean_cost += c;
  mean_cost /= double(bsz);

  const BatchForward fwd = batch_forward(m, atk.adversarial);
  DenseMatrix dl(bsz, m.num_classes());
  detail::fill_ce_dlogits(fwd.logits, batch.labels, dl);
  ParamGradients g(m);
  batch_backward_params(m, atk.adversarial, fwd, dl, g, false);

  StepResult out{state, detail::batch_mean_ce(fwd.logits, batch.labels), mean_cost};
  detail::sgd_apply(out.state.model, g, cfg.lr / double(bsz));
  out.state.step_count += 1;
  out.state.lambda = apply_lambda_clamp(
      lambda_budget_update(state.lambda, cfg.lr, 1.0, cfg.eps, mean_cost),
      cfg.lambda_clamp);
  return out;
}

// Counterfactual logit pairing: SGD on ce + rho * d_Y(h(x), h(x_cf)).
inline StepResult clp_step(const DualState& state, const Batch& batch,
                           const CounterfactualFn& counterfactual, const TrainConfig& cfg,
                           Rng& rng) {
  if (!counterfactual) {
    throw std::invalid_argument("clp_step: counterfactual generator required");
  }
  if (cfg.rho == 0.0) return erm_step(state, batch, cfg);
  const std::size_t bsz = batch.x.rows, d = batch.x.cols;
  DenseMatrix cf(bsz, d);
  DenseVector row(d);
  for (std::size_t b = 0; b < bsz; ++b) {
    row.assign(batch.x.row_ptr(b), batch.x.row_ptr(b) + d);
    const DenseVector c = counterfactual(row, rng);
    check_size(c, d, "clp_step counterfactual");
    for (std::size_t j = 0; j < d; ++j) cf(b, j) = c[j];
  }
  return detail::paired_penalty_step(state, batch, cf, cfg.rho, cfg);
}

// Emits batches in which every class appears floor(B/K) or ceil(B/K) times.
// Per-class pools are shuffled and cycled; the classes receiving the extra
// example rotate across batches.
class BalancedSampler {
 public:
  BalancedSampler(const std::vector<int>& labels, std::size_t num_classes, Rng& rng)
      : pools_(num_classes), cursor_(num_classes, 0) {
    for (std::size_t i = 0; i < labels.size(); ++i) {
      const int y = labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
        throw std::invalid_argument("BalancedSampler: label out of range");
      }
      pools_[static_cast<std::size_t>(y)].push_back(i);
    }
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (pools_[k].empty()) {
        throw std::invalid_argument("BalancedSampler: class " + std::to_string(k) +
                                    " has no examples");
      }
      rng.shuffle(pools_[k]);
    }
  }

  std::vector<std::size_t> next_batch(std::size_t batch_size, Rng& rng) {
    const std::size_t k = pools_.size();
    std::vector<std::size_t> counts(k, batch_size / k);
    const std::size_t rem = batch_size % k;
    for (std::size_t i = 0; i < rem; ++i) counts[(rotation_ + i) % k] += 1;
    rotation_ = (rotation_ + rem) % k;

    std::vector<std::size_t> out;
    out.reserve(batch_size);
    for (std::size_t c = 0; c < k; ++c) {
      for (std::size_t i = 0; i < counts[c]; ++i) {
        if (cursor_[c] == pools_[c].size()) {
          rng.shuffle(pools_[c]);
          cursor_[c] = 0;
        }
        out.push_back(pools_[c][cursor_[c]++]);
      }
    }
    return out;
  }

 private:
  std::vector<std::vector<std::size_t>> pools_;
  std::vector<std::size_t> cursor_;
  std::size_t rotation_ = 0;
};

struct TrainLogRow {
  std::size_t step = 0;
  double loss = 0.0;
  double lambda = 0.0;
  double mean_fair_cost = 0.0;
};
using TrainLog = std::vector<TrainLogRow>;

inline void write_train_log_csv(const TrainLog& log, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("write_train_log_csv: cannot open " + path);
  out << "step,loss,lambda,mean_fair_cost\n";
  char buf[160];
  for (const TrainLogRow& r : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.step, r.loss, r.lambda,
                  r.mean_fair_cost);
    out << buf;
  }
}

struct TrainResult {
  DualState state;
  TrainLog log;
};

// Runs exactly cfg.steps steps of the configured method over balanced
// mini-batches. Deterministic for a given seed; lambda starts at 0.
inline TrainResult train(const DenseMatrix& features, const std::vector<int>& labels,
                         std::size_t num_classes, std::size_t hidden_units,
                         const FairMetric& metric, const TrainConfig& cfg,
                         const CounterfactualFn& counterfactual = nullptr,
                         std::ostream* progress = nullptr) {
  if (features.rows == 0) throw std::invalid_argument("train: empty dataset");
  if (labels.size() != features.rows) {
    throw std::invalid_argument("train: label count mismatch");
  }
  if (num_classes < 2) throw std::invalid_argument("train: need >= 2 classes");
  if (cfg.batch < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(cfg.lr > 0.0)) throw std::invalid_argument("train: lr must be positive");
  if (cfg.rho < 0.0 || cfg.eps < 0.0) {
    throw std::invalid_argument("train: ro and fair_reg must be non-negative");
  }
  if (metric.dim != features.cols) {
    throw std::invalid_argument("train: metric dimension does not match features");
  }
  if (cfg.method == TrainMethod::Clp && !counterfactual) {
    throw std::invalid_argument("train: clp requires a counterfactual generator");
  }

  Rng rng(cfg.seed);
  TrainResult out;
  out.state.model = init_mlp(features.cols, hidden_units, num_classes, rng);
  out.state.lambda = 0.0;
  if (cfg.steps == 0) return out;

  BalancedSampler sampler(labels, num_classes, rng);
  Batch batch;
  batch.x = DenseMatrix(cfg.batch, features.cols);
  batch.labels.resize(cfg.batch);

  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    const std::vector<std::size_t> idx = sampler.next_batch(cfg.batch, rng);
    for (std::size_t b = 0; b < cfg.batch; ++b) {
      const double* src = features.row_ptr(idx[b]);
      std::copy(src, src + features.cols, batch.x.row_ptr(b));
      batch.labels[b] = labels[idx[b]];
    }

    StepResult res;
    switch (cfg.method) {
      case TrainMethod::Erm: res = erm_step(out.state, batch, cfg); break;
      case TrainMethod::Sensei: res = sensei_step(out.state, batch, metric, cfg); break;
      case TrainMethod::Sensr: res = sensr_step(out.state, batch, metric, cfg); break;
      case TrainMethod::Clp: res = clp_step(out.state, batch, counterfactual, cfg, rng); break;
    }
    out.state = std::move(res.state);

    if (t == 1 || t % cfg.log_every == 0 || t == cfg.steps) {
      out.log.push_back({t, res.loss, out.state.lambda, res.mean_fair_cost});
      if (progress && (t % (cfg.log_every * 50) == 0 || t == cfg.steps)) {
        (*progress) << method_name(cfg.method) << " step " << t << "/" << cfg.steps
                    << " loss " << res.loss << " lambda " << out.state.lambda << '\n';
      }
    }
  }
  return out;
}

}  // namespace difair

#endif  // DIFAIR_TRAINERS_HPP
