#ifndef DIFAIR_EVAL_METRICS_HPP
#define DIFAIR_EVAL_METRICS_HPP

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "difair/matrix.hpp"
#include "difair/mlp.hpp"

namespace difair {

// Argmax with ties broken toward the lowest class index.
inline int argmax_class(const DenseVector& v) {
  std::size_t best = 0;
  for (std::size_t k = 1; k < v.size(); ++k)
    if (v[k] > v[best]) best = k;
  return static_cast<int>(best);
}

inline int predict_class(const MlpModel& m, const DenseVector& x) {
  return argmax_class(forward(m, x));
}

// A base example plus the protected-attribute variations it is compared
// against. When includes_base is false the base participates alongside the
// variants in every consistency/spread computation.
struct VariationSet {
  DenseVector base;
  std::vector<DenseVector> variants;
  bool includes_base = true;
};

namespace detail {

inline std::vector<const DenseVector*> variation_members(const VariationSet& s) {
  if (s.variants.empty()) throw std::invalid_argument("VariationSet: needs >= 1 variant");
  std::vector<const DenseVector*> out;
  if (!s.includes_base) out.push_back(&s.base);
  for (const DenseVector& v : s.variants) out.push_back(&v);
  return out;
}

}  // namespace detail

// Mean of per-class true positive rates. Every class must appear in labels.
inline double balanced_accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                                std::size_t num_classes) {
  if (preds.size() != labels.size() || preds.empty()) {
    throw std::invalid_argument("balanced_accuracy: size mismatch or empty");
  }
  std::vector<std::size_t> total(num_classes, 0), correct(num_classes, 0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || static_cast<std::size_t>(y) >= num_classes) {
      throw std::invalid_argument("balanced_accuracy: label out of range");
    }
    total[static_cast<std::size_t>(y)] += 1;
    if (preds[i] == y) correct[static_cast<std::size_t>(y)] += 1;
  }
  double s = 0.0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (total[k] == 0) {
      throw std::invalid_argument("balanced_accuracy: class " + std::to_string(k) +
                                  " absent from labels");
    }
    s += double(correct[k]) / double(total[k]);
  }
  return s / double(num_classes);
}

inline double plain_accuracy(const std::vector<int>& preds, const std::vector<int>& labels) {
  std::size_t ok = 0;
  for (std::size_t i = 0; i < preds.size(); ++i)
    if (preds[i] == labels[i]) ++ok;
  return preds.empty() ? 0.0 : double(ok) / double(preds.size());
}

// Fraction of variation sets whose predicted class is identical across all
// members.
inline double prediction_consistency(const MlpModel& model,
                                     const std::vector<VariationSet>& sets) {
  if (sets.empty()) throw std::invalid_argument("prediction_consistency: no variation sets");
  std::size_t consistent = 0;
  for (const VariationSet& s : sets) {
    const auto members = detail::variation_members(s);
    const int first = predict_class(model, *members.front());
    bool same = true;
    for (std::size_t i = 1; i < members.size() && same; ++i)
      same = predict_class(model, *members[i]) == first;
    if (same) ++consistent;
  }
  return double(consistent) / double(sets.size());
}

// Spread of predicted probabilities across variations. Binary: mean over
// sets of the population standard deviation of P(class 1). Multiclass: mean
// over sets of the mean pairwise squared Euclidean distance between
// probability vectors.
inline double ctf_score(const MlpModel& model, const std::vector<VariationSet>& sets,
                        std::size_t num_classes) {
  if (num_classes < 2) throw std::invalid_argument("ctf_score: need >= 2 classes");
  if (sets.empty()) throw std::invalid_argument("ctf_score: no variation sets");
  double acc = 0.0;
  for (const VariationSet& s : sets) {
    const auto members = detail::variation_members(s);
    std::vector<DenseVector> probs;
    probs.reserve(members.size());
    for (const DenseVector* x : members) probs.push_back(softmax(forward(model, *x)));
    if (num_classes == 2) {
      double mean = 0.0;
      for (const DenseVector& p : probs) mean += p[1];
      mean /= double(probs.size());
      double var = 0.0;
      for (const DenseVector& p : probs) var += (p[1] - mean) * (p[1] - mean);
      acc += std::sqrt(var / double(probs.size()));
    } else {
      double sum = 0.0;
      std::size_t pairs = 0;
      for (std::size_t i = 0; i < probs.size(); ++i) {
        for (std::size_t j = i + 1; j < probs.size(); ++j) {
          double d = 0.0;
          for (std::size_t k = 0; k < num_classes; ++k) {
            const double diff = probs[i][k] - probs[j][k];
            d += diff * diff;
          }
          sum += d;
          ++pairs;
        }
      }
      acc += pairs > 0 ? sum / double(pairs) : 0.0;
    }
  }
  return acc / double(sets.size());
}

// Per-class |TPR_group0 - TPR_group1| summarized as RMS, mean and max.
// Classes missing either group are excluded from the summaries and listed.
struct TprGapResult {
  double rms = 0.0;
  double abs = 0.0;
  double max = 0.0;
  std::vector<int> excluded_classes;
};

inline TprGapResult tpr_gaps(const std::vector<int>& preds, const std::vector<int>& labels,
                             const std::vector<int>& group, std::size_t num_classes) {
  if (preds.size() != labels.size() || preds.size() != group.size() || preds.empty()) {
    throw std::invalid_argument("tpr_gaps: size mismatch or empty");
  }
  TprGapResult out;
  std::vector<double> gaps;
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::size_t tot0 = 0, tot1 = 0, hit0 = 0, hit1 = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (static_cast<std::size_t>(labels[i]) != k) continue;
      if (group[i] == 0) {
        ++tot0;
        if (preds[i] == labels[i]) ++hit0;
      } else {
        ++tot1;
        if (preds[i] == labels[i]) ++hit1;
      }
    }
    if (tot0 == 0 || tot1 == 0) {
      out.excluded_classes.push_back(static_cast<int>(k));
      continue;
    }
    gaps.push_back(std::abs(double(hit0) / double(tot0) - double(hit1) / double(tot1)));
  }
  if (gaps.empty()) {
    throw std::invalid_argument("tpr_gaps: no class has both group values present");
  }
  double sq = 0.0, lin = 0.0, mx = 0.0;
  for (double g : gaps) {
    sq += g * g;
    lin += g;
    mx = std::max(mx, g);
  }
  out.rms = std::sqrt(sq / double(gaps.size()));
  out.abs = lin / double(gaps.size());
  out.max = mx;
  return out;
}

// Population standard deviation of per-group accuracy and per-group balanced
// accuracy. Group masks may overlap; each must be nonempty.
inline std::pair<double, double> accuracy_parity_std(
    const std::vector<int>& preds, const std::vector<int>& labels,
    const std::vector<std::vector<std::size_t>>& group_masks, std::size_t num_classes) {
  if (group_masks.empty()) throw std::invalid_argument("accuracy_parity_std: no groups");
  std::vector<double> accs, bas;
  for (const auto& idx : group_masks) {
    if (idx.empty()) throw std::invalid_argument("accuracy_parity_std: empty group");
    std::size_t ok = 0;
    std::vector<std::size_t> tot(num_classes, 0), hit(num_classes, 0);
    for (std::size_t i : idx) {
      if (preds[i] == labels[i]) ++ok;
      tot[static_cast<std::size_t>(labels[i])] += 1;
      if (preds[i] == labels[i]) hit[static_cast<std::size_t>(labels[i])] += 1;
    }
    accs.push_back(double(ok) / double(idx.size()));
    double ba = 0.0;
    std::size_t present = 0;
    for (std::size_t k = 0; k < num_classes; ++k) {
      if (tot[k] > 0) {
        ba += double(hit[k]) / double(tot[k]);
        ++present;
      }
    }
    bas.push_back(present > 0 ? ba / double(present) : 0.0);
  }
  auto pop_std = [](const std::vector<double>& v) {
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= double(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return std::sqrt(var / double(v.size()));
  };
  return {pop_std(accs), pop_std(bas)};
}

struct MetricsReport {
  double balanced_accuracy = 0.0;
  double prediction_consistency = 0.0;
  double ctf_score = 0.0;
  double gap_rms = 0.0;
  double gap_abs = 0.0;
  double gap_max = 0.0;
  double parity_acc_std = 0.0;
  double parity_ba_std = 0.0;
};

}  // namespace difair

#endif  // DIFAIR_EVAL_METRICS_HPP
