#ifndef DIFAIR_DATA_HPP
#define DIFAIR_DATA_HPP

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "difair/eval_metrics.hpp"
#include "difair/matrix.hpp"
#include "difair/rng.hpp"

namespace difair {

// Thrown for unreadable or unusable data files; the CLI maps it to exit 3.
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Dataset {
  DenseMatrix features;  // n x d
  std::vector<int> labels;
  std::size_t num_classes = 2;
  std::vector<std::string> column_names;

  // Protected-column schema (present where the dataset defines them).
  std::optional<std::size_t> gender_col;
  std::optional<std::size_t> race_col;
  std::vector<std::size_t> marital_cols;
  std::optional<std::size_t> sensitive_col;  // synthetic benchmark

  // Ingestion bookkeeping.
  std::size_t dropped_missing = 0;
  std::size_t skipped_malformed = 0;
  std::size_t train_rows = 0;  // leading rows that came from the train file

  std::size_t size() const { return features.rows; }
  std::size_t dim() const { return features.cols; }

  DenseVector row(std::size_t i) const {
    return DenseVector(features.row_ptr(i), features.row_ptr(i) + features.cols);
  }
};

// 2-D benchmark where points on a horizontal line are similar but the labels
// are biased along the x-axis: label = 1 iff y + 0.4 * sign(x) > 0. The
// boundary of the label rule depends on x, while the fair rule (invariant on
// horizontal lines) can only use y.
inline Dataset gen_synthetic(std::size_t n, std::uint64_t seed) {
  if (n < 20) throw std::invalid_argument("gen_synthetic: n must be >= 20");
  Rng rng(seed);
  Dataset d;
  d.features = DenseMatrix(n, 2);
  d.labels.resize(n);
  d.num_classes = 2;
  d.column_names = {"x", "y"};
  d.sensitive_col = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    const double y = rng.uniform(-1.0, 1.0);
    d.features(i, 0) = x;
    d.features(i, 1) = y;
    const double sign_x = x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0);
    d.labels[i] = y + 0.4 * sign_x > 0.0 ? 1 : 0;
  }
  return d;
}

namespace detail {

inline std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  std::stringstream ss(line);
  while (std::getline(ss, cur, ',')) out.push_back(trim(cur));
  return out;
}

struct AdultRow {
  std::vector<double> continuous;   // 6 values
  std::vector<std::string> cats;    // categorical fields in schema order
  int is_female = 0;
  int is_white = 0;
  int label = 0;
};

}  // namespace detail

// UCI Adult ingestion: both files are parsed with the same rules (the test
// file's labels carry a trailing period and a leading '|' comment line),
// rows with missing values are dropped, continuous columns are standardized
// with statistics of the train file, sex and race are encoded as single
// binary columns (race collapsed to white / non-white), and the remaining
// categoricals are one-hot over lexicographically sorted categories.
inline Dataset load_adult(const std::string& train_path, const std::string& test_path) {
  // attribute index -> (name, is_continuous)
  static const struct {
    const char* name;
    bool continuous;
  } kAttrs[14] = {
      {"age", true},           {"workclass", false},     {"fnlwgt", true},
      {"education", false},    {"education-num", true},  {"marital-status", false},
      {"occupation", false},   {"relationship", false},  {"race", false},
      {"sex", false},          {"capital-gain", true},   {"capital-loss", true},
      {"hours-per-week", true},{"native-country", false}};
  constexpr std::size_t kSexIdx = 9, kRaceIdx = 8;

  std::vector<detail::AdultRow> rows;
  std::size_t dropped = 0, malformed = 0, train_rows = 0;

  auto ingest = [&](const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("load_adult: cannot open " + path);
    std::string line;
    std::size_t kept = 0;
    while (std::getline(in, line)) {
      const std::string t = detail::trim(line);
      if (t.empty() || t[0] == '|') continue;
      const std::vector<std::string> f = detail::split_csv_line(t);
      if (f.size() != 15) {
        ++malformed;
        continue;
      }
      bool missing = false;
      for (const std::string& v : f)
        if (v == "?") missing = true;
      if (missing) {
        ++dropped;
        continue;
      }
      detail::AdultRow row;
      bool ok = true;
      for (std::size_t a = 0; a < 14 && ok; ++a) {
        if (kAttrs[a].continuous) {
          try {
            std::size_t used = 0;
            row.continuous.push_back(std::stod(f[a], &used));
            if (used != f[a].size()) ok = false;
          } catch (const std::exception&) {
            ok = false;
          }
        } else if (a == kSexIdx) {
          if (f[a] == "Female") row.is_female = 1;
          else if (f[a] == "Male") row.is_female = 0;
          else ok = false;
        } else if (a == kRaceIdx) {
          row.is_white = f[a] == "White" ? 1 : 0;
        } else {
          row.cats.push_back(f[a]);
        }
      }
      std::string lab = f[14];
      if (!lab.empty() && lab.back() == '.') lab.pop_back();
      if (lab == ">50K") row.label = 1;
      else if (lab == "<=50K") row.label = 0;
      else ok = false;
      if (!ok) {
        ++malformed;
        continue;
      }
      rows.push_back(std::move(row));
      ++kept;
    }
    return kept;
  };

  train_rows = ingest(train_path);
  ingest(test_path);
  if (rows.empty()) throw DataError("load_adult: no usable rows");
  if (train_rows == 0) throw DataError("load_adult: no usable rows in train file");

  // Category vocabularies over both files, sorted for a deterministic layout.
  static const char* kCatNames[6] = {"workclass", "education", "marital-status",
                                     "occupation", "relationship", "native-country"};
  std::vector<std::set<std::string>> vocab(6);
  for (const auto& r : rows)
    for (std::size_t c = 0; c < 6; ++c) vocab[c].insert(r.cats[c]);

  // Train-file statistics for standardization.
  std::vector<double> mean(6, 0.0), stdev(6, 0.0);
  for (std::size_t i = 0; i < train_rows; ++i)
    for (std::size_t c = 0; c < 6; ++c) mean[c] += rows[i].continuous[c];
  for (double& v : mean) v /= double(train_rows);
  for (std::size_t i = 0; i < train_rows; ++i)
    for (std::size_t c = 0; c < 6; ++c) {
      const double d = rows[i].continuous[c] - mean[c];
      stdev[c] += d * d;
    }
  for (double& v : stdev) v = std::sqrt(v / double(train_rows));
  for (double& v : stdev)
    if (!(v > 0.0)) v = 1.0;

  Dataset d;
  static const char* kContNames[6] = {"age", "fnlwgt", "education-num", "capital-gain",
                                      "capital-loss", "hours-per-week"};
  for (const char* n : kContNames) d.column_names.push_back(n);
  d.column_names.push_back("sex_is_female");
  d.column_names.push_back("race_is_white");
  d.gender_col = 6;
  d.race_col = 7;
  std::vector<std::vector<std::string>> cats_sorted(6);
  std::size_t col = 8;
  for (std::size_t c = 0; c < 6; ++c) {
    cats_sorted[c].assign(vocab[c].begin(), vocab[c].end());
    for (const std::string& v : cats_sorted[c]) {
      d.column_names.push_back(std::string(kCatNames[c]) + "=" + v);
      if (std::string(kCatNames[c]) == "marital-status") d.marital_cols.push_back(col);
      ++col;
    }
  }

  const std::size_t dim = d.column_names.size();
  d.features = DenseMatrix(rows.size(), dim);
  d.labels.resize(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    for (std::size_t c = 0; c < 6; ++c)
      d.features(i, c) = (r.continuous[c] - mean[c]) / stdev[c];
    d.features(i, 6) = double(r.is_female);
    d.features(i, 7) = double(r.is_white);
    std::size_t base = 8;
    for (std::size_t c = 0; c < 6; ++c) {
      const auto& cs = cats_sorted[c];
      const auto it = std::lower_bound(cs.begin(), cs.end(), r.cats[c]);
      d.features(i, base + std::size_t(it - cs.begin())) = 1.0;
      base += cs.size();
    }
    d.labels[i] = r.label;
  }
  d.num_classes = 2;
  d.dropped_missing = dropped;
  d.skipped_malformed = malformed;
  d.train_rows = train_rows;
  if (!d.features.all_finite()) throw DataError("load_adult: non-finite features");
  return d;
}

// Deterministic shuffled split into (train, test) with the given train
// fraction.
inline std::pair<Dataset, Dataset> train_test_split(const Dataset& d, double train_frac,
                                                    Rng& rng) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw std::invalid_argument("train_test_split: fraction must be in (0, 1)");
  }
  std::vector<std::size_t> idx(d.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  rng.shuffle(idx);
  const std::size_t n_train = std::max<std::size_t>(
      1, std::min(d.size() - 1, std::size_t(std::floor(train_frac * double(d.size())))));

  auto take = [&](std::size_t lo, std::size_t hi) {
    Dataset out;
    out.features = DenseMatrix(hi - lo, d.dim());
    out.labels.resize(hi - lo);
    out.num_classes = d.num_classes;
    out.column_names = d.column_names;
    out.gender_col = d.gender_col;
    out.race_col = d.race_col;
    out.marital_cols = d.marital_cols;
    out.sensitive_col = d.sensitive_col;
    for (std::size_t i = lo; i < hi; ++i) {
      const double* src = d.features.row_ptr(idx[i]);
      std::copy(src, src + d.dim(), out.features.row_ptr(i - lo));
      out.labels[i - lo] = d.labels[idx[i]];
    }
    return out;
  };
  return {take(0, n_train), take(n_train, d.size())};
}

enum class VariationKind { Spouse, GenderRace, SyntheticReflect };

// Protected-attribute variations of one example. Spouse: one variant per
// marital-status category (one-hot rewritten). GenderRace: the four
// gender x race combinations. SyntheticReflect: negate the sensitive
// coordinate (base not among the variants).
inline VariationSet make_variations(const DenseVector& x, VariationKind kind,
                                    const Dataset& schema) {
  check_size(x, schema.dim(), "make_variations");
  VariationSet out;
  out.base = x;
  switch (kind) {
    case VariationKind::Spouse: {
      if (schema.marital_cols.empty()) {
        throw std::invalid_argument("make_variations: schema lacks marital-status columns");
      }
      for (std::size_t target : schema.marital_cols) {
        DenseVector v = x;
        for (std::size_t c : schema.marital_cols) v[c] = 0.0;
        v[target] = 1.0;
        out.variants.push_back(std::move(v));
      }
      out.includes_base = true;
      break;
    }
    case VariationKind::GenderRace: {
      if (!schema.gender_col || !schema.race_col) {
        throw std::invalid_argument("make_variations: schema lacks gender/race columns");
      }
      for (double g : {0.0, 1.0}) {
        for (double r : {0.0, 1.0}) {
          DenseVector v = x;
          v[*schema.gender_col] = g;
          v[*schema.race_col] = r;
          out.variants.push_back(std::move(v));
        }
      }
      out.includes_base = true;
      break;
    }
    case VariationKind::SyntheticReflect: {
      if (!schema.sensitive_col) {
        throw std::invalid_argument("make_variations: schema lacks a sensitive column");
      }
      DenseVector v = x;
      v[*schema.sensitive_col] = -v[*schema.sensitive_col];
      out.variants.push_back(std::move(v));
      out.includes_base = false;
      break;
    }
  }
  return out;
}

// Canonical preprocessed dump for cross-implementation diffing: header of
// column names plus label, then rows with 17 significant digits.
inline void dump_preprocessed_csv(const Dataset& d, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("dump_preprocessed_csv: cannot open " + path);
  for (std::size_t c = 0; c < d.column_names.size(); ++c) out << d.column_names[c] << ',';
  out << "label\n";
  char buf[64];
  for (std::size_t i = 0; i < d.size(); ++i) {
    for (std::size_t c = 0; c < d.dim(); ++c) {
      std::snprintf(buf, sizeof buf, "%.17g", d.features(i, c));
      out << buf << ',';
    }
    out << d.labels[i] << '\n';
  }
}

}  // namespace difair

#endif  // DIFAIR_DATA_HPP
