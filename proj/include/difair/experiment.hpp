#ifndef DIFAIR_EXPERIMENT_HPP
#define DIFAIR_EXPERIMENT_HPP

#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "difair/certify.hpp"
#include "difair/data.hpp"
#include "difair/eval_metrics.hpp"
#include "difair/fair_metric.hpp"
#include "difair/trainers.hpp"

namespace difair {

// Bad or inconsistent configuration; the CLI maps it to exit 2.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { SyntheticSweep, SyntheticSensrSweep, Adult };

inline const char* experiment_name(ExperimentKind k) {
  switch (k) {
    case ExperimentKind::SyntheticSweep: return "synthetic_sweep";
    case ExperimentKind::SyntheticSensrSweep: return "synthetic_sensr_sweep";
    case ExperimentKind::Adult: return "adult";
  }
  return "?";
}

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::SyntheticSweep;
  TrainConfig train;                  // Table-5 keys: epoch, batch_size, lr, adv_step,
                                      // adv_epoch, l2_attack, adv_epoch_full, ro, fair_reg
  std::vector<double> rho_list;       // synthetic_sweep
  std::vector<double> eps_list;       // synthetic_sensr_sweep
  std::size_t hidden_units = 24;
  std::size_t n_synth = 2000;
  std::string out_dir = "out";
  std::size_t restarts = 1;
  double split_fraction = 0.7;
  std::string adult_train;
  std::string adult_test;
  std::size_t grid_n = 200;
  std::size_t certify_points = 64;
  std::vector<double> tail_taus = {0.01, 0.05, 0.1, 0.5};
  bool quiet = false;
};

// ---- flat key=value config files, CLI flags use the same names ----

inline std::map<std::string, std::string> load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::map<std::string, std::string> kv;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key=value");
    }
    kv[detail::trim(t.substr(0, eq))] = detail::trim(t.substr(eq + 1));
  }
  return kv;
}

namespace detail {

inline double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double x = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return x;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': not a number: " + v);
  }
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  const double x = parse_double(key, v);
  if (x < 0 || x != std::floor(x)) {
    throw ConfigError("config key '" + key + "': not a non-negative integer: " + v);
  }
  return static_cast<std::size_t>(x);
}

inline std::vector<double> parse_list(const std::string& key, const std::string& v) {
  std::vector<double> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!trim(item).empty()) out.push_back(parse_double(key, trim(item)));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

}  // namespace detail

inline ExperimentConfig parse_experiment_config(const std::map<std::string, std::string>& kv) {
  ExperimentConfig cfg;
  cfg.train.method = TrainMethod::Sensei;
  for (const auto& [key, value] : kv) {
    if (key == "experiment") {
      if (value == "synthetic_sweep") cfg.experiment = ExperimentKind::SyntheticSweep;
      else if (value == "synthetic_sensr_sweep")
        cfg.experiment = ExperimentKind::SyntheticSensrSweep;
      else if (value == "adult") cfg.experiment = ExperimentKind::Adult;
      else throw ConfigError("unknown experiment: " + value);
    } else if (key == "method") {
      try {
        cfg.train.method = parse_method(value);
      } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
      }
    } else if (key == "epoch") cfg.train.steps = detail::parse_count(key, value);
    else if (key == "batch_size") cfg.train.batch = detail::parse_count(key, value);
    else if (key == "lr") cfg.train.lr = detail::parse_double(key, value);
    else if (key == "adv_step") cfg.train.attack.subspace_step = detail::parse_double(key, value);
    else if (key == "adv_epoch") cfg.train.attack.subspace_iters = detail::parse_count(key, value);
    else if (key == "l2_attack") cfg.train.attack.full_step = detail::parse_double(key, value);
    else if (key == "adv_epoch_full")
      cfg.train.attack.full_iters = detail::parse_count(key, value);
    else if (key == "ro") cfg.train.eps = detail::parse_double(key, value);
    else if (key == "fair_reg") cfg.train.rho = detail::parse_double(key, value);
    else if (key == "seed") cfg.train.seed = detail::parse_count(key, value);
    else if (key == "lambda_clamp") cfg.train.lambda_clamp = detail::parse_double(key, value);
    else if (key == "log_every") cfg.train.log_every = detail::parse_count(key, value);
    else if (key == "rho_list") cfg.rho_list = detail::parse_list(key, value);
    else if (key == "eps_list") cfg.eps_list = detail::parse_list(key, value);
    else if (key == "hidden_units") cfg.hidden_units = detail::parse_count(key, value);
    else if (key == "n_synth") cfg.n_synth = detail::parse_count(key, value);
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "restarts") cfg.restarts = detail::parse_count(key, value);
    else if (key == "split_fraction") cfg.split_fraction = detail::parse_double(key, value);
    else if (key == "adult_train") cfg.adult_train = value;
    else if (key == "adult_test") cfg.adult_test = value;
    else if (key == "grid_n") cfg.grid_n = detail::parse_count(key, value);
    else if (key == "certify_points") cfg.certify_points = detail::parse_count(key, value);
    else if (key == "quiet") cfg.quiet = value == "1" || value == "true";
    else throw ConfigError("unknown config key: " + key);
  }

  if (cfg.restarts < 1) throw ConfigError("restarts must be >= 1");
  if (!(cfg.split_fraction > 0.0 && cfg.split_fraction < 1.0)) {
    throw ConfigError("split_fraction must be in (0, 1)");
  }
  if (cfg.experiment == ExperimentKind::SyntheticSweep && cfg.rho_list.empty()) {
    cfg.rho_list = {cfg.train.rho};
  }
  if (cfg.experiment == ExperimentKind::SyntheticSensrSweep && cfg.eps_list.empty()) {
    cfg.eps_list = {cfg.train.eps};
  }
  if (cfg.experiment == ExperimentKind::Adult &&
      (cfg.adult_train.empty() || cfg.adult_test.empty())) {
    throw ConfigError("adult experiment requires adult_train and adult_test paths");
  }
  if (cfg.hidden_units < 1) throw ConfigError("hidden_units must be >= 1");
  if (cfg.grid_n < 2) throw ConfigError("grid_n must be >= 2");
  return cfg;
}

// ---- decision-surface emission ----

struct GridSpec {
  std::size_t nx = 200, ny = 200;
  double x_min = -1.0, x_max = 1.0, y_min = -1.0, y_max = 1.0;
};

namespace detail {

inline double lerp_cross(double a, double b) { return (0.5 - a) / (b - a); }

// p = 0.5 contour segments of the probability grid via marching squares.
// grid(iy, ix) indexing; returns segments in data coordinates.
struct Segment {
  double x0, y0, x1, y1;
};

inline std::vector<Segment> marching_squares(const DenseMatrix& grid, const GridSpec& spec) {
  std::vector<Segment> segs;
  const double dx = (spec.x_max - spec.x_min) / double(spec.nx - 1);
  const double dy = (spec.y_max - spec.y_min) / double(spec.ny - 1);
  for (std::size_t iy = 0; iy + 1 < spec.ny; ++iy) {
    for (std::size_t ix = 0; ix + 1 < spec.nx; ++ix) {
      const double v00 = grid(iy, ix), v10 = grid(iy, ix + 1);
      const double v01 = grid(iy + 1, ix), v11 = grid(iy + 1, ix + 1);
      const double x0 = spec.x_min + dx * double(ix), y0 = spec.y_min + dy * double(iy);
      int mask = 0;
      if (v00 >= 0.5) mask |= 1;
      if (v10 >= 0.5) mask |= 2;
      if (v11 >= 0.5) mask |= 4;
      if (v01 >= 0.5) mask |= 8;
      if (mask == 0 || mask == 15) continue;
      // Interpolated crossings on the four edges.
      const double bx = x0 + dx * lerp_cross(v00, v10);            // bottom
      const double tx = x0 + dx * lerp_cross(v01, v11);            // top
      const double ly = y0 + dy * lerp_cross(v00, v01);            // left
      const double ry = y0 + dy * lerp_cross(v10, v11);            // right
      auto add = [&](double ax, double ay, double cx, double cy) {
        segs.push_back({ax, ay, cx, cy});
      };
      switch (mask) {
        case 1: case 14: add(bx, y0, x0, ly); break;
        case 2: case 13: add(bx, y0, x0 + dx, ry); break;
        case 3: case 12: add(x0, ly, x0 + dx, ry); break;
        case 4: case 11: add(tx, y0 + dy, x0 + dx, ry); break;
        case 6: case 9: add(bx, y0, tx, y0 + dy); break;
        case 7: case 8: add(x0, ly, tx, y0 + dy); break;
        case 5:
          add(bx, y0, x0 + dx, ry);
          add(x0, ly, tx, y0 + dy);
          break;
        case 10:
          add(bx, y0, x0, ly);
          add(tx, y0 + dy, x0 + dx, ry);
          break;
      }
    }
  }
  return segs;
}

}  // namespace detail

// Writes the class-1 probability over a uniform grid as CSV (columns x,y,p1)
// and an SVG with the p = 0.5 contour plus an optional scatter of points
// colored by label. 2-D models only.
inline DenseMatrix emit_surface(const MlpModel& model, const GridSpec& spec,
                                const std::string& csv_path, const std::string& svg_path,
                                const Dataset* scatter = nullptr) {
  if (model.input_dim() != 2) {
    throw std::invalid_argument("emit_surface: model must take 2-D inputs");
  }
  DenseMatrix grid(spec.ny, spec.nx);
  std::ofstream csv(csv_path);
  if (!csv) throw std::runtime_error("emit_surface: cannot open " + csv_path);
  csv << "x,y,p1\n";
  char buf[128];
  for (std::size_t iy = 0; iy < spec.ny; ++iy) {
    const double y =
        spec.y_min + (spec.y_max - spec.y_min) * double(iy) / double(spec.ny - 1);
    for (std::size_t ix = 0; ix < spec.nx; ++ix) {
      const double x =
          spec.x_min + (spec.x_max - spec.x_min) * double(ix) / double(spec.nx - 1);
      const double p = softmax(forward(model, {x, y}))[1];
      grid(iy, ix) = p;
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", x, y, p);
      csv << buf;
    }
  }

  if (!svg_path.empty()) {
    std::ofstream svg(svg_path);
    if (!svg) throw std::runtime_error("emit_surface: cannot open " + svg_path);
    const double w = 640.0, h = 640.0;
    auto px = [&](double x) {
      return (x - spec.x_min) / (spec.x_max - spec.x_min) * (w - 40.0) + 20.0;
    };
    auto py = [&](double y) {
      return h - ((y - spec.y_min) / (spec.y_max - spec.y_min) * (h - 40.0) + 20.0);
    };
    svg << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"640\" "
           "viewBox=\"0 0 640 640\">\n"
        << "<rect x=\"20\" y=\"20\" width=\"600\" height=\"600\" fill=\"white\" "
           "stroke=\"black\"/>\n";
    if (scatter) {
      for (std::size_t i = 0; i < scatter->size(); ++i) {
        std::snprintf(buf, sizeof buf,
                      "<circle cx=\"%.2f\" cy=\"%.2f\" r=\"2\" fill=\"%s\"/>\n",
                      px(scatter->features(i, 0)), py(scatter->features(i, 1)),
                      scatter->labels[i] == 1 ? "#d62728" : "#1f77b4");
        svg << buf;
      }
    }
    for (const auto& s : detail::marching_squares(grid, spec)) {
      std::snprintf(buf, sizeof buf,
                    "<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" "
                    "stroke=\"black\" stroke-width=\"1.5\"/>\n",
                    px(s.x0), py(s.y0), px(s.x1), py(s.y1));
      svg << buf;
    }
    svg << "</svg>\n";
  }
  return grid;
}

// ---- experiment runner ----

struct RunRecord {
  std::string method;
  double rho = 0.0;
  double eps = 0.0;
  std::size_t restart = 0;
  double accuracy = 0.0;
  MetricsReport metrics;        // gap_* fields hold the gender gaps on adult
  double s_con = 0.0;           // adult only
  double gr_con = 0.0;          // adult only
  TprGapResult gap_race;        // adult only
  CertificationResult cert;
  std::vector<TailCheckRow> tails;
  MlpModel model;
  std::string metrics_path;
};

struct ExperimentSummary {
  std::vector<RunRecord> runs;
};

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + salt * 0x9E3779B97F4A7C15ULL + 0x9E3779B97F4A7C15ULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::string format_double_tag(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%g", v);
  return buf;
}

inline nlohmann::json metrics_to_json(const MetricsReport& m) {
  return {
      {"balanced_accuracy", m.balanced_accuracy},
      {"prediction_consistency", m.prediction_consistency},
      {"ctf_score", m.ctf_score},
      {"gap_rms", m.gap_rms},
      {"gap_abs", m.gap_abs},
      {"gap_max", m.gap_max},
      {"parity_acc_std", m.parity_acc_std},
      {"parity_ba_std", m.parity_ba_std},
  };
}

inline nlohmann::json cert_to_json(const CertificationResult& c,
                                   const std::vector<TailCheckRow>& tails) {
  nlohmann::json t = nlohmann::json::array();
  for (const auto& row : tails) {
    t.push_back({{"tau", row.tau},
                 {"fraction", row.fraction},
                 {"bound", row.bound},
                 {"pass", row.pass}});
  }
  return {{"schema_version", 1}, {"epsilon", c.epsilon},      {"r_hat", c.r_hat},
          {"lambda_star", c.lambda_star}, {"mode", c.mode},   {"points", c.per_point.size()},
          {"tail_checks", t}};
}

inline void write_json(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot open " + path);
  out << j.dump(2) << '\n';
}

inline std::vector<DenseVector> sample_rows(const Dataset& d, std::size_t count) {
  std::vector<DenseVector> out;
  const std::size_t n = std::min(count, d.size());
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(d.row(i));
  return out;
}

struct Aggregate {
  std::vector<double> values;
  void add(double v) { values.push_back(v); }
  double mean() const {
    double s = 0.0;
    for (double v : values) s += v;
    return values.empty() ? 0.0 : s / double(values.size());
  }
  double stdev() const {
    if (values.empty()) return 0.0;
    const double m = mean();
    double s = 0.0;
    for (double v : values) s += (v - m) * (v - m);
    return std::sqrt(s / double(values.size()));
  }
};

}  // namespace detail

inline ExperimentSummary run_experiment(const ExperimentConfig& cfg) {
  namespace fs = std::filesystem;
  fs::create_directories(cfg.out_dir);
  std::ostream* progress = cfg.quiet ? nullptr : &std::cerr;
  ExperimentSummary summary;

  const bool sensr_sweep = cfg.experiment == ExperimentKind::SyntheticSensrSweep;
  char buf[256];

  if (cfg.experiment == ExperimentKind::SyntheticSweep || sensr_sweep) {
    const FairMetric metric(2, DenseMatrix(2, 1, {1, 0}));
    const std::vector<double>& sweep = sensr_sweep ? cfg.eps_list : cfg.rho_list;

    for (std::size_t r = 0; r < cfg.restarts; ++r) {
      const std::uint64_t restart_seed = cfg.train.seed + r;
      const Dataset data = gen_synthetic(cfg.n_synth, detail::mix_seed(restart_seed, 1));
      Rng split_rng(detail::mix_seed(restart_seed, 2));
      const auto [train_ds, test_ds] = train_test_split(data, cfg.split_fraction, split_rng);

      for (double value : sweep) {
        TrainConfig tc = cfg.train;
        tc.seed = detail::mix_seed(restart_seed, 3);
        tc.method = sensr_sweep ? TrainMethod::Sensr : TrainMethod::Sensei;
        if (sensr_sweep) tc.eps = value;
        else tc.rho = value;

        const TrainResult res =
            train(train_ds.features, train_ds.labels, 2, cfg.hidden_units, metric, tc,
                  nullptr, progress);

        RunRecord rec;
        rec.method = method_name(tc.method);
        rec.rho = tc.rho;
        rec.eps = tc.eps;
        rec.restart = r;
        rec.model = res.state.model;

        std::vector<int> preds(test_ds.size()), group(test_ds.size());
        for (std::size_t i = 0; i < test_ds.size(); ++i) {
          preds[i] = predict_class(rec.model, test_ds.row(i));
          group[i] = test_ds.features(i, 0) > 0.0 ? 1 : 0;
        }
        rec.accuracy = plain_accuracy(preds, test_ds.labels);
        rec.metrics.balanced_accuracy = balanced_accuracy(preds, test_ds.labels, 2);

        std::vector<VariationSet> sets;
        for (std::size_t i = 0; i < test_ds.size(); ++i) {
          sets.push_back(make_variations(test_ds.row(i), VariationKind::SyntheticReflect,
                                         test_ds));
        }
        rec.metrics.prediction_consistency = prediction_consistency(rec.model, sets);
        rec.metrics.ctf_score = ctf_score(rec.model, sets, 2);
        const TprGapResult gaps = tpr_gaps(preds, test_ds.labels, group, 2);
        rec.metrics.gap_rms = gaps.rms;
        rec.metrics.gap_abs = gaps.abs;
        rec.metrics.gap_max = gaps.max;
        std::vector<std::vector<std::size_t>> masks(2);
        for (std::size_t i = 0; i < test_ds.size(); ++i)
          masks[std::size_t(group[i])].push_back(i);
        const auto [acc_std, ba_std] =
            accuracy_parity_std(preds, test_ds.labels, masks, 2);
        rec.metrics.parity_acc_std = acc_std;
        rec.metrics.parity_ba_std = ba_std;

        rec.cert = empirical_dif(rec.model, detail::sample_rows(test_ds, cfg.certify_points),
                                 metric, tc.eps, tc.attack);
        rec.tails = markov_tail_check(rec.cert, cfg.tail_taus);

        const std::string tagname = sensr_sweep ? "eps" : "rho";
        const std::string tag = detail::format_double_tag(value);
        const std::string stem = cfg.out_dir + "/" + rec.method + "_" + tagname + tag +
                                 "_r" + std::to_string(r);
        nlohmann::json mj = {{"schema_version", 1},
                             {"experiment", experiment_name(cfg.experiment)},
                             {"method", rec.method},
                             {"restart", r},
                             {"seed", cfg.train.seed},
                             {"rho", rec.rho},
                             {"eps", rec.eps},
                             {"accuracy", rec.accuracy},
                             {"metrics", detail::metrics_to_json(rec.metrics)}};
        rec.metrics_path = stem + "_metrics.json";
        detail::write_json(mj, rec.metrics_path);
        detail::write_json(detail::cert_to_json(rec.cert, rec.tails), stem + "_cert.json");
        write_train_log_csv(res.log, stem + "_trainlog.csv");
        save_mlp(rec.model, stem + "_model.txt");
        GridSpec grid;
        grid.nx = cfg.grid_n;
        grid.ny = cfg.grid_n;
        emit_surface(rec.model, grid, stem + "_surface.csv", stem + "_surface.svg",
                     &train_ds);
        summary.runs.push_back(std::move(rec));
      }
    }

    // Consistency curve and aggregate table across restarts.
    std::ofstream curve(cfg.out_dir + "/consistency_curve.csv");
    curve << (sensr_sweep ? "eps" : "rho")
          << ",prediction_consistency_mean,prediction_consistency_std\n";
    std::ofstream agg(cfg.out_dir + "/aggregate.csv");
    agg << (sensr_sweep ? "eps" : "rho")
        << ",accuracy_mean,accuracy_std,balanced_accuracy_mean,balanced_accuracy_std,"
           "prediction_consistency_mean,prediction_consistency_std,ctf_mean,ctf_std\n";
    for (double value : sweep) {
      detail::Aggregate acc, ba, pc, ctf;
      for (const RunRecord& rec : summary.runs) {
        if ((sensr_sweep ? rec.eps : rec.rho) != value) continue;
        acc.add(rec.accuracy);
        ba.add(rec.metrics.balanced_accuracy);
        pc.add(rec.metrics.prediction_consistency);
        ctf.add(rec.metrics.ctf_score);
      }
      std::snprintf(buf, sizeof buf, "%g,%.17g,%.17g\n", value, pc.mean(), pc.stdev());
      curve << buf;
      std::snprintf(buf, sizeof buf, "%g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    value, acc.mean(), acc.stdev(), ba.mean(), ba.stdev(), pc.mean(),
                    pc.stdev(), ctf.mean(), ctf.stdev());
      agg << buf;
    }
    return summary;
  }

  // ---- adult ----
  const Dataset data = load_adult(cfg.adult_train, cfg.adult_test);
  if (!data.gender_col || !data.race_col) throw DataError("adult: protected columns missing");
  if (progress) {
    (*progress) << "adult: " << data.size() << " rows (" << data.train_rows
                << " from train file), " << data.dim() << " features, dropped "
                << data.dropped_missing << " missing, skipped " << data.skipped_malformed
                << " malformed\n";
  }

  for (std::size_t r = 0; r < cfg.restarts; ++r) {
    const std::uint64_t restart_seed = cfg.train.seed + r;
    Rng split_rng(detail::mix_seed(restart_seed, 2));
    const auto [train_ds, test_ds] = train_test_split(data, cfg.split_fraction, split_rng);

    const FairMetric metric =
        tabular_sensitive_metric(train_ds.features, *data.gender_col, *data.race_col);

    TrainConfig tc = cfg.train;
    tc.seed = detail::mix_seed(restart_seed, 3);
    const TrainResult res = train(train_ds.features, train_ds.labels, 2, cfg.hidden_units,
                                  metric, tc, nullptr, progress);

    RunRecord rec;
    rec.method = method_name(tc.method);
    rec.rho = tc.rho;
    rec.eps = tc.eps;
    rec.restart = r;
    rec.model = res.state.model;

    std::vector<int> preds(test_ds.size()), gender(test_ds.size()), race(test_ds.size());
    for (std::size_t i = 0; i < test_ds.size(); ++i) {
      preds[i] = predict_class(rec.model, test_ds.row(i));
      gender[i] = test_ds.features(i, *data.gender_col) == 1.0 ? 1 : 0;
      race[i] = test_ds.features(i, *data.race_col) == 1.0 ? 1 : 0;
    }
    rec.accuracy = plain_accuracy(preds, test_ds.labels);
    rec.metrics.balanced_accuracy = balanced_accuracy(preds, test_ds.labels, 2);

    std::vector<VariationSet> spouse_sets, gr_sets;
    for (std::size_t i = 0; i < test_ds.size(); ++i) {
      spouse_sets.push_back(make_variations(test_ds.row(i), VariationKind::Spouse, test_ds));
      gr_sets.push_back(make_variations(test_ds.row(i), VariationKind::GenderRace, test_ds));
    }
    rec.s_con = prediction_consistency(rec.model, spouse_sets);
    rec.gr_con = prediction_consistency(rec.model, gr_sets);
    rec.metrics.prediction_consistency = rec.gr_con;
    rec.metrics.ctf_score = ctf_score(rec.model, gr_sets, 2);

    const TprGapResult gap_g = tpr_gaps(preds, test_ds.labels, gender, 2);
    rec.metrics.gap_rms = gap_g.rms;
    rec.metrics.gap_abs = gap_g.abs;
    rec.metrics.gap_max = gap_g.max;
    rec.gap_race = tpr_gaps(preds, test_ds.labels, race, 2);

    std::vector<std::vector<std::size_t>> masks(4);
    for (std::size_t i = 0; i < test_ds.size(); ++i)
      masks[std::size_t(2 * gender[i] + race[i])].push_back(i);
    std::vector<std::vector<std::size_t>> nonempty;
    for (auto& m : masks)
      if (!m.empty()) nonempty.push_back(std::move(m));
    const auto [acc_std, ba_std] =
        accuracy_parity_std(preds, test_ds.labels, nonempty, 2);
    rec.metrics.parity_acc_std = acc_std;
    rec.metrics.parity_ba_std = ba_std;

    rec.cert = empirical_dif(rec.model, detail::sample_rows(test_ds, cfg.certify_points),
                             metric, tc.eps, tc.attack);
    rec.tails = markov_tail_check(rec.cert, cfg.tail_taus);

    const std::string stem = cfg.out_dir + "/adult_" + rec.method + "_r" + std::to_string(r);
    nlohmann::json mj = {{"schema_version", 1},
                         {"experiment", "adult"},
                         {"method", rec.method},
                         {"restart", r},
                         {"seed", cfg.train.seed},
                         {"rho", rec.rho},
                         {"eps", rec.eps},
                         {"accuracy", rec.accuracy},
                         {"metrics", detail::metrics_to_json(rec.metrics)},
                         {"s_con", rec.s_con},
                         {"gr_con", rec.gr_con},
                         {"gap_g_rms", gap_g.rms},
                         {"gap_g_abs", gap_g.abs},
                         {"gap_g_max", gap_g.max},
                         {"gap_r_rms", rec.gap_race.rms},
                         {"gap_r_abs", rec.gap_race.abs},
                         {"gap_r_max", rec.gap_race.max}};
    rec.metrics_path = stem + "_metrics.json";
    detail::write_json(mj, rec.metrics_path);
    detail::write_json(detail::cert_to_json(rec.cert, rec.tails), stem + "_cert.json");
    write_train_log_csv(res.log, stem + "_trainlog.csv");
    save_mlp(rec.model, stem + "_model.txt");
    summary.runs.push_back(std::move(rec));
  }

  // Aggregate table mirroring the adult comparison columns.
  std::ofstream agg(cfg.out_dir + "/aggregate.csv");
  agg << "method,ba_mean,ba_std,s_con_mean,s_con_std,gr_con_mean,gr_con_std,"
         "gap_g_rms_mean,gap_g_rms_std,gap_r_rms_mean,gap_r_rms_std,"
         "gap_g_max_mean,gap_g_max_std,gap_r_max_mean,gap_r_max_std\n";
  detail::Aggregate ba, scon, grcon, ggrms, grrms, ggmax, grmax;
  for (const RunRecord& rec : summary.runs) {
    ba.add(rec.metrics.balanced_accuracy);
    scon.add(rec.s_con);
    grcon.add(rec.gr_con);
    ggrms.add(rec.metrics.gap_rms);
    grrms.add(rec.gap_race.rms);
    ggmax.add(rec.metrics.gap_max);
    grmax.add(rec.gap_race.max);
  }
  std::snprintf(buf, sizeof buf,
                "%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,"
                "%.17g,%.17g,%.17g\n",
                method_name(cfg.train.method), ba.mean(), ba.stdev(), scon.mean(),
                scon.stdev(), grcon.mean(), grcon.stdev(), ggrms.mean(), ggrms.stdev(),
                grrms.mean(), grrms.stdev(), ggmax.mean(), ggmax.stdev(), grmax.mean(),
                grmax.stdev());
  agg << buf;
  return summary;
}

}  // namespace difair

#endif  // DIFAIR_EXPERIMENT_HPP
