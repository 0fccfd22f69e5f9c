// Command-line runner: train/evaluate/certify fairness-regularized
// classifiers and reproduce the synthetic and Adult experiments.
//
// Exit codes: 0 success, 2 configuration error, 3 data error.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <string>

#include "difair/experiment.hpp"

namespace {

using namespace difair;

int run_command(const std::string& config_path,
                const std::map<std::string, std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!config_path.empty()) kv = load_config_file(config_path);
  for (const auto& [k, v] : overrides) kv[k] = v;
  const ExperimentConfig cfg = parse_experiment_config(kv);
  const ExperimentSummary summary = run_experiment(cfg);
  std::cout << "wrote " << summary.runs.size() << " run report(s) to " << cfg.out_dir
            << '\n';
  return 0;
}

std::vector<DenseVector> load_numeric_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path);
  std::vector<DenseVector> rows;
  std::string line;
  while (std::getline(in, line)) {
    const std::string t = detail::trim(line);
    if (t.empty()) continue;
    DenseVector row;
    std::stringstream ss(t);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        row.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw DataError(path + ": non-numeric cell '" + cell + "'");
      }
    }
    if (!rows.empty() && row.size() != rows.front().size()) {
      throw DataError(path + ": ragged rows");
    }
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw DataError(path + ": no rows");
  return rows;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fairness-regularized training, certification and experiments"};
  app.require_subcommand(1);

  // ---- run ----
  auto* run = app.add_subcommand("run", "run an experiment from a key=value config");
  std::string config_path;
  run->add_option("-c,--config", config_path, "key=value config file");
  std::map<std::string, std::string> overrides;
  static const char* kKeys[] = {
      "experiment", "method", "epoch", "batch_size", "lr", "adv_step", "adv_epoch",
      "l2_attack", "adv_epoch_full", "ro", "fair_reg", "seed", "lambda_clamp", "log_every",
      "rho_list", "eps_list", "hidden_units", "n_synth", "out_dir", "restarts",
      "split_fraction", "adult_train", "adult_test", "grid_n", "certify_points", "quiet"};
  std::map<std::string, std::string> flag_values;
  for (const char* key : kKeys) {
    run->add_option_function<std::string>(
        std::string("--") + key,
        [key, &overrides](const std::string& v) { overrides[key] = v; },
        std::string("override config key ") + key);
  }

  // ---- surface ----
  auto* surf = app.add_subcommand("surface", "emit a decision surface CSV + SVG");
  std::string surf_model, surf_csv = "surface.csv", surf_svg = "surface.svg";
  std::size_t surf_grid = 200, scatter_n = 0;
  std::uint64_t scatter_seed = 0;
  surf->add_option("--model", surf_model, "model file")->required();
  surf->add_option("--out-csv", surf_csv, "output CSV path");
  surf->add_option("--out-svg", surf_svg, "output SVG path");
  surf->add_option("--grid_n", surf_grid, "grid resolution per axis");
  surf->add_option("--scatter-n", scatter_n, "overlay n synthetic points");
  surf->add_option("--scatter-seed", scatter_seed, "seed for the scatter overlay");

  // ---- certify ----
  auto* cert = app.add_subcommand("certify", "empirical DIF certification report");
  std::string cert_model, cert_metric, cert_inputs, cert_out = "certification.json";
  std::string cert_mode = "attack";
  double cert_eps = 0.01;
  AttackConfig cert_attack{0.1, 20, 0.01, 10};
  cert->add_option("--model", cert_model, "model file")->required();
  cert->add_option("--metric", cert_metric, "fair metric file (default: identity)");
  cert->add_option("--inputs", cert_inputs, "numeric CSV of input rows")->required();
  cert->add_option("--out", cert_out, "output JSON path");
  cert->add_option("--mode", cert_mode, "candidates | attack");
  cert->add_option("--ro", cert_eps, "transport budget epsilon");
  cert->add_option("--adv_step", cert_attack.subspace_step, "subspace step size");
  cert->add_option("--adv_epoch", cert_attack.subspace_iters, "subspace steps");
  cert->add_option("--l2_attack", cert_attack.full_step, "full-space step size");
  cert->add_option("--adv_epoch_full", cert_attack.full_iters, "full-space steps");

  // ---- preprocess-adult ----
  auto* prep = app.add_subcommand("preprocess-adult",
                                  "dump the canonical preprocessed Adult table");
  std::string prep_train, prep_test, prep_out = "adult_preprocessed.csv";
  prep->add_option("--train", prep_train, "adult.data path")->required();
  prep->add_option("--test", prep_test, "adult.test path")->required();
  prep->add_option("--out", prep_out, "output CSV path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return run_command(config_path, overrides);

    if (surf->parsed()) {
      const MlpModel model = load_mlp(surf_model);
      GridSpec spec;
      spec.nx = surf_grid;
      spec.ny = surf_grid;
      if (scatter_n > 0) {
        const Dataset scatter = gen_synthetic(scatter_n, scatter_seed);
        emit_surface(model, spec, surf_csv, surf_svg, &scatter);
      } else {
        emit_surface(model, spec, surf_csv, surf_svg, nullptr);
      }
      std::cout << "wrote " << surf_csv << " and " << surf_svg << '\n';
      return 0;
    }

    if (cert->parsed()) {
      const MlpModel model = load_mlp(cert_model);
      const std::vector<DenseVector> inputs = load_numeric_csv(cert_inputs);
      const FairMetric metric = cert_metric.empty()
                                    ? FairMetric::identity(inputs.front().size())
                                    : load_fair_metric(cert_metric);
      CertificationResult res;
      if (cert_mode == "candidates") {
        res = empirical_dif(model, inputs, metric, cert_eps, inputs);
      } else if (cert_mode == "attack") {
        res = empirical_dif(model, inputs, metric, cert_eps, cert_attack);
      } else {
        throw ConfigError("certify: mode must be 'candidates' or 'attack'");
      }
      const auto tails = markov_tail_check(res, {0.01, 0.05, 0.1, 0.5});
      detail::write_json(detail::cert_to_json(res, tails), cert_out);
      std::cout << "r_hat " << res.r_hat << " lambda_star " << res.lambda_star
                << " -> " << cert_out << '\n';
      return 0;
    }

    if (prep->parsed()) {
      const Dataset d = load_adult(prep_train, prep_test);
      dump_preprocessed_csv(d, prep_out);
      std::cout << "wrote " << d.size() << " rows (" << d.dropped_missing
                << " dropped for missing values, " << d.skipped_malformed
                << " malformed) to " << prep_out << '\n';
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
