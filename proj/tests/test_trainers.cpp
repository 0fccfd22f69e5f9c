#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "difair/data.hpp"
#include "difair/trainers.hpp"
#include "test_helpers.hpp"

using namespace difair;

namespace {

bool same_params(const MlpModel& a, const MlpModel& b) {
  return a.w1.data == b.w1.data && a.b1 == b.b1 && a.w2.data == b.w2.data && a.b2 == b.b2;
}

Batch random_batch(std::size_t bsz, std::size_t dim, std::size_t classes, Rng& rng) {
  Batch batch;
  batch.x = test_helpers::random_matrix(bsz, dim, rng);
  batch.labels.resize(bsz);
  for (auto& y : batch.labels) y = int(rng.index(classes));
  return batch;
}

DualState random_state(std::size_t dim, std::size_t hidden, std::size_t classes, Rng& rng,
                       double lambda = 0.0) {
  DualState s;
  s.model = test_helpers::random_mlp(dim, hidden, classes, rng);
  s.lambda = lambda;
  return s;
}

}  // namespace

TEST_CASE("lambda budget update: direct substitution examples") {
  REQUIRE(lambda_budget_update(1.0, 0.1, 2.0, 0.5, 0.3) == 0.96);
  REQUIRE(lambda_budget_update(0.01, 1.0, 1.0, 0.0, 0.5) == 0.51);
  REQUIRE(lambda_budget_update(0.01, 1.0, 1.0, 1.0, 0.0) == 0.0);
  REQUIRE(apply_lambda_clamp(5.0, 2.5) == 2.5);
  REQUIRE(apply_lambda_clamp(5.0, std::nullopt) == 5.0);
}

TEST_CASE("sensei_step with rho 0 is bitwise identical to erm_step") {
  Rng rng(3);
  const DualState s = random_state(3, 4, 2, rng, 0.7);
  const Batch batch = random_batch(6, 3, 2, rng);
  const FairMetric metric = FairMetric::identity(3);
  TrainConfig cfg;
  cfg.lr = 0.05;
  cfg.rho = 0.0;
  cfg.eps = 0.1;
  cfg.attack = {0.1, 4, 0.1, 4};
  const StepResult a = sensei_step(s, batch, metric, cfg);
  const StepResult b = erm_step(s, batch, cfg);
  REQUIRE(same_params(a.state.model, b.state.model));
  REQUIRE(a.state.lambda == s.lambda);
}

TEST_CASE("sensei_step: constant model gives zero mean cost and the clamped update") {
  DualState s;
  s.model.w1 = DenseMatrix(2, 2);
  s.model.b1 = {0, 0};
  s.model.w2 = DenseMatrix(2, 2);
  s.model.b2 = {0, 0};
  s.lambda = 0.01;
  Rng rng(5);
  const Batch batch = random_batch(4, 2, 2, rng);
  const FairMetric metric = FairMetric::identity(2);
  TrainConfig cfg;
  cfg.lr = 1.0;
  cfg.rho = 1.0;
  cfg.eps = 1.0;
  cfg.attack = {0.1, 3, 0.1, 3};
  const StepResult r = sensei_step(s, batch, metric, cfg);
  REQUIRE(r.mean_fair_cost == 0.0);
  REQUIRE(r.state.lambda == 0.0);  // max(0, 0.01 - 1*1*(1 - 0)) = 0
}

TEST_CASE("clp_step: identity counterfactual and rho 0 reduce to erm_step") {
  Rng rng(7);
  const DualState s = random_state(4, 5, 3, rng);
  const Batch batch = random_batch(5, 4, 3, rng);
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.rho = 2.0;
  Rng cf_rng(1);
  const CounterfactualFn identity = [](const DenseVector& x, Rng&) { return x; };
  const StepResult a = clp_step(s, batch, identity, cfg, cf_rng);
  const StepResult b = erm_step(s, batch, cfg);
  REQUIRE(same_params(a.state.model, b.state.model));

  TrainConfig zero = cfg;
  zero.rho = 0.0;
  Rng cf_rng2(1);
  const CounterfactualFn reflect = [](const DenseVector& x, Rng&) {
    DenseVector v = x;
    v[0] = -v[0];
    return v;
  };
  const StepResult c = clp_step(s, batch, reflect, zero, cf_rng2);
  REQUIRE(same_params(c.state.model, b.state.model));

  REQUIRE_THROWS_AS(clp_step(s, batch, nullptr, cfg, cf_rng), std::invalid_argument);
}

TEST_CASE("clp_step: reflect penalty matches the direct logit-difference formula") {
  Rng rng(11);
  DualState s = random_state(3, 3, 2, rng);
  const Batch batch = random_batch(2, 3, 2, rng);
  TrainConfig cfg;
  cfg.lr = 0.25;
  cfg.rho = 1.5;
  Rng cf_rng(1);
  const CounterfactualFn reflect = [](const DenseVector& x, Rng&) {
    DenseVector v = x;
    v[0] = -v[0];
    return v;
  };
  const StepResult r = clp_step(s, batch, reflect, cfg, cf_rng);

  // The applied update must equal lr * mean_b grad[ ce_b + rho * d_Y_b ],
  // with the penalty gradient checked by central finite differences of the
  // direct formula (1/K)||h(x) - h(x_cf)||^2.
  auto objective = [&](const MlpModel& m) {
    double total = 0.0;
    for (std::size_t b = 0; b < batch.x.rows; ++b) {
      const DenseVector x(batch.x.row_ptr(b), batch.x.row_ptr(b) + 3);
      DenseVector xcf = x;
      xcf[0] = -xcf[0];
      total += cross_entropy_loss(forward(m, x), batch.labels[b]) +
               cfg.rho * mean_sq_logit_diff(forward(m, x), forward(m, xcf));
    }
    return total / double(batch.x.rows);
  };
  MlpModel probe = s.model;
  auto check_block = [&](std::vector<double>& params, const std::vector<double>& before,
                         const std::vector<double>& after) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      const double fd =
          test_helpers::central_diff([&] { return objective(probe); }, params[i]);
      const double applied = (before[i] - after[i]) / cfg.lr;
      REQUIRE(test_helpers::rel_err(applied, fd) <= 1e-5);
    }
  };
  check_block(probe.w1.data, s.model.w1.data, r.state.model.w1.data);
  check_block(probe.w2.data, s.model.w2.data, r.state.model.w2.data);
  check_block(probe.b1, s.model.b1, r.state.model.b1);
  check_block(probe.b2, s.model.b2, r.state.model.b2);
}

TEST_CASE("erm_step: saturated batch leaves parameters unchanged") {
  DualState s;
  s.model.w1 = DenseMatrix(1, 1, {1.0});
  s.model.b1 = {5.0};
  s.model.w2 = DenseMatrix(2, 1, {60.0, -60.0});
  s.model.b2 = {0.0, 0.0};
  Batch batch;
  batch.x = DenseMatrix(2, 1, {1.0, 2.0});
  batch.labels = {0, 0};  // logits hugely favour class 0 already
  TrainConfig cfg;
  cfg.lr = 0.5;
  const StepResult r = erm_step(s, batch, cfg);
  for (std::size_t i = 0; i < s.model.w2.data.size(); ++i)
    REQUIRE(std::abs(r.state.model.w2.data[i] - s.model.w2.data[i]) <= 1e-12);
  for (std::size_t i = 0; i < s.model.w1.data.size(); ++i)
    REQUIRE(std::abs(r.state.model.w1.data[i] - s.model.w1.data[i]) <= 1e-12);
}

TEST_CASE("erm_step: hand-computed single-parameter logistic update") {
  // hidden = relu(x + 10) stays active; logits = (a * hidden, 0).
  DualState s;
  s.model.w1 = DenseMatrix(1, 1, {1.0});
  s.model.b1 = {10.0};
  s.model.w2 = DenseMatrix(2, 1, {0.5, 0.0});
  s.model.b2 = {0.0, 0.0};
  Batch batch;
  batch.x = DenseMatrix(1, 1, {-9.0});  // hidden = 1
  batch.labels = {0};
  TrainConfig cfg;
  cfg.lr = 0.2;
  const StepResult r = erm_step(s, batch, cfg);
  const double p0 = 1.0 / (1.0 + std::exp(-0.5));
  REQUIRE(r.state.model.w2(0, 0) == Catch::Approx(0.5 - 0.2 * (p0 - 1.0)).margin(1e-12));
  REQUIRE(r.state.model.w2(1, 0) == Catch::Approx(0.0 - 0.2 * (1.0 - p0)).margin(1e-12));
  REQUIRE(r.loss == Catch::Approx(std::log1p(std::exp(-0.5))).margin(1e-12));
}

TEST_CASE("erm_step with zero learning rate changes nothing") {
  Rng rng(13);
  const DualState s = random_state(3, 4, 2, rng);
  const Batch batch = random_batch(4, 3, 2, rng);
  TrainConfig cfg;
  cfg.lr = 0.0;
  const StepResult r = erm_step(s, batch, cfg);
  REQUIRE(same_params(r.state.model, s.model));
}

TEST_CASE("sensr_step: huge budget with clamp 0 is pure adversarial training") {
  Rng rng(17);
  const DualState s = random_state(3, 4, 2, rng);
  const Batch batch = random_batch(5, 3, 2, rng);
  std::vector<DenseVector> dirs{test_helpers::random_vector(3, rng)};
  const FairMetric metric(3, gram_schmidt(dirs, 3));
  TrainConfig cfg;
  cfg.lr = 0.1;
  cfg.eps = 1e12;
  cfg.lambda_clamp = 0.0;
  cfg.attack = {0.1, 4, 0.05, 4};
  const StepResult r = sensr_step(s, batch, metric, cfg);
  REQUIRE(r.state.lambda == 0.0);

  // Reference: plain SGD on the loss at the lambda=0 attack output.
  const BatchAttackResult atk =
      worst_case_sensr_batch(s.model, metric, 0.0, batch.x, batch.labels, cfg.attack);
  const BatchForward fwd = batch_forward(s.model, atk.adversarial);
  DenseMatrix dl(batch.x.rows, 2);
  for (std::size_t b = 0; b < batch.x.rows; ++b) {
    DenseVector row(fwd.logits.row_ptr(b), fwd.logits.row_ptr(b) + 2);
    const DenseVector p = softmax(row);
    dl(b, 0) = p[0];
    dl(b, 1) = p[1];
    dl(b, batch.labels[b]) -= 1.0;
  }
  ParamGradients g(s.model);
  batch_backward_params(s.model, atk.adversarial, fwd, dl, g, false);
  MlpModel want = s.model;
  for (std::size_t i = 0; i < want.w1.data.size(); ++i)
    want.w1.data[i] -= cfg.lr / double(batch.x.rows) * g.w1.data[i];
  REQUIRE(want.w1.data == r.state.model.w1.data);
}

TEST_CASE("sensr_step: constant model reduces to ERM on the clean batch") {
  DualState s;
  s.model.w1 = DenseMatrix(3, 2);
  s.model.b1 = {0, 0, 0};
  s.model.w2 = DenseMatrix(2, 3);
  s.model.b2 = {0, 0};
  Rng rng(19);
  const Batch batch = random_batch(4, 2, 2, rng);
  const FairMetric metric = FairMetric::identity(2);
  TrainConfig cfg;
  cfg.lr = 0.3;
  cfg.attack = {0.1, 3, 0.1, 3};
  const StepResult a = sensr_step(s, batch, metric, cfg);
  const StepResult b = erm_step(s, batch, cfg);
  REQUIRE(same_params(a.state.model, b.state.model));
}

TEST_CASE("balanced sampler: per-class counts deviate from B/K by at most one") {
  Rng master(23);
  for (int rep = 0; rep < 100; ++rep) {
    const std::size_t k = 2 + master.index(4);
    std::vector<int> labels;
    for (std::size_t c = 0; c < k; ++c) {
      const std::size_t pool = 3 + master.index(40);
      for (std::size_t i = 0; i < pool; ++i) labels.push_back(int(c));
    }
    Rng rng(master.next_u64());
    BalancedSampler sampler(labels, k, rng);
    const std::size_t bsz = 1 + master.index(20);
    const std::size_t batches = rep < 3 ? 1000 : 25;
    for (std::size_t t = 0; t < batches; ++t) {
      const auto idx = sampler.next_batch(bsz, rng);
      REQUIRE(idx.size() == bsz);
      std::vector<std::size_t> counts(k, 0);
      for (std::size_t i : idx) counts[std::size_t(labels[i])] += 1;
      for (std::size_t c = 0; c < k; ++c) {
        const double dev = std::abs(double(counts[c]) - double(bsz) / double(k));
        REQUIRE(dev <= 1.0);
      }
    }
  }
  Rng empty_class_rng(1);
  REQUIRE_THROWS_AS(BalancedSampler({0, 0, 0}, 2, empty_class_rng), std::invalid_argument);
}

TEST_CASE("train: E=0 returns the untouched initial state") {
  const Dataset d = gen_synthetic(50, 9);
  TrainConfig cfg;
  cfg.steps = 0;
  cfg.batch = 8;
  cfg.lr = 0.1;
  cfg.seed = 4;
  const TrainResult r = train(d.features, d.labels, 2, 6, FairMetric::identity(2), cfg);
  Rng rng(4);
  const MlpModel expect = init_mlp(2, 6, 2, rng);
  REQUIRE(same_params(r.state.model, expect));
  REQUIRE(r.state.lambda == 0.0);
  REQUIRE(r.log.empty());
}

TEST_CASE("train: configuration errors surface before any step") {
  const Dataset d = gen_synthetic(50, 9);
  TrainConfig cfg;
  cfg.steps = 5;
  cfg.batch = 8;
  cfg.lr = 0.0;
  REQUIRE_THROWS_AS(train(d.features, d.labels, 2, 4, FairMetric::identity(2), cfg),
                    std::invalid_argument);
  cfg.lr = 0.1;
  cfg.method = TrainMethod::Clp;
  REQUIRE_THROWS_AS(train(d.features, d.labels, 2, 4, FairMetric::identity(2), cfg),
                    std::invalid_argument);
  cfg.method = TrainMethod::Erm;
  REQUIRE_THROWS_AS(train(d.features, d.labels, 2, 4, FairMetric::identity(3), cfg),
                    std::invalid_argument);
}

TEST_CASE("train: identical config and seed give bit-identical results") {
  const Dataset d = gen_synthetic(120, 31);
  const FairMetric metric(2, DenseMatrix(2, 1, {1, 0}));
  TrainConfig cfg;
  cfg.steps = 40;
  cfg.batch = 16;
  cfg.lr = 0.05;
  cfg.rho = 1.0;
  cfg.eps = 0.01;
  cfg.seed = 77;
  cfg.method = TrainMethod::Sensei;
  cfg.attack = {0.1, 4, 0.05, 2};
  const TrainResult a = train(d.features, d.labels, 2, 8, metric, cfg);
  const TrainResult b = train(d.features, d.labels, 2, 8, metric, cfg);
  REQUIRE(same_params(a.state.model, b.state.model));
  REQUIRE(a.state.lambda == b.state.lambda);
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    REQUIRE(a.log[i].loss == b.log[i].loss);
    REQUIRE(a.log[i].lambda == b.log[i].lambda);
  }
}

TEST_CASE("train: lambda stays non-negative and respects the clamp") {
  const Dataset d = gen_synthetic(120, 37);
  const FairMetric metric = FairMetric::identity(2);
  TrainConfig cfg;
  cfg.steps = 60;
  cfg.batch = 12;
  cfg.lr = 0.05;
  cfg.rho = 4.0;
  cfg.eps = 0.0;  // every movement exceeds the budget, pushing lambda up
  cfg.seed = 5;
  cfg.method = TrainMethod::Sensei;
  cfg.attack = {0.0, 0, 0.1, 4};
  cfg.lambda_clamp = 0.2;
  cfg.log_every = 1;
  const TrainResult r = train(d.features, d.labels, 2, 8, metric, cfg);
  bool rose = false;
  for (const TrainLogRow& row : r.log) {
    REQUIRE(row.lambda >= 0.0);
    REQUIRE(row.lambda <= 0.2);
    if (row.lambda > 0.0) rose = true;
  }
  REQUIRE(rose);
}

TEST_CASE("train: ERM loss trend decreases on the synthetic task") {
  const Dataset d = gen_synthetic(400, 41);
  TrainConfig cfg;
  cfg.steps = 1500;
  cfg.batch = 32;
  cfg.lr = 0.05;
  cfg.seed = 11;
  cfg.method = TrainMethod::Erm;
  cfg.log_every = 1;
  const TrainResult r = train(d.features, d.labels, 2, 12, FairMetric::identity(2), cfg);
  const std::size_t decile = cfg.steps / 10;
  double first = 0.0, last = 0.0;
  for (std::size_t i = 0; i < decile; ++i) first += r.log[i].loss;
  for (std::size_t i = r.log.size() - decile; i < r.log.size(); ++i) last += r.log[i].loss;
  REQUIRE(last / double(decile) < first / double(decile));
}

TEST_CASE("train log CSV has the documented schema") {
  const Dataset d = gen_synthetic(60, 43);
  TrainConfig cfg;
  cfg.steps = 250;
  cfg.batch = 8;
  cfg.lr = 0.05;
  cfg.seed = 2;
  const TrainResult r = train(d.features, d.labels, 2, 4, FairMetric::identity(2), cfg);
  // Rows at step 1, every 100, and the final step.
  REQUIRE(r.log.front().step == 1);
  REQUIRE(r.log.back().step == 250);
  bool has100 = false;
  for (const auto& row : r.log) has100 = has100 || row.step == 100;
  REQUIRE(has100);

  const std::string path =
      (std::filesystem::temp_directory_path() / "difair_trainlog.csv").string();
  write_train_log_csv(r.log, path);
  std::ifstream in(path);
  std::string header;
  std::getline(in, header);
  REQUIRE(header == "step,loss,lambda,mean_fair_cost");
  std::remove(path.c_str());
}
