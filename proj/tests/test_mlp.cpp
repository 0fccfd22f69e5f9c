#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>

#include "difair/mlp.hpp"
#include "test_helpers.hpp"

using namespace difair;

namespace {

MlpModel tiny_net() {
  // 1 hidden unit, 2 inputs, 2 classes: w1=[[1,0]], b1=[0], w2=[[2],[0]], b2=0.
  MlpModel m;
  m.w1 = DenseMatrix(1, 2, {1, 0});
  m.b1 = {0};
  m.w2 = DenseMatrix(2, 1, {2, 0});
  m.b2 = {0, 0};
  return m;
}

}  // namespace

TEST_CASE("forward: zero model maps everything to zero logits") {
  MlpModel m;
  m.w1 = DenseMatrix(3, 2);
  m.b1 = {0, 0, 0};
  m.w2 = DenseMatrix(2, 3);
  m.b2 = {0, 0};
  const DenseVector logits = forward(m, {0.3, -0.7});
  REQUIRE(logits == DenseVector{0, 0});
}

TEST_CASE("forward: hand-computed single-hidden-unit example") {
  const MlpModel m = tiny_net();
  const DenseVector l1 = forward(m, {3, 5});
  REQUIRE(l1[0] == 6.0);
  REQUIRE(l1[1] == 0.0);
  const DenseVector l2 = forward(m, {-3, 5});  // dead ReLU region
  REQUIRE(l2 == DenseVector{0, 0});
  REQUIRE_THROWS_AS(forward(m, {1, 2, 3}), std::invalid_argument);
}

TEST_CASE("cross entropy at uniform logits is log K") {
  REQUIRE(cross_entropy_loss({0, 0}, 0) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  REQUIRE(cross_entropy_loss({0, 0}, 1) == Catch::Approx(std::log(2.0)).epsilon(1e-12));
  REQUIRE(cross_entropy_loss({0, 0, 0}, 2) == Catch::Approx(std::log(3.0)).epsilon(1e-12));
  // -log(sigma) with sigma = e^10 / (e^10 + 1), evaluated stably.
  REQUIRE(cross_entropy_loss({10, 0}, 0) ==
          Catch::Approx(std::log1p(std::exp(-10.0))).epsilon(1e-12));
  REQUIRE_THROWS_AS(cross_entropy_loss({0, 0}, 2), std::invalid_argument);
}

TEST_CASE("cross entropy is non-negative and saturates toward zero") {
  Rng rng(3);
  for (int i = 0; i < 200; ++i) {
    const DenseVector logits = test_helpers::random_vector(2 + rng.index(4), rng, -5, 5);
    REQUIRE(cross_entropy_loss(logits, int(rng.index(logits.size()))) >= 0.0);
  }
  REQUIRE(cross_entropy_loss({40, 0}, 0) < 1e-15);
}

TEST_CASE("backprop: loss equals cross_entropy(forward), saturated gradients vanish") {
  Rng rng(11);
  const MlpModel m = test_helpers::random_mlp(3, 4, 2, rng);
  const DenseVector x = test_helpers::random_vector(3, rng);
  const auto [loss, grads] = backprop(m, x, 1);
  REQUIRE(loss == cross_entropy_loss(forward(m, x), 1));

  // Saturated softmax: with a huge logit gap in favour of the label the
  // gradient of every parameter goes to zero.
  MlpModel sat = tiny_net();
  sat.b2 = {50.0, 0.0};
  const auto [sl, sg] = backprop(sat, {1.0, 0.0}, 0);
  for (double v : sg.w2.data) REQUIRE(std::abs(v) < 1e-18);
  for (double v : sg.w1.data) REQUIRE(std::abs(v) < 1e-18);
}

TEST_CASE("backprop matches central finite differences") {
  Rng rng(42);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t in = 1 + rng.index(5), hid = 1 + rng.index(5), k = 2 + rng.index(3);
    MlpModel m = test_helpers::random_mlp(in, hid, k, rng);
    const DenseVector x = test_helpers::random_vector(in, rng);
    const int label = int(rng.index(k));
    const auto [loss, g] = backprop(m, x, label);

    auto loss_fn = [&] { return cross_entropy_loss(forward(m, x), label); };
    auto check = [&](double got, double& slot) {
      const double fd = test_helpers::central_diff(loss_fn, slot);
      REQUIRE(test_helpers::rel_err(got, fd) <= 1e-6);
    };
    for (std::size_t i = 0; i < m.w1.data.size(); ++i) check(g.w1.data[i], m.w1.data[i]);
    for (std::size_t i = 0; i < m.b1.size(); ++i) check(g.b1[i], m.b1[i]);
    for (std::size_t i = 0; i < m.w2.data.size(); ++i) check(g.w2.data[i], m.w2.data[i]);
    for (std::size_t i = 0; i < m.b2.size(); ++i) check(g.b2[i], m.b2[i]);
  }
}

TEST_CASE("input gradients match finite differences for both objectives") {
  Rng rng(43);
  for (int rep = 0; rep < 30; ++rep) {
    const std::size_t in = 2 + rng.index(4), hid = 1 + rng.index(5), k = 2 + rng.index(3);
    const MlpModel m = test_helpers::random_mlp(in, hid, k, rng);
    DenseVector x = test_helpers::random_vector(in, rng);
    const int label = int(rng.index(k));
    const DenseVector ref = test_helpers::random_vector(k, rng);

    const DenseVector gl = input_gradient_loss(m, x, label);
    const DenseVector gd = input_gradient_logit_sqdiff(m, x, ref);
    for (std::size_t i = 0; i < in; ++i) {
      const double fd_loss = test_helpers::central_diff(
          [&] { return cross_entropy_loss(forward(m, x), label); }, x[i]);
      REQUIRE(test_helpers::rel_err(gl[i], fd_loss) <= 1e-6);
      const double fd_dy = test_helpers::central_diff(
          [&] { return mean_sq_logit_diff(forward(m, x), ref); }, x[i]);
      REQUIRE(test_helpers::rel_err(gd[i], fd_dy) <= 1e-6);
    }
  }
}

TEST_CASE("input gradient edge cases") {
  MlpModel zero;
  zero.w1 = DenseMatrix(2, 2);
  zero.b1 = {0, 0};
  zero.w2 = DenseMatrix(2, 2);
  zero.b2 = {0, 0};
  REQUIRE(input_gradient_loss(zero, {1, 2}, 0) == DenseVector{0, 0});
  REQUIRE(input_gradient_logit_sqdiff(zero, {1, 2}, {0, 0}) == DenseVector{0, 0});

  // At the reference point itself d_Y is exactly 0 and so is its gradient.
  Rng rng(5);
  const MlpModel m = test_helpers::random_mlp(3, 4, 2, rng);
  const DenseVector x = test_helpers::random_vector(3, rng);
  const DenseVector ref = forward(m, x);
  REQUIRE(mean_sq_logit_diff(forward(m, x), ref) == 0.0);
  for (double v : input_gradient_logit_sqdiff(m, x, ref)) REQUIRE(v == 0.0);
}

TEST_CASE("batched forward/backward agree with per-example results") {
  Rng rng(77);
  const MlpModel m = test_helpers::random_mlp(4, 6, 3, rng);
  const std::size_t bsz = 5;
  DenseMatrix xb(bsz, 4);
  std::vector<int> labels(bsz);
  for (std::size_t b = 0; b < bsz; ++b) {
    for (std::size_t j = 0; j < 4; ++j) xb(b, j) = rng.uniform(-1, 1);
    labels[b] = int(rng.index(3));
  }
  const BatchForward fwd = batch_forward(m, xb);
  DenseMatrix dl(bsz, 3);
  for (std::size_t b = 0; b < bsz; ++b) {
    const DenseVector row(xb.row_ptr(b), xb.row_ptr(b) + 4);
    const DenseVector logits = forward(m, row);
    for (std::size_t k = 0; k < 3; ++k)
      REQUIRE(fwd.logits(b, k) == Catch::Approx(logits[k]).margin(1e-12));
    const DenseVector p = softmax(logits);
    for (std::size_t k = 0; k < 3; ++k) dl(b, k) = p[k];
    dl(b, labels[b]) -= 1.0;
  }

  ParamGradients g(m);
  batch_backward_params(m, xb, fwd, dl, g, false);
  const DenseMatrix gx = batch_backward_inputs(m, fwd, dl);

  Gradients acc;
  acc.w1 = DenseMatrix(m.w1.rows, m.w1.cols);
  acc.b1.assign(m.b1.size(), 0.0);
  acc.w2 = DenseMatrix(m.w2.rows, m.w2.cols);
  acc.b2.assign(m.b2.size(), 0.0);
  for (std::size_t b = 0; b < bsz; ++b) {
    const DenseVector row(xb.row_ptr(b), xb.row_ptr(b) + 4);
    const auto [loss, gb] = backprop(m, row, labels[b]);
    for (std::size_t i = 0; i < acc.w1.data.size(); ++i) acc.w1.data[i] += gb.w1.data[i];
    for (std::size_t i = 0; i < acc.b1.size(); ++i) acc.b1[i] += gb.b1[i];
    for (std::size_t i = 0; i < acc.w2.data.size(); ++i) acc.w2.data[i] += gb.w2.data[i];
    for (std::size_t i = 0; i < acc.b2.size(); ++i) acc.b2[i] += gb.b2[i];
    for (std::size_t j = 0; j < 4; ++j)
      REQUIRE(gx(b, j) == Catch::Approx(gb.input[j]).margin(1e-12));
  }
  for (std::size_t i = 0; i < acc.w1.data.size(); ++i)
    REQUIRE(g.w1.data[i] == Catch::Approx(acc.w1.data[i]).margin(1e-11));
  for (std::size_t i = 0; i < acc.w2.data.size(); ++i)
    REQUIRE(g.w2.data[i] == Catch::Approx(acc.w2.data[i]).margin(1e-11));
  for (std::size_t i = 0; i < acc.b1.size(); ++i)
    REQUIRE(g.b1[i] == Catch::Approx(acc.b1[i]).margin(1e-11));
  for (std::size_t i = 0; i < acc.b2.size(); ++i)
    REQUIRE(g.b2[i] == Catch::Approx(acc.b2[i]).margin(1e-11));
}

TEST_CASE("model serialization round-trips bit-exactly") {
  Rng rng(123);
  const MlpModel m = test_helpers::random_mlp(5, 7, 3, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "difair_mlp_roundtrip.txt").string();
  save_mlp(m, path);
  const MlpModel r = load_mlp(path);
  REQUIRE(r.w1.data == m.w1.data);
  REQUIRE(r.b1 == m.b1);
  REQUIRE(r.w2.data == m.w2.data);
  REQUIRE(r.b2 == m.b2);
  std::remove(path.c_str());
}

TEST_CASE("init_mlp is deterministic and within Glorot bounds") {
  Rng a(9), b(9);
  const MlpModel m1 = init_mlp(4, 8, 2, a);
  const MlpModel m2 = init_mlp(4, 8, 2, b);
  REQUIRE(m1.w1.data == m2.w1.data);
  REQUIRE(m1.w2.data == m2.w2.data);
  const double lim = std::sqrt(6.0 / (4 + 8));
  for (double v : m1.w1.data) REQUIRE(std::abs(v) <= lim);
  for (double v : m1.b1) REQUIRE(v == 0.0);
}
