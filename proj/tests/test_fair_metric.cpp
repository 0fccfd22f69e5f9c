#include <catch2/catch_amalgamated.hpp>
#include <cstdio>
#include <filesystem>
#include <optional>

#include "difair/fair_metric.hpp"
#include "test_helpers.hpp"

using namespace difair;

namespace {

FairMetric axis_metric_2d() {
  // A = [1 0]^T: variation along the x-axis is ignored.
  return FairMetric(2, DenseMatrix(2, 1, {1, 0}));
}

FairMetric random_metric(std::size_t dim, std::size_t k, Rng& rng) {
  std::vector<DenseVector> vecs;
  for (std::size_t i = 0; i < k; ++i) vecs.push_back(test_helpers::random_vector(dim, rng));
  return FairMetric(dim, gram_schmidt(vecs, dim));
}

}  // namespace

TEST_CASE("fair_distance basics") {
  const FairMetric m = axis_metric_2d();
  REQUIRE(fair_distance(m, {0.3, 0.4}, {0.3, 0.4}) == 0.0);
  REQUIRE(fair_distance(m, {3, 1}, {7, 1}) == Catch::Approx(0.0).margin(1e-24));
  REQUIRE(fair_distance(m, {0, 0}, {0, 2}) == Catch::Approx(4.0).epsilon(1e-12));
  REQUIRE_THROWS_AS(fair_distance(m, {1, 2, 3}, {0, 0, 0}), std::invalid_argument);

  const FairMetric plain = FairMetric::identity(3);
  REQUIRE(fair_distance(plain, {1, 0, 0}, {0, 0, 0}) == Catch::Approx(1.0));
}

TEST_CASE("fair_distance symmetry, non-negativity, subspace invariance") {
  Rng rng(31);
  for (int rep = 0; rep < 120; ++rep) {
    const std::size_t dim = 2 + rng.index(6);
    const std::size_t k = rng.index(dim);  // may be 0
    const FairMetric m = random_metric(dim, k, rng);
    const DenseVector x = test_helpers::random_vector(dim, rng, -3, 3);
    const DenseVector xp = test_helpers::random_vector(dim, rng, -3, 3);
    const double d = fair_distance(m, x, xp);
    REQUIRE(d >= 0.0);
    REQUIRE(fair_distance(m, xp, x) == Catch::Approx(d).margin(1e-12));

    if (m.basis.cols > 0) {
      // Shift either argument by an arbitrary vector in ran(A).
      DenseVector coeff = test_helpers::random_vector(m.basis.cols, rng, -2, 2);
      const DenseVector shift = matvec(m.basis, coeff);
      DenseVector x_shift = x;
      for (std::size_t i = 0; i < dim; ++i) x_shift[i] += shift[i];
      REQUIRE(fair_distance(m, x_shift, xp) == Catch::Approx(d).margin(1e-9));
      REQUIRE(fair_distance(m, x, x_shift) == Catch::Approx(0.0).margin(1e-9));
    }
  }
}

TEST_CASE("learn_subspace_face: single variation direction is forced") {
  ComparableGroup g;
  g.members = {{0, 0}, {2, 0}};
  const FairMetric m = learn_subspace_face({g}, 1);
  REQUIRE(m.basis.cols == 1);
  REQUIRE(std::abs(m.basis(0, 0)) == Catch::Approx(1.0).margin(1e-12));
  REQUIRE(std::abs(m.basis(1, 0)) < 1e-12);
}

TEST_CASE("learn_subspace_face: paired groups reduce to the half-difference SVD") {
  Rng rng(17);
  for (int rep = 0; rep < 20; ++rep) {
    const std::size_t dim = 3 + rng.index(4);
    const std::size_t pairs = 4 + rng.index(4);
    std::vector<ComparableGroup> groups(pairs);
    DenseMatrix half_diffs(pairs, dim);
    for (std::size_t p = 0; p < pairs; ++p) {
      const DenseVector a = test_helpers::random_vector(dim, rng);
      const DenseVector b = test_helpers::random_vector(dim, rng);
      groups[p].members = {a, b};
      for (std::size_t i = 0; i < dim; ++i) half_diffs(p, i) = (a[i] - b[i]) / 2.0;
    }
    const std::size_t k = 1 + rng.index(2);
    const FairMetric face = learn_subspace_face(groups, k);
    const DenseMatrix direct = svd_top_k(half_diffs, k);
    REQUIRE(test_helpers::subspace_gap(face.basis, direct) < 1e-8);
  }
}

TEST_CASE("learn_subspace_face: degenerate groups raise a parameter error") {
  ComparableGroup g;
  g.members = {{1, 2}, {1, 2}, {1, 2}};
  REQUIRE_THROWS_AS(learn_subspace_face({g}, 1), std::invalid_argument);
  ComparableGroup single;
  single.members = {{1, 2}};
  REQUIRE_THROWS_AS(learn_subspace_face({single}, 1), std::invalid_argument);
}

TEST_CASE("learn_subspace_face: invariant to group and member permutations") {
  Rng rng(57);
  for (int rep = 0; rep < 10; ++rep) {
    const std::size_t dim = 4;
    std::vector<ComparableGroup> groups(3);
    for (auto& g : groups) {
      const std::size_t sz = 2 + rng.index(3);
      for (std::size_t i = 0; i < sz; ++i)
        g.members.push_back(test_helpers::random_vector(dim, rng));
    }
    const FairMetric base = learn_subspace_face(groups, 2);

    std::vector<ComparableGroup> shuffled = {groups[2], groups[0], groups[1]};
    for (auto& g : shuffled) std::reverse(g.members.begin(), g.members.end());
    const FairMetric perm = learn_subspace_face(shuffled, 2);
    REQUIRE(test_helpers::subspace_gap(base.basis, perm.basis) < 1e-8);
  }
}

namespace {

// Rows paired across gender: identical covariates, gender flipped. Column 0
// is gender, column 1 race, the rest covariates (plus optionally a column
// that copies gender exactly).
DenseMatrix paired_gender_dataset(std::size_t pairs, std::size_t dim, Rng& rng,
                                  std::optional<std::size_t> copy_col) {
  DenseMatrix x(2 * pairs, dim);
  for (std::size_t p = 0; p < pairs; ++p) {
    DenseVector z = test_helpers::random_vector(dim, rng);
    z[1] = rng.index(2) ? 1.0 : 0.0;  // race
    for (int g = 0; g < 2; ++g) {
      const std::size_t r = 2 * p + std::size_t(g);
      for (std::size_t c = 0; c < dim; ++c) x(r, c) = z[c];
      x(r, 0) = double(g);
      if (copy_col) x(r, *copy_col) = double(g);
    }
  }
  return x;
}

}  // namespace

TEST_CASE("tabular metric: independent gender collapses to the indicator pair") {
  Rng rng(71);
  const DenseMatrix x = paired_gender_dataset(120, 5, rng, std::nullopt);
  const FairMetric m = tabular_sensitive_metric(x, 0, 1);
  REQUIRE(m.basis.cols == 2);

  DenseVector a{0, 0, 0.5, -0.25, 0.125};
  DenseVector b = a;
  b[0] = 1.0;
  b[1] = 1.0;
  REQUIRE(fair_distance(m, a, b) == Catch::Approx(0.0).margin(1e-16));
}

TEST_CASE("tabular metric: a column copying gender is projected out") {
  Rng rng(72);
  const DenseMatrix x = paired_gender_dataset(150, 6, rng, 4);
  const FairMetric m = tabular_sensitive_metric(x, 0, 1);
  REQUIRE(m.basis.cols == 3);

  DenseVector a{0, 1, 0.3, -0.3, 0.0, 0.7};
  DenseVector b = a;
  b[4] = 1.0;  // differ only in the copy column
  REQUIRE(fair_distance(m, a, b) <= 1e-6);

  // Orthonormality contract.
  DenseMatrix ident(m.basis.cols, m.basis.cols);
  gemm(1.0, m.basis, true, m.basis, false, 0.0, ident);
  for (std::size_t i = 0; i < m.basis.cols; ++i)
    for (std::size_t j = 0; j < m.basis.cols; ++j)
      REQUIRE(ident(i, j) == Catch::Approx(i == j ? 1.0 : 0.0).margin(1e-10));
}

TEST_CASE("tabular metric rejects non-binary gender columns") {
  DenseMatrix x(4, 3);
  x(0, 0) = 0.5;
  REQUIRE_THROWS_AS(tabular_sensitive_metric(x, 0, 1), std::invalid_argument);
}

TEST_CASE("fair metric serialization round-trips bit-exactly") {
  Rng rng(5);
  const FairMetric m = random_metric(5, 2, rng);
  const std::string path =
      (std::filesystem::temp_directory_path() / "difair_metric_roundtrip.txt").string();
  save_fair_metric(m, path);
  const FairMetric r = load_fair_metric(path);
  REQUIRE(r.dim == m.dim);
  REQUIRE(r.basis.data == m.basis.data);
  std::remove(path.c_str());
}

TEST_CASE("logistic fit drives the gradient below tolerance") {
  Rng rng(8);
  DenseMatrix x(200, 3);
  std::vector<int> y(200);
  for (std::size_t i = 0; i < 200; ++i) {
    for (std::size_t j = 0; j < 3; ++j) x(i, j) = rng.uniform(-1, 1);
    y[i] = x(i, 0) + 0.5 * x(i, 1) + rng.uniform(-0.2, 0.2) > 0 ? 1 : 0;
  }
  const LogisticFit fit = fit_logistic(x, y);
  // Contract: gradient norm <= 1e-6 or the 10k-step budget is exhausted.
  REQUIRE((fit.grad_norm <= 1e-6 || fit.iterations >= 10000));
  REQUIRE(fit.grad_norm <= 1e-4);
  REQUIRE(fit.weights[0] > 0.0);
}
