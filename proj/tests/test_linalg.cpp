#include "thbshell/linalg.hpp"

#include <Eigen/Dense>

#include "doctest.h"
#include "oracles.hpp"

using namespace thbshell;

namespace {

SparseSym random_spd(int n, Real shift = 1.0) {
  MatX A = MatX::Random(n, n);
  MatX S = A * A.transpose() + shift * MatX::Identity(n, n);
  std::vector<Eigen::Triplet<Real>> ts;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) ts.emplace_back(i, j, S(i, j));
  return SparseSym::from_triplets(n, ts);
}

}  // namespace

TEST_CASE("identity solve returns the right hand side") {
  std::vector<Eigen::Triplet<Real>> ts;
  for (int i = 0; i < 5; ++i) ts.emplace_back(i, i, 1.0);
  SparseSym I5 = SparseSym::from_triplets(5, ts);
  VecX b = VecX::Random(5);
  CHECK((solve(I5, b) - b).norm() < 1e-14);
}

TEST_CASE("sparse solve matches a dense factorization oracle") {
  for (int trial = 0; trial < 3; ++trial) {
    SparseSym K = random_spd(50);
    VecX b = VecX::Random(50);
    VecX x = solve(K, b);
    VecX xd = K.to_dense().ldlt().solve(b);
    CHECK((x - xd).norm() / xd.norm() < 1e-10);
    CHECK((K.multiply(x) - b).norm() / b.norm() < 1e-10);
  }
}

TEST_CASE("factorization reports negative pivots for indefinite matrices") {
  std::vector<Eigen::Triplet<Real>> ts;
  ts.emplace_back(0, 0, 2.0);
  ts.emplace_back(1, 1, -3.0);
  ts.emplace_back(2, 2, 5.0);
  SparseSym K = SparseSym::from_triplets(3, ts);
  LinearSolver fac(K);
  CHECK(fac.info().negative_pivots == 1);
}

TEST_CASE("diagonal pencil eigenvalues") {
  std::vector<Eigen::Triplet<Real>> ta, tb;
  for (int i = 0; i < 3; ++i) {
    ta.emplace_back(i, i, static_cast<Real>(i + 1));
    tb.emplace_back(i, i, 1.0);
  }
  auto A = SparseSym::from_triplets(3, ta);
  auto B = SparseSym::from_triplets(3, tb);
  auto res = gen_eig_smallest(A, B, 3);
  CHECK(res.values(0) == doctest::Approx(1.0));
  CHECK(res.values(1) == doctest::Approx(2.0));
  CHECK(res.values(2) == doctest::Approx(3.0));
}

TEST_CASE("generalized eigenpairs match a dense oracle on random pencils") {
  for (int trial = 0; trial < 3; ++trial) {
    const int n = 60;
    SparseSym A = random_spd(n, 0.5);
    SparseSym B = random_spd(n, 2.0);
    auto res = gen_eig_smallest(A, B, 4);
    // dense oracle via Eigen
    Eigen::GeneralizedSelfAdjointEigenSolver<MatX> es(A.to_dense(), B.to_dense());
    for (int k = 0; k < 4; ++k)
      CHECK(res.values(k) == doctest::Approx(es.eigenvalues()(k)).epsilon(1e-9));
    // B-orthonormality
    for (int i = 0; i < 4; ++i)
      for (int j = 0; j < 4; ++j) {
        Real dot = res.vectors.col(i).dot(B.multiply(res.vectors.col(j)));
        CHECK(std::abs(dot - (i == j ? 1.0 : 0.0)) < 1e-8);
      }
  }
}

TEST_CASE("shift-invert path agrees with the dense path") {
  const int n = 120;
  SparseSym A = random_spd(n, 0.5);
  SparseSym B = random_spd(n, 2.0);
  EigenOptions dense_opts;
  dense_opts.force_dense = true;
  auto ref = gen_eig_smallest(A, B, 3, dense_opts);
  EigenOptions sparse_opts;
  sparse_opts.dense_threshold = 10;  // force the Lanczos path
  auto res = gen_eig_smallest(A, B, 3, sparse_opts);
  for (int k = 0; k < 3; ++k)
    CHECK(res.values(k) == doctest::Approx(ref.values(k)).epsilon(1e-8));
}
