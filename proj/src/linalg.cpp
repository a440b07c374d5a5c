#include "thbshell/linalg.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include <lapacke.h>

namespace thbshell {

SparseSym SparseSym::from_triplets(int n,
                                   const std::vector<Eigen::Triplet<Real>>& ts) {
  std::vector<Eigen::Triplet<Real>> low;
  low.reserve(ts.size());
  for (const auto& t : ts) {
    if (t.row() >= t.col())
      low.emplace_back(t.row(), t.col(), t.value());
    else
      low.emplace_back(t.col(), t.row(), t.value());
  }
  SparseSym out(n);
  out.lower_.setFromTriplets(low.begin(), low.end());
  out.lower_.makeCompressed();
  return out;
}

VecX SparseSym::multiply(const VecX& x) const {
  return lower_.selfadjointView<Eigen::Lower>() * x;
}

SparseSym SparseSym::plus(const SparseSym& other, Real alpha) const {
  require(dim() == other.dim(), "SparseSym::plus: dimension mismatch");
  SparseSym out(dim());
  out.lower_ = lower_ + alpha * other.lower_;
  out.lower_.makeCompressed();
  return out;
}

MatX SparseSym::to_dense() const {
  MatX full = MatX(lower_);
  MatX fullT = full.transpose();
  MatX diag = full.diagonal().asDiagonal();
  return full + fullT - diag;
}

LinearSolver::LinearSolver(const SparseSym& K) {
  ldlt_ = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<Real>>>();
  Eigen::SparseMatrix<Real> full =
      K.lower().selfadjointView<Eigen::Lower>();
  ldlt_->compute(full);
  info_.success = (ldlt_->info() == Eigen::Success);
  if (info_.success) {
    const auto& D = ldlt_->vectorD();
    info_.min_abs_pivot = D.size() ? D.cwiseAbs().minCoeff() : 0.0;
    info_.negative_pivots = static_cast<int>((D.array() < 0.0).count());
  }
  if (!info_.success)
    throw NumericError("LinearSolver: factorization failed (singular matrix?)");
}

VecX LinearSolver::solve(const VecX& b) const { return ldlt_->solve(b); }

VecX solve(const SparseSym& K, const VecX& b, Real tol) {
  LinearSolver fac(K);
  VecX x = fac.solve(b);
  Real bn = b.norm();
  if (bn > 0) {
    Real res = (K.multiply(x) - b).norm() / bn;
    if (!(res < tol))
      throw NumericError("solve: residual " + std::to_string(res) +
                         " exceeds tolerance; matrix near singular (min pivot " +
                         std::to_string(fac.info().min_abs_pivot) + ")");
  }
  return x;
}

namespace {

EigenPairs dense_gen_eig(const SparseSym& A, const SparseSym& B, int nev) {
  const int n = A.dim();
  MatX a = A.to_dense();
  MatX b = B.to_dense();
  VecX w(n);
  // dsygvd: A v = mu B v, B SPD; eigenvectors returned B-orthonormal.
  lapack_int info = LAPACKE_dsygvd(LAPACK_COL_MAJOR, 1, 'V', 'L', n, a.data(),
                                   n, b.data(), n, w.data());
  if (info != 0)
    throw NumericError("gen_eig_smallest: LAPACK dsygvd failed, info=" +
                       std::to_string(info));
  nev = std::min(nev, n);
  EigenPairs out;
  out.values = w.head(nev);
  out.vectors = a.leftCols(nev);
  return out;
}

// B-orthogonal Krylov iteration on (A - shift B)^{-1} B with full
// reorthogonalization; Rayleigh-Ritz on the projected operator.
EigenPairs shift_invert_lanczos(const SparseSym& A, const SparseSym& B,
                                int nev, const EigenOptions& opts) {
  const int n = A.dim();
  SparseSym shifted = (opts.shift == 0.0) ? A : A.plus(B, -opts.shift);
  LinearSolver fac(shifted);

  const int m = std::min(n, std::max(2 * nev + 20, 40));
  MatX V(n, m);   // B-orthonormal basis
  MatX BV(n, m);  // B * V cached
  MatX OV(n, m);  // (A - shift B)^{-1} B * V cached

  VecX v = VecX::Random(n);
  VecX bv = B.multiply(v);
  Real nrm = std::sqrt(v.dot(bv));
  v /= nrm;
  bv /= nrm;

  int k = 0;
  for (; k < m; ++k) {
    V.col(k) = v;
    BV.col(k) = bv;
    OV.col(k) = fac.solve(bv);
    VecX w = OV.col(k);
    // full reorthogonalization in the B-inner product
    for (int pass = 0; pass < 2; ++pass)
      for (int j = 0; j <= k; ++j) w -= V.col(j) * (BV.col(j).dot(w));
    VecX bw = B.multiply(w);
    Real wn = std::sqrt(std::max(w.dot(bw), 0.0));
    if (wn < 1e-13) {
      ++k;
      break;
    }
    v = w / wn;
    bv = bw / wn;
  }

  MatX T(k, k);
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) T(j, i) = BV.col(j).dot(OV.col(i));
  T = 0.5 * (T + T.transpose()).eval();
  Eigen::SelfAdjointEigenSolver<MatX> es(T);
  // theta = 1/(mu - shift): largest theta -> mu closest above shift
  VecX theta = es.eigenvalues();
  std::vector<int> order(k);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return theta(a) > theta(b); });

  nev = std::min(nev, k);
  EigenPairs out;
  out.values.resize(nev);
  out.vectors.resize(n, nev);
  for (int i = 0; i < nev; ++i) {
    int j = order[i];
    if (std::abs(theta(j)) < 1e-300)
      throw NumericError("gen_eig_smallest: degenerate Ritz value");
    out.values(i) = opts.shift + 1.0 / theta(j);
    out.vectors.col(i) = V.leftCols(k) * es.eigenvectors().col(j);
  }
  // ascending by eigenvalue
  std::vector<int> ord2(nev);
  std::iota(ord2.begin(), ord2.end(), 0);
  std::sort(ord2.begin(), ord2.end(),
            [&](int a, int b) { return out.values(a) < out.values(b); });
  EigenPairs sorted;
  sorted.values.resize(nev);
  sorted.vectors.resize(n, nev);
  for (int i = 0; i < nev; ++i) {
    sorted.values(i) = out.values(ord2[i]);
    sorted.vectors.col(i) = out.vectors.col(ord2[i]);
  }
  return sorted;
}

}  // namespace

EigenPairs gen_eig_smallest(const SparseSym& A, const SparseSym& B, int nev,
                            const EigenOptions& opts) {
  require(A.dim() == B.dim(), "gen_eig_smallest: dimension mismatch");
  require(nev >= 1, "gen_eig_smallest: nev must be positive");
  EigenPairs out;
  if (opts.force_dense || A.dim() <= opts.dense_threshold)
    out = dense_gen_eig(A, B, nev);
  else
    out = shift_invert_lanczos(A, B, nev, opts);

  // normalize v^T B v = 1 and fix sign (largest entry positive)
  for (int i = 0; i < out.vectors.cols(); ++i) {
    VecX v = out.vectors.col(i);
    Real s = std::sqrt(v.dot(B.multiply(v)));
    if (s > 0) v /= s;
    int idx;
    v.cwiseAbs().maxCoeff(&idx);
    if (v(idx) < 0) v = -v;
    out.vectors.col(i) = v;
  }
  // residual check
  for (int i = 0; i < out.values.size(); ++i) {
    VecX Av = A.multiply(out.vectors.col(i));
    VecX Bv = B.multiply(out.vectors.col(i));
    Real res = (Av - out.values(i) * Bv).norm();
    Real scale = std::max(Av.norm(), std::abs(out.values(i)) * Bv.norm());
    if (scale > 0 && res / scale > 1e-8)
      throw NonConvergenceError(
          "gen_eig_smallest: eigen residual " + std::to_string(res / scale),
          res / scale);
  }
  return out;
}

}  // namespace thbshell
