#pragma once

#include <Eigen/Sparse>
#include <memory>
#include <vector>

#include "thbshell/core.hpp"

namespace thbshell {

// Symmetric sparse matrix; only the lower triangle is stored.
class SparseSym {
public:
  SparseSym() = default;
  explicit SparseSym(int n) : lower_(n, n) {}

  // Builds from (i,j,v) triplets; entries with i<j are folded onto (j,i).
  static SparseSym from_triplets(int n,
                                 const std::vector<Eigen::Triplet<Real>>& ts);

  int dim() const { return static_cast<int>(lower_.rows()); }
  const Eigen::SparseMatrix<Real>& lower() const { return lower_; }

  VecX multiply(const VecX& x) const;
  SparseSym plus(const SparseSym& other, Real alpha = 1.0) const;
  Real norm() const { return lower_.norm(); }
  MatX to_dense() const;

private:
  Eigen::SparseMatrix<Real> lower_;
};

// Diagnostics from an LDLT factorization; negative pivots signal passed
// limit points in continuation runs.
struct FactorInfo {
  bool success = false;
  int negative_pivots = 0;
  Real min_abs_pivot = 0.0;
};

// Sparse LDLT factorization, reusable for several right hand sides.
class LinearSolver {
public:
  explicit LinearSolver(const SparseSym& K);
  VecX solve(const VecX& b) const;
  const FactorInfo& info() const { return info_; }

private:
  std::shared_ptr<Eigen::SimplicialLDLT<Eigen::SparseMatrix<Real>>> ldlt_;
  FactorInfo info_;
};

// Solves K x = b, checking the relative residual afterwards.
VecX solve(const SparseSym& K, const VecX& b, Real tol = 1e-10);

struct EigenOptions {
  int dense_threshold = 2000;  // below this a dense solver is used
  Real shift = 0.0;            // shift for the sparse shift-invert path
  int max_iterations = 400;
  Real tol = 1e-10;
  bool force_dense = false;
};

struct EigenPairs {
  VecX values;  // ascending
  MatX vectors; // B-normalized columns
};

// Smallest nev eigenpairs of A v = mu B v with symmetric A and SPD B.
// Vectors satisfy v^T B v = 1. Dense LAPACK solve below `dense_threshold`,
// shift-invert Lanczos around `shift` above it.
EigenPairs gen_eig_smallest(const SparseSym& A, const SparseSym& B, int nev,
                            const EigenOptions& opts = {});

}  // namespace thbshell
