#pragma once

#include <functional>

#include "thbshell/shell.hpp"

namespace thbshell {

struct NewtonConfig {
  Real tol = 1e-10;        // relative to the external load scale
  Real abs_floor = 1e-14;
  int max_iterations = 30;
};

struct NewtonResult {
  StateVector state;
  int iterations = 0;
  std::vector<Real> residual_history;
  int negative_pivots = 0;  // of the last tangent factorization
};

// Linear static solve K(0) u = lambda f0.
StateVector linear_solve(const Assembler& asmb, Real lambda);

NewtonResult newton_solve(const Assembler& asmb, Real lambda,
                          const StateVector& initial,
                          const NewtonConfig& config = {});

struct ArcLengthConfig {
  Real dL = 1.0;
  Real psi = 0.0;  // 0 = cylindrical constraint
  Real tol = 1e-8;
  int max_iterations = 20;
  int max_bisections = 6;
};

// Generic Crisfield step on reduced vectors; the shell driver and the test
// oracles share this core.
struct ArcLengthSystem {
  std::function<VecX(const VecX&, Real)> residual;  // W(u, lambda)
  std::function<SparseSym(const VecX&, Real)> tangent;
  VecX q;  // reference load vector
};

struct ArcLengthStepInfo {
  int iterations = 0;
  int bisections = 0;
  Real step_length = 0.0;   // possibly bisected
  Real constraint_residual = 0.0;
  int negative_pivots = 0;
};

// One continuation step from (u, lambda); updates u, lambda and the stored
// previous increment in place.
struct ContinuationState {
  VecX u;      // reduced coordinates
  Real lambda = 0.0;
  VecX du_prev;
  Real dlambda_prev = 0.0;
  bool has_previous = false;
};

ArcLengthStepInfo crisfield_step(const ArcLengthSystem& sys,
                                 ContinuationState& cs,
                                 const ArcLengthConfig& config);

// Shell wrapper around the generic core.
class ShellContinuation {
public:
  ShellContinuation(const Assembler& asmb, const ArcLengthConfig& config);
  ArcLengthStepInfo step();
  StateVector state() const;  // full coefficients + load factor
  const ContinuationState& reduced() const { return cs_; }
  // restart the path memory from transferred fields (after a mesh change)
  void reset(const StateVector& state, const VecX& du_prev_full,
             Real dlambda_prev, bool has_previous);

private:
  const Assembler* asmb_;
  ArcLengthConfig config_;
  ArcLengthSystem sys_;
  ContinuationState cs_;
};

struct EigenSolveResult {
  VecX values;            // pencil eigenvalues mu, ascending
  MatX modes;             // full coefficient vectors, one column per mode
  VecX frequencies;       // modal: omega = sqrt(mu)
  VecX critical_factors;  // buckling: Lambda = lambda_L / (1 - mu)
  StateVector prebuckling;
};

// A = W'(0), B = mass.
EigenSolveResult modal_analysis(const Assembler& asmb, int nev,
                                const EigenOptions& opts = {});

// A = W'(u_L), B = W'(0) with u_L the linear pre-buckling solution at
// lambda_L; critical load factors Lambda = lambda_L / (1 - mu).
EigenSolveResult buckling_analysis(const Assembler& asmb, Real lambda_L,
                                   int nev, EigenOptions opts = {});

}  // namespace thbshell
