#pragma once

#include <Eigen/Sparse>
#include <array>
#include <iosfwd>
#include <vector>

#include "thbshell/core.hpp"

namespace thbshell {

// Open (clamped) univariate B-spline knot vector.
class KnotVector {
public:
  KnotVector(int degree, std::vector<Real> knots);

  // Uniform open knot vector with `n_spans` equal spans on [a,b].
  static KnotVector uniform(int degree, int n_spans, Real a = 0.0, Real b = 1.0);

  int degree() const { return p_; }
  const std::vector<Real>& knots() const { return knots_; }
  int n_funcs() const { return static_cast<int>(knots_.size()) - p_ - 1; }
  int n_spans() const { return n_spans_; }  // nonempty spans
  Real a() const { return knots_[p_]; }
  Real b() const { return knots_[knots_.size() - p_ - 1]; }

  // Index of the nonempty span containing u (0-based among nonempty spans).
  int find_span(Real u) const;
  // Knot-array index of that span, i.e. knots[k] <= u < knots[k+1].
  int find_span_knot_index(Real u) const;

  // Span boundaries of nonempty span s.
  Real span_left(int s) const { return span_starts_[s]; }
  Real span_right(int s) const { return span_starts_[s + 1]; }

  // First nonzero function index and the p+1 nonzero values at u.
  std::pair<int, std::vector<Real>> eval_basis(Real u) const;

  // Rows 0..max_order of the derivative table for the p+1 nonzero
  // functions at u; row 0 equals eval_basis. max_order <= 2.
  std::pair<int, MatX> eval_basis_derivs(Real u, int max_order) const;

  // Greville abscissa of function i.
  Real greville(int i) const;

  // Span range [lo, hi] (nonempty-span indices) covered by function i.
  std::array<int, 2> func_span_range(int i) const;
  // Functions that are nonzero on nonempty span s: [s_knot - p, s_knot].
  std::array<int, 2> span_func_range(int s) const;

  // All spans of equal length (within tolerance) and simple interior knots.
  bool is_uniform_simple() const;

  // Knot vector with every span split at its midpoint.
  KnotVector dyadic_refined() const;

private:
  int p_;
  std::vector<Real> knots_;
  std::vector<Real> span_starts_;  // nonempty span boundaries, size n_spans+1
  std::vector<int> span_knot_idx_; // knot-array index per nonempty span
  int n_spans_;
};

// Knot insertion. Returns the refined vector and the subdivision matrix M
// (n_fine x n_coarse): coefficients c_f = M c_c represent the same spline,
// equivalently B_coarse(u) = M^T B_fine(u).
std::pair<KnotVector, Eigen::SparseMatrix<Real>> insert_knots(
    const KnotVector& kv, const std::vector<Real>& new_knots);

// Degree elevation keeping the same continuity: degree p+1, every knot
// multiplicity increased by one. The coarse space is contained in the result.
KnotVector elevate_degree_same_regularity(const KnotVector& kv);

struct TensorBasis {
  KnotVector ku;
  KnotVector kv;
  int n_funcs() const { return ku.n_funcs() * kv.n_funcs(); }
};

TensorBasis elevate_degree_same_regularity(const TensorBasis& tb);

// Surface point data: covariant basis, curvature, metric.
struct SurfacePoint {
  Vec3 x = Vec3::Zero();
  Vec3 a1 = Vec3::Zero(), a2 = Vec3::Zero();
  Vec3 a11 = Vec3::Zero(), a12 = Vec3::Zero(), a22 = Vec3::Zero();
  Vec3 a3 = Vec3::Zero();
  Real measure = 0.0;  // |a1 x a2|
  Mat2 a_cov = Mat2::Zero();  // first fundamental form a_{ab}
  Mat2 a_con = Mat2::Zero();  // inverse metric a^{ab}
  Mat2 b_cov = Mat2::Zero();  // second fundamental form b_{ab}

  const Vec3& deriv(int alpha) const { return alpha == 0 ? a1 : a2; }
  const Vec3& deriv2(int alpha, int beta) const {
    return (alpha == 0 && beta == 0) ? a11
           : (alpha == 1 && beta == 1) ? a22 : a12;
  }
};

// Tensor-product NURBS/B-spline surface with thickness, the fixed geometry
// of a shell problem. Control points indexed a + b * n_u.
class GeometryMap {
public:
  GeometryMap(TensorBasis basis, std::vector<Vec3> points,
              std::vector<Real> weights, Real thickness);

  const TensorBasis& basis() const { return basis_; }
  const std::vector<Vec3>& points() const { return points_; }
  const std::vector<Real>& weights() const { return weights_; }
  bool rational() const { return !weights_.empty(); }
  Real thickness() const { return thickness_; }
  Real scale() const { return bbox_diag_; }

  // order: 0 position, 1 adds tangents/normal/metric, 2 adds curvature.
  SurfacePoint eval(Real u, Real v, int order = 2) const;

private:
  TensorBasis basis_;
  std::vector<Vec3> points_;
  std::vector<Real> weights_;
  Real thickness_;
  Real bbox_diag_;
};

// Structured text format listing degrees, knot vectors, control net,
// weights and thickness.
GeometryMap read_geometry(std::istream& in);
GeometryMap read_geometry_file(const std::string& path);
void write_geometry(std::ostream& out, const GeometryMap& g);

}  // namespace thbshell
