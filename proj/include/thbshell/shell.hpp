#pragma once

#include <array>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <functional>
#include <optional>
#include <vector>

#include "thbshell/linalg.hpp"
#include "thbshell/thb.hpp"

namespace thbshell {

struct Material {
  Real E;    // Young's modulus
  Real nu;   // Poisson ratio
  Real rho;  // volumetric density; the mass operator uses rho * t per area

  Material(Real E_, Real nu_, Real rho_ = 0.0) : E(E_), nu(nu_), rho(rho_) {
    require(E > 0, "Material: E must be positive");
    require(nu > -1 && nu < 0.5, "Material: nu outside (-1, 0.5)");
    require(rho >= 0, "Material: negative density");
  }
  Real lame_lambda() const { return E * nu / ((1 + nu) * (1 - 2 * nu)); }
  Real lame_mu() const { return E / (2 * (1 + nu)); }
};

enum class Side { West, East, South, North };  // u=0, u=1, v=0, v=1

// Boundary condition on one edge, expressed on control-point rows: fixing
// the first row pins the displacement trace, the second row additionally
// pins the edge-normal rotation; tying the second row to the first makes
// the normal derivative vanish (symmetry conditions).
struct EdgeCondition {
  Side side;
  std::array<bool, 3> fix_row0{false, false, false};
  std::array<bool, 3> fix_row1{false, false, false};
  std::array<bool, 3> tie_row1{false, false, false};
};

EdgeCondition clamped_edge(Side s);
EdgeCondition simply_supported_edge(Side s, std::array<bool, 3> comps = {false, false, true});
// Symmetry about the plane normal to `normal_comp`: that displacement
// component vanishes on the edge, the other two have zero normal derivative.
EdgeCondition symmetry_edge(Side s, int normal_comp);

struct CornerCondition {
  int cu, cv;  // 0 or 1: which end of each direction
  std::array<bool, 3> fix{true, true, true};
};

struct PointLoad {
  Vec2 uv;
  Vec3 force;
};

struct EdgeLoad {
  Side side;
  Vec3 traction;  // per unit length, dead
};

struct ShellProblem {
  GeometryMap geometry;
  Material material;
  std::vector<EdgeCondition> edges;
  std::vector<CornerCondition> corners;
  std::function<Vec3(const Vec3&)> body_load;  // dead load per undeformed area
  std::vector<PointLoad> point_loads;
  std::vector<EdgeLoad> edge_loads;
  std::optional<Real> follower_pressure;  // p * a3(u), scaled by the load factor
  int quadrature_extra = 0;  // points per direction beyond degree+1
  int workers = 1;
};

struct StateVector {
  VecX coeffs;  // 3 * n_active, layout [3*gid + comp]
  Real lambda = 0.0;

  static StateVector zero(const ThbSpace& space) {
    return {VecX::Zero(3 * space.n_active()), 0.0};
  }
};

// Free/fixed/tied partition of the discrete dofs.
class DofMap {
public:
  DofMap(const ThbSpace& space, const ShellProblem& problem);

  int n_total() const { return n_total_; }
  int n_free() const { return n_free_; }
  // free-dof index or -1 when the dof is fixed; tied dofs share an index
  int free_index(int dof) const { return free_index_[dof]; }

  VecX restrict_to_free(const VecX& full) const;
  VecX expand(const VecX& reduced) const;  // fixed dofs are zero

private:
  int n_total_;
  int n_free_;
  std::vector<int> free_index_;
};

// Plane-stress Saint-Venant Kirchhoff material tensor in the contravariant
// undeformed surface basis.
struct MaterialTensor {
  Mat2 acon;
  Real lambda_bar;
  Real mu;
  Real operator()(int a, int b, int c, int d) const {
    return lambda_bar * acon(a, b) * acon(c, d) +
           mu * (acon(a, c) * acon(b, d) + acon(a, d) * acon(b, c));
  }
  // contraction with a symmetric covariant tensor
  Mat2 contract(const Mat2& e) const;
};

MaterialTensor material_tensor(const Material& mat, const SurfacePoint& geo);

// Kinematic quantities of a displacement state at one parametric point.
struct PointState {
  SurfacePoint geo;     // undeformed surface data
  Vec3 u, u1, u2;       // displacement and first parametric derivatives
  Vec3 u11, u12, u22;   // second derivatives
  Vec3 a1, a2, a3;      // deformed covariant basis and unit normal
  Vec3 g11, g12, g22;   // deformed second derivatives a_{alpha,beta}
  Real jacobian;        // |a1 x a2| deformed
  Mat2 a_def;           // deformed metric
  Mat2 b_def;           // deformed curvature
  Mat2 eps;             // membrane strain 0.5 (a - aring)
  Mat2 kappa;           // bending strain -(b - bring)
  Mat2 n, m;            // stress resultants (contravariant components)
};

PointState point_state(const ShellProblem& problem, const ThbSpace& space,
                       const StateVector& state, Real u, Real v);

// First variations of the strain measures in the direction of a field z
// (given by its parametric derivatives) at a kinematic state.
struct StrainVariation {
  Mat2 deps;
  Mat2 dkappa;
};
StrainVariation strain_variation(const PointState& ps, const Vec3& z1,
                                 const Vec3& z2, const Vec3& z11,
                                 const Vec3& z12, const Vec3& z22);

// Gauss-Legendre rule on [-1,1].
struct GaussRule {
  std::vector<Real> points;
  std::vector<Real> weights;
};
const GaussRule& gauss_rule(int n);

// Element-loop assembly over the active cells of a hierarchical space.
// `linear` evaluates every operator at the undeformed state, which is the
// discrete equation of linear static analysis.
class Assembler {
public:
  Assembler(const ShellProblem& problem, const ThbSpace& space);

  const DofMap& dofs() const { return dofs_; }
  const ThbSpace& space() const { return *space_; }
  const ShellProblem& problem() const { return *problem_; }

  // internal-force vector minus lambda times the external loads (free dofs)
  VecX residual(const StateVector& state, Real lambda, bool linear = false) const;
  SparseSym tangent(const StateVector& state, Real lambda, bool linear = false) const;
  VecX load_vector() const;                 // reference external load f0
  SparseSym mass() const;                   // rho t consistent mass
  Real total_strain_energy(const StateVector& state) const;

  // element-wise weighted residual R(u, z) = lambda f(z) - W_int(u, z):
  // signed integrals r_k per cell plus squared-integrand indicators s_k.
  struct WeightedResidual {
    Real total = 0.0;
    std::vector<CellId> cells;
    std::vector<Real> signed_parts;
    std::vector<Real> squared_parts;
  };
  WeightedResidual weighted_residual(const StateVector& state, Real lambda,
                                     const VecX& z_full, bool linear) const;

private:
  struct CellCache;
  const CellCache& cell_cache(const CellId& cell) const;
  template <typename CellKernel>
  void for_each_cell(CellKernel&& kernel) const;

  const ShellProblem* problem_;
  const ThbSpace* space_;
  DofMap dofs_;
  int nq_u_, nq_v_;
  mutable std::unordered_map<std::uint64_t, std::shared_ptr<const CellCache>>
      cache_;
  mutable std::mutex cache_mtx_;
  mutable std::optional<VecX> load_cache_;
};

}  // namespace thbshell
