#pragma once

#include <Eigen/Sparse>
#include <cstdint>
#include <iosfwd>
#include <map>
#include <optional>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "thbshell/splines.hpp"

namespace thbshell {

// Cell of the level-l tensor grid G^l.
struct CellId {
  int level = 0;
  int i = 0;
  int j = 0;
  friend auto operator<=>(const CellId&, const CellId&) = default;
};

inline std::uint64_t pack_ij(int i, int j) {
  return (static_cast<std::uint64_t>(i) << 21) | static_cast<std::uint64_t>(j);
}

using CellSet = std::unordered_set<std::uint64_t>;

// Nested dyadic grids with per-level active-cell sets; the domain of all
// hierarchical discretizations. Admissibility of class m is maintained by
// refine()/coarsen().
class HierarchicalMesh {
public:
  explicit HierarchicalMesh(TensorBasis base, int m = 2, int max_levels = 16);

  int jump_m() const { return m_; }
  int max_levels() const { return max_levels_; }
  int n_levels() const { return static_cast<int>(levels_.size()); }
  const TensorBasis& base() const { return base_; }
  std::uint64_t generation() const { return generation_; }

  const KnotVector& level_ku(int l) const;
  const KnotVector& level_kv(int l) const;
  int cells_u(int l) const;
  int cells_v(int l) const;
  // univariate two-scale matrices of the base-degree spaces, level l -> l+1
  const Eigen::SparseMatrix<Real, Eigen::RowMajor>& subdiv_u(int l) const;
  const Eigen::SparseMatrix<Real, Eigen::RowMajor>& subdiv_v(int l) const;

  bool is_active(const CellId& c) const;
  const CellSet& active_set(int l) const { return levels_[l].active; }
  std::vector<CellId> active_cells() const;  // sorted by (level, j, i)
  int n_active_cells() const;

  std::array<Real, 4> cell_box(const CellId& c) const;  // u0,u1,v0,v1
  Real cell_area(const CellId& c) const;
  Real active_area() const;
  CellId find_cell(Real u, Real v) const;

  // Cell of the level-l grid lies inside Omega^l.
  bool in_omega(int l, int i, int j) const;

  // Multi-level support extension S(Q,k), k <= Q.level: level-k grid cells in
  // the supports of level-k functions whose support contains Q.
  std::vector<CellId> support_extension(const CellId& Q, int k) const;

  // Active cells of level Q.level-m+1 that must be refined before Q.
  std::vector<CellId> refinement_neighborhood(const CellId& Q) const;

  // Active cells of level Q.level+m-1 that forbid coarsening Q to its parent.
  std::vector<CellId> coarsening_neighborhood(const CellId& Q) const;

  // Subset of `marked` (level Q.level+m-2) that would enter the coarsening
  // neighborhood once refined.
  std::vector<CellId> coarsening_neighborhood_marked(
      const CellId& Q, const std::vector<CellId>& marked) const;

  // Combined admissible-coarsening test: both neighborhoods empty, all
  // siblings active and none of them in `marked`.
  bool can_coarsen(const CellId& Q, const std::vector<CellId>& marked = {}) const;

  struct RefineReport {
    std::vector<CellId> refined;
    std::vector<CellId> blocked;  // at the max_levels cap
  };

  // Replaces each cell by its 2x2 children, recursively closing over
  // refinement neighborhoods so that the result is admissible of class m.
  RefineReport refine(const std::vector<CellId>& cells);

  // Cells refine(cells) would split, computed on a scratch copy.
  RefineReport refine_closure(const std::vector<CellId>& cells) const;

  // Replaces complete sibling groups by their parent. Cells failing the
  // plain coarsening-neighborhood test raise; incomplete groups are skipped.
  void coarsen(const std::vector<CellId>& cells);

  struct Admissibility {
    bool ok = true;
    CellId witness;
  };
  // Checks that truncated basis functions alive on any active cell span at
  // most m successive levels. `m_check` < 0 uses the mesh's own class.
  Admissibility is_admissible(int m_check = -1) const;

  // One record per active cell: level, i, j, box, optional value.
  void dump(std::ostream& out,
            const std::map<CellId, Real>* values = nullptr) const;

private:
  struct Level {
    KnotVector ku, kv;
    CellSet active;
    CellSet omega;  // cells inside Omega^l
  };

  void ensure_level(int l);
  void rebuild_omega();
  void refine_recursive(const CellId& Q, RefineReport& report);

  TensorBasis base_;
  int m_;
  int max_levels_;
  std::vector<Level> levels_;
  mutable std::vector<std::optional<Eigen::SparseMatrix<Real, Eigen::RowMajor>>>
      subdiv_u_, subdiv_v_;
  std::uint64_t generation_ = 0;
};

// Active (truncated) hierarchical basis functions over a mesh snapshot.
// `elevate` raises the degree by that amount with unchanged regularity
// (used for the enriched adjoint spaces).
class ThbSpace {
public:
  struct Func {
    int level;
    int a, b;  // univariate function indices at `level`
  };

  ThbSpace(const HierarchicalMesh& mesh, int elevate = 0);

  const HierarchicalMesh& mesh() const { return *mesh_; }
  int degree_u() const { return pu_; }
  int degree_v() const { return pv_; }
  int n_active() const { return static_cast<int>(funcs_.size()); }
  const Func& func(int gid) const { return funcs_[gid]; }
  int gid_of(int level, int a, int b) const;
  const KnotVector& level_ku(int l) const { return level_ku_[l]; }
  const KnotVector& level_kv(int l) const { return level_kv_[l]; }
  Vec2 greville(int gid) const;

  // Truncated representation of every active function alive on a cell in
  // the local tensor basis of the cell's level: C is nfun x (pu+1)(pv+1).
  struct CellBasis {
    std::vector<int> gids;
    MatX C;
  };
  const CellBasis& cell_basis(const CellId& c) const;

  // Local tensor-product values on cell `c` at (u,v): one row per local
  // function, columns [N, Nu, Nv, Nuu, Nuv, Nvv] up to max_order.
  MatX local_tensor_derivs(const CellId& c, Real u, Real v, int max_order) const;

  struct EvalResult {
    std::vector<int> gids;
    MatX values;  // rows match gids; columns as in local_tensor_derivs
  };
  EvalResult eval(Real u, Real v, int max_order = 0) const;

  // Field evaluation given coefficients (n_active x ncomp).
  // Returns value and, for max_order >= 1, parametric derivatives.
  MatX eval_field(const MatX& coeffs, Real u, Real v, int max_order) const;

private:
  void build_active_funcs();
  void build_cell_tables();
  bool supp_in_omega(int level, int a, int b, int omega_level) const;
  const Eigen::SparseMatrix<Real, Eigen::RowMajor>& subdiv_u(int l) const;
  const Eigen::SparseMatrix<Real, Eigen::RowMajor>& subdiv_v(int l) const;

  const HierarchicalMesh* mesh_;
  std::uint64_t generation_;
  int elevate_;
  int pu_, pv_;
  std::vector<KnotVector> level_ku_, level_kv_;
  mutable std::vector<std::optional<Eigen::SparseMatrix<Real, Eigen::RowMajor>>>
      subdiv_u_, subdiv_v_;
  std::vector<Func> funcs_;
  std::vector<std::unordered_map<std::uint64_t, int>> gid_map_;  // per level
  std::unordered_map<std::uint64_t, CellBasis> cell_tables_;     // per cell
};

inline std::uint64_t pack_cell(const CellId& c) {
  return (static_cast<std::uint64_t>(c.level) << 42) | pack_ij(c.i, c.j);
}

}  // namespace thbshell
