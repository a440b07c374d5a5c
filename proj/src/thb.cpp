#include "thbshell/thb.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <ostream>
#include <set>

namespace thbshell {

namespace {

// multiset difference fine \ coarse of knot values
std::vector<Real> knot_difference(const KnotVector& coarse,
                                  const KnotVector& fine) {
  std::vector<Real> out;
  auto c = coarse.knots().begin();
  for (Real k : fine.knots()) {
    if (c != coarse.knots().end() && *c == k)
      ++c;
    else
      out.push_back(k);
  }
  require(c == coarse.knots().end(), "knot_difference: vectors not nested");
  return out;
}

Eigen::SparseMatrix<Real, Eigen::RowMajor> subdivision(const KnotVector& coarse,
                                                       const KnotVector& fine) {
  auto [kv, M] = insert_knots(coarse, knot_difference(coarse, fine));
  require(kv.knots() == fine.knots(), "subdivision: refinement mismatch");
  return Eigen::SparseMatrix<Real, Eigen::RowMajor>(M);
}

}  // namespace

HierarchicalMesh::HierarchicalMesh(TensorBasis base, int m, int max_levels)
    : base_(std::move(base)), m_(m), max_levels_(max_levels) {
  require(m_ >= 2, "HierarchicalMesh: admissibility class m must be >= 2");
  require(max_levels_ >= 1, "HierarchicalMesh: max_levels must be >= 1");
  require(base_.ku.is_uniform_simple() && base_.kv.is_uniform_simple(),
          "HierarchicalMesh: base knot vectors must be uniform with simple knots");
  Level l0{base_.ku, base_.kv, {}, {}};
  for (int j = 0; j < base_.kv.n_spans(); ++j)
    for (int i = 0; i < base_.ku.n_spans(); ++i)
      l0.active.insert(pack_ij(i, j));
  levels_.push_back(std::move(l0));
  rebuild_omega();
}

void HierarchicalMesh::ensure_level(int l) {
  require(l < max_levels_, "HierarchicalMesh: level cap exceeded");
  while (static_cast<int>(levels_.size()) <= l) {
    const Level& prev = levels_.back();
    levels_.push_back(Level{prev.ku.dyadic_refined(), prev.kv.dyadic_refined(),
                            {}, {}});
  }
}

const KnotVector& HierarchicalMesh::level_ku(int l) const {
  return levels_.at(l).ku;
}
const KnotVector& HierarchicalMesh::level_kv(int l) const {
  return levels_.at(l).kv;
}
int HierarchicalMesh::cells_u(int l) const {
  return base_.ku.n_spans() << l;
}
int HierarchicalMesh::cells_v(int l) const {
  return base_.kv.n_spans() << l;
}

const Eigen::SparseMatrix<Real, Eigen::RowMajor>& HierarchicalMesh::subdiv_u(
    int l) const {
  if (static_cast<int>(subdiv_u_.size()) <= l) subdiv_u_.resize(l + 1);
  if (!subdiv_u_[l])
    subdiv_u_[l] = subdivision(levels_.at(l).ku, levels_.at(l + 1).ku);
  return *subdiv_u_[l];
}
const Eigen::SparseMatrix<Real, Eigen::RowMajor>& HierarchicalMesh::subdiv_v(
    int l) const {
  if (static_cast<int>(subdiv_v_.size()) <= l) subdiv_v_.resize(l + 1);
  if (!subdiv_v_[l])
    subdiv_v_[l] = subdivision(levels_.at(l).kv, levels_.at(l + 1).kv);
  return *subdiv_v_[l];
}

bool HierarchicalMesh::is_active(const CellId& c) const {
  if (c.level < 0 || c.level >= n_levels()) return false;
  if (c.i < 0 || c.j < 0 || c.i >= cells_u(c.level) || c.j >= cells_v(c.level))
    return false;
  return levels_[c.level].active.count(pack_ij(c.i, c.j)) > 0;
}

std::vector<CellId> HierarchicalMesh::active_cells() const {
  std::vector<CellId> out;
  for (int l = 0; l < n_levels(); ++l)
    for (std::uint64_t key : levels_[l].active)
      out.push_back(CellId{l, static_cast<int>(key >> 21),
                           static_cast<int>(key & ((1u << 21) - 1))});
  std::sort(out.begin(), out.end(), [](const CellId& x, const CellId& y) {
    return std::tie(x.level, x.j, x.i) < std::tie(y.level, y.j, y.i);
  });
  return out;
}

int HierarchicalMesh::n_active_cells() const {
  int n = 0;
  for (const auto& l : levels_) n += static_cast<int>(l.active.size());
  return n;
}

std::array<Real, 4> HierarchicalMesh::cell_box(const CellId& c) const {
  const Level& L = levels_.at(c.level);
  return {L.ku.span_left(c.i), L.ku.span_right(c.i), L.kv.span_left(c.j),
          L.kv.span_right(c.j)};
}

Real HierarchicalMesh::cell_area(const CellId& c) const {
  auto b = cell_box(c);
  return (b[1] - b[0]) * (b[3] - b[2]);
}

Real HierarchicalMesh::active_area() const {
  Real a = 0.0;
  for (const CellId& c : active_cells()) a += cell_area(c);
  return a;
}

CellId HierarchicalMesh::find_cell(Real u, Real v) const {
  for (int l = n_levels() - 1; l >= 0; --l) {
    int i = levels_[l].ku.find_span(u);
    int j = levels_[l].kv.find_span(v);
    if (levels_[l].active.count(pack_ij(i, j))) return {l, i, j};
  }
  throw NumericError("HierarchicalMesh::find_cell: point not covered");
}

bool HierarchicalMesh::in_omega(int l, int i, int j) const {
  if (l >= n_levels()) return false;
  if (i < 0 || j < 0 || i >= cells_u(l) || j >= cells_v(l)) return false;
  return levels_[l].omega.count(pack_ij(i, j)) > 0;
}

void HierarchicalMesh::rebuild_omega() {
  for (int l = n_levels() - 1; l >= 0; --l) {
    Level& L = levels_[l];
    L.omega = L.active;
    if (l + 1 < n_levels()) {
      // parent joins Omega^l when all four children are inside Omega^{l+1}
      std::unordered_map<std::uint64_t, int> counts;
      for (std::uint64_t key : levels_[l + 1].omega) {
        int i = static_cast<int>(key >> 21);
        int j = static_cast<int>(key & ((1u << 21) - 1));
        ++counts[pack_ij(i >> 1, j >> 1)];
      }
      for (const auto& [key, c] : counts)
        if (c == 4) L.omega.insert(key);
    }
  }
  ++generation_;
}

std::vector<CellId> HierarchicalMesh::support_extension(const CellId& Q,
                                                        int k) const {
  require(k >= 0 && k <= Q.level, "support_extension: need k <= Q.level");
  const int pu = base_.ku.degree(), pv = base_.kv.degree();
  int ia = Q.i >> (Q.level - k), ja = Q.j >> (Q.level - k);
  int nu = cells_u(k), nv = cells_v(k);
  // functions containing the ancestor cell cover spans [ia-pu, ia+pu]
  int i0 = std::max(0, ia - pu), i1 = std::min(nu - 1, ia + pu);
  int j0 = std::max(0, ja - pv), j1 = std::min(nv - 1, ja + pv);
  std::vector<CellId> out;
  for (int j = j0; j <= j1; ++j)
    for (int i = i0; i <= i1; ++i) out.push_back(CellId{k, i, j});
  return out;
}

std::vector<CellId> HierarchicalMesh::refinement_neighborhood(
    const CellId& Q) const {
  const int lt = Q.level - m_ + 1;
  if (lt < 0) return {};
  std::set<CellId> parents;
  for (const CellId& s : support_extension(Q, lt + 1)) {
    CellId P{lt, s.i >> 1, s.j >> 1};
    if (is_active(P)) parents.insert(P);
  }
  return {parents.begin(), parents.end()};
}

std::vector<CellId> HierarchicalMesh::coarsening_neighborhood(
    const CellId& Q) const {
  require(Q.level >= 1, "coarsening_neighborhood: level-0 cell has no parent");
  const int lf = Q.level + m_ - 1;
  if (lf >= n_levels()) return {};
  // union of same-level support extensions of the active siblings
  CellSet region;  // level Q.level cells
  int pi = Q.i >> 1, pj = Q.j >> 1;
  for (int cj = 2 * pj; cj <= 2 * pj + 1; ++cj)
    for (int ci = 2 * pi; ci <= 2 * pi + 1; ++ci) {
      CellId sib{Q.level, ci, cj};
      if (!is_active(sib)) continue;
      for (const CellId& s : support_extension(sib, Q.level))
        region.insert(pack_ij(s.i, s.j));
    }
  std::vector<CellId> out;
  const int shift = lf - Q.level;
  for (std::uint64_t key : levels_[lf].active) {
    int i = static_cast<int>(key >> 21);
    int j = static_cast<int>(key & ((1u << 21) - 1));
    if (region.count(pack_ij(i >> shift, j >> shift)))
      out.push_back(CellId{lf, i, j});
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<CellId> HierarchicalMesh::coarsening_neighborhood_marked(
    const CellId& Q, const std::vector<CellId>& marked) const {
  require(Q.level >= 1, "coarsening_neighborhood_marked: level-0 cell");
  const int lm = Q.level + m_ - 2;  // marked cells of this level matter
  CellSet region;
  int pi = Q.i >> 1, pj = Q.j >> 1;
  for (int cj = 2 * pj; cj <= 2 * pj + 1; ++cj)
    for (int ci = 2 * pi; ci <= 2 * pi + 1; ++ci) {
      CellId sib{Q.level, ci, cj};
      if (!is_active(sib)) continue;
      for (const CellId& s : support_extension(sib, Q.level))
        region.insert(pack_ij(s.i, s.j));
    }
  std::vector<CellId> out;
  const int shift = lm - Q.level;
  for (const CellId& M : marked) {
    if (M.level != lm) continue;
    if (region.count(pack_ij(M.i >> shift, M.j >> shift))) out.push_back(M);
  }
  std::sort(out.begin(), out.end());
  return out;
}

bool HierarchicalMesh::can_coarsen(const CellId& Q,
                                   const std::vector<CellId>& marked) const {
  if (Q.level < 1 || !is_active(Q)) return false;
  int pi = Q.i >> 1, pj = Q.j >> 1;
  for (int cj = 2 * pj; cj <= 2 * pj + 1; ++cj)
    for (int ci = 2 * pi; ci <= 2 * pi + 1; ++ci) {
      CellId sib{Q.level, ci, cj};
      if (!is_active(sib)) return false;
      if (std::find(marked.begin(), marked.end(), sib) != marked.end())
        return false;
    }
  if (!coarsening_neighborhood(Q).empty()) return false;
  if (!marked.empty() && !coarsening_neighborhood_marked(Q, marked).empty())
    return false;
  return true;
}

void HierarchicalMesh::refine_recursive(const CellId& Q, RefineReport& report) {
  if (!is_active(Q)) return;
  if (Q.level >= max_levels_ - 1) {
    report.blocked.push_back(Q);
    return;
  }
  for (const CellId& N : refinement_neighborhood(Q)) refine_recursive(N, report);
  if (!is_active(Q)) return;
  ensure_level(Q.level + 1);
  levels_[Q.level].active.erase(pack_ij(Q.i, Q.j));
  for (int cj = 2 * Q.j; cj <= 2 * Q.j + 1; ++cj)
    for (int ci = 2 * Q.i; ci <= 2 * Q.i + 1; ++ci)
      levels_[Q.level + 1].active.insert(pack_ij(ci, cj));
  report.refined.push_back(Q);
}

HierarchicalMesh::RefineReport HierarchicalMesh::refine(
    const std::vector<CellId>& cells) {
  RefineReport report;
  std::vector<CellId> sorted = cells;
  std::sort(sorted.begin(), sorted.end());
  for (const CellId& Q : sorted) refine_recursive(Q, report);
  rebuild_omega();
  return report;
}

HierarchicalMesh::RefineReport HierarchicalMesh::refine_closure(
    const std::vector<CellId>& cells) const {
  HierarchicalMesh scratch = *this;
  return scratch.refine(cells);
}

void HierarchicalMesh::coarsen(const std::vector<CellId>& cells) {
  // group by parent, finest level first
  std::map<CellId, std::vector<CellId>> groups;
  for (const CellId& c : cells) {
    require(c.level >= 1, "coarsen: level-0 cell has no parent");
    groups[CellId{c.level - 1, c.i >> 1, c.j >> 1}].push_back(c);
  }
  std::vector<std::pair<CellId, std::vector<CellId>>> ordered(groups.begin(),
                                                              groups.end());
  std::sort(ordered.begin(), ordered.end(),
            [](const auto& a, const auto& b) { return a.first.level > b.first.level; });
  for (auto& [parent, kids] : ordered) {
    if (kids.size() < 4) continue;  // incomplete sibling group
    for (const CellId& k : kids) {
      require(is_active(k), "coarsen: inactive cell in input");
      if (!coarsening_neighborhood(k).empty())
        throw std::invalid_argument(
            "coarsen: cell fails the admissible-coarsening test");
    }
    for (const CellId& k : kids) levels_[k.level].active.erase(pack_ij(k.i, k.j));
    levels_[parent.level].active.insert(pack_ij(parent.i, parent.j));
  }
  rebuild_omega();
}

HierarchicalMesh::Admissibility HierarchicalMesh::is_admissible(int m_check) const {
  if (m_check < 0) m_check = m_;
  ThbSpace space(*this);
  for (const CellId& c : active_cells()) {
    const auto& tab = space.cell_basis(c);
    int lo = n_levels(), hi = -1;
    for (int gid : tab.gids) {
      lo = std::min(lo, space.func(gid).level);
      hi = std::max(hi, space.func(gid).level);
    }
    if (hi - lo + 1 > m_check) return {false, c};
  }
  return {true, {}};
}

void HierarchicalMesh::dump(std::ostream& out,
                            const std::map<CellId, Real>* values) const {
  out << "# level i j u0 u1 v0 v1";
  if (values) out << " value";
  out << "\n";
  for (const CellId& c : active_cells()) {
    auto b = cell_box(c);
    out << c.level << " " << c.i << " " << c.j << " " << b[0] << " " << b[1]
        << " " << b[2] << " " << b[3];
    if (values) {
      auto it = values->find(c);
      out << " " << (it == values->end() ? 0.0 : it->second);
    }
    out << "\n";
  }
}

// ---------------------------------------------------------------------------

ThbSpace::ThbSpace(const HierarchicalMesh& mesh, int elevate)
    : mesh_(&mesh), generation_(mesh.generation()), elevate_(elevate) {
  require(elevate >= 0, "ThbSpace: negative degree elevation");
  pu_ = mesh.base().ku.degree() + elevate;
  pv_ = mesh.base().kv.degree() + elevate;
  for (int l = 0; l < mesh.n_levels(); ++l) {
    KnotVector ku = mesh.level_ku(l), kv = mesh.level_kv(l);
    for (int e = 0; e < elevate; ++e) {
      ku = elevate_degree_same_regularity(ku);
      kv = elevate_degree_same_regularity(kv);
    }
    level_ku_.push_back(std::move(ku));
    level_kv_.push_back(std::move(kv));
  }
  build_active_funcs();
  build_cell_tables();
}

const Eigen::SparseMatrix<Real, Eigen::RowMajor>& ThbSpace::subdiv_u(
    int l) const {
  if (elevate_ == 0) return mesh_->subdiv_u(l);
  if (static_cast<int>(subdiv_u_.size()) <= l) subdiv_u_.resize(l + 1);
  if (!subdiv_u_[l]) subdiv_u_[l] = subdivision(level_ku_[l], level_ku_[l + 1]);
  return *subdiv_u_[l];
}

const Eigen::SparseMatrix<Real, Eigen::RowMajor>& ThbSpace::subdiv_v(
    int l) const {
  if (elevate_ == 0) return mesh_->subdiv_v(l);
  if (static_cast<int>(subdiv_v_.size()) <= l) subdiv_v_.resize(l + 1);
  if (!subdiv_v_[l]) subdiv_v_[l] = subdivision(level_kv_[l], level_kv_[l + 1]);
  return *subdiv_v_[l];
}

bool ThbSpace::supp_in_omega(int level, int a, int b, int omega_level) const {
  const KnotVector& ku = level_ku_[level];
  const KnotVector& kv = level_kv_[level];
  auto ra = ku.func_span_range(a);
  auto rb = kv.func_span_range(b);
  for (int j = rb[0]; j <= rb[1]; ++j)
    for (int i = ra[0]; i <= ra[1]; ++i)
      if (!mesh_->in_omega(omega_level, i, j)) return false;
  return true;
}

void ThbSpace::build_active_funcs() {
  gid_map_.resize(mesh_->n_levels());
  for (int l = 0; l < mesh_->n_levels(); ++l) {
    std::set<std::pair<int, int>> candidates;
    for (std::uint64_t key : mesh_->active_set(l)) {
      int i = static_cast<int>(key >> 21);
      int j = static_cast<int>(key & ((1u << 21) - 1));
      auto fa = level_ku_[l].span_func_range(i);
      auto fb = level_kv_[l].span_func_range(j);
      for (int b = fb[0]; b <= fb[1]; ++b)
        for (int a = fa[0]; a <= fa[1]; ++a) candidates.insert({a, b});
    }
    for (auto [a, b] : candidates) {
      // active iff support inside Omega^l (it already meets an active
      // level-l cell, so it cannot be fully inside Omega^{l+1})
      if (l == 0 || supp_in_omega(l, a, b, l)) {
        gid_map_[l][pack_ij(a, b)] = static_cast<int>(funcs_.size());
        funcs_.push_back(Func{l, a, b});
      }
    }
  }
}

int ThbSpace::gid_of(int level, int a, int b) const {
  if (level < 0 || level >= static_cast<int>(gid_map_.size())) return -1;
  auto it = gid_map_[level].find(pack_ij(a, b));
  return it == gid_map_[level].end() ? -1 : it->second;
}

Vec2 ThbSpace::greville(int gid) const {
  const Func& f = funcs_.at(gid);
  return {level_ku_[f.level].greville(f.a), level_kv_[f.level].greville(f.b)};
}

void ThbSpace::build_cell_tables() {
  const int wu = pu_ + 1, wv = pv_ + 1;
  for (const CellId& c : mesh_->active_cells()) {
    const int L = c.level;
    // window origins per level: functions alive on the ancestor cell
    std::vector<std::pair<int, int>> origin(L + 1);
    for (int l = 0; l <= L; ++l) {
      int ia = c.i >> (L - l), ja = c.j >> (L - l);
      origin[l] = {level_ku_[l].span_func_range(ia)[0],
                   level_kv_[l].span_func_range(ja)[0]};
    }
    CellBasis tab;
    std::vector<Eigen::RowVectorXd> rows;
    for (int l = 0; l <= L; ++l) {
      for (int bb = 0; bb < wv; ++bb) {
        for (int aa = 0; aa < wu; ++aa) {
          int a = origin[l].first + aa, b = origin[l].second + bb;
          int gid = gid_of(l, a, b);
          if (gid < 0) continue;
          // promote the unit coefficient through the levels with truncation
          Eigen::MatrixXd coef = Eigen::MatrixXd::Zero(wu, wv);
          coef(aa, bb) = 1.0;
          bool dead = false;
          for (int k = l; k < L && !dead; ++k) {
            const auto& Au = subdiv_u(k);
            const auto& Av = subdiv_v(k);
            Eigen::MatrixXd next = Eigen::MatrixXd::Zero(wu, wv);
            for (int b2 = 0; b2 < wv; ++b2) {
              int bf = origin[k + 1].second + b2;
              for (int a2 = 0; a2 < wu; ++a2) {
                int af = origin[k + 1].first + a2;
                Real s = 0.0;
                for (int b1 = 0; b1 < wv; ++b1) {
                  Real avv = Av.coeff(bf, origin[k].second + b1);
                  if (avv == 0.0) continue;
                  for (int a1 = 0; a1 < wu; ++a1) {
                    Real c1 = coef(a1, b1);
                    if (c1 == 0.0) continue;
                    s += Au.coeff(af, origin[k].first + a1) * avv * c1;
                  }
                }
                // truncation: drop functions representable at finer levels
                if (s != 0.0 && supp_in_omega(k + 1, af, bf, k + 1)) s = 0.0;
                next(a2, b2) = s;
              }
            }
            coef = next;
            dead = coef.cwiseAbs().maxCoeff() == 0.0;
          }
          if (dead || coef.cwiseAbs().maxCoeff() == 0.0) continue;
          Eigen::RowVectorXd row(wu * wv);
          for (int b2 = 0; b2 < wv; ++b2)
            for (int a2 = 0; a2 < wu; ++a2) row(a2 + b2 * wu) = coef(a2, b2);
          tab.gids.push_back(gid);
          rows.push_back(row);
        }
      }
    }
    tab.C.resize(static_cast<int>(rows.size()), wu * wv);
    for (size_t r = 0; r < rows.size(); ++r) tab.C.row(r) = rows[r];
    cell_tables_[pack_cell(c)] = std::move(tab);
  }
}

const ThbSpace::CellBasis& ThbSpace::cell_basis(const CellId& c) const {
  require(generation_ == mesh_->generation(),
          "ThbSpace: stale space used after mesh mutation");
  auto it = cell_tables_.find(pack_cell(c));
  require(it != cell_tables_.end(), "ThbSpace: cell is not active");
  return it->second;
}

MatX ThbSpace::local_tensor_derivs(const CellId& c, Real u, Real v,
                                   int max_order) const {
  const int wu = pu_ + 1, wv = pv_ + 1;
  auto [iu, du] = level_ku_[c.level].eval_basis_derivs(u, std::min(max_order, 2));
  auto [iv, dv] = level_kv_[c.level].eval_basis_derivs(v, std::min(max_order, 2));
  const int ncols = max_order >= 2 ? 6 : (max_order == 1 ? 3 : 1);
  MatX out(wu * wv, ncols);
  for (int b = 0; b < wv; ++b) {
    for (int a = 0; a < wu; ++a) {
      int r = a + b * wu;
      out(r, 0) = du(0, a) * dv(0, b);
      if (max_order >= 1) {
        out(r, 1) = du(1, a) * dv(0, b);
        out(r, 2) = du(0, a) * dv(1, b);
      }
      if (max_order >= 2) {
        out(r, 3) = du(2, a) * dv(0, b);
        out(r, 4) = du(1, a) * dv(1, b);
        out(r, 5) = du(0, a) * dv(2, b);
      }
    }
  }
  return out;
}

ThbSpace::EvalResult ThbSpace::eval(Real u, Real v, int max_order) const {
  CellId c = mesh_->find_cell(u, v);
  const CellBasis& tab = cell_basis(c);
  MatX local = local_tensor_derivs(c, u, v, max_order);
  return {tab.gids, tab.C * local};
}

MatX ThbSpace::eval_field(const MatX& coeffs, Real u, Real v,
                          int max_order) const {
  require(coeffs.rows() == n_active(), "eval_field: coefficient size mismatch");
  EvalResult r = eval(u, v, max_order);
  MatX out = MatX::Zero(coeffs.cols(), r.values.cols());
  for (size_t k = 0; k < r.gids.size(); ++k)
    out += coeffs.row(r.gids[k]).transpose() * r.values.row(static_cast<int>(k));
  return out;
}

}  // namespace thbshell
