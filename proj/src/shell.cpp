#include "thbshell/shell.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <iostream>
#include <map>
#include <thread>

namespace thbshell {

EdgeCondition clamped_edge(Side s) {
  EdgeCondition e;
  e.side = s;
  e.fix_row0 = {true, true, true};
  e.fix_row1 = {true, true, true};
  return e;
}

EdgeCondition simply_supported_edge(Side s, std::array<bool, 3> comps) {
  EdgeCondition e;
  e.side = s;
  e.fix_row0 = comps;
  return e;
}

EdgeCondition symmetry_edge(Side s, int normal_comp) {
  EdgeCondition e;
  e.side = s;
  e.fix_row0[normal_comp] = true;
  for (int c = 0; c < 3; ++c)
    if (c != normal_comp) e.tie_row1[c] = true;
  return e;
}

namespace {

struct DofUnion {
  std::vector<int> parent;
  std::vector<bool> fixed;
  explicit DofUnion(int n) : parent(n), fixed(n, false) {
    for (int i = 0; i < n; ++i) parent[i] = i;
  }
  int find(int x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return;
    bool fx = fixed[a] || fixed[b];
    parent[a] = b;
    fixed[b] = fx;
  }
  void fix(int a) { fixed[find(a)] = true; }
};

bool on_row(const ThbSpace& space, const ThbSpace::Func& f, Side s, int row) {
  switch (s) {
    case Side::West: return f.a == row;
    case Side::East: return f.a == space.level_ku(f.level).n_funcs() - 1 - row;
    case Side::South: return f.b == row;
    case Side::North: return f.b == space.level_kv(f.level).n_funcs() - 1 - row;
  }
  return false;
}

int row0_partner(const ThbSpace& space, const ThbSpace::Func& f, Side s) {
  int a = f.a, b = f.b;
  switch (s) {
    case Side::West: a = 0; break;
    case Side::East: a = space.level_ku(f.level).n_funcs() - 1; break;
    case Side::South: b = 0; break;
    case Side::North: b = space.level_kv(f.level).n_funcs() - 1; break;
  }
  return space.gid_of(f.level, a, b);
}

}  // namespace

DofMap::DofMap(const ThbSpace& space, const ShellProblem& problem) {
  n_total_ = 3 * space.n_active();
  DofUnion uf(n_total_);
  for (int gid = 0; gid < space.n_active(); ++gid) {
    const auto& f = space.func(gid);
    for (const EdgeCondition& e : problem.edges) {
      if (on_row(space, f, e.side, 0)) {
        for (int c = 0; c < 3; ++c)
          if (e.fix_row0[c]) uf.fix(3 * gid + c);
      }
      if (on_row(space, f, e.side, 1)) {
        for (int c = 0; c < 3; ++c) {
          if (e.fix_row1[c]) uf.fix(3 * gid + c);
          if (e.tie_row1[c]) {
            int partner = row0_partner(space, f, e.side);
            if (partner >= 0)
              uf.unite(3 * gid + c, 3 * partner + c);
            else
              std::cerr << "warning: symmetry tie skipped at level "
                        << f.level << ", row-0 partner inactive\n";
          }
        }
      }
    }
    for (const CornerCondition& cc : problem.corners) {
      int ca = cc.cu == 0 ? 0 : space.level_ku(f.level).n_funcs() - 1;
      int cb = cc.cv == 0 ? 0 : space.level_kv(f.level).n_funcs() - 1;
      if (f.a == ca && f.b == cb)
        for (int c = 0; c < 3; ++c)
          if (cc.fix[c]) uf.fix(3 * gid + c);
    }
  }
  free_index_.assign(n_total_, -1);
  std::vector<int> root_index(n_total_, -2);
  n_free_ = 0;
  for (int d = 0; d < n_total_; ++d) {
    int r = uf.find(d);
    if (uf.fixed[r]) continue;
    if (root_index[r] == -2) root_index[r] = n_free_++;
    free_index_[d] = root_index[r];
  }
}

VecX DofMap::restrict_to_free(const VecX& full) const {
  VecX out = VecX::Zero(n_free_);
  for (int d = 0; d < n_total_; ++d)
    if (free_index_[d] >= 0) out(free_index_[d]) = full(d);
  return out;
}

VecX DofMap::expand(const VecX& reduced) const {
  VecX out = VecX::Zero(n_total_);
  for (int d = 0; d < n_total_; ++d)
    if (free_index_[d] >= 0) out(d) = reduced(free_index_[d]);
  return out;
}

Mat2 MaterialTensor::contract(const Mat2& e) const {
  Real tr = (acon.cwiseProduct(e)).sum();
  return lambda_bar * tr * acon + 2.0 * mu * acon * e * acon;
}

MaterialTensor material_tensor(const Material& mat, const SurfacePoint& geo) {
  Real lam = mat.lame_lambda(), mu = mat.lame_mu();
  // plane-stress reduction of the Saint-Venant Kirchhoff law
  Real lambda_bar = 2.0 * lam * mu / (lam + 2.0 * mu);
  return MaterialTensor{geo.a_con, lambda_bar, mu};
}

const GaussRule& gauss_rule(int n) {
  static std::mutex mtx;
  static std::vector<GaussRule> cache;
  std::lock_guard<std::mutex> lock(mtx);
  if (static_cast<int>(cache.size()) <= n) cache.resize(n + 1);
  GaussRule& r = cache[n];
  if (r.points.empty()) {
    require(n >= 1, "gauss_rule: need at least one point");
    r.points.resize(n);
    r.weights.resize(n);
    auto legendre = [n](Real x) {
      Real p0 = 1.0, p1 = x;
      for (int k = 2; k <= n; ++k) {
        Real p2 = ((2 * k - 1) * x * p1 - (k - 1) * p0) / k;
        p0 = p1;
        p1 = p2;
      }
      Real dp = n * (x * p1 - p0) / (x * x - 1.0);
      return std::pair<Real, Real>(p1, dp);
    };
    for (int i = 0; i < n; ++i) {
      Real x = std::cos(M_PI * (i + 0.75) / (n + 0.5));
      if (n == 1) x = 0.0;
      for (int it = 0; it < 100; ++it) {
        auto [p, dp] = legendre(x);
        Real dx = n == 1 ? -x : p / dp;
        x -= dx;
        if (std::abs(dx) < 1e-15) break;
      }
      Real wgt;
      if (n == 1) {
        wgt = 2.0;
      } else {
        auto [p, dp] = legendre(x);
        wgt = 2.0 / ((1.0 - x * x) * dp * dp);
      }
      r.points[n - 1 - i] = x;
      r.weights[n - 1 - i] = wgt;
    }
  }
  return r;
}

namespace {

const Vec3 kUnit[3] = {Vec3::UnitX(), Vec3::UnitY(), Vec3::UnitZ()};

PointState make_point_state(const ShellProblem& problem, const SurfacePoint& geo,
                            const Vec3& u, const Vec3& u1, const Vec3& u2,
                            const Vec3& u11, const Vec3& u12, const Vec3& u22,
                            bool linear) {
  PointState ps;
  ps.geo = geo;
  ps.u = u;
  ps.u1 = u1;
  ps.u2 = u2;
  ps.u11 = u11;
  ps.u12 = u12;
  ps.u22 = u22;
  const Real t = problem.geometry.thickness();
  MaterialTensor C = material_tensor(problem.material, geo);
  if (linear) {
    // operators evaluated at the undeformed state; strains linearized in u
    ps.a1 = geo.a1;
    ps.a2 = geo.a2;
    ps.a3 = geo.a3;
    ps.jacobian = geo.measure;
    ps.a_def = geo.a_cov;
    ps.b_def = geo.b_cov;
    ps.g11 = geo.a11;
    ps.g12 = geo.a12;
    ps.g22 = geo.a22;
    ps.eps(0, 0) = geo.a1.dot(u1);
    ps.eps(1, 1) = geo.a2.dot(u2);
    ps.eps(0, 1) = ps.eps(1, 0) = 0.5 * (geo.a1.dot(u2) + geo.a2.dot(u1));
    Vec3 da3h = u1.cross(geo.a2) + geo.a1.cross(u2);
    Vec3 a3v = (da3h - geo.a3.dot(da3h) * geo.a3) / geo.measure;
    ps.kappa(0, 0) = -(u11.dot(geo.a3) + geo.a11.dot(a3v));
    ps.kappa(0, 1) = ps.kappa(1, 0) = -(u12.dot(geo.a3) + geo.a12.dot(a3v));
    ps.kappa(1, 1) = -(u22.dot(geo.a3) + geo.a22.dot(a3v));
  } else {
    ps.a1 = geo.a1 + u1;
    ps.a2 = geo.a2 + u2;
    Vec3 n = ps.a1.cross(ps.a2);
    ps.jacobian = n.norm();
    if (ps.jacobian < 1e-14 * problem.geometry.scale())
      throw GeometryError("shell: degenerate deformed metric");
    ps.a3 = n / ps.jacobian;
    ps.g11 = geo.a11 + u11;
    ps.g12 = geo.a12 + u12;
    ps.g22 = geo.a22 + u22;
    ps.a_def << ps.a1.dot(ps.a1), ps.a1.dot(ps.a2), ps.a1.dot(ps.a2),
        ps.a2.dot(ps.a2);
    ps.b_def << ps.a3.dot(ps.g11), ps.a3.dot(ps.g12), ps.a3.dot(ps.g12),
        ps.a3.dot(ps.g22);
    ps.eps = 0.5 * (ps.a_def - geo.a_cov);
    ps.kappa = -(ps.b_def - geo.b_cov);
  }
  ps.n = t * C.contract(ps.eps);
  ps.m = (t * t * t / 12.0) * C.contract(ps.kappa);
  return ps;
}

inline Real ddot(const Mat2& a, const Mat2& b) {
  return a(0, 0) * b(0, 0) + a(1, 1) * b(1, 1) + a(0, 1) * b(0, 1) +
         a(1, 0) * b(1, 0);
}

struct VariationData {
  std::vector<Mat2> deps;
  std::vector<Mat2> dkap;
  std::vector<Vec3> da3hat;
  std::vector<Vec3> da3;
  std::vector<Real> dj;
};

void build_variations(const PointState& ps, const MatX& D, VariationData& out) {
  const int nfun = static_cast<int>(D.rows());
  out.deps.resize(3 * nfun);
  out.dkap.resize(3 * nfun);
  out.da3hat.resize(3 * nfun);
  out.da3.resize(3 * nfun);
  out.dj.resize(3 * nfun);
  for (int i = 0; i < nfun; ++i) {
    const Real Nu = D(i, 1), Nv = D(i, 2);
    const Real Nuu = D(i, 3), Nuv = D(i, 4), Nvv = D(i, 5);
    for (int c = 0; c < 3; ++c) {
      const int k = 3 * i + c;
      const Vec3& e = kUnit[c];
      Mat2& de = out.deps[k];
      de(0, 0) = Nu * ps.a1(c);
      de(1, 1) = Nv * ps.a2(c);
      de(0, 1) = de(1, 0) = 0.5 * (Nu * ps.a2(c) + Nv * ps.a1(c));
      const Vec3 da3h = Nu * e.cross(ps.a2) + Nv * ps.a1.cross(e);
      const Real dj = ps.a3.dot(da3h);
      const Vec3 da3 = (da3h - dj * ps.a3) / ps.jacobian;
      out.da3hat[k] = da3h;
      out.dj[k] = dj;
      out.da3[k] = da3;
      Mat2& dk = out.dkap[k];
      dk(0, 0) = -(Nuu * ps.a3(c) + ps.g11.dot(da3));
      dk(0, 1) = dk(1, 0) = -(Nuv * ps.a3(c) + ps.g12.dot(da3));
      dk(1, 1) = -(Nvv * ps.a3(c) + ps.g22.dot(da3));
    }
  }
}

}  // namespace

PointState point_state(const ShellProblem& problem, const ThbSpace& space,
                       const StateVector& state, Real u, Real v) {
  auto r = space.eval(u, v, 2);
  Vec3 d[6] = {Vec3::Zero(), Vec3::Zero(), Vec3::Zero(),
               Vec3::Zero(), Vec3::Zero(), Vec3::Zero()};
  for (size_t k = 0; k < r.gids.size(); ++k) {
    int gid = r.gids[k];
    Vec3 c(state.coeffs(3 * gid), state.coeffs(3 * gid + 1),
           state.coeffs(3 * gid + 2));
    for (int col = 0; col < 6; ++col)
      d[col] += c * r.values(static_cast<int>(k), col);
  }
  SurfacePoint geo = problem.geometry.eval(u, v, 2);
  return make_point_state(problem, geo, d[0], d[1], d[2], d[3], d[4], d[5],
                          false);
}

StrainVariation strain_variation(const PointState& ps, const Vec3& z1,
                                 const Vec3& z2, const Vec3& z11,
                                 const Vec3& z12, const Vec3& z22) {
  StrainVariation sv;
  sv.deps(0, 0) = ps.a1.dot(z1);
  sv.deps(1, 1) = ps.a2.dot(z2);
  sv.deps(0, 1) = sv.deps(1, 0) = 0.5 * (ps.a1.dot(z2) + ps.a2.dot(z1));
  Vec3 da3h = z1.cross(ps.a2) + ps.a1.cross(z2);
  Vec3 a3v = (da3h - ps.a3.dot(da3h) * ps.a3) / ps.jacobian;
  sv.dkappa(0, 0) = -(z11.dot(ps.a3) + ps.g11.dot(a3v));
  sv.dkappa(0, 1) = sv.dkappa(1, 0) = -(z12.dot(ps.a3) + ps.g12.dot(a3v));
  sv.dkappa(1, 1) = -(z22.dot(ps.a3) + ps.g22.dot(a3v));
  return sv;
}

struct Assembler::CellCache {
  std::vector<Real> u, v, w;     // quadrature points and parametric weights
  std::vector<MatX> D;           // basis rows per point, nfun x 6
  std::vector<SurfacePoint> geo; // geometry per point
};

const Assembler::CellCache& Assembler::cell_cache(const CellId& cell) const {
  {
    std::lock_guard<std::mutex> lock(cache_mtx_);
    auto it = cache_.find(pack_cell(cell));
    if (it != cache_.end()) return *it->second;
  }
  auto cc = std::make_shared<CellCache>();
  auto box = space_->mesh().cell_box(cell);
  const GaussRule& gu = gauss_rule(nq_u_);
  const GaussRule& gv = gauss_rule(nq_v_);
  const auto& tab = space_->cell_basis(cell);
  Real su = 0.5 * (box[1] - box[0]), sv = 0.5 * (box[3] - box[2]);
  for (int jv = 0; jv < nq_v_; ++jv) {
    Real vv = box[2] + sv * (gv.points[jv] + 1.0);
    for (int ju = 0; ju < nq_u_; ++ju) {
      Real uu = box[0] + su * (gu.points[ju] + 1.0);
      cc->u.push_back(uu);
      cc->v.push_back(vv);
      cc->w.push_back(gu.weights[ju] * gv.weights[jv] * su * sv);
      cc->D.push_back(tab.C * space_->local_tensor_derivs(cell, uu, vv, 2));
      cc->geo.push_back(problem_->geometry.eval(uu, vv, 2));
    }
  }
  std::lock_guard<std::mutex> lock(cache_mtx_);
  auto [it, inserted] = cache_.emplace(pack_cell(cell), std::move(cc));
  return *it->second;
}

Assembler::Assembler(const ShellProblem& problem, const ThbSpace& space)
    : problem_(&problem), space_(&space), dofs_(space, problem) {
  nq_u_ = space.degree_u() + 1 + problem.quadrature_extra;
  nq_v_ = space.degree_v() + 1 + problem.quadrature_extra;
}

namespace {

std::vector<std::vector<CellId>> partition_cells(
    const std::vector<CellId>& cells, int workers) {
  workers = std::max(1, workers);
  std::vector<std::vector<CellId>> parts(workers);
  for (size_t i = 0; i < cells.size(); ++i)
    parts[i % workers].push_back(cells[i]);
  return parts;
}

}  // namespace

template <typename CellKernel>
void Assembler::for_each_cell(CellKernel&& kernel) const {
  auto cells = space_->mesh().active_cells();
  int workers = std::max(1, problem_->workers);
  if (workers == 1 || cells.size() < 8) {
    for (const CellId& c : cells) kernel(c);
    return;
  }
  auto parts = partition_cells(cells, workers);
  std::vector<std::thread> threads;
  std::exception_ptr error;
  std::mutex error_mtx;
  for (auto& part : parts)
    threads.emplace_back([&, part] {
      try {
        for (const CellId& c : part) kernel(c);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mtx);
        if (!error) error = std::current_exception();
      }
    });
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

VecX Assembler::load_vector() const {
  if (load_cache_) return *load_cache_;
  const ShellProblem& pb = *problem_;
  VecX F = VecX::Zero(dofs_.n_free());
  std::mutex mtx;
  for_each_cell([&](const CellId& cell) {
    const auto& tab = space_->cell_basis(cell);
    const CellCache& q = cell_cache(cell);
    const int nfun = static_cast<int>(tab.gids.size());
    VecX local = VecX::Zero(3 * nfun);
    bool any = false;
    if (pb.body_load) {
      any = true;
      for (size_t p = 0; p < q.u.size(); ++p) {
        Vec3 f = pb.body_load(q.geo[p].x);
        Real w = q.w[p] * q.geo[p].measure;
        for (int i = 0; i < nfun; ++i) {
          Real Nw = w * q.D[p](i, 0);
          for (int c = 0; c < 3; ++c) local(3 * i + c) += Nw * f(c);
        }
      }
    }
    for (const EdgeLoad& el : pb.edge_loads) {
      auto box = space_->mesh().cell_box(cell);
      const auto& mesh = space_->mesh();
      bool onside = false, u_varies = true;
      Real fixed_coord = 0;
      switch (el.side) {
        case Side::West: onside = box[0] == mesh.level_ku(0).a(); fixed_coord = box[0]; u_varies = false; break;
        case Side::East: onside = box[1] == mesh.level_ku(0).b(); fixed_coord = box[1]; u_varies = false; break;
        case Side::South: onside = box[2] == mesh.level_kv(0).a(); fixed_coord = box[2]; break;
        case Side::North: onside = box[3] == mesh.level_kv(0).b(); fixed_coord = box[3]; break;
      }
      if (!onside) continue;
      any = true;
      Real t0 = u_varies ? box[0] : box[2];
      Real t1 = u_varies ? box[1] : box[3];
      const GaussRule& g1 = gauss_rule(u_varies ? nq_u_ : nq_v_);
      for (size_t p = 0; p < g1.points.size(); ++p) {
        Real tt = t0 + 0.5 * (t1 - t0) * (g1.points[p] + 1.0);
        Real uu = u_varies ? tt : fixed_coord;
        Real vv = u_varies ? fixed_coord : tt;
        SurfacePoint geo = pb.geometry.eval(uu, vv, 1);
        Vec3 tangent = u_varies ? geo.a1 : geo.a2;
        Real ds = tangent.norm() * 0.5 * (t1 - t0) * g1.weights[p];
        MatX vals = tab.C * space_->local_tensor_derivs(cell, uu, vv, 0);
        for (int i = 0; i < nfun; ++i)
          for (int c = 0; c < 3; ++c)
            local(3 * i + c) += ds * el.traction(c) * vals(i, 0);
      }
    }
    if (!any) return;
    std::lock_guard<std::mutex> lock(mtx);
    for (int i = 0; i < nfun; ++i)
      for (int c = 0; c < 3; ++c) {
        int fi = dofs_.free_index(3 * tab.gids[i] + c);
        if (fi >= 0) F(fi) += local(3 * i + c);
      }
  });
  for (const PointLoad& pl : pb.point_loads) {
    auto r = space_->eval(pl.uv(0), pl.uv(1), 0);
    for (size_t k = 0; k < r.gids.size(); ++k)
      for (int c = 0; c < 3; ++c) {
        int fi = dofs_.free_index(3 * r.gids[k] + c);
        if (fi >= 0) F(fi) += pl.force(c) * r.values(static_cast<int>(k), 0);
      }
  }
  load_cache_ = F;
  return F;
}

VecX Assembler::residual(const StateVector& state, Real lambda,
                         bool linear) const {
  const ShellProblem& pb = *problem_;
  VecX R = VecX::Zero(dofs_.n_free());
  std::mutex mtx;
  for_each_cell([&](const CellId& cell) {
    const auto& tab = space_->cell_basis(cell);
    const int nfun = static_cast<int>(tab.gids.size());
    const CellCache& q = cell_cache(cell);
    VecX local = VecX::Zero(3 * nfun);
    VariationData var;
    for (size_t p = 0; p < q.u.size(); ++p) {
      Vec3 d[6];
      for (auto& x : d) x.setZero();
      for (int i = 0; i < nfun; ++i) {
        int gid = tab.gids[i];
        Vec3 ci(state.coeffs(3 * gid), state.coeffs(3 * gid + 1),
                state.coeffs(3 * gid + 2));
        for (int col = 0; col < 6; ++col) d[col] += ci * q.D[p](i, col);
      }
      PointState ps = make_point_state(pb, q.geo[p], d[0], d[1], d[2], d[3],
                                       d[4], d[5], linear);
      build_variations(ps, q.D[p], var);
      Real w = q.w[p] * q.geo[p].measure;
      for (int k = 0; k < 3 * nfun; ++k)
        local(k) += w * (ddot(ps.n, var.deps[k]) + ddot(ps.m, var.dkap[k]));
      if (pb.follower_pressure && !linear) {
        Vec3 fh = *pb.follower_pressure * ps.a1.cross(ps.a2);
        for (int i = 0; i < nfun; ++i)
          for (int c = 0; c < 3; ++c)
            local(3 * i + c) -= lambda * q.w[p] * fh(c) * q.D[p](i, 0);
      }
    }
    std::lock_guard<std::mutex> lock(mtx);
    for (int i = 0; i < nfun; ++i)
      for (int c = 0; c < 3; ++c) {
        int fi = dofs_.free_index(3 * tab.gids[i] + c);
        if (fi >= 0) R(fi) += local(3 * i + c);
      }
  });
  R -= lambda * load_vector();
  return R;
}

SparseSym Assembler::tangent(const StateVector& state, Real lambda,
                             bool linear) const {
  const ShellProblem& pb = *problem_;
  const Real t = pb.geometry.thickness();
  std::vector<Eigen::Triplet<Real>> triplets;
  std::mutex mtx;
  for_each_cell([&](const CellId& cell) {
    const auto& tab = space_->cell_basis(cell);
    const int nfun = static_cast<int>(tab.gids.size());
    const int ndof = 3 * nfun;
    const CellCache& q = cell_cache(cell);
    MatX K = MatX::Zero(ndof, ndof);
    VariationData var;
    std::vector<Mat2> dn(ndof), dm(ndof);
    for (size_t p = 0; p < q.u.size(); ++p) {
      Vec3 d[6];
      for (auto& x : d) x.setZero();
      for (int i = 0; i < nfun; ++i) {
        int gid = tab.gids[i];
        Vec3 ci(state.coeffs(3 * gid), state.coeffs(3 * gid + 1),
                state.coeffs(3 * gid + 2));
        for (int col = 0; col < 6; ++col) d[col] += ci * q.D[p](i, col);
      }
      PointState ps = make_point_state(pb, q.geo[p], d[0], d[1], d[2], d[3],
                                       d[4], d[5], linear);
      MaterialTensor C = material_tensor(pb.material, q.geo[p]);
      build_variations(ps, q.D[p], var);
      const Real w = q.w[p] * q.geo[p].measure;
      for (int k = 0; k < ndof; ++k) {
        dn[k] = t * C.contract(var.deps[k]);
        dm[k] = (t * t * t / 12.0) * C.contract(var.dkap[k]);
      }
      const MatX& D = q.D[p];
      for (int r = 0; r < ndof; ++r) {
        const int i = r / 3, c = r % 3;
        for (int s = 0; s <= r; ++s) {
          const int k = s / 3, e = s % 3;
          Real val = ddot(dn[s], var.deps[r]) + ddot(dm[s], var.dkap[r]);
          if (!linear) {
            if (c == e) {
              // membrane geometric term n : eps''
              Real e11 = D(i, 1) * D(k, 1);
              Real e22 = D(i, 2) * D(k, 2);
              Real e12 = 0.5 * (D(i, 1) * D(k, 2) + D(i, 2) * D(k, 1));
              val += ps.n(0, 0) * e11 + ps.n(1, 1) * e22 +
                     (ps.n(0, 1) + ps.n(1, 0)) * e12;
            }
            // bending geometric term m : kappa''
            Vec3 da3hh =
                (D(i, 1) * D(k, 2) - D(k, 1) * D(i, 2)) * kUnit[c].cross(kUnit[e]);
            Real djj = (var.da3hat[r].dot(var.da3hat[s]) +
                        ps.jacobian * ps.a3.dot(da3hh) -
                        var.dj[r] * var.dj[s]) /
                       ps.jacobian;
            Vec3 dda3 = (da3hh - var.da3[s] * var.dj[r] -
                         var.da3[r] * var.dj[s] - ps.a3 * djj) /
                        ps.jacobian;
            Mat2 ddkap;
            ddkap(0, 0) = -(D(i, 3) * var.da3[s](c) + D(k, 3) * var.da3[r](e) +
                            ps.g11.dot(dda3));
            ddkap(0, 1) = ddkap(1, 0) =
                -(D(i, 4) * var.da3[s](c) + D(k, 4) * var.da3[r](e) +
                  ps.g12.dot(dda3));
            ddkap(1, 1) = -(D(i, 5) * var.da3[s](c) + D(k, 5) * var.da3[r](e) +
                            ps.g22.dot(dda3));
            val += ddot(ps.m, ddkap);
          }
          K(r, s) += w * val;
          if (pb.follower_pressure && !linear) {
            // symmetrized follower-pressure stiffness
            Real fp = -lambda * (*pb.follower_pressure) * 0.5 *
                      (var.da3hat[s](c) * D(i, 0) + var.da3hat[r](e) * D(k, 0));
            K(r, s) += q.w[p] * fp;
          }
        }
      }
    }
    std::lock_guard<std::mutex> lock(mtx);
    for (int r = 0; r < ndof; ++r) {
      int fr = dofs_.free_index(3 * tab.gids[r / 3] + r % 3);
      if (fr < 0) continue;
      for (int s = 0; s <= r; ++s) {
        int fs = dofs_.free_index(3 * tab.gids[s / 3] + s % 3);
        if (fs < 0) continue;
        Real v = K(r, s);
        if (v == 0.0) continue;
        if (fr == fs && r != s) v *= 2.0;  // tied pair folds onto the diagonal
        triplets.emplace_back(fr, fs, v);
      }
    }
  });
  return SparseSym::from_triplets(dofs_.n_free(), triplets);
}

SparseSym Assembler::mass() const {
  const ShellProblem& pb = *problem_;
  require(pb.material.rho > 0, "mass: density must be positive");
  const Real rho_t = pb.material.rho * pb.geometry.thickness();
  std::vector<Eigen::Triplet<Real>> triplets;
  std::mutex mtx;
  for_each_cell([&](const CellId& cell) {
    const auto& tab = space_->cell_basis(cell);
    const int nfun = static_cast<int>(tab.gids.size());
    const CellCache& q = cell_cache(cell);
    MatX M = MatX::Zero(nfun, nfun);
    for (size_t p = 0; p < q.u.size(); ++p) {
      Real w = q.w[p] * q.geo[p].measure * rho_t;
      for (int i = 0; i < nfun; ++i)
        for (int k = 0; k <= i; ++k) M(i, k) += w * q.D[p](i, 0) * q.D[p](k, 0);
    }
    std::lock_guard<std::mutex> lock(mtx);
    for (int i = 0; i < nfun; ++i)
      for (int k = 0; k <= i; ++k)
        for (int c = 0; c < 3; ++c) {
          int fr = dofs_.free_index(3 * tab.gids[i] + c);
          int fs = dofs_.free_index(3 * tab.gids[k] + c);
          if (fr < 0 || fs < 0) continue;
          Real v = M(i, k);
          if (v == 0.0) continue;
          if (fr == fs && i != k) v *= 2.0;
          triplets.emplace_back(fr, fs, v);
        }
  });
  return SparseSym::from_triplets(dofs_.n_free(), triplets);
}

Real Assembler::total_strain_energy(const StateVector& state) const {
  Real total = 0.0;
  std::mutex mtx;
  const ShellProblem& pb = *problem_;
  for_each_cell([&](const CellId& cell) {
    const auto& tab = space_->cell_basis(cell);
    const int nfun = static_cast<int>(tab.gids.size());
    const CellCache& q = cell_cache(cell);
    Real cell_sum = 0.0;
    for (size_t p = 0; p < q.u.size(); ++p) {
      Vec3 d[6];
      for (auto& x : d) x.setZero();
      for (int i = 0; i < nfun; ++i) {
        int gid = tab.gids[i];
        Vec3 ci(state.coeffs(3 * gid), state.coeffs(3 * gid + 1),
                state.coeffs(3 * gid + 2));
        for (int col = 0; col < 6; ++col) d[col] += ci * q.D[p](i, col);
      }
      PointState ps = make_point_state(pb, q.geo[p], d[0], d[1], d[2], d[3],
                                       d[4], d[5], false);
      cell_sum += 0.5 * (ddot(ps.n, ps.eps) + ddot(ps.m, ps.kappa)) * q.w[p] *
                  q.geo[p].measure;
    }
    std::lock_guard<std::mutex> lock(mtx);
    total += cell_sum;
  });
  return total;
}

Assembler::WeightedResidual Assembler::weighted_residual(
    const StateVector& state, Real lambda, const VecX& z_full,
    bool linear) const {
  const ShellProblem& pb = *problem_;
  auto cells = space_->mesh().active_cells();
  WeightedResidual out;
  out.cells = cells;
  out.signed_parts.assign(cells.size(), 0.0);
  out.squared_parts.assign(cells.size(), 0.0);
  std::map<CellId, size_t> cell_index;
  for (size_t k = 0; k < cells.size(); ++k) cell_index[cells[k]] = k;
  std::mutex mtx;
  for_each_cell([&](const CellId& cell) {
    const auto& tab = space_->cell_basis(cell);
    const int nfun = static_cast<int>(tab.gids.size());
    const CellCache& q = cell_cache(cell);
    Real signed_sum = 0.0, squared_sum = 0.0;
    for (size_t p = 0; p < q.u.size(); ++p) {
      Vec3 d[6], z[6];
      for (auto& x : d) x.setZero();
      for (auto& x : z) x.setZero();
      for (int i = 0; i < nfun; ++i) {
        int gid = tab.gids[i];
        Vec3 ci(state.coeffs(3 * gid), state.coeffs(3 * gid + 1),
                state.coeffs(3 * gid + 2));
        Vec3 zi(z_full(3 * gid), z_full(3 * gid + 1), z_full(3 * gid + 2));
        for (int col = 0; col < 6; ++col) {
          d[col] += ci * q.D[p](i, col);
          z[col] += zi * q.D[p](i, col);
        }
      }
      PointState ps = make_point_state(pb, q.geo[p], d[0], d[1], d[2], d[3],
                                       d[4], d[5], linear);
      StrainVariation sv = strain_variation(ps, z[1], z[2], z[3], z[4], z[5]);
      Real density = -(ddot(ps.n, sv.deps) + ddot(ps.m, sv.dkappa));
      if (pb.body_load) density += lambda * pb.body_load(q.geo[p].x).dot(z[0]);
      if (pb.follower_pressure && !linear)
        density += lambda * (*pb.follower_pressure) *
                   ps.a1.cross(ps.a2).dot(z[0]) / q.geo[p].measure;
      Real w = q.w[p] * q.geo[p].measure;
      signed_sum += w * density;
      squared_sum += w * density * density;
    }
    for (const EdgeLoad& el : pb.edge_loads) {
      auto box = space_->mesh().cell_box(cell);
      const auto& mesh = space_->mesh();
      bool onside = false, u_varies = true;
      Real fixed_coord = 0;
      switch (el.side) {
        case Side::West: onside = box[0] == mesh.level_ku(0).a(); fixed_coord = box[0]; u_varies = false; break;
        case Side::East: onside = box[1] == mesh.level_ku(0).b(); fixed_coord = box[1]; u_varies = false; break;
        case Side::South: onside = box[2] == mesh.level_kv(0).a(); fixed_coord = box[2]; break;
        case Side::North: onside = box[3] == mesh.level_kv(0).b(); fixed_coord = box[3]; break;
      }
      if (!onside) continue;
      Real t0 = u_varies ? box[0] : box[2];
      Real t1 = u_varies ? box[1] : box[3];
      const GaussRule& g1 = gauss_rule(u_varies ? nq_u_ : nq_v_);
      Real line_sum = 0.0;
      for (size_t p = 0; p < g1.points.size(); ++p) {
        Real tt = t0 + 0.5 * (t1 - t0) * (g1.points[p] + 1.0);
        Real uu = u_varies ? tt : fixed_coord;
        Real vv = u_varies ? fixed_coord : tt;
        SurfacePoint geo = pb.geometry.eval(uu, vv, 1);
        Vec3 tangent = u_varies ? geo.a1 : geo.a2;
        Real ds = tangent.norm() * 0.5 * (t1 - t0) * g1.weights[p];
        MatX vals = tab.C * space_->local_tensor_derivs(cell, uu, vv, 0);
        Vec3 zval = Vec3::Zero();
        for (int i = 0; i < nfun; ++i) {
          int gid = tab.gids[i];
          zval += Vec3(z_full(3 * gid), z_full(3 * gid + 1),
                       z_full(3 * gid + 2)) *
                  vals(i, 0);
        }
        line_sum += lambda * ds * el.traction.dot(zval);
      }
      signed_sum += line_sum;
      squared_sum += line_sum * line_sum;
    }
    std::lock_guard<std::mutex> lock(mtx);
    size_t idx = cell_index.at(cell);
    out.signed_parts[idx] += signed_sum;
    out.squared_parts[idx] += squared_sum;
  });
  for (const PointLoad& pl : pb.point_loads) {
    auto r = space_->eval(pl.uv(0), pl.uv(1), 0);
    Vec3 zval = Vec3::Zero();
    for (size_t k = 0; k < r.gids.size(); ++k) {
      int gid = r.gids[k];
      zval += Vec3(z_full(3 * gid), z_full(3 * gid + 1), z_full(3 * gid + 2)) *
              r.values(static_cast<int>(k), 0);
    }
    Real term = lambda * pl.force.dot(zval);
    CellId c = space_->mesh().find_cell(pl.uv(0), pl.uv(1));
    size_t idx = cell_index.at(c);
    out.signed_parts[idx] += term;
    out.squared_parts[idx] += term * term;
  }
  for (Real r : out.signed_parts) out.total += r;
  return out;
}

}  // namespace thbshell
