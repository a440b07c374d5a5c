#include "thbshell/thb.hpp"

#include <algorithm>
#include <set>

#include "doctest.h"
#include "oracles.hpp"

using namespace thbshell;

namespace {

std::set<CellId> to_set(const std::vector<CellId>& v) {
  return {v.begin(), v.end()};
}

// The mesh underlying the paper's neighborhood illustrations: degree 1,
// 4x4 base, a level-1 region in the lower middle and upper right, and a
// level-2 island. Admissible of class 2.
HierarchicalMesh figure_mesh() {
  TensorBasis tb{KnotVector::uniform(1, 4), KnotVector::uniform(1, 4)};
  HierarchicalMesh mesh(tb, 2, 8);
  mesh.refine({{0, 1, 0}, {0, 2, 0}, {0, 1, 1}, {0, 2, 1},
               {0, 2, 2}, {0, 3, 2}, {0, 2, 3}, {0, 3, 3}});
  mesh.refine({{1, 3, 2}});
  return mesh;
}

std::set<CellId> block(int level, int i0, int i1, int j0, int j1) {
  std::set<CellId> out;
  for (int j = j0; j <= j1; ++j)
    for (int i = i0; i <= i1; ++i) out.insert(CellId{level, i, j});
  return out;
}

HierarchicalMesh random_admissible_mesh(int base, int degree, int rounds,
                                        int max_levels = 5) {
  TensorBasis tb{KnotVector::uniform(degree, base),
                 KnotVector::uniform(degree, base)};
  HierarchicalMesh mesh(tb, 2, max_levels);
  for (int r = 0; r < rounds; ++r) {
    auto cells = mesh.active_cells();
    std::vector<CellId> marks;
    for (const CellId& c : cells)
      if (oracles::uniform(0, 1) < 0.15) marks.push_back(c);
    if (marks.empty()) marks.push_back(cells[cells.size() / 2]);
    mesh.refine(marks);
  }
  return mesh;
}

}  // namespace

TEST_CASE("figure mesh has the expected active sets") {
  HierarchicalMesh mesh = figure_mesh();
  std::set<CellId> l0 = {{0, 0, 0}, {0, 3, 0}, {0, 0, 1}, {0, 3, 1},
                         {0, 0, 2}, {0, 1, 2}, {0, 0, 3}, {0, 1, 3}};
  std::set<CellId> l1 = block(1, 2, 5, 0, 3);
  l1.erase({1, 3, 2});
  for (const CellId& c : block(1, 4, 7, 4, 7)) l1.insert(c);
  std::set<CellId> l2 = block(2, 6, 7, 4, 5);

  std::set<CellId> active = to_set(mesh.active_cells());
  std::set<CellId> expected;
  expected.insert(l0.begin(), l0.end());
  expected.insert(l1.begin(), l1.end());
  expected.insert(l2.begin(), l2.end());
  CHECK(active == expected);
  CHECK(mesh.active_area() == doctest::Approx(1.0));
  CHECK(mesh.is_admissible().ok);
}

TEST_CASE("support extension matches the brute-force oracle") {
  HierarchicalMesh mesh = figure_mesh();
  SUBCASE("same level, interior: cell plus clipped ring") {
    CellId Q{2, 7, 5};
    auto ext = to_set(mesh.support_extension(Q, 2));
    CHECK(ext == block(2, 6, 8, 4, 6));
    CHECK(ext == oracles::support_extension_bruteforce(mesh, Q, 2));
  }
  SUBCASE("domain corner clips to the grid") {
    CellId Q{0, 0, 0};
    auto ext = to_set(mesh.support_extension(Q, 0));
    CHECK(ext == block(0, 0, 1, 0, 1));
  }
  SUBCASE("coarser level and degree 2 against the oracle") {
    HierarchicalMesh m2 = random_admissible_mesh(4, 2, 2);
    for (const CellId& Q : m2.active_cells()) {
      for (int k = 0; k <= Q.level; ++k) {
        auto ext = to_set(m2.support_extension(Q, k));
        CHECK(ext == oracles::support_extension_bruteforce(m2, Q, k));
      }
    }
  }
}

TEST_CASE("refinement neighborhood reproduces the recursive marking figure") {
  HierarchicalMesh mesh = figure_mesh();
  SUBCASE("level-0 cells have empty neighborhoods") {
    CHECK(mesh.refinement_neighborhood({0, 0, 0}).empty());
  }
  SUBCASE("marked level-2 cell pulls in three level-1 parents") {
    auto n = to_set(mesh.refinement_neighborhood({2, 7, 5}));
    CHECK(n == std::set<CellId>{{1, 4, 2}, {1, 3, 3}, {1, 4, 3}});
  }
  SUBCASE("their neighborhoods add one level-0 cell") {
    std::set<CellId> second;
    for (const CellId& q : {CellId{1, 4, 2}, CellId{1, 3, 3}, CellId{1, 4, 3}})
      for (const CellId& n : mesh.refinement_neighborhood(q)) second.insert(n);
    CHECK(second == std::set<CellId>{{0, 1, 2}});
  }
  SUBCASE("complete recursive closure of the single marked cell") {
    auto report = mesh.refine_closure({{2, 7, 5}});
    CHECK(to_set(report.refined) ==
          std::set<CellId>{{2, 7, 5}, {1, 4, 2}, {1, 3, 3}, {1, 4, 3}, {0, 1, 2}});
  }
  SUBCASE("uniformly refined mesh has empty neighborhoods everywhere") {
    TensorBasis tb{KnotVector::uniform(2, 4), KnotVector::uniform(2, 4)};
    HierarchicalMesh uni(tb, 2, 4);
    uni.refine(uni.active_cells());
    for (const CellId& c : uni.active_cells())
      CHECK(uni.refinement_neighborhood(c).empty());
  }
}

TEST_CASE("refine applies the admissible closure") {
  HierarchicalMesh mesh = figure_mesh();
  auto report = mesh.refine({{2, 7, 5}});
  CHECK(to_set(report.refined) ==
        std::set<CellId>{{2, 7, 5}, {1, 4, 2}, {1, 3, 3}, {1, 4, 3}, {0, 1, 2}});
  CHECK(mesh.is_admissible().ok);
  CHECK(mesh.active_area() == doctest::Approx(1.0));
  CHECK(mesh.is_active({3, 14, 10}));
  CHECK(mesh.is_active({3, 15, 11}));
  CHECK_FALSE(mesh.is_active({2, 7, 5}));
}

TEST_CASE("refine all cells of a uniform mesh quadruples the count") {
  TensorBasis tb{KnotVector::uniform(2, 4), KnotVector::uniform(2, 4)};
  HierarchicalMesh mesh(tb, 2, 4);
  int n0 = mesh.n_active_cells();
  mesh.refine(mesh.active_cells());
  CHECK(mesh.n_active_cells() == 4 * n0);
  for (const CellId& c : mesh.active_cells()) CHECK(c.level == 1);
}

TEST_CASE("cells at the level cap are skipped and reported") {
  TensorBasis tb{KnotVector::uniform(2, 4), KnotVector::uniform(2, 4)};
  HierarchicalMesh mesh(tb, 2, 1);
  auto report = mesh.refine({{0, 1, 1}});
  CHECK(report.refined.empty());
  CHECK(to_set(report.blocked) == std::set<CellId>{{0, 1, 1}});
}

TEST_CASE("coarsening neighborhoods on the figure mesh") {
  HierarchicalMesh mesh = figure_mesh();
  SUBCASE("level-0 cells raise") {
    CHECK_THROWS_AS(mesh.coarsening_neighborhood({0, 0, 0}),
                    std::invalid_argument);
  }
  SUBCASE("exactly the region-B and island cells have empty neighborhoods") {
    std::set<CellId> expected = block(1, 4, 7, 4, 7);
    for (const CellId& c : block(2, 6, 7, 4, 5)) expected.insert(c);
    for (const CellId& c : mesh.active_cells()) {
      if (c.level == 0) continue;
      bool empty = mesh.coarsening_neighborhood(c).empty();
      CHECK(empty == (expected.count(c) > 0));
    }
  }
  SUBCASE("isolated fine island with no deeper level") {
    TensorBasis tb{KnotVector::uniform(2, 4), KnotVector::uniform(2, 4)};
    HierarchicalMesh m2(tb, 2, 4);
    m2.refine({{0, 1, 1}});
    for (const CellId& c : m2.active_cells())
      if (c.level == 1) CHECK(m2.coarsening_neighborhood(c).empty());
  }
}

TEST_CASE("marked coarsening neighborhood and the combined test") {
  HierarchicalMesh mesh = figure_mesh();
  std::vector<CellId> marked = {{2, 7, 5}, {1, 4, 2}, {1, 3, 3}, {1, 4, 3},
                                {0, 1, 2}};
  SUBCASE("empty marked set gives the empty neighborhood") {
    CHECK(mesh.coarsening_neighborhood_marked({1, 4, 4}, {}).empty());
  }
  SUBCASE("cells passing the combined test match the figure") {
    std::set<CellId> expected = block(1, 4, 7, 6, 7);
    for (const CellId& c : block(1, 6, 7, 4, 5)) expected.insert(c);
    for (const CellId& c : mesh.active_cells()) {
      if (c.level == 0) continue;
      CHECK(mesh.can_coarsen(c, marked) == (expected.count(c) > 0));
    }
  }
  SUBCASE("refine plus coarsen yields the final figure mesh") {
    std::vector<CellId> coarsen_cells;
    for (const CellId& c : block(1, 4, 7, 6, 7)) coarsen_cells.push_back(c);
    for (const CellId& c : block(1, 6, 7, 4, 5)) coarsen_cells.push_back(c);
    mesh.refine(marked);
    for (const CellId& c : coarsen_cells) {
      CHECK(mesh.is_active(c));
      CHECK(mesh.can_coarsen(c));
    }
    mesh.coarsen(coarsen_cells);
    std::set<CellId> expected;
    for (const CellId& c : std::vector<CellId>{{0, 0, 0}, {0, 3, 0}, {0, 0, 1},
                                               {0, 3, 1}, {0, 0, 2}, {0, 0, 3},
                                               {0, 1, 3}, {0, 3, 2}, {0, 2, 3},
                                               {0, 3, 3}})
      expected.insert(c);
    for (const CellId& c : block(1, 2, 5, 0, 3)) expected.insert(c);
    expected.erase({1, 3, 2});
    expected.erase({1, 4, 2});
    expected.erase({1, 3, 3});
    expected.erase({1, 4, 3});
    for (const CellId& c : block(1, 4, 5, 4, 5)) expected.insert(c);
    for (const CellId& c : block(1, 2, 3, 4, 5)) expected.insert(c);
    for (const CellId& c : block(2, 6, 7, 4, 5)) expected.insert(c);
    expected.erase({2, 7, 5});
    for (const CellId& c : block(2, 8, 9, 4, 5)) expected.insert(c);
    for (const CellId& c : block(2, 6, 9, 6, 7)) expected.insert(c);
    for (const CellId& c : block(3, 14, 15, 10, 11)) expected.insert(c);
    CHECK(to_set(mesh.active_cells()) == expected);
    CHECK(mesh.active_area() == doctest::Approx(1.0));
    CHECK(mesh.is_admissible().ok);
  }
}

TEST_CASE("coarsening a lone refined cell restores the original mesh") {
  TensorBasis tb{KnotVector::uniform(2, 8), KnotVector::uniform(2, 8)};
  HierarchicalMesh mesh(tb, 2, 4);
  auto before = mesh.active_cells();
  mesh.refine({{0, 3, 3}});
  std::vector<CellId> kids = {{1, 6, 6}, {1, 7, 6}, {1, 6, 7}, {1, 7, 7}};
  mesh.coarsen(kids);
  CHECK(mesh.active_cells() == before);
}

TEST_CASE("coarsening a blocked cell violates the contract") {
  HierarchicalMesh mesh = figure_mesh();
  // region-A cells are blocked by the level-2 island
  CHECK_FALSE(mesh.can_coarsen({1, 2, 0}));
  CHECK_THROWS_AS(mesh.coarsen({{1, 2, 0}, {1, 3, 0}, {1, 2, 1}, {1, 3, 1}}),
                  std::invalid_argument);
}

TEST_CASE("two-path equivalence of the marked coarsening test") {
  int checked = 0;
  for (int trial = 0; trial < 50; ++trial) {
    HierarchicalMesh mesh = random_admissible_mesh(4, 2, 2, 6);
    auto cells = mesh.active_cells();
    std::vector<CellId> marks;
    for (const CellId& c : cells)
      if (oracles::uniform(0, 1) < 0.1) marks.push_back(c);
    auto closure = mesh.refine_closure(marks).refined;
    HierarchicalMesh refined = mesh;
    refined.refine(marks);
    int deepest_closure = 0;
    for (const CellId& c : closure)
      deepest_closure = std::max(deepest_closure, c.level);
    for (const CellId& Q : cells) {
      if (Q.level == 0 || !refined.is_active(Q)) continue;
      bool combined = mesh.can_coarsen(Q, closure);
      bool two_path = refined.can_coarsen(Q);
      if (combined) {
        // the combined decision must be safe on the refined mesh
        CHECK(two_path);
        HierarchicalMesh scratch = refined;
        int pi = Q.i >> 1, pj = Q.j >> 1;
        scratch.coarsen({{Q.level, 2 * pi, 2 * pj},
                         {Q.level, 2 * pi + 1, 2 * pj},
                         {Q.level, 2 * pi, 2 * pj + 1},
                         {Q.level, 2 * pi + 1, 2 * pj + 1}});
        CHECK(scratch.is_admissible().ok);
      }
      // exact agreement whenever no closure cell reaches the level whose
      // refinement could remove an existing blocker
      if (deepest_closure < Q.level + mesh.jump_m() - 1) {
        CHECK(combined == two_path);
        ++checked;
      }
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("random refine and coarsen sequences keep exact coverage") {
  for (int trial = 0; trial < 5; ++trial) {
    HierarchicalMesh mesh = random_admissible_mesh(4, 2, 2, 5);
    CHECK(mesh.active_area() == doctest::Approx(1.0));
    CHECK(mesh.is_admissible().ok);
    // coarsen whatever passes the test
    std::vector<CellId> marks;
    for (const CellId& c : mesh.active_cells())
      if (c.level > 0 && mesh.can_coarsen(c)) marks.push_back(c);
    mesh.coarsen(marks);
    CHECK(mesh.active_area() == doctest::Approx(1.0));
    CHECK(mesh.is_admissible().ok);
  }
}

TEST_CASE("admissibility violations are detected with a witness") {
  // class-3 closure admits configurations that violate class 2: a level-2
  // block at the edge of the level-1 region keeps level-0 functions alive
  // on level-2 cells
  TensorBasis tb{KnotVector::uniform(2, 8), KnotVector::uniform(2, 8)};
  HierarchicalMesh mesh(tb, 3, 6);
  mesh.refine({{0, 3, 3}, {0, 4, 3}, {0, 3, 4}, {0, 4, 4}});
  mesh.refine({{1, 6, 6}, {1, 7, 6}, {1, 6, 7}, {1, 7, 7}});
  CHECK(mesh.is_admissible(3).ok);
  auto res = mesh.is_admissible(2);
  CHECK_FALSE(res.ok);
  CHECK(mesh.is_active(res.witness));
}

TEST_CASE("refine output stays admissible over random markings") {
  for (int trial = 0; trial < 100; ++trial) {
    HierarchicalMesh mesh = random_admissible_mesh(4, 2, 2 + trial % 2, 6);
    CHECK(mesh.is_admissible().ok);
  }
}

TEST_CASE("single-level THB space equals the tensor basis") {
  TensorBasis tb{KnotVector::uniform(2, 4), KnotVector::uniform(2, 4)};
  HierarchicalMesh mesh(tb, 2, 3);
  ThbSpace space(mesh);
  CHECK(space.n_active() == tb.n_funcs());
  for (int t = 0; t < 20; ++t) {
    Real u = oracles::uniform(0, 1), v = oracles::uniform(0, 1);
    auto r = space.eval(u, v, 0);
    auto [iu, Nu] = tb.ku.eval_basis(u);
    auto [iv, Nv] = tb.kv.eval_basis(v);
    Real sum = 0;
    for (size_t k = 0; k < r.gids.size(); ++k) {
      const auto& f = space.func(r.gids[k]);
      CHECK(f.level == 0);
      Real ref = Nu[f.a - iu] * Nv[f.b - iv];
      CHECK(r.values(static_cast<int>(k), 0) == doctest::Approx(ref).epsilon(1e-13));
      sum += r.values(static_cast<int>(k), 0);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}

namespace {

// Dense truncation oracle: global subdivision with explicit truncation,
// no windowing, evaluated with the plain recursive tensor basis.
Real truncated_value_oracle(const HierarchicalMesh& mesh, const ThbSpace& space,
                            int gid, Real u, Real v) {
  const auto& f = space.func(gid);
  CellId cell = mesh.find_cell(u, v);
  const int L = cell.level;
  int nu = space.level_ku(f.level).n_funcs();
  int nv = space.level_kv(f.level).n_funcs();
  VecX coef = VecX::Zero(nu * nv);
  coef(f.a + f.b * nu) = 1.0;
  for (int k = f.level; k < L; ++k) {
    const auto& Au = mesh.subdiv_u(k);
    const auto& Av = mesh.subdiv_v(k);
    int nu2 = space.level_ku(k + 1).n_funcs();
    int nv2 = space.level_kv(k + 1).n_funcs();
    VecX next = VecX::Zero(nu2 * nv2);
    for (int b = 0; b < nv; ++b)
      for (int a = 0; a < nu; ++a) {
        Real c = coef(a + b * nu);
        if (c == 0.0) continue;
        for (int b2 = 0; b2 < nv2; ++b2) {
          Real av = Av.coeff(b2, b);
          if (av == 0.0) continue;
          for (int a2 = 0; a2 < nu2; ++a2) {
            Real au = Au.coeff(a2, a);
            if (au != 0.0) next(a2 + b2 * nu2) += au * av * c;
          }
        }
      }
    // truncation against functions living entirely inside Omega^{k+1}
    const auto& ku2 = space.level_ku(k + 1);
    const auto& kv2 = space.level_kv(k + 1);
    for (int b2 = 0; b2 < nv2; ++b2)
      for (int a2 = 0; a2 < nu2; ++a2) {
        auto ra = ku2.func_span_range(a2);
        auto rb = kv2.func_span_range(b2);
        bool inside = true;
        for (int j = rb[0]; j <= rb[1] && inside; ++j)
          for (int i = ra[0]; i <= ra[1] && inside; ++i)
            if (!mesh.in_omega(k + 1, i, j)) inside = false;
        if (inside) next(a2 + b2 * nu2) = 0.0;
      }
    coef = next;
    nu = nu2;
    nv = nv2;
  }
  Real val = 0.0;
  const auto& kuL = space.level_ku(L);
  const auto& kvL = space.level_kv(L);
  for (int b = 0; b < nv; ++b)
    for (int a = 0; a < nu; ++a) {
      Real c = coef(a + b * nu);
      if (c != 0.0)
        val += c * oracles::deboor(kuL, a, u) * oracles::deboor(kvL, b, v);
    }
  return val;
}

}  // namespace

TEST_CASE("truncated basis matches the dense oracle and sums to one") {
  // the 1D figure configuration in tensor form: degree 2 on eight spans,
  // middle function refined
  TensorBasis tb{KnotVector::uniform(2, 8), KnotVector::uniform(2, 8)};
  HierarchicalMesh mesh(tb, 2, 4);
  std::vector<CellId> marks;
  for (int j = 2; j <= 4; ++j)
    for (int i = 2; i <= 4; ++i) marks.push_back({0, i, j});
  mesh.refine(marks);
  ThbSpace space(mesh);

  // active fine functions fully inside the refined block
  int fine = 0, truncated_changed = 0;
  for (int g = 0; g < space.n_active(); ++g)
    if (space.func(g).level == 1) ++fine;
  CHECK(fine == 16);
  CHECK(space.gid_of(0, 4, 4) == -1);  // deactivated middle function

  for (int t = 0; t < 60; ++t) {
    Real u = oracles::uniform(0, 1), v = oracles::uniform(0, 1);
    auto r = space.eval(u, v, 0);
    Real sum = 0;
    for (size_t k = 0; k < r.gids.size(); ++k) {
      Real ref = truncated_value_oracle(mesh, space, r.gids[k], u, v);
      CHECK(r.values(static_cast<int>(k), 0) ==
            doctest::Approx(ref).epsilon(1e-12));
      sum += r.values(static_cast<int>(k), 0);
    }
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }

  // neighbours of the removed function are truncated: value differs from the
  // plain tensor function somewhere inside the refined region
  for (int a : {3, 5}) {
    int g = space.gid_of(0, a, 4);
    REQUIRE(g >= 0);
    Real u = 0.45, v = 0.45;
    auto r = space.eval(u, v, 0);
    auto it = std::find(r.gids.begin(), r.gids.end(), g);
    Real val = (it == r.gids.end())
                   ? 0.0
                   : r.values(static_cast<int>(it - r.gids.begin()), 0);
    Real plain = oracles::deboor(tb.ku, a, u) * oracles::deboor(tb.kv, 4, v);
    if (std::abs(val - plain) > 1e-12) ++truncated_changed;
  }
  CHECK(truncated_changed == 2);
}

TEST_CASE("partition of unity on random admissible meshes") {
  for (int trial = 0; trial < 3; ++trial) {
    HierarchicalMesh mesh = random_admissible_mesh(4, trial % 2 ? 3 : 2, 3, 5);
    ThbSpace space(mesh);
    for (int t = 0; t < 1000; ++t) {
      Real u = oracles::uniform(0, 1), v = oracles::uniform(0, 1);
      auto r = space.eval(u, v, 1);
      Real sum = 0, dsum = 0;
      for (int k = 0; k < r.values.rows(); ++k) {
        sum += r.values(k, 0);
        dsum += r.values(k, 1);
      }
      CHECK(std::abs(sum - 1.0) < 1e-12);
      CHECK(std::abs(dsum) < 1e-8);
    }
  }
}

TEST_CASE("at most m successive levels act on any active cell") {
  HierarchicalMesh mesh = random_admissible_mesh(4, 2, 3, 6);
  ThbSpace space(mesh);
  for (const CellId& c : mesh.active_cells()) {
    const auto& tab = space.cell_basis(c);
    int lo = 99, hi = -1;
    for (int g : tab.gids) {
      lo = std::min(lo, space.func(g).level);
      hi = std::max(hi, space.func(g).level);
    }
    CHECK(hi - lo + 1 <= mesh.jump_m());
  }
}

TEST_CASE("enriched space has the same regularity and more functions") {
  HierarchicalMesh mesh = random_admissible_mesh(4, 2, 2, 4);
  ThbSpace primal(mesh);
  ThbSpace enriched(mesh, 1);
  CHECK(enriched.degree_u() == 3);
  CHECK(enriched.n_active() > primal.n_active());
  for (int t = 0; t < 200; ++t) {
    Real u = oracles::uniform(0, 1), v = oracles::uniform(0, 1);
    auto r = enriched.eval(u, v, 0);
    Real sum = 0;
    for (int k = 0; k < r.values.rows(); ++k) sum += r.values(k, 0);
    CHECK(std::abs(sum - 1.0) < 1e-12);
  }
}
