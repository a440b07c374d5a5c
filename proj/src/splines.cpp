#include "thbshell/splines.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

namespace thbshell {

KnotVector::KnotVector(int degree, std::vector<Real> knots)
    : p_(degree), knots_(std::move(knots)) {
  require(p_ >= 1, "KnotVector: degree must be >= 1");
  require(static_cast<int>(knots_.size()) >= 2 * (p_ + 1),
          "KnotVector: too few knots");
  for (size_t i = 1; i < knots_.size(); ++i)
    require(knots_[i] >= knots_[i - 1], "KnotVector: knots must be non-decreasing");
  for (int i = 0; i <= p_; ++i) {
    require(knots_[i] == knots_[0], "KnotVector: open vector needs boundary multiplicity p+1");
    require(knots_[knots_.size() - 1 - i] == knots_.back(),
            "KnotVector: open vector needs boundary multiplicity p+1");
  }
  require(knots_[p_ + 1] > knots_[0] && knots_[knots_.size() - p_ - 2] < knots_.back(),
          "KnotVector: boundary multiplicity exceeds p+1");
  // interior multiplicities <= p
  size_t i = p_ + 1;
  while (i + p_ + 1 < knots_.size()) {
    size_t j = i;
    while (j < knots_.size() && knots_[j] == knots_[i]) ++j;
    require(static_cast<int>(j - i) <= p_, "KnotVector: interior multiplicity > p");
    i = j;
  }
  // nonempty spans
  span_starts_.push_back(knots_[p_]);
  for (size_t k = p_; k + p_ + 1 < knots_.size(); ++k) {
    if (knots_[k + 1] > knots_[k]) {
      span_starts_.push_back(knots_[k + 1]);
      span_knot_idx_.push_back(static_cast<int>(k));
    }
  }
  n_spans_ = static_cast<int>(span_knot_idx_.size());
}

KnotVector KnotVector::uniform(int degree, int n_spans, Real a, Real b) {
  require(n_spans >= 1 && b > a, "KnotVector::uniform: bad arguments");
  std::vector<Real> ks;
  for (int i = 0; i <= degree; ++i) ks.push_back(a);
  for (int i = 1; i < n_spans; ++i)
    ks.push_back(a + (b - a) * static_cast<Real>(i) / n_spans);
  for (int i = 0; i <= degree; ++i) ks.push_back(b);
  return KnotVector(degree, std::move(ks));
}

int KnotVector::find_span(Real u) const {
  if (u < a() || u > b())
    throw std::domain_error("KnotVector: parameter outside interval");
  auto it = std::upper_bound(span_starts_.begin(), span_starts_.end(), u);
  int s = static_cast<int>(it - span_starts_.begin()) - 1;
  return std::clamp(s, 0, n_spans_ - 1);
}

int KnotVector::find_span_knot_index(Real u) const {
  return span_knot_idx_[find_span(u)];
}

std::pair<int, std::vector<Real>> KnotVector::eval_basis(Real u) const {
  const int k = find_span_knot_index(u);
  std::vector<Real> N(p_ + 1, 0.0), left(p_ + 1), right(p_ + 1);
  N[0] = 1.0;
  for (int j = 1; j <= p_; ++j) {
    left[j] = u - knots_[k + 1 - j];
    right[j] = knots_[k + j] - u;
    Real saved = 0.0;
    for (int r = 0; r < j; ++r) {
      Real tmp = N[r] / (right[r + 1] + left[j - r]);
      N[r] = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    N[j] = saved;
  }
  return {k - p_, std::move(N)};
}

std::pair<int, MatX> KnotVector::eval_basis_derivs(Real u, int max_order) const {
  require(max_order >= 0 && max_order <= 2,
          "eval_basis_derivs: only orders up to 2 are supported");
  const int k = find_span_knot_index(u);
  const int p = p_;
  // triangular table of knot differences and basis values (NURBS book A2.3)
  MatX ndu(p + 1, p + 1);
  std::vector<Real> left(p + 1), right(p + 1);
  ndu(0, 0) = 1.0;
  for (int j = 1; j <= p; ++j) {
    left[j] = u - knots_[k + 1 - j];
    right[j] = knots_[k + j] - u;
    Real saved = 0.0;
    for (int r = 0; r < j; ++r) {
      ndu(j, r) = right[r + 1] + left[j - r];
      Real tmp = ndu(r, j - 1) / ndu(j, r);
      ndu(r, j) = saved + right[r + 1] * tmp;
      saved = left[j - r] * tmp;
    }
    ndu(j, j) = saved;
  }
  MatX ders = MatX::Zero(max_order + 1, p + 1);
  for (int j = 0; j <= p; ++j) ders(0, j) = ndu(j, p);
  const int n = std::min(max_order, p);
  MatX a(2, p + 1);
  for (int r = 0; r <= p; ++r) {
    int s1 = 0, s2 = 1;
    a(0, 0) = 1.0;
    for (int kk = 1; kk <= n; ++kk) {
      Real d = 0.0;
      int rk = r - kk, pk = p - kk;
      if (r >= kk) {
        a(s2, 0) = a(s1, 0) / ndu(pk + 1, rk);
        d = a(s2, 0) * ndu(rk, pk);
      }
      int j1 = (rk >= -1) ? 1 : -rk;
      int j2 = (r - 1 <= pk) ? kk - 1 : p - r;
      for (int j = j1; j <= j2; ++j) {
        a(s2, j) = (a(s1, j) - a(s1, j - 1)) / ndu(pk + 1, rk + j);
        d += a(s2, j) * ndu(rk + j, pk);
      }
      if (r <= pk) {
        a(s2, kk) = -a(s1, kk - 1) / ndu(pk + 1, r);
        d += a(s2, kk) * ndu(r, pk);
      }
      ders(kk, r) = d;
      std::swap(s1, s2);
    }
  }
  Real f = p;
  for (int kk = 1; kk <= n; ++kk) {
    for (int j = 0; j <= p; ++j) ders(kk, j) *= f;
    f *= (p - kk);
  }
  return {k - p, std::move(ders)};
}

Real KnotVector::greville(int i) const {
  require(i >= 0 && i < n_funcs(), "greville: index out of range");
  Real s = 0.0;
  for (int j = 1; j <= p_; ++j) s += knots_[i + j];
  return s / p_;
}

std::array<int, 2> KnotVector::func_span_range(int i) const {
  // nonempty spans intersecting [knots[i], knots[i+p+1])
  Real lo = knots_[i], hi = knots_[i + p_ + 1];
  int s0 = n_spans_, s1 = -1;
  for (int s = 0; s < n_spans_; ++s) {
    if (span_right(s) > lo && span_left(s) < hi) {
      s0 = std::min(s0, s);
      s1 = std::max(s1, s);
    }
  }
  return {s0, s1};
}

std::array<int, 2> KnotVector::span_func_range(int s) const {
  int k = span_knot_idx_[s];
  return {k - p_, k};
}

bool KnotVector::is_uniform_simple() const {
  Real h = span_starts_[1] - span_starts_[0];
  for (int s = 0; s < n_spans_; ++s)
    if (std::abs((span_right(s) - span_left(s)) - h) > 1e-12 * (b() - a()))
      return false;
  // simple interior knots
  return n_spans_ == static_cast<int>(knots_.size()) - 2 * p_ - 1;
}

KnotVector KnotVector::dyadic_refined() const {
  std::vector<Real> mids;
  for (int s = 0; s < n_spans_; ++s)
    mids.push_back(0.5 * (span_left(s) + span_right(s)));
  return insert_knots(*this, mids).first;
}

std::pair<KnotVector, Eigen::SparseMatrix<Real>> insert_knots(
    const KnotVector& kv, const std::vector<Real>& new_knots) {
  const int p = kv.degree();
  std::vector<Real> t = kv.knots();
  int n = kv.n_funcs();
  Eigen::SparseMatrix<Real> M(n, n);
  M.setIdentity();
  std::vector<Real> sorted = new_knots;
  std::sort(sorted.begin(), sorted.end());
  for (Real ubar : sorted) {
    require(ubar > kv.a() && ubar < kv.b(),
            "insert_knots: knot outside open parametric interval");
    // span index k in knot array: t[k] <= ubar < t[k+1]
    int k = static_cast<int>(std::upper_bound(t.begin(), t.end(), ubar) -
                             t.begin()) - 1;
    // multiplicity check
    int mult = static_cast<int>(std::count(t.begin(), t.end(), ubar));
    require(mult < p, "insert_knots: resulting multiplicity exceeds p");
    Eigen::SparseMatrix<Real> S(n + 1, n);
    std::vector<Eigen::Triplet<Real>> ts;
    for (int i = 0; i <= n; ++i) {
      if (i <= k - p) {
        ts.emplace_back(i, i, 1.0);
      } else if (i >= k + 1) {
        ts.emplace_back(i, i - 1, 1.0);
      } else {
        Real alpha = (ubar - t[i]) / (t[i + p] - t[i]);
        ts.emplace_back(i, i, alpha);
        ts.emplace_back(i, i - 1, 1.0 - alpha);
      }
    }
    S.setFromTriplets(ts.begin(), ts.end());
    M = (S * M).eval();
    t.insert(std::upper_bound(t.begin(), t.end(), ubar), ubar);
    ++n;
  }
  M.makeCompressed();
  return {KnotVector(p, std::move(t)), std::move(M)};
}

KnotVector elevate_degree_same_regularity(const KnotVector& kv) {
  std::vector<Real> out;
  const auto& t = kv.knots();
  size_t i = 0;
  while (i < t.size()) {
    size_t j = i;
    while (j < t.size() && t[j] == t[i]) ++j;
    for (size_t r = 0; r < (j - i) + 1; ++r) out.push_back(t[i]);
    i = j;
  }
  return KnotVector(kv.degree() + 1, std::move(out));
}

TensorBasis elevate_degree_same_regularity(const TensorBasis& tb) {
  return {elevate_degree_same_regularity(tb.ku),
          elevate_degree_same_regularity(tb.kv)};
}

GeometryMap::GeometryMap(TensorBasis basis, std::vector<Vec3> points,
                         std::vector<Real> weights, Real thickness)
    : basis_(std::move(basis)),
      points_(std::move(points)),
      weights_(std::move(weights)),
      thickness_(thickness) {
  require(static_cast<int>(points_.size()) == basis_.n_funcs(),
          "GeometryMap: control net size mismatch");
  require(weights_.empty() || weights_.size() == points_.size(),
          "GeometryMap: weight count mismatch");
  for (Real w : weights_) require(w > 0.0, "GeometryMap: weights must be positive");
  require(thickness_ > 0.0, "GeometryMap: thickness must be positive");
  Vec3 lo = points_[0], hi = points_[0];
  for (const auto& P : points_) {
    lo = lo.cwiseMin(P);
    hi = hi.cwiseMax(P);
  }
  bbox_diag_ = (hi - lo).norm();
  if (bbox_diag_ == 0.0) bbox_diag_ = 1.0;
}

SurfacePoint GeometryMap::eval(Real u, Real v, int order) const {
  const int pu = basis_.ku.degree(), pv = basis_.kv.degree();
  const int nu = basis_.ku.n_funcs();
  auto [iu, du] = basis_.ku.eval_basis_derivs(u, std::min(order, 2));
  auto [iv, dv] = basis_.kv.eval_basis_derivs(v, std::min(order, 2));

  // homogeneous sums A^(k) and weight sums w^(k)
  Vec3 A = Vec3::Zero(), A1 = Vec3::Zero(), A2 = Vec3::Zero();
  Vec3 A11 = Vec3::Zero(), A12 = Vec3::Zero(), A22 = Vec3::Zero();
  Real W = 0, W1 = 0, W2 = 0, W11 = 0, W12 = 0, W22 = 0;
  for (int b = 0; b <= pv; ++b) {
    for (int a = 0; a <= pu; ++a) {
      int idx = (iu + a) + (iv + b) * nu;
      Real w = rational() ? weights_[idx] : 1.0;
      const Vec3 Pw = points_[idx] * w;
      Real N = du(0, a) * dv(0, b);
      A += N * Pw;
      W += N * w;
      if (order >= 1) {
        Real Nu = du(1, a) * dv(0, b), Nv = du(0, a) * dv(1, b);
        A1 += Nu * Pw;
        A2 += Nv * Pw;
        W1 += Nu * w;
        W2 += Nv * w;
      }
      if (order >= 2) {
        Real Nuu = du(2, a) * dv(0, b);
        Real Nuv = du(1, a) * dv(1, b);
        Real Nvv = du(0, a) * dv(2, b);
        A11 += Nuu * Pw;
        A12 += Nuv * Pw;
        A22 += Nvv * Pw;
        W11 += Nuu * w;
        W12 += Nuv * w;
        W22 += Nvv * w;
      }
    }
  }

  SurfacePoint s;
  s.x = A / W;
  if (order >= 1) {
    s.a1 = (A1 - W1 * s.x) / W;
    s.a2 = (A2 - W2 * s.x) / W;
    Vec3 n = s.a1.cross(s.a2);
    s.measure = n.norm();
    if (s.measure < 1e-14 * bbox_diag_)
      throw GeometryError("GeometryMap: degenerate Jacobian at (" +
                          std::to_string(u) + ", " + std::to_string(v) + ")");
    s.a3 = n / s.measure;
    s.a_cov << s.a1.dot(s.a1), s.a1.dot(s.a2), s.a1.dot(s.a2), s.a2.dot(s.a2);
    Real det = s.a_cov.determinant();
    s.a_con << s.a_cov(1, 1) / det, -s.a_cov(0, 1) / det,
        -s.a_cov(0, 1) / det, s.a_cov(0, 0) / det;
  }
  if (order >= 2) {
    s.a11 = (A11 - W11 * s.x - 2.0 * W1 * s.a1) / W;
    s.a12 = (A12 - W12 * s.x - W1 * s.a2 - W2 * s.a1) / W;
    s.a22 = (A22 - W22 * s.x - 2.0 * W2 * s.a2) / W;
    s.b_cov << s.a3.dot(s.a11), s.a3.dot(s.a12), s.a3.dot(s.a12), s.a3.dot(s.a22);
  }
  return s;
}

namespace {
std::vector<Real> parse_reals(const std::string& line) {
  std::istringstream ss(line);
  std::vector<Real> out;
  Real x;
  while (ss >> x) out.push_back(x);
  return out;
}
}  // namespace

GeometryMap read_geometry(std::istream& in) {
  int pu = -1, pv = -1;
  std::vector<Real> ku, kv;
  Real thickness = -1.0;
  std::vector<Vec3> pts;
  std::vector<Real> wts;
  int n_control = -1;
  std::string line;
  while (std::getline(in, line)) {
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream ss(line);
    std::string key;
    if (!(ss >> key)) continue;
    std::string rest;
    std::getline(ss, rest);
    if (key == "degree") {
      auto v = parse_reals(rest);
      require(v.size() == 2, "geometry file: degree needs two values");
      pu = static_cast<int>(v[0]);
      pv = static_cast<int>(v[1]);
    } else if (key == "knots_u") {
      ku = parse_reals(rest);
    } else if (key == "knots_v") {
      kv = parse_reals(rest);
    } else if (key == "thickness") {
      auto v = parse_reals(rest);
      require(v.size() == 1, "geometry file: thickness needs one value");
      thickness = v[0];
    } else if (key == "control") {
      auto v = parse_reals(rest);
      require(v.size() == 1, "geometry file: control needs a count");
      n_control = static_cast<int>(v[0]);
      for (int i = 0; i < n_control; ++i) {
        require(static_cast<bool>(std::getline(in, line)),
                "geometry file: missing control point row");
        auto c = parse_reals(line);
        require(c.size() == 4, "geometry file: control rows are 'x y z w'");
        pts.emplace_back(c[0], c[1], c[2]);
        wts.push_back(c[3]);
      }
    } else {
      throw std::invalid_argument("geometry file: unknown key '" + key + "'");
    }
  }
  require(pu > 0 && !ku.empty() && !kv.empty() && thickness > 0 && n_control > 0,
          "geometry file: incomplete definition");
  bool all_one = std::all_of(wts.begin(), wts.end(),
                             [](Real w) { return w == 1.0; });
  TensorBasis tb{KnotVector(pu, ku), KnotVector(pv, kv)};
  return GeometryMap(std::move(tb), std::move(pts),
                     all_one ? std::vector<Real>{} : std::move(wts), thickness);
}

GeometryMap read_geometry_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::invalid_argument("cannot open geometry file: " + path);
  return read_geometry(f);
}

void write_geometry(std::ostream& out, const GeometryMap& g) {
  out << "degree " << g.basis().ku.degree() << " " << g.basis().kv.degree() << "\n";
  out << "knots_u";
  for (Real k : g.basis().ku.knots()) out << " " << k;
  out << "\nknots_v";
  for (Real k : g.basis().kv.knots()) out << " " << k;
  out << "\nthickness " << g.thickness() << "\n";
  out << "control " << g.points().size() << "\n";
  for (size_t i = 0; i < g.points().size(); ++i) {
    const Vec3& P = g.points()[i];
    Real w = g.rational() ? g.weights()[i] : 1.0;
    out << P.x() << " " << P.y() << " " << P.z() << " " << w << "\n";
  }
}

}  // namespace thbshell
