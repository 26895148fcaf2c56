#include "filsim/contact_solver.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include <Eigen/SparseLU>

namespace filsim {

namespace {

constexpr double kTiny = 1e-300;

using Triplets = std::vector<Eigen::Triplet<double>>;

}  // namespace

DofPartition partition_dofs(const SparseMat& a, const SparseMat& j, int halo) {
  if (a.rows() != a.cols() || a.rows() != j.rows())
    throw SimError(ErrorCode::kValidationError, "partition: A and J sizes disagree");
  const int n = static_cast<int>(a.rows());
  std::vector<char> touched(n, 0);
  for (int k = 0; k < j.outerSize(); ++k)
    for (SparseMat::InnerIterator it(j, k); it; ++it)
      if (it.value() != 0.0) touched[it.row()] = 1;
  for (int ring = 0; ring < halo; ++ring) {
    std::vector<char> grown = touched;
    for (int k = 0; k < a.outerSize(); ++k)
      for (SparseMat::InnerIterator it(a, k); it; ++it)
        if (touched[it.col()] && it.value() != 0.0) grown[it.row()] = 1;
    touched = std::move(grown);
  }

  DofPartition out;
  std::vector<int> local(n);
  for (int i = 0; i < n; ++i) {
    auto& list = touched[i] ? out.participating : out.non_participating;
    local[i] = static_cast<int>(list.size());
    list.push_back(i);
  }
  const int np = static_cast<int>(out.participating.size());
  const int nn = n - np;

  Triplets pp, pn, nn_t, jp;
  for (int k = 0; k < a.outerSize(); ++k) {
    for (SparseMat::InnerIterator it(a, k); it; ++it) {
      const int r = static_cast<int>(it.row()), c = static_cast<int>(it.col());
      if (touched[r] && touched[c]) pp.emplace_back(local[r], local[c], it.value());
      else if (touched[r]) pn.emplace_back(local[r], local[c], it.value());
      else if (!touched[c]) nn_t.emplace_back(local[r], local[c], it.value());
    }
  }
  for (int k = 0; k < j.outerSize(); ++k)
    for (SparseMat::InnerIterator it(j, k); it; ++it)
      if (touched[it.row()]) jp.emplace_back(local[it.row()], it.col(), it.value());

  out.a_pp.resize(np, np);
  out.a_pp.setFromTriplets(pp.begin(), pp.end());
  out.a_pn.resize(np, nn);
  out.a_pn.setFromTriplets(pn.begin(), pn.end());
  out.a_nn.resize(nn, nn);
  out.a_nn.setFromTriplets(nn_t.begin(), nn_t.end());
  out.j_p.resize(np, j.cols());
  out.j_p.setFromTriplets(jp.begin(), jp.end());
  return out;
}

SchurComplement::SchurComplement(const DofPartition& partition) {
  a_np_ = partition.a_pn.transpose();
  s_p_ = partition.a_pp;
  if (partition.a_nn.rows() == 0) return;
  a_nn_factor_.compute(partition.a_nn);
  if (a_nn_factor_.info() != Eigen::Success)
    throw SimError(ErrorCode::kFactorizationFailure, "A_nn is not positive definite");
  if (a_np_.nonZeros() == 0) return;
  const SparseMat x = a_nn_factor_.solve(a_np_);
  const SparseMat coupling = partition.a_pn * x;
  s_p_ = partition.a_pp - coupling;
  const SparseMat st = s_p_.transpose();
  s_p_ = 0.5 * (s_p_ + st);
}

VecX SchurComplement::recover_nonparticipating(const VecX& v_p, const VecX& v_p_star,
                                               const VecX& v_n_star) const {
  if (v_n_star.size() == 0) return VecX(0);
  if (a_np_.nonZeros() == 0) return v_n_star;
  const VecX rhs = a_np_ * (v_p - v_p_star);
  return v_n_star - a_nn_factor_.solve(rhs);
}

void ConeProblem::validate() const {
  const int n = num_dofs();
  const int m = 3 * num_contacts();
  if (schur.rows() != n || schur.cols() != n)
    throw SimError(ErrorCode::kValidationError, "cone problem: S has the wrong size");
  if (jacobian.rows() != n || jacobian.cols() != m)
    throw SimError(ErrorCode::kValidationError, "cone problem: J has the wrong size");
  if (bias.size() != m || compliance.size() != m)
    throw SimError(ErrorCode::kValidationError, "cone problem: bias or compliance size");
  for (double mu : friction)
    if (!std::isfinite(mu) || mu < 0.0)
      throw SimError(ErrorCode::kValidationError, "cone problem: friction must be >= 0");
  for (int k = 0; k < m; ++k)
    if (!std::isfinite(compliance[k]) || compliance[k] < 0.0)
      throw SimError(ErrorCode::kValidationError, "cone problem: compliance must be >= 0");
  if (!free_velocity.allFinite() || !bias.allFinite())
    throw SimError(ErrorCode::kValidationError, "cone problem: non-finite data");
}

namespace {

VecX constraint_velocity(const ConeProblem& p, const VecX& v, const VecX& lambda) {
  return p.jacobian.transpose() * v - p.bias + p.compliance.cwiseProduct(lambda);
}

}  // namespace

ConeCertificate certify(const ConeProblem& problem, const VecX& v, const VecX& lambda) {
  ConeCertificate c;
  const int nc = problem.num_contacts();
  const VecX sv_star = problem.schur * problem.free_velocity;
  const VecX j_lambda = problem.jacobian * lambda;
  const VecX r = problem.schur * (v - problem.free_velocity) - j_lambda;
  const double denom = std::max({sv_star.norm(), j_lambda.norm(), kTiny});
  c.momentum_residual = r.norm() == 0.0 ? 0.0 : r.norm() / denom;
  if (nc == 0) return c;

  const VecX vc = problem.jacobian.transpose() * v;
  const VecX vc_free = problem.jacobian.transpose() * problem.free_velocity;
  const VecX y = constraint_velocity(problem, v, lambda);
  const VecX r_lambda = problem.compliance.cwiseProduct(lambda);
  const double lam_norm = lambda.norm();
  const double vel_scale =
      std::max({vc.norm(), vc_free.norm(), problem.bias.norm(), r_lambda.norm()});
  double worst = 0.0, lam_viol = 0.0, vel_viol = 0.0;
  for (int i = 0; i < nc; ++i) {
    const Vec3 l = lambda.segment<3>(3 * i);
    const Vec3 yi = y.segment<3>(3 * i);
    const double mu = problem.friction[i];
    worst = std::max(worst, std::abs(l.dot(yi)));
    const double lt = std::hypot(l[0], l[1]);
    lam_viol = std::max({lam_viol, lt - mu * l[2], -l[2]});
    vel_viol = std::max(vel_viol, mu * std::hypot(yi[0], yi[1]) - yi[2]);
  }
  c.complementarity = worst / (1.0 + lam_norm * vc.norm());
  c.relative_complementarity = worst == 0.0 ? 0.0 : worst / std::max(lam_norm * vel_scale, kTiny);
  const double lam_inf = lambda.lpNorm<Eigen::Infinity>();
  const double vel_inf = std::max({vc.lpNorm<Eigen::Infinity>(),
                                   vc_free.lpNorm<Eigen::Infinity>(),
                                   problem.bias.lpNorm<Eigen::Infinity>(),
                                   r_lambda.lpNorm<Eigen::Infinity>()});
  c.impulse_cone_violation = lam_viol <= 0.0 ? 0.0 : lam_viol / std::max(lam_inf, kTiny);
  c.velocity_cone_violation = vel_viol <= 0.0 ? 0.0 : vel_viol / std::max(vel_inf, kTiny);
  return c;
}

std::vector<ContactMode> classify_contacts(const ConeProblem& problem, const VecX& v,
                                           const VecX& lambda) {
  const int nc = problem.num_contacts();
  std::vector<ContactMode> modes(nc, ContactMode::kOpen);
  if (nc == 0) return modes;
  const VecX vc = problem.jacobian.transpose() * v;
  const VecX y = constraint_velocity(problem, v, lambda);
  const double lam_inf = lambda.lpNorm<Eigen::Infinity>();
  const VecX vc_free = problem.jacobian.transpose() * problem.free_velocity;
  const double vel_scale = std::max({vc.lpNorm<Eigen::Infinity>(),
                                     vc_free.lpNorm<Eigen::Infinity>(),
                                     problem.bias.lpNorm<Eigen::Infinity>(), kTiny});
  for (int i = 0; i < nc; ++i) {
    if (lam_inf == 0.0 || lambda[3 * i + 2] <= 1e-7 * lam_inf) continue;
    const double slip = std::hypot(y[3 * i], y[3 * i + 1]);
    modes[i] = slip <= 1e-6 * vel_scale ? ContactMode::kStick : ContactMode::kSlip;
  }
  return modes;
}

namespace {

// One cone of the interior-point problem: a second-order cone of dimension
// three for a frictional contact (z = (lambda_n, lambda_t / mu)) or the
// nonnegative half-line for a frictionless one (z = lambda_n).
struct Cone {
  int contact = 0;
  int offset = 0;
  int dim = 3;
  double mu = 0.0;
  std::vector<int> rows;
  MatX b;              // rows.size() x dim block of B = J T
  Mat3 d = Mat3::Zero();  // T^T R T
  std::vector<int> slots;  // value indices of rows x rows in the Newton matrix
};

struct Scaling {
  Mat3 w = Mat3::Identity();
  Mat3 w_inv = Mat3::Identity();
  Vec3 lambda = Vec3::Zero();
};

Vec3 seg(const VecX& x, const Cone& c) {
  Vec3 out = Vec3::Zero();
  for (int k = 0; k < c.dim; ++k) out[k] = x[c.offset + k];
  return out;
}

void put(VecX& x, const Cone& c, const Vec3& val) {
  for (int k = 0; k < c.dim; ++k) x[c.offset + k] = val[k];
}

Vec3 identity_element() { return Vec3(1.0, 0.0, 0.0); }

Vec3 jordan_product(const Cone& c, const Vec3& x, const Vec3& y) {
  if (c.dim == 1) return Vec3(x[0] * y[0], 0.0, 0.0);
  Vec3 out;
  out[0] = x.dot(y);
  out.tail<2>() = x[0] * y.tail<2>() + y[0] * x.tail<2>();
  return out;
}

// Solves lambda o u = d for u.
Vec3 jordan_divide(const Cone& c, const Vec3& l, const Vec3& d) {
  if (c.dim == 1) return Vec3(d[0] / l[0], 0.0, 0.0);
  const double det = l[0] * l[0] - l.tail<2>().squaredNorm();
  Vec3 u;
  u[0] = (l[0] * d[0] - l.tail<2>().dot(d.tail<2>())) / det;
  u.tail<2>() = (d.tail<2>() - u[0] * l.tail<2>()) / l[0];
  return u;
}

double cone_det(const Vec3& x) {
  const double r = x.tail<2>().norm();
  return (x[0] - r) * (x[0] + r);
}

// Largest alpha with x + alpha dx in the cone, for interior x.
double max_step(const Cone& c, const Vec3& x, const Vec3& dx) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  if (c.dim == 1) return dx[0] < 0.0 ? -x[0] / dx[0] : kInf;
  const double a = cone_det(dx);
  const double b = x[0] * dx[0] - x.tail<2>().dot(dx.tail<2>());
  const double cc = cone_det(x);
  double best = kInf;
  auto consider = [&](double r) {
    if (r > 0.0 && std::isfinite(r)) best = std::min(best, r);
  };
  if (std::abs(a) <= 1e-300) {
    if (b < 0.0) consider(-cc / (2.0 * b));
  } else {
    const double disc = b * b - a * cc;
    if (disc >= 0.0) {
      const double q = -(b + std::copysign(std::sqrt(disc), b));
      if (q != 0.0) {
        consider(q / a);
        consider(cc / q);
      }
    }
  }
  return best;
}

Scaling nt_scaling(const Cone& c, const Vec3& s, const Vec3& z) {
  Scaling sc;
  if (c.dim == 1) {
    const double w = std::sqrt(s[0] / z[0]);
    sc.w = Mat3::Identity();
    sc.w(0, 0) = w;
    sc.w_inv = Mat3::Identity();
    sc.w_inv(0, 0) = 1.0 / w;
    sc.lambda = Vec3(std::sqrt(s[0] * z[0]), 0.0, 0.0);
    return sc;
  }
  const double sj = std::sqrt(cone_det(s));
  const double zj = std::sqrt(cone_det(z));
  const Vec3 sb = s / sj, zb = z / zj;
  const double gamma = std::sqrt(0.5 * (1.0 + sb.dot(zb)));
  Vec3 wb;
  wb[0] = (sb[0] + zb[0]) / (2.0 * gamma);
  wb.tail<2>() = (sb.tail<2>() - zb.tail<2>()) / (2.0 * gamma);
  const double eta = std::sqrt(sj / zj);
  Mat3 m;
  m(0, 0) = wb[0];
  m.block<1, 2>(0, 1) = wb.tail<2>().transpose();
  m.block<2, 1>(1, 0) = wb.tail<2>();
  m.block<2, 2>(1, 1) =
      Eigen::Matrix2d::Identity() + wb.tail<2>() * wb.tail<2>().transpose() / (1.0 + wb[0]);
  sc.w = eta * m;
  Mat3 mi = m;
  mi.block<1, 2>(0, 1) *= -1.0;
  mi.block<2, 1>(1, 0) *= -1.0;
  sc.w_inv = mi / eta;
  sc.lambda = sc.w * z;
  return sc;
}

struct IpmResult {
  VecX v, z, s;
  int iterations = 0;
  bool converged = false;
};

class InteriorPoint {
 public:
  InteriorPoint(const SparseMat& s, const VecX& v_star, std::vector<Cone> cones, const VecX& h,
                int m)
      : s_(s), v_star_(v_star), cones_(std::move(cones)), h_(h), m_(m) {
    build_pattern();
  }

  IpmResult solve(const ConeSolverOptions& options);

 private:
  void build_pattern();
  VecX b_times(const VecX& z) const;
  VecX bt_times(const VecX& v) const;
  VecX d_times(const VecX& z) const;
  bool factor(const std::vector<Mat3>& q);
  void direction(const std::vector<Scaling>& sc, const std::vector<Mat3>& q, const VecX& r_d,
                 const VecX& r_p, const VecX& d_s, VecX& dv, VecX& dz, VecX& ds);

  const SparseMat& s_;
  const VecX& v_star_;
  std::vector<Cone> cones_;
  VecX h_;
  int m_;
  SparseMat newton_;
  std::vector<int> s_slots_;
  std::vector<int> diag_slots_;
  Eigen::SimplicialLLT<SparseMat> llt_;
};

void InteriorPoint::build_pattern() {
  const int n = static_cast<int>(s_.rows());
  Triplets trip;
  for (int k = 0; k < s_.outerSize(); ++k)
    for (SparseMat::InnerIterator it(s_, k); it; ++it) trip.emplace_back(it.row(), it.col(), 0.0);
  for (int i = 0; i < n; ++i) trip.emplace_back(i, i, 0.0);
  for (const Cone& c : cones_)
    for (int r : c.rows)
      for (int col : c.rows) trip.emplace_back(r, col, 0.0);
  newton_.resize(n, n);
  newton_.setFromTriplets(trip.begin(), trip.end());
  newton_.makeCompressed();

  auto slot = [&](int r, int c) {
    const int* begin = newton_.innerIndexPtr() + newton_.outerIndexPtr()[c];
    const int* end = newton_.innerIndexPtr() + newton_.outerIndexPtr()[c + 1];
    return static_cast<int>(std::lower_bound(begin, end, r) - newton_.innerIndexPtr());
  };
  for (int k = 0; k < s_.outerSize(); ++k)
    for (SparseMat::InnerIterator it(s_, k); it; ++it)
      s_slots_.push_back(slot(static_cast<int>(it.row()), static_cast<int>(it.col())));
  for (int i = 0; i < n; ++i) diag_slots_.push_back(slot(i, i));
  for (Cone& c : cones_)
    for (int col : c.rows)
      for (int r : c.rows) c.slots.push_back(slot(r, col));
  llt_.analyzePattern(newton_);
}

VecX InteriorPoint::b_times(const VecX& z) const {
  VecX out = VecX::Zero(s_.rows());
  for (const Cone& c : cones_) {
    const VecX local = c.b * z.segment(c.offset, c.dim);
    for (size_t k = 0; k < c.rows.size(); ++k) out[c.rows[k]] += local[k];
  }
  return out;
}

VecX InteriorPoint::bt_times(const VecX& v) const {
  VecX out(m_);
  for (const Cone& c : cones_) {
    VecX local(c.rows.size());
    for (size_t k = 0; k < c.rows.size(); ++k) local[k] = v[c.rows[k]];
    out.segment(c.offset, c.dim) = c.b.transpose() * local;
  }
  return out;
}

VecX InteriorPoint::d_times(const VecX& z) const {
  VecX out(m_);
  for (const Cone& c : cones_)
    out.segment(c.offset, c.dim) = c.d.topLeftCorner(c.dim, c.dim) * z.segment(c.offset, c.dim);
  return out;
}

bool InteriorPoint::factor(const std::vector<Mat3>& q) {
  double* val = newton_.valuePtr();
  std::fill(val, val + newton_.nonZeros(), 0.0);
  {
    int k = 0;
    for (int o = 0; o < s_.outerSize(); ++o)
      for (SparseMat::InnerIterator it(s_, o); it; ++it) val[s_slots_[k++]] += it.value();
  }
  for (size_t i = 0; i < cones_.size(); ++i) {
    const Cone& c = cones_[i];
    const MatX block = c.b * q[i].topLeftCorner(c.dim, c.dim) * c.b.transpose();
    const int nr = static_cast<int>(c.rows.size());
    for (int col = 0; col < nr; ++col)
      for (int r = 0; r < nr; ++r) val[c.slots[col * nr + r]] += block(r, col);
  }
  llt_.factorize(newton_);
  double shift = 0.0;
  double diag_max = 0.0;
  for (int sl : diag_slots_) diag_max = std::max(diag_max, std::abs(val[sl]));
  while (llt_.info() != Eigen::Success) {
    const double next = shift == 0.0 ? 1e-14 * std::max(diag_max, 1.0) : 10.0 * shift;
    for (int sl : diag_slots_) val[sl] += next - shift;
    shift = next;
    if (shift > 1e-4 * std::max(diag_max, 1.0)) return false;
    llt_.factorize(newton_);
  }
  return true;
}

void InteriorPoint::direction(const std::vector<Scaling>& sc, const std::vector<Mat3>& q,
                              const VecX& r_d, const VecX& r_p, const VecX& d_s, VecX& dv,
                              VecX& dz, VecX& ds) {
  // Solves  S dv - B dz = -r_d,  B^T dv + (W^2 + D) dz = r3 + r_p  through the
  // reduced system, refining against the residuals of the full one.
  VecX rhs_z(m_);
  for (size_t i = 0; i < cones_.size(); ++i) {
    const Cone& c = cones_[i];
    const Vec3 u = jordan_divide(c, sc[i].lambda, seg(d_s, c));
    put(rhs_z, c, sc[i].w.transpose() * u + seg(r_p, c));
  }
  const VecX rhs_v = -r_d;
  auto apply_k = [&](const VecX& x, const VecX& y, VecX& out_v, VecX& out_z) {
    out_v = s_ * x - b_times(y);
    out_z = bt_times(x);
    for (size_t i = 0; i < cones_.size(); ++i) {
      const Cone& c = cones_[i];
      const Mat3 h = sc[i].w.transpose() * sc[i].w + c.d;
      put(out_z, c, seg(out_z, c) + h * seg(y, c));
    }
  };
  auto reduced = [&](const VecX& a, const VecX& b, VecX& x, VecX& y) {
    VecX qb(m_);
    for (size_t i = 0; i < cones_.size(); ++i) put(qb, cones_[i], q[i] * seg(b, cones_[i]));
    x = llt_.solve(VecX(a + b_times(qb)));
    const VecX t = b - bt_times(x);
    y.resize(m_);
    for (size_t i = 0; i < cones_.size(); ++i) put(y, cones_[i], q[i] * seg(t, cones_[i]));
  };
  reduced(rhs_v, rhs_z, dv, dz);
  VecX kv, kz, cv, cz;
  for (int pass = 0; pass < 3; ++pass) {
    apply_k(dv, dz, kv, kz);
    const VecX ev = rhs_v - kv, ez = rhs_z - kz;
    if (ev.lpNorm<Eigen::Infinity>() + ez.lpNorm<Eigen::Infinity>() == 0.0) break;
    reduced(ev, ez, cv, cz);
    dv += cv;
    dz += cz;
  }
  ds = -r_p + bt_times(dv) + d_times(dz);
}

IpmResult InteriorPoint::solve(const ConeSolverOptions& options) {
  const double tol = options.ipm_tolerance;
  const int nk = static_cast<int>(cones_.size());
  IpmResult out;
  VecX v = v_star_;
  VecX z(m_), s(m_);
  for (const Cone& c : cones_) put(z, c, identity_element());
  s = bt_times(v) - h_ + d_times(z);
  double shift = -std::numeric_limits<double>::infinity();
  for (const Cone& c : cones_) {
    const Vec3 x = seg(s, c);
    shift = std::max(shift, c.dim == 1 ? -x[0] : x.tail<2>().norm() - x[0]);
  }
  if (shift >= -1e-8) {
    for (const Cone& c : cones_) put(s, c, seg(s, c) + (1.0 + shift) * identity_element());
  }

  const VecX sv_star = s_ * v_star_;
  const double d_scale = 1.0 + sv_star.lpNorm<Eigen::Infinity>();
  const double p_scale = 1.0 + h_.lpNorm<Eigen::Infinity>();
  double best_merit = std::numeric_limits<double>::infinity();
  int last_progress = 0;  // iteration of the last halving of the merit
  VecX best_v = v, best_z = z, best_s = s;

  std::vector<Scaling> sc(nk);
  std::vector<Mat3> q(nk);
  for (int i = 0; i < nk; ++i) sc[i] = nt_scaling(cones_[i], seg(s, cones_[i]), seg(z, cones_[i]));
  for (int it = 0; it <= options.max_iterations; ++it) {
    const VecX r_d = s_ * (v - v_star_) - b_times(z);
    const VecX r_p = s - bt_times(v) - d_times(z) + h_;
    double gap = 0.0;
    for (const Scaling& x : sc) gap += x.lambda.squaredNorm();
    const double mu = gap / nk;
    const double merit = std::max({r_d.lpNorm<Eigen::Infinity>() / d_scale,
                                   r_p.lpNorm<Eigen::Infinity>() / p_scale, mu});
    if (merit < 0.5 * best_merit) last_progress = it;
    if (merit < best_merit) {
      best_merit = merit;
      best_v = v;
      best_z = z;
      best_s = s;
    }
    out.iterations = it;
    if (merit <= tol) {
      out.converged = true;
      break;
    }
    if (it == options.max_iterations || it - last_progress > 6) break;

    for (int i = 0; i < nk; ++i) {
      const Cone& c = cones_[i];
      // (G^T G + D)^{-1} = G^{-1} (I + G^{-T} D G^{-1})^{-1} G^{-T}, exactly symmetric.
      const Mat3 gi = sc[i].w_inv;
      const Mat3 k = Mat3::Identity() + gi.transpose() * c.d * gi;
      Mat3 inv = Mat3::Zero();
      if (c.dim == 1) {
        inv(0, 0) = gi(0, 0) * gi(0, 0) / k(0, 0);
      } else {
        inv = gi * k.llt().solve(Mat3::Identity()) * gi.transpose();
        inv = 0.5 * (inv + inv.transpose()).eval();
      }
      q[i] = inv;
    }
    if (!factor(q)) break;

    VecX d_s(m_);
    for (int i = 0; i < nk; ++i) {
      const Cone& c = cones_[i];
      put(d_s, c, -jordan_product(c, sc[i].lambda, sc[i].lambda));
    }
    VecX dv_a, dz_a, ds_a;
    direction(sc, q, r_d, r_p, d_s, dv_a, dz_a, ds_a);
    // Step lengths are measured in the scaled space, where lambda is central.
    auto step_limit = [&](const VecX& ds, const VecX& dz) {
      double a = std::numeric_limits<double>::infinity();
      for (int i = 0; i < nk; ++i) {
        const Cone& c = cones_[i];
        a = std::min(a, max_step(c, sc[i].lambda, sc[i].w_inv.transpose() * seg(ds, c)));
        a = std::min(a, max_step(c, sc[i].lambda, sc[i].w * seg(dz, c)));
      }
      return a;
    };
    const double alpha_a = std::min(1.0, step_limit(ds_a, dz_a));
    double gap_a = 0.0;
    for (int i = 0; i < nk; ++i) {
      const Cone& c = cones_[i];
      gap_a += (sc[i].lambda + alpha_a * (sc[i].w_inv.transpose() * seg(ds_a, c)))
                   .dot(sc[i].lambda + alpha_a * (sc[i].w * seg(dz_a, c)));
    }
    const double sigma = std::clamp(std::pow(std::max(gap_a, 0.0) / gap, 3.0), 0.0, 1.0);

    for (int i = 0; i < nk; ++i) {
      const Cone& c = cones_[i];
      const Vec3 a = sc[i].w_inv.transpose() * seg(ds_a, c);
      const Vec3 b = sc[i].w * seg(dz_a, c);
      put(d_s, c,
          -jordan_product(c, sc[i].lambda, sc[i].lambda) + sigma * mu * identity_element() -
              jordan_product(c, a, b));
    }
    VecX dv, dz, ds;
    direction(sc, q, r_d, r_p, d_s, dv, dz, ds);
    const double alpha = std::min(1.0, 0.99 * step_limit(ds, dz));
    if (!(alpha > 1e-8)) break;
    v += alpha * dv;
    z += alpha * dz;
    s += alpha * ds;
    // Update the scaling from the step in the scaled space: with W~ the NT
    // scaling of (lambda + a G^{-T} ds, lambda + a G dz), G+ = W~ G.
    for (int i = 0; i < nk; ++i) {
      const Cone& c = cones_[i];
      if (c.dim == 1) {
        sc[i] = nt_scaling(c, seg(s, c), seg(z, c));
        continue;
      }
      const Vec3 st = sc[i].lambda + alpha * (sc[i].w_inv.transpose() * seg(ds, c));
      const Vec3 zt = sc[i].lambda + alpha * (sc[i].w * seg(dz, c));
      const Scaling step = nt_scaling(c, st, zt);
      sc[i].w = step.w * sc[i].w;
      sc[i].w_inv = sc[i].w_inv * step.w_inv;
      sc[i].lambda = step.lambda;
    }
  }
  out.v = out.converged ? v : best_v;
  out.z = out.converged ? z : best_z;
  out.s = out.converged ? s : best_s;
  return out;
}


enum class PolishMode { kOpen, kStick, kSlip };

// Scaled problem data shared by the interior-point method and the polish.
struct ScaledProblem {
  SparseMat s, j;   // S~, J~ (contact frame columns)
  VecX v_star, bias, compliance;
  std::vector<double> friction;
};

// Newton iterations on the KKT system with the contact modes held fixed:
//   S(v - v*) - J lambda = 0,
//   open: lambda_i = 0;  stick: y_i = 0;
//   slip: y_n = mu |y_t|,  lambda_t = -mu lambda_n y_t / |y_t|.
// Frictionless contacts use y_n = 0, lambda_t = 0 when active.
bool polish(const ScaledProblem& p, const std::vector<PolishMode>& modes, VecX& v, VecX& lambda) {
  const int n = static_cast<int>(p.s.rows());
  const int nc = static_cast<int>(modes.size());
  const int dim = n + 3 * nc;
  auto residual = [&](const VecX& vv, const VecX& ll, VecX& f, Triplets* trip) {
    f.resize(dim);
    f.head(n) = p.s * (vv - p.v_star) - p.j * ll;
    const VecX y = p.j.transpose() * vv - p.bias + p.compliance.cwiseProduct(ll);
    if (trip) {
      for (int k = 0; k < p.s.outerSize(); ++k)
        for (SparseMat::InnerIterator it(p.s, k); it; ++it) trip->emplace_back(it.row(), it.col(), it.value());
      for (int k = 0; k < p.j.outerSize(); ++k)
        for (SparseMat::InnerIterator it(p.j, k); it; ++it) trip->emplace_back(it.row(), n + k, -it.value());
    }
    // Adds coef * d(y_col) to row `row`.
    auto add_dy = [&](int row, int col, double coef) {
      if (!trip || coef == 0.0) return;
      for (SparseMat::InnerIterator it(p.j, col); it; ++it)
        trip->emplace_back(row, it.row(), coef * it.value());
      if (p.compliance[col] != 0.0) trip->emplace_back(row, n + col, coef * p.compliance[col]);
    };
    auto add_dl = [&](int row, int col, double coef) {
      if (trip && coef != 0.0) trip->emplace_back(row, n + col, coef);
    };
    for (int i = 0; i < nc; ++i) {
      const int r = n + 3 * i, c = 3 * i;
      const double mu = p.friction[i];
      if (modes[i] == PolishMode::kOpen) {
        for (int k = 0; k < 3; ++k) {
          f[r + k] = ll[c + k];
          add_dl(r + k, c + k, 1.0);
        }
      } else if (mu == 0.0) {
        for (int k = 0; k < 2; ++k) {
          f[r + k] = ll[c + k];
          add_dl(r + k, c + k, 1.0);
        }
        f[r + 2] = y[c + 2];
        add_dy(r + 2, c + 2, 1.0);
      } else if (modes[i] == PolishMode::kStick) {
        for (int k = 0; k < 3; ++k) {
          // A direction no DoF can move along carries no impulse.
          if (p.j.col(c + k).nonZeros() == 0 && p.compliance[c + k] == 0.0) {
            f[r + k] = ll[c + k];
            add_dl(r + k, c + k, 1.0);
            continue;
          }
          f[r + k] = y[c + k];
          add_dy(r + k, c + k, 1.0);
        }
      } else {
        const Eigen::Vector2d yt(y[c], y[c + 1]);
        const double rho = yt.norm();
        if (!(rho > 0.0)) return false;
        const Eigen::Vector2d u = yt / rho;
        const Eigen::Matrix2d pm = (Eigen::Matrix2d::Identity() - u * u.transpose()) / rho;
        const double ln = ll[c + 2];
        f[r] = y[c + 2] - mu * rho;
        add_dy(r, c + 2, 1.0);
        add_dy(r, c, -mu * u[0]);
        add_dy(r, c + 1, -mu * u[1]);
        for (int k = 0; k < 2; ++k) {
          f[r + 1 + k] = ll[c + k] + mu * ln * u[k];
          add_dl(r + 1 + k, c + k, 1.0);
          add_dl(r + 1 + k, c + 2, mu * u[k]);
          add_dy(r + 1 + k, c, mu * ln * pm(k, 0));
          add_dy(r + 1 + k, c + 1, mu * ln * pm(k, 1));
        }
      }
    }
    return true;
  };

  VecX f;
  if (!residual(v, lambda, f, nullptr)) return false;
  double norm = f.lpNorm<Eigen::Infinity>();
  for (int it = 0; it < 8 && norm > 0.0; ++it) {
    Triplets trip;
    residual(v, lambda, f, &trip);
    SparseMat jac(dim, dim);
    jac.setFromTriplets(trip.begin(), trip.end());
    Eigen::SparseLU<SparseMat> lu;
    lu.compute(jac);
    if (lu.info() != Eigen::Success) return false;
    const VecX step = lu.solve(-f);
    if (!step.allFinite()) return false;
    const VecX v_next = v + step.head(n);
    const VecX l_next = lambda + step.tail(3 * nc);
    VecX f_next;
    if (!residual(v_next, l_next, f_next, nullptr)) return false;
    const double next = f_next.lpNorm<Eigen::Infinity>();
    if (!(next < norm)) break;
    v = v_next;
    lambda = l_next;
    norm = next;
  }
  return true;
}

double certificate_worst(const ConeCertificate& c) {
  return std::max({c.momentum_residual, c.complementarity, c.relative_complementarity,
                   c.impulse_cone_violation, c.velocity_cone_violation});
}

ConeSolution run_interior_point(const ConeProblem& problem, const ConeSolverOptions& options) {
  const int n = problem.num_dofs();
  const int nc = problem.num_contacts();
  ConeSolution sol;
  sol.velocity = problem.free_velocity;
  sol.impulse = VecX::Zero(3 * nc);

  // Unit diagonal for S, unit column norm for J, O(1) velocities.
  VecX d(n);
  for (int i = 0; i < n; ++i) {
    const double sii = problem.schur.coeff(i, i);
    if (!(sii > 0.0))
      throw SimError(ErrorCode::kFactorizationFailure, "cone problem: S has a nonpositive diagonal");
    d[i] = 1.0 / std::sqrt(sii);
  }
  const SparseMat s_t = d.asDiagonal() * problem.schur * d.asDiagonal();
  SparseMat j_t = d.asDiagonal() * problem.jacobian;
  double cbar = 0.0;
  for (int k = 0; k < j_t.outerSize(); ++k) cbar = std::max(cbar, j_t.col(k).norm());
  if (cbar == 0.0) cbar = 1.0;
  j_t /= cbar;
  const VecX v_star_d = problem.free_velocity.cwiseQuotient(d);
  const double nu = std::max(v_star_d.lpNorm<Eigen::Infinity>(),
                             problem.bias.lpNorm<Eigen::Infinity>() / cbar);
  if (nu == 0.0) {
    sol.converged = true;
    sol.certificate = certify(problem, sol.velocity, sol.impulse);
    sol.modes = classify_contacts(problem, sol.velocity, sol.impulse);
    return sol;
  }
  const VecX v_star_t = v_star_d / nu;
  const VecX bias_t = problem.bias / (cbar * nu);
  const VecX comp_t = problem.compliance / (cbar * cbar);

  std::vector<Cone> cones;
  int m = 0;
  const MatX jd = MatX(j_t);
  VecX h;
  std::vector<double> hv;
  for (int i = 0; i < nc; ++i) {
    Cone c;
    c.contact = i;
    c.mu = problem.friction[i];
    c.dim = c.mu > 0.0 ? 3 : 1;
    c.offset = m;
    m += c.dim;
    const int cols[3] = {3 * i + 2, 3 * i, 3 * i + 1};
    const double scale[3] = {1.0, c.mu, c.mu};
    for (int r = 0; r < n; ++r) {
      bool used = false;
      for (int k = 0; k < c.dim; ++k) used = used || jd(r, cols[k]) != 0.0;
      if (used) c.rows.push_back(r);
    }
    c.b.resize(c.rows.size(), c.dim);
    for (size_t r = 0; r < c.rows.size(); ++r)
      for (int k = 0; k < c.dim; ++k) c.b(r, k) = scale[k] * jd(c.rows[r], cols[k]);
    for (int k = 0; k < c.dim; ++k) {
      c.d(k, k) = scale[k] * scale[k] * comp_t[cols[k]];
      hv.push_back(scale[k] * bias_t[cols[k]]);
    }
    cones.push_back(std::move(c));
  }
  h = Eigen::Map<VecX>(hv.data(), static_cast<int>(hv.size()));

  std::vector<Cone> cone_copy = cones;
  InteriorPoint ipm(s_t, v_star_t, std::move(cone_copy), h, m);
  const IpmResult res = ipm.solve(options);

  sol.iterations = res.iterations;
  const double lam_scale = nu / cbar;
  VecX lam_t = VecX::Zero(3 * nc);
  // Per contact, modes ranked by how close the final iterate is to each:
  // z ~ 0 (open), s ~ 0 (stick) or both on the cone boundary (slip).
  std::vector<std::array<PolishMode, 2>> ranked(nc);
  for (const Cone& c : cones) {
    const int i = c.contact;
    lam_t[3 * i + 2] = res.z[c.offset];
    if (c.dim == 3) {
      lam_t[3 * i] = c.mu * res.z[c.offset + 1];
      lam_t[3 * i + 1] = c.mu * res.z[c.offset + 2];
    }
    // z is weighted by the cone's compliance so both sides carry velocity units.
    const Vec3 zc = seg(res.z, c), sc = seg(res.s, c);
    const double nz_raw = zc.norm(), ns = sc.norm();
    const double nz = (1.0 + c.d.diagonal().head(c.dim).maxCoeff()) * nz_raw;
    std::array<std::pair<double, PolishMode>, 3> score = {{
        {nz / std::max(nz + ns, kTiny), PolishMode::kOpen},
        {ns / std::max(nz + ns, kTiny), PolishMode::kStick},
        {std::numeric_limits<double>::infinity(), PolishMode::kSlip},
    }};
    if (c.dim == 3 && nz_raw > 0.0 && ns > 0.0)
      score[2].first = std::max((zc[0] - zc.tail<2>().norm()) / nz_raw,
                                (sc[0] - sc.tail<2>().norm()) / ns);
    std::stable_sort(score.begin(), score.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    ranked[i] = {score[0].second, score[1].second};
  }
  sol.velocity = nu * d.cwiseProduct(res.v);
  sol.impulse = lam_scale * lam_t;
  sol.certificate = certify(problem, sol.velocity, sol.impulse);

  ScaledProblem sp{s_t, j_t, v_star_t, bias_t, comp_t, problem.friction};
  // Active-set rounds: polish with the current modes, then move every contact
  // whose polished state contradicts its mode.
  std::vector<PolishMode> modes(nc);
  for (int i = 0; i < nc; ++i) modes[i] = ranked[i][0];
  std::vector<std::vector<PolishMode>> tried;
  for (int round = 0; round < 6; ++round) {
    if (round > 0 && sol.certificate.passes(options.tolerance)) break;
    if (std::find(tried.begin(), tried.end(), modes) != tried.end()) {
      if (round == 1) {
        for (int i = 0; i < nc; ++i) modes[i] = ranked[i][1];
        if (std::find(tried.begin(), tried.end(), modes) != tried.end()) break;
      } else {
        break;
      }
    }
    tried.push_back(modes);
    VecX v_pol = res.v, l_pol = lam_t;
    if (!polish(sp, modes, v_pol, l_pol)) {
      for (int i = 0; i < nc; ++i) modes[i] = ranked[i][1];
      continue;
    }
    const VecX v_out = nu * d.cwiseProduct(v_pol);
    const VecX l_out = lam_scale * l_pol;
    const ConeCertificate cert = certify(problem, v_out, l_out);
    if (certificate_worst(cert) < certificate_worst(sol.certificate)) {
      sol.velocity = v_out;
      sol.impulse = l_out;
      sol.certificate = cert;
    }
    const VecX y = j_t.transpose() * v_pol - bias_t + comp_t.cwiseProduct(l_pol);
    const double lmax = std::max(l_pol.lpNorm<Eigen::Infinity>(), kTiny);
    const double ymax = std::max(y.lpNorm<Eigen::Infinity>(), kTiny);
    constexpr double kSlack = 1e-10;
    for (int i = 0; i < nc; ++i) {
      const double mu = problem.friction[i];
      const double ln = l_pol[3 * i + 2], lt = l_pol.segment<2>(3 * i).norm();
      const double yn = y[3 * i + 2], yt = y.segment<2>(3 * i).norm();
      switch (modes[i]) {
        case PolishMode::kOpen:
          if (yn < mu * yt - kSlack * ymax)
            modes[i] = (mu > 0.0 && yt > kSlack * ymax) ? PolishMode::kSlip : PolishMode::kStick;
          break;
        case PolishMode::kStick:
          if (ln < -kSlack * lmax) modes[i] = PolishMode::kOpen;
          else if (mu > 0.0 && lt > mu * ln + kSlack * lmax) modes[i] = PolishMode::kSlip;
          break;
        case PolishMode::kSlip:
          if (ln < -kSlack * lmax) modes[i] = PolishMode::kOpen;
          break;
      }
    }
  }
  sol.converged = sol.certificate.passes(options.tolerance);
  sol.modes = classify_contacts(problem, sol.velocity, sol.impulse);
  return sol;
}

}  // namespace

ConeSolution solve_cone_qp(const ConeProblem& problem, const ConeSolverOptions& options,
                           bool throw_on_failure) {
  problem.validate();
  if (problem.num_contacts() == 0) {
    ConeSolution sol;
    sol.velocity = problem.free_velocity;
    sol.impulse = VecX(0);
    sol.converged = true;
    sol.certificate = certify(problem, sol.velocity, sol.impulse);
    return sol;
  }
  ConeSolution sol = run_interior_point(problem, options);
  bool rigid = false;
  for (int k = 0; k < problem.compliance.size(); ++k) rigid = rigid || problem.compliance[k] == 0.0;
  if (!sol.converged && rigid && options.fallback_compliance > 0.0) {
    // Diagonal Delassus estimate sum_j J_jk^2 / S_jj.
    ConeProblem soft = problem;
    for (int k = 0; k < soft.jacobian.outerSize(); ++k) {
      double w = 0.0;
      for (SparseMat::InnerIterator it(soft.jacobian, k); it; ++it)
        w += it.value() * it.value() / problem.schur.coeff(it.row(), it.row());
      if (soft.compliance[k] == 0.0) soft.compliance[k] = options.fallback_compliance * w;
    }
    ConeSolution retry = run_interior_point(soft, options);
    retry.iterations += sol.iterations;
    retry.regularized = true;
    if (retry.converged || !sol.converged) sol = std::move(retry);
  }
  if (!sol.converged && throw_on_failure)
    throw SimError(ErrorCode::kMaxIterations, "cone solver did not converge");
  return sol;
}

}  // namespace filsim
