#include "filsim/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace filsim::oracles {

namespace {

// Plain row-major Cholesky, L L^T = a.
std::vector<double> cholesky(const MatX& a) {
  const int n = static_cast<int>(a.rows());
  std::vector<double> l(n * n, 0.0);
  for (int j = 0; j < n; ++j) {
    double d = a(j, j);
    for (int k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0)) throw SimError(ErrorCode::kFactorizationFailure, "oracle Cholesky");
    l[j * n + j] = std::sqrt(d);
    for (int i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (int k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / l[j * n + j];
    }
  }
  return l;
}

VecX cholesky_solve(const std::vector<double>& l, const VecX& b) {
  const int n = static_cast<int>(b.size());
  VecX y = b;
  for (int i = 0; i < n; ++i) {
    for (int k = 0; k < i; ++k) y[i] -= l[i * n + k] * y[k];
    y[i] /= l[i * n + i];
  }
  for (int i = n - 1; i >= 0; --i) {
    for (int k = i + 1; k < n; ++k) y[i] -= l[k * n + i] * y[k];
    y[i] /= l[i * n + i];
  }
  return y;
}

// Euclidean projection onto {|(x0, x1)| <= mu x2}.
void project_friction_cone(double mu, double* x) {
  const double n = x[2];
  if (mu <= 0.0) {
    x[0] = x[1] = 0.0;
    x[2] = std::max(n, 0.0);
    return;
  }
  const double t = std::hypot(x[0], x[1]);
  if (t <= mu * n) return;
  if (mu * t <= -n) {
    x[0] = x[1] = x[2] = 0.0;
    return;
  }
  const double n_new = (mu * t + n) / (1.0 + mu * mu);
  const double scale = mu * n_new / t;
  x[0] *= scale;
  x[1] *= scale;
  x[2] = n_new;
}

}  // namespace

VecX fd_gradient(const ScalarField& f, const VecX& q, const FdConfig& config) {
  VecX g(q.size());
  VecX x = q;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const double h = config.scale * std::max(1.0, std::abs(q[i]));
    x[i] = q[i] + h;
    const double fp = f(x);
    x[i] = q[i] - h;
    const double fm = f(x);
    x[i] = q[i];
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

MatX fd_jacobian(const VectorField& f, const VecX& q, const FdConfig& config) {
  MatX jac;
  VecX x = q;
  for (Eigen::Index i = 0; i < q.size(); ++i) {
    const double h = config.scale * std::max(1.0, std::abs(q[i]));
    x[i] = q[i] + h;
    const VecX fp = f(x);
    x[i] = q[i] - h;
    const VecX fm = f(x);
    x[i] = q[i];
    if (i == 0) jac.resize(fp.size(), q.size());
    jac.col(i) = (fp - fm) / (2.0 * h);
  }
  return jac;
}

MatX fd_hessian(const ScalarField& f, const VecX& q, double h) {
  const Eigen::Index n = q.size();
  MatX hess(n, n);
  VecX x = q;
  const double f0 = f(q);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = i; j < n; ++j) {
      if (i == j) {
        x[i] = q[i] + h;
        const double fp = f(x);
        x[i] = q[i] - h;
        const double fm = f(x);
        x[i] = q[i];
        hess(i, i) = (fp - 2.0 * f0 + fm) / (h * h);
        continue;
      }
      double acc = 0.0;
      for (int si : {1, -1}) {
        for (int sj : {1, -1}) {
          x[i] = q[i] + si * h;
          x[j] = q[j] + sj * h;
          acc += si * sj * f(x);
        }
      }
      x[i] = q[i];
      x[j] = q[j];
      hess(i, j) = hess(j, i) = acc / (4.0 * h * h);
    }
  }
  return hess;
}

double transported_twist_angle(const Vec3& d1_prev, const Vec3& t_prev, const Vec3& d1,
                               const Vec3& t) {
  const Vec3 axis = t_prev.cross(t);
  const double s = axis.norm();
  Mat3 rot = Mat3::Identity();
  if (s > 1e-15) {
    const double angle = std::atan2(s, t_prev.dot(t));
    rot = Eigen::AngleAxisd(angle, axis / s).toRotationMatrix();
  }
  const Vec3 moved = rot * d1_prev;
  // Angle of `moved` in the (d1, t x d1) plane, negated: rotation from moved to d1.
  const Vec3 d2 = t.cross(d1);
  return -std::atan2(moved.dot(d2), moved.dot(d1));
}

DenseConeResult dense_cone_qp(const ConeProblem& problem, double tol, int max_iterations) {
  const int n = problem.num_dofs();
  const int m = 3 * problem.num_contacts();
  DenseConeResult out;
  if (m == 0) {
    out.velocity = problem.free_velocity;
    out.impulse = VecX(0);
    return out;
  }
  const MatX jac = MatX(problem.jacobian);
  const auto l = cholesky(MatX(problem.schur));
  MatX s_inv_j(n, m);
  for (int c = 0; c < m; ++c) s_inv_j.col(c) = cholesky_solve(l, jac.col(c));
  MatX g = jac.transpose() * s_inv_j;
  for (int c = 0; c < m; ++c) g(c, c) += problem.compliance[c];
  const VecX c = jac.transpose() * problem.free_velocity - problem.bias;

  // Lipschitz constant by power iteration.
  VecX x = VecX::Ones(m);
  double lip = 0.0;
  for (int it = 0; it < 500; ++it) {
    const VecX y = g * x;
    const double norm = y.norm();
    if (norm == 0.0) break;
    lip = norm / x.norm();
    x = y / norm;
  }
  lip = std::max(lip * 1.01, 1e-300);

  auto project = [&](VecX& v) {
    for (int i = 0; i < problem.num_contacts(); ++i)
      project_friction_cone(problem.friction[i], v.data() + 3 * i);
  };
  auto stationarity = [&](const VecX& lam) {
    VecX step = lam - (g * lam + c) / lip;
    project(step);
    return lip * (lam - step).norm();
  };

  const double scale = 1.0 + c.norm();
  VecX lam = VecX::Zero(m), lam_prev = lam, y = lam;
  double t = 1.0;
  for (int it = 1; it <= max_iterations; ++it) {
    VecX next = y - (g * y + c) / lip;
    project(next);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    // Gradient-based adaptive restart.
    if ((y - next).dot(next - lam) > 0.0) {
      t = 1.0;
      y = next;
    } else {
      y = next + ((t - 1.0) / t_next) * (next - lam);
      t = t_next;
    }
    lam_prev = lam;
    lam = next;
    if (it % 10 == 0) {
      const double r = stationarity(lam);
      if (r <= tol * scale) {
        out.iterations = it;
        out.stationarity = r;
        out.impulse = lam;
        out.velocity = problem.free_velocity + s_inv_j * lam;
        return out;
      }
    }
  }
  throw SimError(ErrorCode::kMaxIterations, "dense cone QP did not reach stationarity");
}

namespace {

double box_distance_by_faces(const Box& box, const Pose& pose, const Vec3& p) {
  const Vec3 x = pose.rotation.transpose() * (p - pose.translation);
  const Vec3& h = box.half_extents;
  bool inside = true;
  double deepest = -1e300;
  for (int k = 0; k < 3; ++k) {
    inside = inside && std::abs(x[k]) <= h[k];
    deepest = std::max(deepest, std::abs(x[k]) - h[k]);
  }
  if (inside) return deepest;
  // Distance to each face rectangle; the minimum is the distance to the box.
  double best = 1e300;
  for (int k = 0; k < 3; ++k) {
    for (double side : {-1.0, 1.0}) {
      double d2 = (x[k] - side * h[k]) * (x[k] - side * h[k]);
      for (int o = 0; o < 3; ++o) {
        if (o == k) continue;
        const double excess = std::max(0.0, std::abs(x[o]) - h[o]);
        d2 += excess * excess;
      }
      best = std::min(best, std::sqrt(d2));
    }
  }
  return best;
}

}  // namespace

double sampled_capsule_box_distance(const Capsule& capsule, const Pose& capsule_pose,
                                    const Box& box, const Pose& box_pose, int axis_samples) {
  // A ball's signed distance to a convex body is its center's minus its radius.
  double best = 1e300;
  for (int a = 0; a < axis_samples; ++a) {
    const double z = -capsule.half_length + 2.0 * capsule.half_length * a / (axis_samples - 1);
    const Vec3 c = capsule_pose.rotation * Vec3(0, 0, z) + capsule_pose.translation;
    best = std::min(best, box_distance_by_faces(box, box_pose, c) - capsule.radius);
  }
  return best;
}

std::vector<CandidatePair> brute_force_pairs(const std::vector<CollisionObject>& objects,
                                             double margin, int exclusion) {
  auto bounds = [&](const Shape& s, Vec3& lo, Vec3& hi) {
    const Mat3& r = s.pose.rotation;
    const Vec3& t = s.pose.translation;
    if (const auto* sp = std::get_if<Sphere>(&s.geometry)) {
      lo = t.array() - sp->radius;
      hi = t.array() + sp->radius;
    } else if (const auto* c = std::get_if<Capsule>(&s.geometry)) {
      const Vec3 a = t + r.col(2) * c->half_length, b = t - r.col(2) * c->half_length;
      for (int k = 0; k < 3; ++k) {
        lo[k] = std::min(a[k], b[k]) - c->radius;
        hi[k] = std::max(a[k], b[k]) + c->radius;
      }
    } else if (const auto* bx = std::get_if<Box>(&s.geometry)) {
      lo = hi = t;
      for (int i = 0; i < 8; ++i) {
        const Vec3 sgn((i & 1) ? 1 : -1, (i & 2) ? 1 : -1, (i & 4) ? 1 : -1);
        const Vec3 v = t + r * sgn.cwiseProduct(bx->half_extents);
        lo = lo.cwiseMin(v);
        hi = hi.cwiseMax(v);
      }
    } else {
      lo = Vec3::Constant(-1e300);
      hi = Vec3::Constant(1e300);
      for (int k = 0; k < 3; ++k) {
        if (r(k, 2) == 1.0) hi[k] = t[k];
        if (r(k, 2) == -1.0) lo[k] = t[k];
      }
    }
    lo.array() -= margin;
    hi.array() += margin;
  };
  std::vector<CandidatePair> out;
  const int n = static_cast<int>(objects.size());
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const CollisionObject& a = objects[i];
      const CollisionObject& b = objects[j];
      Vec3 la, ha, lb, hb;
      bounds(a.shape, la, ha);
      bounds(b.shape, lb, hb);
      bool overlap = true;
      for (int k = 0; k < 3; ++k) overlap = overlap && la[k] <= hb[k] && lb[k] <= ha[k];
      if (!overlap) continue;
      if (!a.dynamic && !b.dynamic) continue;
      if (a.group >= 0 && a.group == b.group) {
        if (!a.self_collision) continue;
        int d = std::abs(a.segment - b.segment);
        if (a.closed) d = std::min(d, a.group_edges - d);
        if (d <= exclusion) continue;
      }
      out.push_back({i, j});
    }
  }
  return out;
}

double series_spring_sphere_slab_force(double radius, double p_sphere, double p_slab,
                                       double slab_depth, double depth) {
  const double g_sphere = p_sphere / radius;
  const double g_slab = p_slab / slab_depth;
  const double g = g_sphere * g_slab / (g_sphere + g_slab);
  // Overlap at distance rho from the axis: depth - (R - sqrt(R^2 - rho^2)).
  const double rho_max = std::sqrt(std::max(0.0, 2.0 * radius * depth - depth * depth));
  const int n = 20000;
  double force = 0.0;
  for (int i = 0; i < n; ++i) {
    const double rho = (i + 0.5) * rho_max / n;
    const double overlap = depth - (radius - std::sqrt(radius * radius - rho * rho));
    force += g * std::max(0.0, overlap) * 2.0 * std::numbers::pi * rho * (rho_max / n);
  }
  return force;
}

double capstan_ratio(double mu, double phi) { return std::exp(mu * phi); }

}  // namespace filsim::oracles
