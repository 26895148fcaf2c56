#include "filsim/stepper.hpp"

#include <algorithm>
#include <cmath>

namespace filsim {

namespace {

Quat quat_rate(const Vec3& omega, const Quat& q) {
  const Quat w(0.0, omega.x(), omega.y(), omega.z());
  Quat r = w * q;
  r.coeffs() *= 0.5;
  return r;
}

Quat quat_add(const Quat& q, const Quat& dq, double h) {
  Quat r;
  r.coeffs() = q.coeffs() + h * dq.coeffs();
  return r.normalized();
}

int attachment_dof(const DofLayout& layout, const Attachment& a) {
  if (a.body >= 0) return layout.body_offsets[a.body] < 0 ? -1 : layout.body_offsets[a.body] + 3;
  return layout.rod_offsets[a.rod] + RodState::node_dof(a.node);
}

Vec3 attachment_position(const SystemState& s, const Attachment& a) {
  if (a.body >= 0) return s.bodies[a.body].position;
  return s.rods[a.rod].state.nodes[a.node];
}

void check_attachment(const SystemState& s, const Attachment& a) {
  if (a.body >= 0) {
    if (a.body >= static_cast<int>(s.bodies.size()))
      throw SimError(ErrorCode::kValidationError, "attachment names a missing body");
    return;
  }
  if (a.rod < 0 || a.rod >= static_cast<int>(s.rods.size()))
    throw SimError(ErrorCode::kValidationError, "attachment names a missing rod");
  if (a.node < 0 || a.node >= s.rods[a.rod].state.num_nodes())
    throw SimError(ErrorCode::kValidationError, "attachment names a missing node");
}

/// Point on segment a-b closest to p, as a parameter in [0, 1].
double segment_param(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 d = b - a;
  const double l2 = d.squaredNorm();
  if (l2 <= 0.0) return 0.5;
  return std::clamp((p - a).dot(d) / l2, 0.0, 1.0);
}

}  // namespace

// ---------------------------------------------------------------------------

Pose RigidBody::pose() const {
  Pose p;
  p.rotation = orientation.normalized().toRotationMatrix();
  p.translation = position;
  return p;
}

Shape RigidBody::shape() const { return Shape{geometry, pose()}; }

Mat3 RigidBody::world_inertia() const {
  const Mat3 r = orientation.normalized().toRotationMatrix();
  return r * inertia * r.transpose();
}

Vec3 ForceRamp::force(double t) const {
  const double mag = std::min(initial + rate * t, limit);
  return direction * mag;
}

DofLayout SystemState::layout() const {
  DofLayout l;
  int off = 0;
  for (const RodBody& r : rods) {
    l.rod_offsets.push_back(off);
    l.rod_nodes.push_back(r.state.num_nodes());
    off += r.state.num_dofs();
  }
  for (const RigidBody& b : bodies) {
    l.body_offsets.push_back(b.has_dofs() ? off : -1);
    if (b.has_dofs()) off += 6;
  }
  l.num_dofs = off;
  return l;
}

VecX SystemState::coordinates() const {
  std::vector<double> q;
  for (const RodBody& r : rods) {
    const VecX qr = pack_coordinates(r.state);
    q.insert(q.end(), qr.data(), qr.data() + qr.size());
  }
  for (const RigidBody& b : bodies) {
    if (!b.has_dofs()) continue;
    q.insert(q.end(), {b.orientation.w(), b.orientation.x(), b.orientation.y(),
                       b.orientation.z(), b.position.x(), b.position.y(), b.position.z()});
  }
  return Eigen::Map<VecX>(q.data(), static_cast<int>(q.size()));
}

VecX SystemState::velocities() const {
  const DofLayout l = layout();
  VecX v(l.num_dofs);
  for (size_t r = 0; r < rods.size(); ++r)
    v.segment(l.rod_offsets[r], rods[r].state.num_dofs()) = rods[r].velocity;
  for (size_t b = 0; b < bodies.size(); ++b) {
    if (l.body_offsets[b] < 0) continue;
    v.segment<3>(l.body_offsets[b]) = bodies[b].angular_velocity;
    v.segment<3>(l.body_offsets[b] + 3) = bodies[b].linear_velocity;
  }
  return v;
}

void SystemState::set_velocities(const VecX& v) {
  const DofLayout l = layout();
  if (v.size() != l.num_dofs)
    throw SimError(ErrorCode::kTopologyMismatch, "velocity vector has the wrong length");
  for (size_t r = 0; r < rods.size(); ++r)
    rods[r].velocity = v.segment(l.rod_offsets[r], rods[r].state.num_dofs());
  for (size_t b = 0; b < bodies.size(); ++b) {
    if (l.body_offsets[b] < 0) continue;
    bodies[b].angular_velocity = v.segment<3>(l.body_offsets[b]);
    bodies[b].linear_velocity = v.segment<3>(l.body_offsets[b] + 3);
  }
}

std::vector<std::pair<int, double>> SystemState::prescribed() const {
  const DofLayout l = layout();
  std::vector<std::pair<int, double>> out;
  for (size_t r = 0; r < rods.size(); ++r) {
    std::vector<int> dofs = rods[r].fixed_dofs;
    std::sort(dofs.begin(), dofs.end());
    dofs.erase(std::unique(dofs.begin(), dofs.end()), dofs.end());
    for (int d : dofs) out.emplace_back(l.rod_offsets[r] + d, 0.0);
  }
  for (size_t b = 0; b < bodies.size(); ++b) {
    if (bodies[b].motion != BodyMotion::kKinematic) continue;
    for (int k = 0; k < 3; ++k) {
      out.emplace_back(l.body_offsets[b] + k, bodies[b].angular_velocity[k]);
    }
    for (int k = 0; k < 3; ++k) {
      out.emplace_back(l.body_offsets[b] + 3 + k, bodies[b].linear_velocity[k]);
    }
  }
  return out;
}

SparseMat SystemState::mass_matrix() const {
  const DofLayout l = layout();
  std::vector<Eigen::Triplet<double>> trip;
  for (size_t r = 0; r < rods.size(); ++r) {
    const VecX m = lumped_mass(rods[r].state, rods[r].params);
    for (int i = 0; i < m.size(); ++i) trip.emplace_back(l.rod_offsets[r] + i, l.rod_offsets[r] + i, m[i]);
  }
  for (size_t b = 0; b < bodies.size(); ++b) {
    const int o = l.body_offsets[b];
    if (o < 0) continue;
    const Mat3 iw = bodies[b].world_inertia();
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) trip.emplace_back(o + i, o + j, iw(i, j));
    for (int i = 0; i < 3; ++i) trip.emplace_back(o + 3 + i, o + 3 + i, bodies[b].mass);
  }
  SparseMat m(l.num_dofs, l.num_dofs);
  m.setFromTriplets(trip.begin(), trip.end());
  return m;
}

void SystemState::validate() const {
  for (const RodBody& r : rods) {
    r.params.validate();
    if (r.velocity.size() != r.state.num_dofs())
      throw SimError(ErrorCode::kValidationError, "rod velocity has the wrong length");
    for (int d : r.fixed_dofs)
      if (d < 0 || d >= r.state.num_dofs())
        throw SimError(ErrorCode::kValidationError, "fixed DoF out of range");
    if (r.friction < 0.0) throw SimError(ErrorCode::kValidationError, "friction must be >= 0");
  }
  for (const RigidBody& b : bodies) {
    Shape{b.geometry, b.pose()}.validate();
    if (b.motion == BodyMotion::kDynamic) {
      if (!(b.mass > 0.0)) throw SimError(ErrorCode::kValidationError, "body mass must be positive");
      if (b.inertia.llt().info() != Eigen::Success ||
          !(b.inertia - b.inertia.transpose()).isZero(1e-12 * b.inertia.norm()))
        throw SimError(ErrorCode::kValidationError, "body inertia must be SPD");
      if (std::holds_alternative<HalfSpace>(b.geometry))
        throw SimError(ErrorCode::kValidationError, "a half-space cannot be dynamic");
    }
    if (b.friction < 0.0 || b.p_max < 0.0)
      throw SimError(ErrorCode::kValidationError, "friction and p_max must be >= 0");
  }
  for (const PdController& c : controllers) {
    check_attachment(*this, c.point);
    if (c.kp < 0.0 || c.kd < 0.0)
      throw SimError(ErrorCode::kValidationError, "PD gains must be >= 0");
    if (c.point.body >= 0 && !bodies[c.point.body].has_dofs())
      throw SimError(ErrorCode::kValidationError, "PD controller on a fixed body");
  }
  for (const ForceRamp& f : ramps) check_attachment(*this, f.point);
}

void StepperConfig::validate() const {
  if (!(dt > 0.0)) throw SimError(ErrorCode::kValidationError, "dt must be positive");
  if (!(theta >= 0.0 && theta <= 1.0) || !(theta_vq >= 0.0 && theta_vq <= 1.0))
    throw SimError(ErrorCode::kValidationError, "theta and theta_vq must lie in [0, 1]");
  if (!(newton_tolerance > 0.0))
    throw SimError(ErrorCode::kValidationError, "Newton tolerance must be positive");
  if (newton_max_iterations < 1)
    throw SimError(ErrorCode::kValidationError, "Newton needs at least one iteration");
  if (contact_newton_iterations < 1)
    throw SimError(ErrorCode::kValidationError, "the contact solve needs at least one pass");
  if (!(regularization > 0.0))
    throw SimError(ErrorCode::kValidationError, "regularization must be positive");
}

// ---------------------------------------------------------------------------

SystemEnergy system_energy(const SystemState& s) {
  SystemEnergy e;
  for (const RodBody& r : s.rods) {
    const ElasticEnergy el = elastic_energy(r.state, r.params);
    e.stretching += el.stretching;
    e.twisting += el.twisting;
    e.bending += el.bending;
    const VecX m = lumped_mass(r.state, r.params);
    e.kinetic += 0.5 * r.velocity.dot(m.cwiseProduct(r.velocity));
    for (int k = 0; k < r.state.num_nodes(); ++k)
      e.gravity -= m[RodState::node_dof(k)] * s.gravity.dot(r.state.nodes[k]);
  }
  for (const RigidBody& b : s.bodies) {
    if (b.motion != BodyMotion::kDynamic) continue;
    e.kinetic += 0.5 * b.mass * b.linear_velocity.squaredNorm() +
                 0.5 * b.angular_velocity.dot(b.world_inertia() * b.angular_velocity);
    e.gravity -= b.mass * s.gravity.dot(b.position);
  }
  return e;
}

Vec3 linear_momentum(const SystemState& s) {
  Vec3 p = Vec3::Zero();
  for (const RodBody& r : s.rods) {
    const VecX m = lumped_mass(r.state, r.params);
    for (int k = 0; k < r.state.num_nodes(); ++k) {
      const int o = RodState::node_dof(k);
      p += m[o] * r.velocity.segment<3>(o);
    }
  }
  for (const RigidBody& b : s.bodies)
    if (b.motion == BodyMotion::kDynamic) p += b.mass * b.linear_velocity;
  return p;
}

SystemState theta_state(const SystemState& s0, const VecX& v, const StepperConfig& c) {
  const DofLayout l = s0.layout();
  const VecX v0 = s0.velocities();
  const VecX vq = c.theta_vq * v + (1.0 - c.theta_vq) * v0;
  const double h = c.theta * c.dt;
  SystemState s = s0;
  for (size_t r = 0; r < s.rods.size(); ++r) {
    const int n = s0.rods[r].state.num_dofs();
    const VecX q = pack_coordinates(s0.rods[r].state) + h * vq.segment(l.rod_offsets[r], n);
    s.rods[r].state = with_coordinates(s0.rods[r].state, std::span<const double>(q.data(), n));
  }
  for (size_t b = 0; b < s.bodies.size(); ++b) {
    if (l.body_offsets[b] < 0) continue;
    s.bodies[b].position += h * vq.segment<3>(l.body_offsets[b] + 3);
  }
  s.time = s0.time + h;
  return s;
}

namespace {

struct ForceTerms {
  VecX k;
  double scale = 0.0;
};

ForceTerms force_terms(const SystemState& s, const VecX& vt, double t) {
  const DofLayout l = s.layout();
  ForceTerms f;
  f.k = VecX::Zero(l.num_dofs);
  auto note = [&](double x) { f.scale = std::max(f.scale, std::abs(x)); };
  for (size_t r = 0; r < s.rods.size(); ++r) {
    const RodBody& rod = s.rods[r];
    const int o = l.rod_offsets[r], n = rod.state.num_dofs();
    const VecX vr = vt.segment(o, n);
    const VecX m = lumped_mass(rod.state, rod.params);
    VecX kr = -elastic_gradient(rod.state, rod.params);
    f.scale = std::max(f.scale, kr.cwiseAbs().maxCoeff());
    if (rod.params.rayleigh_alpha != 0.0) kr -= rod.params.rayleigh_alpha * m.cwiseProduct(vr);
    if (rod.params.rayleigh_beta != 0.0)
      kr -= rod.params.rayleigh_beta * (elastic_hessian(rod.state, rod.params) * vr);
    for (int k = 0; k < rod.state.num_nodes(); ++k) {
      const int d = RodState::node_dof(k);
      kr.segment<3>(d) += m[d] * s.gravity;
      note(m[d] * s.gravity.norm());
    }
    f.k.segment(o, n) += kr;
  }
  for (size_t b = 0; b < s.bodies.size(); ++b) {
    const int o = l.body_offsets[b];
    if (o < 0 || s.bodies[b].motion != BodyMotion::kDynamic) continue;
    const RigidBody& body = s.bodies[b];
    const Vec3 w = vt.segment<3>(o);
    const Vec3 gyro = -w.cross(body.world_inertia() * w);
    f.k.segment<3>(o) += gyro;
    f.k.segment<3>(o + 3) += body.mass * s.gravity;
    note(gyro.norm());
    note(body.mass * s.gravity.norm());
  }
  for (const PdController& c : s.controllers) {
    const int d = attachment_dof(l, c.point);
    const Vec3 pd = c.kp * (c.target(t) - attachment_position(s, c.point)) +
                    c.kd * (c.anchor_velocity - vt.segment<3>(d));
    f.k.segment<3>(d) += pd;
    note(pd.norm());
  }
  for (const ForceRamp& ramp : s.ramps) {
    const int d = attachment_dof(l, ramp.point);
    if (d < 0) continue;
    const Vec3 fr = ramp.force(t);
    f.k.segment<3>(d) += fr;
    note(fr.norm());
  }
  return f;
}

}  // namespace

VecX assemble_forces(const SystemState& at_theta, const VecX& v_theta, double t) {
  return force_terms(at_theta, v_theta, t).k;
}

SystemState advance_positions(const SystemState& s0, const VecX& v, const StepperConfig& c) {
  const DofLayout l = s0.layout();
  const VecX v0 = s0.velocities();
  const VecX vq = c.theta_vq * v + (1.0 - c.theta_vq) * v0;
  SystemState s = s0;
  for (size_t r = 0; r < s.rods.size(); ++r) {
    const int n = s0.rods[r].state.num_dofs();
    const VecX q = pack_coordinates(s0.rods[r].state) + c.dt * vq.segment(l.rod_offsets[r], n);
    s.rods[r].state = with_coordinates(s0.rods[r].state, std::span<const double>(q.data(), n));
  }
  for (size_t b = 0; b < s.bodies.size(); ++b) {
    const int o = l.body_offsets[b];
    if (o < 0) continue;
    RigidBody& body = s.bodies[b];
    const Vec3 w = vq.segment<3>(o);
    const Quat q0 = s0.bodies[b].orientation.normalized();
    const Quat q1 = quat_add(q0, quat_rate(w, q0), c.dt);
    Quat qt;
    qt.coeffs() = c.theta * q1.coeffs() + (1.0 - c.theta) * q0.coeffs();
    qt.normalize();
    body.orientation = quat_add(q0, quat_rate(w, qt), c.dt);
    body.position += c.dt * vq.segment<3>(o + 3);
  }
  s.set_velocities(v);
  s.time = s0.time + c.dt;
  return s;
}

// ---------------------------------------------------------------------------

Stepper::Stepper(StepperConfig config, ContactConfig contact)
    : config_(config), contact_(contact) {
  config_.validate();
  if (contact_.margin < 0.0 || contact_.bias_scale < 0.0 || contact_.exclusion < 0)
    throw SimError(ErrorCode::kValidationError, "contact margin, bias scale and exclusion must be >= 0");
}

MomentumResidual Stepper::residual(const SystemState& s0, const VecX& v) const {
  const VecX v0 = s0.velocities();
  const VecX vt = config_.theta * v + (1.0 - config_.theta) * v0;
  const SystemState st = theta_state(s0, v, config_);
  ForceTerms f = force_terms(st, vt, st.time);
  MomentumResidual out;
  out.forces = f.k;
  out.residual = s0.mass_matrix() * (v - v0) - config_.dt * f.k;
  for (const auto& [dof, value] : s0.prescribed()) out.residual[dof] = 0.0;
  out.force_scale = config_.dt * f.scale;
  return out;
}

void Stepper::ensure_pattern(const SystemState& s0) {
  const DofLayout l = s0.layout();
  std::vector<int> key = {l.num_dofs};
  for (const RodBody& r : s0.rods) key.insert(key.end(), {r.state.num_nodes(), r.state.closed ? 1 : 0});
  for (const RigidBody& b : s0.bodies) key.push_back(static_cast<int>(b.motion));
  for (const auto& [dof, value] : s0.prescribed()) key.push_back(dof);
  if (key == layout_key_) return;
  layout_key_ = key;

  std::vector<Eigen::Triplet<double>> trip;
  for (int i = 0; i < l.num_dofs; ++i) trip.emplace_back(i, i, 0.0);
  for (size_t r = 0; r < s0.rods.size(); ++r) {
    const int o = l.rod_offsets[r];
    for (const HessianBlock& blk : elastic_hessian_blocks(s0.rods[r].state, s0.rods[r].params))
      for (int a : blk.dofs)
        for (int b : blk.dofs) trip.emplace_back(o + a, o + b, 0.0);
  }
  for (size_t b = 0; b < s0.bodies.size(); ++b) {
    const int o = l.body_offsets[b];
    if (o < 0) continue;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) trip.emplace_back(o + i, o + j, 0.0);
  }
  jac_.resize(l.num_dofs, l.num_dofs);
  jac_.setFromTriplets(trip.begin(), trip.end());
  jac_.makeCompressed();
  diag_index_.assign(l.num_dofs, -1);
  for (int c = 0; c < jac_.outerSize(); ++c)
    for (int p = jac_.outerIndexPtr()[c]; p < jac_.outerIndexPtr()[c + 1]; ++p)
      if (jac_.innerIndexPtr()[p] == c) diag_index_[c] = p;
  shifted_ = jac_;
  llt_.analyzePattern(shifted_);
  last_good_shift_ = 0.0;
}

void Stepper::fill_jacobian(const SystemState& s0, const VecX& v) {
  ensure_pattern(s0);
  const DofLayout l = s0.layout();
  const double dt = config_.dt, th = config_.theta, tvq = config_.theta_vq;
  std::fill(jac_.valuePtr(), jac_.valuePtr() + jac_.nonZeros(), 0.0);
  const SystemState st = theta_state(s0, v, config_);
  for (size_t r = 0; r < s0.rods.size(); ++r) {
    const RodBody& rod = st.rods[r];
    const int o = l.rod_offsets[r];
    const VecX m = lumped_mass(rod.state, rod.params);
    const double cm = 1.0 + rod.params.rayleigh_alpha * th * dt;
    const double ck = th * dt * (rod.params.rayleigh_beta + tvq * dt);
    for (int i = 0; i < m.size(); ++i) jac_.valuePtr()[diag_index_[o + i]] += cm * m[i];
    for (const HessianBlock& blk : elastic_hessian_blocks(rod.state, rod.params)) {
      const int n = static_cast<int>(blk.dofs.size());
      for (int a = 0; a < n; ++a)
        for (int b = 0; b < n; ++b)
          jac_.coeffRef(o + blk.dofs[a], o + blk.dofs[b]) +=
              ck * 0.5 * (blk.block(a, b) + blk.block(b, a));
    }
  }
  for (size_t b = 0; b < s0.bodies.size(); ++b) {
    const int o = l.body_offsets[b];
    if (o < 0) continue;
    const Mat3 iw = s0.bodies[b].world_inertia();
    for (int i = 0; i < 3; ++i) {
      for (int j = 0; j < 3; ++j) jac_.coeffRef(o + i, o + j) += iw(i, j);
      jac_.valuePtr()[diag_index_[o + 3 + i]] += s0.bodies[b].mass;
    }
  }
  for (const PdController& c : s0.controllers) {
    const int d = attachment_dof(l, c.point);
    const double stiff = dt * (c.kp * th * tvq * dt + c.kd * th);
    for (int i = 0; i < 3; ++i) jac_.valuePtr()[diag_index_[d + i]] += stiff;
  }
  const auto pres = s0.prescribed();
  if (!pres.empty()) {
    std::vector<char> mask(l.num_dofs, 0);
    for (const auto& [dof, value] : pres) mask[dof] = 1;
    for (int c = 0; c < jac_.outerSize(); ++c)
      for (int p = jac_.outerIndexPtr()[c]; p < jac_.outerIndexPtr()[c + 1]; ++p) {
        const int r = jac_.innerIndexPtr()[p];
        if (mask[r] || mask[c]) jac_.valuePtr()[p] = (r == c) ? 1.0 : 0.0;
      }
  }
}

const SparseMat& Stepper::momentum_jacobian(const SystemState& s0, const VecX& v) {
  fill_jacobian(s0, v);
  return jac_;
}

bool Stepper::factor_shifted(double shift) {
  std::copy(jac_.valuePtr(), jac_.valuePtr() + jac_.nonZeros(), shifted_.valuePtr());
  for (int i = 0; i < jac_.rows(); ++i) shifted_.valuePtr()[diag_index_[i]] += shift;
  llt_.factorize(shifted_);
  return llt_.info() == Eigen::Success;
}

void Stepper::regularize() {
  double dmax = 0.0;
  for (int i = 0; i < jac_.rows(); ++i) dmax = std::max(dmax, std::abs(jac_.valuePtr()[diag_index_[i]]));
  if (dmax == 0.0) dmax = 1.0;
  double eps = std::max(config_.regularization * dmax, 0.25 * last_good_shift_);
  for (int attempt = 0; attempt < 200; ++attempt, eps *= 2.0) {
    if (factor_shifted(eps)) {
      shift_ = eps;
      last_good_shift_ = eps;
      return;
    }
  }
  throw SimError(ErrorCode::kFactorizationFailure, "momentum Jacobian could not be regularized");
}

VecX Stepper::solve_free_motion(const SystemState& s0, int* iterations, double* final_residual) {
  VecX v = s0.velocities();
  for (const auto& [dof, value] : s0.prescribed()) v[dof] = value;
  MomentumResidual r = residual(s0, v);
  double norm = r.residual.lpNorm<Eigen::Infinity>();
  int it = 0;
  for (; norm > config_.newton_tolerance; ++it) {
    if (it >= config_.newton_max_iterations)
      throw SimError(ErrorCode::kNewtonDivergence,
                     "free motion did not converge, residual " + std::to_string(norm));
    fill_jacobian(s0, v);
    if (!factor_shifted(0.0)) regularize();
    const VecX dv = -llt_.solve(r.residual);
    const double merit = r.residual.norm();
    double alpha = 1.0;
    bool accepted = false;
    for (; alpha >= std::ldexp(1.0, -20); alpha *= 0.5) {
      const VecX trial = v + alpha * dv;
      MomentumResidual rt;
      try {
        rt = residual(s0, trial);
      } catch (const SimError& e) {
        if (e.code() != ErrorCode::kAntiparallelTangents && e.code() != ErrorCode::kDegenerateEdge)
          throw;
        continue;
      }
      if (rt.residual.allFinite() && rt.residual.norm() < merit) {
        v = trial;
        r = std::move(rt);
        accepted = true;
        break;
      }
    }
    if (!accepted) {
      // Residual is at the roundoff level of the force terms.
      if (norm <= 1e-13 * r.force_scale * std::sqrt(static_cast<double>(v.size()))) break;
      throw SimError(ErrorCode::kNewtonDivergence,
                     "line search failed, residual " + std::to_string(norm));
    }
    norm = r.residual.lpNorm<Eigen::Infinity>();
  }
  if (iterations) *iterations = it;
  if (final_residual) *final_residual = norm;
  return v;
}

SparseMat Stepper::linearize_momentum(const SystemState& s0, const VecX& v_star) {
  fill_jacobian(s0, v_star);
  regularize();
  return shifted_;
}

// ---------------------------------------------------------------------------

std::vector<PressureBody> Stepper::pressure_bodies(const SystemState& s) const {
  pressure_cache_.resize(s.bodies.size());
  std::vector<PressureBody> out(s.bodies.size());
  for (size_t b = 0; b < s.bodies.size(); ++b) {
    const RigidBody& body = s.bodies[b];
    if (!(body.p_max > 0.0)) continue;
    if (!pressure_cache_[b])
      pressure_cache_[b] = build_pressure_body(Shape{body.geometry, Pose{}}, body.p_max,
                                               contact_.patch_resolution, contact_.slab_depth);
    out[b] = pressure_cache_[b]->transformed(body.pose());
  }
  return out;
}

std::vector<ContactPoint> Stepper::detect_contacts(const SystemState& s) const {
  std::vector<CollisionObject> objects;
  for (size_t r = 0; r < s.rods.size(); ++r) {
    const RodBody& rod = s.rods[r];
    const RodKinematicsCache frames = compute_frames(rod.state);
    for (int j = 0; j < rod.state.num_edges(); ++j) {
      CollisionObject o;
      const Vec3& a = rod.state.nodes[j];
      const Vec3& b = rod.state.nodes[rod.state.next_node(j)];
      if (const auto* box = std::get_if<RectangularSection>(&rod.params.section))
        o.shape = segment_box(a, b, frames.m1[j], box->width, box->height);
      else
        o.shape = segment_capsule(a, b, rod.params.contact_radius());
      o.owner = ContactSide{ContactSide::Kind::kRodSegment, static_cast<int>(r), j};
      o.group = static_cast<int>(r);
      o.segment = j;
      o.group_edges = rod.state.num_edges();
      o.closed = rod.state.closed;
      o.self_collision = rod.self_collision;
      o.friction = rod.friction;
      objects.push_back(std::move(o));
    }
  }
  const int first_body = static_cast<int>(objects.size());
  for (size_t b = 0; b < s.bodies.size(); ++b) {
    CollisionObject o;
    o.shape = s.bodies[b].shape();
    o.owner = ContactSide{ContactSide::Kind::kBody, static_cast<int>(b)};
    o.dynamic = s.bodies[b].motion == BodyMotion::kDynamic;
    o.friction = s.bodies[b].friction;
    objects.push_back(std::move(o));
  }

  const bool patches = contact_.model == ContactModel::kPatch;
  std::vector<PressureBody> fields;
  if (patches) fields = pressure_bodies(s);

  auto fill_side = [&](ContactSide& side, const CollisionObject& o, const Vec3& p) {
    side = o.owner;
    if (side.kind == ContactSide::Kind::kRodSegment) {
      const RodState& rs = s.rods[side.index].state;
      side.param = segment_param(p, rs.nodes[side.segment], rs.nodes[rs.next_node(side.segment)]);
    } else {
      side.offset = p - s.bodies[side.index].position;
    }
  };

  std::vector<ContactPoint> contacts;
  for (const CandidatePair& pair :
       filament_self_and_body_pairs(objects, contact_.margin, contact_.exclusion)) {
    const CollisionObject& oa = objects[pair.first];
    const CollisionObject& ob = objects[pair.second];
    std::vector<ContactPoint> found;
    const bool both_bodies = pair.first >= first_body && pair.second >= first_body;
    if (patches && both_bodies && s.bodies[oa.owner.index].p_max > 0.0 &&
        s.bodies[ob.owner.index].p_max > 0.0)
      found = patch_contact_query(fields[oa.owner.index], fields[ob.owner.index]);
    else
      found = point_contact_query(oa.shape, ob.shape, contact_.margin);
    for (ContactPoint& c : found) {
      fill_side(c.a, oa, c.position);
      fill_side(c.b, ob, c.position);
      c.friction = combine_friction(oa.friction, ob.friction);
      for (const FrictionOverride& f : contact_.friction_pairs) {
        const bool ab = f.kind_a == c.a.kind && f.index_a == c.a.index && f.kind_b == c.b.kind &&
                        f.index_b == c.b.index;
        const bool ba = f.kind_a == c.b.kind && f.index_a == c.b.index && f.kind_b == c.a.kind &&
                        f.index_b == c.a.index;
        if (ab || ba) c.friction = f.mu;
      }
      contacts.push_back(std::move(c));
    }
  }
  return contacts;
}

Vec3 body_contact_impulse(const StepStats& stats, int body) {
  Vec3 total = Vec3::Zero();
  for (size_t i = 0; i < stats.contacts.size(); ++i) {
    const ContactPoint& c = stats.contacts[i];
    const Vec3 f = contact_frame(c.normal) * stats.impulses.segment<3>(3 * i);
    if (c.a.kind == ContactSide::Kind::kBody && c.a.index == body) total += f;
    if (c.b.kind == ContactSide::Kind::kBody && c.b.index == body) total -= f;
  }
  return total;
}

StepStats Stepper::step(SystemState& state) {
  state.validate();
  StepStats stats;
  const DofLayout layout = state.layout();
  const double dt = config_.dt;

  stats.contacts = detect_contacts(state);
  const VecX v_star = solve_free_motion(state, &stats.newton_iterations, &stats.newton_residual);
  VecX v = v_star;
  const int nc = static_cast<int>(stats.contacts.size());
  stats.impulses = VecX::Zero(3 * nc);

  if (nc > 0) {
    SparseMat j = contact_jacobian(stats.contacts, layout);
    VecX bias = VecX::Zero(3 * nc);
    VecX compliance = VecX::Zero(3 * nc);
    std::vector<double> friction(nc);
    for (int i = 0; i < nc; ++i) {
      const ContactPoint& c = stats.contacts[i];
      friction[i] = c.friction;
      double phi = c.signed_distance;
      if (c.patch) {
        phi = patch_signed_distance(*c.patch);
        compliance[3 * i + 2] = 1.0 / (dt * dt * patch_stiffness(*c.patch));
      }
      bias[3 * i + 2] = -contact_.bias_scale * phi / dt;
      stats.min_signed_distance = std::min(stats.min_signed_distance, c.signed_distance);
    }
    const auto pres = state.prescribed();
    if (!pres.empty()) {
      VecX vp = VecX::Zero(layout.num_dofs);
      std::vector<char> mask(layout.num_dofs, 0);
      for (const auto& [dof, value] : pres) {
        vp[dof] = value;
        mask[dof] = 1;
      }
      bias -= j.transpose() * vp;
      j.prune([&](int row, int, double) { return !mask[row]; });
    }
    stats.modes.assign(nc, ContactMode::kOpen);

    // Newton on m(v) = J^T lambda: each pass solves the cone problem for the
    // model of m linearized at the current iterate.
    VecX v_free = v_star;
    double previous = std::numeric_limits<double>::infinity();
    for (int pass = 0; pass < config_.contact_newton_iterations; ++pass) {
      const SparseMat a = linearize_momentum(state, v);
      if (pass > 0) v_free = v - llt_.solve(residual(state, v).residual);
      const DofPartition part = partition_dofs(a, j, 1);
      if (part.participating.empty()) {
        v = v_free;
        break;
      }
      const SchurComplement schur(part);
      VecX vp_free(part.participating.size()), vn_free(part.non_participating.size());
      for (size_t k = 0; k < part.participating.size(); ++k) vp_free[k] = v_free[part.participating[k]];
      for (size_t k = 0; k < part.non_participating.size(); ++k)
        vn_free[k] = v_free[part.non_participating[k]];
      ConeProblem problem{schur.matrix(), vp_free, part.j_p, bias, friction, compliance};
      const ConeSolution sol = solve_cone_qp(problem, contact_.solver);
      const VecX vn = schur.recover_nonparticipating(sol.velocity, vp_free, vn_free);
      for (size_t k = 0; k < part.participating.size(); ++k) v[part.participating[k]] = sol.velocity[k];
      for (size_t k = 0; k < part.non_participating.size(); ++k) v[part.non_participating[k]] = vn[k];
      stats.impulses = sol.impulse;
      stats.solver_iterations += sol.iterations;
      stats.solver_converged = sol.converged;
      stats.solver_regularized = sol.regularized;
      stats.certificate = sol.certificate;
      stats.modes = sol.modes;
      stats.contact_newton_iterations = pass + 1;

      const MomentumResidual r = residual(state, v);
      const VecX f = j * stats.impulses;
      stats.contact_newton_residual = (r.residual - f).lpNorm<Eigen::Infinity>();
      if (stats.contact_newton_residual <= config_.newton_tolerance) break;
      // Stop once the residual no longer shrinks (roundoff of the cone solve).
      if (stats.contact_newton_residual > 0.5 * previous) break;
      previous = stats.contact_newton_residual;
    }
  }

  // Controller forces over the step, evaluated at the accepted velocities.
  const VecX v0 = state.velocities();
  const VecX vt = config_.theta * v + (1.0 - config_.theta) * v0;
  const SystemState st = theta_state(state, v, config_);
  for (PdController& c : state.controllers) {
    const int d = attachment_dof(layout, c.point);
    c.last_force = c.kp * (c.target(st.time) - attachment_position(st, c.point)) +
                   c.kd * (c.anchor_velocity - vt.segment<3>(d));
  }
  std::vector<PdController> controllers = state.controllers;
  state = advance_positions(state, v, config_);
  state.controllers = std::move(controllers);
  return stats;
}

}  // namespace filsim
