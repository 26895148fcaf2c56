#pragma once

#include <limits>
#include <memory>
#include <optional>
#include <utility>
#include <vector>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "filsim/collision.hpp"
#include "filsim/common.hpp"
#include "filsim/contact_solver.hpp"
#include "filsim/rod.hpp"

namespace filsim {

struct RodBody {
  RodState state;
  RodParameters params;
  VecX velocity;                // num_dofs, interleaved like the coordinates
  std::vector<int> fixed_dofs;  // rod-local DoFs held at zero velocity
  bool self_collision = true;
  double friction = 0.0;
};

enum class BodyMotion { kDynamic, kFixed, kKinematic };

/// Rigid body; velocities are in the world frame. Kinematic bodies move with
/// their current velocities, which are prescribed.
struct RigidBody {
  ShapeGeometry geometry;
  BodyMotion motion = BodyMotion::kDynamic;
  double mass = 0.0;
  Mat3 inertia = Mat3::Identity();  // body frame, about the origin
  Quat orientation = Quat::Identity();
  Vec3 position = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();
  Vec3 linear_velocity = Vec3::Zero();
  double friction = 0.0;
  double p_max = 0.0;  // pressure-field modulus; zero disables patch contact

  Pose pose() const;
  Shape shape() const;
  Mat3 world_inertia() const;
  bool has_dofs() const { return motion != BodyMotion::kFixed; }
};

/// A rod node or the origin of a rigid body.
struct Attachment {
  int rod = -1;
  int node = -1;
  int body = -1;
};

/// f = kp (x_target - x) + kd (xdot_target - xdot), x_target = anchor + anchor_velocity t.
struct PdController {
  Attachment point;
  Vec3 anchor = Vec3::Zero();
  Vec3 anchor_velocity = Vec3::Zero();
  double kp = 0.0;
  double kd = 0.0;
  Vec3 last_force = Vec3::Zero();  // force applied over the last step

  Vec3 target(double t) const { return anchor + anchor_velocity * t; }
};

/// f = direction (initial + rate t), magnitude capped at `limit`.
struct ForceRamp {
  Attachment point;
  Vec3 direction = Vec3::UnitX();
  double initial = 0.0;
  double rate = 0.0;
  double limit = std::numeric_limits<double>::infinity();

  Vec3 force(double t) const;
};

struct SystemState {
  std::vector<RodBody> rods;
  std::vector<RigidBody> bodies;
  std::vector<PdController> controllers;
  std::vector<ForceRamp> ramps;
  Vec3 gravity = Vec3::Zero();
  double time = 0.0;

  DofLayout layout() const;
  int num_velocities() const { return layout().num_dofs; }
  /// Rod coordinates, then per moving body the quaternion (w, x, y, z) and position.
  VecX coordinates() const;
  VecX velocities() const;
  void set_velocities(const VecX& v);
  /// Global DoF index and velocity of every prescribed DoF, ascending.
  std::vector<std::pair<int, double>> prescribed() const;
  /// Diagonal of M; bodies use the inertia at the current orientation.
  SparseMat mass_matrix() const;
  void validate() const;
};

struct StepperConfig {
  double dt = 1e-3;
  double theta = 1.0;
  double theta_vq = 1.0;
  double newton_tolerance = 1e-10;  // N s, infinity norm of m(v)
  int newton_max_iterations = 50;
  int contact_newton_iterations = 8;  // cone solves per step, each relinearized
  double regularization = 1e-12;    // initial shift relative to max |diag A|

  void validate() const;
  bool operator==(const StepperConfig&) const = default;
};

enum class ContactModel { kPoint, kPatch };

/// Friction coefficient for one pair of objects, replacing the combined value.
struct FrictionOverride {
  ContactSide::Kind kind_a = ContactSide::Kind::kNone;
  int index_a = -1;
  ContactSide::Kind kind_b = ContactSide::Kind::kNone;
  int index_b = -1;
  double mu = 0.0;
  bool operator==(const FrictionOverride&) const = default;
};

struct ContactConfig {
  ContactModel model = ContactModel::kPoint;
  double margin = 1e-3;  // m; contacts are kept while the gap is below this
  int exclusion = 1;     // rod segments this close in index never collide
  int patch_resolution = 2;
  double slab_depth = 0.1;   // m, depth of the pressure field below a half-space
  double bias_scale = 1.0;   // v_hat_n = -bias_scale phi0 / dt
  ConeSolverOptions solver;
  std::vector<FrictionOverride> friction_pairs;
  bool operator==(const ContactConfig&) const = default;
};

struct SystemEnergy {
  double stretching = 0.0;
  double twisting = 0.0;
  double bending = 0.0;
  double kinetic = 0.0;
  double gravity = 0.0;
  double total() const { return stretching + twisting + bending + kinetic + gravity; }
};

SystemEnergy system_energy(const SystemState& state);

/// Sum of m_i xdot_i over rod nodes and of m v over rigid bodies.
Vec3 linear_momentum(const SystemState& state);

/// State at q^theta = q0 + theta dt N v^theta_vq (orientations kept at q0).
SystemState theta_state(const SystemState& s0, const VecX& v, const StepperConfig& config);

/// Non-contact generalized forces k at `at_theta`, velocities `v_theta`, time `t`.
VecX assemble_forces(const SystemState& at_theta, const VecX& v_theta, double t);

/// Position update q = q0 + dt N(q^theta) v^theta_vq, with one fixed-point correction
/// of q^theta for the quaternions. Rod frames are transported.
SystemState advance_positions(const SystemState& s0, const VecX& v, const StepperConfig& config);

struct MomentumResidual {
  VecX residual;  // m(v), zero on prescribed DoFs
  VecX forces;    // k(q^theta, v^theta)
  double force_scale = 0.0;  // largest single force contribution, for roundoff
};

struct StepStats {
  int newton_iterations = 0;
  double newton_residual = 0.0;
  int contact_newton_iterations = 0;
  double contact_newton_residual = 0.0;  // |m(v) - J^T lambda|, infinity norm
  std::vector<ContactPoint> contacts;
  VecX impulses;  // 3 per contact, (t1, t2, n)
  int solver_iterations = 0;
  bool solver_converged = true;
  bool solver_regularized = false;
  ConeCertificate certificate;
  std::vector<ContactMode> modes;
  double min_signed_distance = std::numeric_limits<double>::infinity();
};

/// World-frame contact impulse acting on rigid body `body` over the step.
Vec3 body_contact_impulse(const StepStats& stats, int body);

/// Advances a SystemState by one step. Keeps the sparsity pattern of dm/dv
/// and its symbolic factorization for as long as the DoF layout is unchanged.
class Stepper {
 public:
  explicit Stepper(StepperConfig config = {}, ContactConfig contact = {});

  const StepperConfig& config() const { return config_; }
  const ContactConfig& contact_config() const { return contact_; }

  MomentumResidual residual(const SystemState& s0, const VecX& v) const;
  /// dm/dv at v, prescribed rows and columns replaced by the identity.
  const SparseMat& momentum_jacobian(const SystemState& s0, const VecX& v);
  VecX solve_free_motion(const SystemState& s0, int* iterations = nullptr,
                         double* final_residual = nullptr);
  /// A = dm/dv at v*, shifted until it admits a Cholesky factorization.
  SparseMat linearize_momentum(const SystemState& s0, const VecX& v_star);
  /// Last diagonal shift applied by the regularization.
  double last_shift() const { return shift_; }

  std::vector<ContactPoint> detect_contacts(const SystemState& s) const;
  StepStats step(SystemState& state);

 private:
  void ensure_pattern(const SystemState& s0);
  void fill_jacobian(const SystemState& s0, const VecX& v);
  bool factor_shifted(double shift);
  void regularize();
  std::vector<PressureBody> pressure_bodies(const SystemState& s) const;

  StepperConfig config_;
  ContactConfig contact_;
  SparseMat jac_;       // fixed pattern
  SparseMat shifted_;   // jac_ plus the diagonal shift, same pattern
  std::vector<int> diag_index_;
  std::vector<int> layout_key_;
  Eigen::SimplicialLLT<SparseMat> llt_;
  double shift_ = 0.0;
  double last_good_shift_ = 0.0;
  mutable std::vector<std::optional<PressureBody>> pressure_cache_;
};

}  // namespace filsim
