#pragma once

#include <functional>

#include "filsim/collision.hpp"
#include "filsim/common.hpp"
#include "filsim/contact_solver.hpp"

// Reference implementations used only by the test suite. Nothing here calls
// into the numerical kernels it is meant to check.
namespace filsim::oracles {

struct FdConfig {
  double scale = 1e-6;  // h_i = scale * max(1, |q_i|)
};

using ScalarField = std::function<double(const VecX&)>;
using VectorField = std::function<VecX(const VecX&)>;

/// Central-difference gradient.
VecX fd_gradient(const ScalarField& f, const VecX& q, const FdConfig& config = {});

/// Central-difference Jacobian, column i = d f / d q_i.
MatX fd_jacobian(const VectorField& f, const VecX& q, const FdConfig& config = {});

/// Second differences of a scalar field.
MatX fd_hessian(const ScalarField& f, const VecX& q, double h);

/// Turning angle between the d1 of two consecutive edges, transporting the
/// first director with an explicit axis-angle rotation matrix.
double transported_twist_angle(const Vec3& d1_prev, const Vec3& t_prev, const Vec3& d1,
                               const Vec3& t);

struct DenseConeResult {
  VecX velocity;
  VecX impulse;
  int iterations = 0;
  double stationarity = 0.0;
};

/// Accelerated projected gradient on the dual of the contact QP,
///   minimize_{lambda in C} 1/2 lambda^T (J^T S^{-1} J + R) lambda
///                          + lambda^T (J^T v* - v_hat),
/// with v = v* + S^{-1} J lambda. Throws kMaxIterations if `tol` is not met.
DenseConeResult dense_cone_qp(const ConeProblem& problem, double tol = 1e-10,
                              int max_iterations = 2'000'000);

/// Signed distance between a capsule and a box estimated by sampling points
/// along the capsule axis and evaluating the box distance face by face.
double sampled_capsule_box_distance(const Capsule& capsule, const Pose& capsule_pose,
                                    const Box& box, const Pose& box_pose,
                                    int axis_samples = 20000);

/// All object pairs whose bounds (inflated by margin) overlap, minus the
/// excluded neighbors, by exhaustive enumeration.
std::vector<CandidatePair> brute_force_pairs(const std::vector<CollisionObject>& objects,
                                             double margin, int exclusion);

/// Normal force of a sphere (center pressure p_sphere) pressed by `depth`
/// into a slab (pressure p_slab at slab_depth), modelling each column of the
/// axisymmetric overlap as two linear springs in series.
double series_spring_sphere_slab_force(double radius, double p_sphere, double p_slab,
                                       double slab_depth, double depth);

/// T2 / T1 = exp(mu * phi).
double capstan_ratio(double mu, double phi);

}  // namespace filsim::oracles
