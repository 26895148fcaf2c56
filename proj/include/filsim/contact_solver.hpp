#pragma once

#include <memory>
#include <vector>

#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "filsim/common.hpp"

namespace filsim {

using SparseMat = Eigen::SparseMatrix<double>;

/// A is split so that DoFs touched by the contact Jacobian come first.
struct DofPartition {
  std::vector<int> participating;      // ascending original indices
  std::vector<int> non_participating;  // ascending original indices
  SparseMat a_pp, a_pn, a_nn;
  SparseMat j_p;  // participating rows of J (n_p x 3 n_c)
};

/// DoFs within `halo` couplings of A from a touched DoF also participate;
/// this keeps S sparse where A_nn^{-1} would be dense (rod twists).
DofPartition partition_dofs(const SparseMat& a, const SparseMat& j, int halo = 0);

/// Schur complement of A_pp together with the factorization of A_nn it was
/// built from, reused when recovering the non-participating velocities.
class SchurComplement {
 public:
  explicit SchurComplement(const DofPartition& partition);

  const SparseMat& matrix() const { return s_p_; }

  /// v_n = v_n* - A_nn^{-1} A_np (v_p - v_p*).
  VecX recover_nonparticipating(const VecX& v_p, const VecX& v_p_star,
                                const VecX& v_n_star) const;

 private:
  SparseMat a_np_;
  Eigen::SimplicialLLT<SparseMat> a_nn_factor_;
  SparseMat s_p_;
};

/// Data of the convex problem in the participating velocities:
///   minimize 1/2 |v - v*|^2_S  subject to  J^T v - v_hat + R lambda in C*.
/// Contact frames are ordered (t1, t2, n). A nonzero compliance R turns a
/// contact into a compliant one; R = 0 is a rigid contact.
struct ConeProblem {
  SparseMat schur;
  VecX free_velocity;
  SparseMat jacobian;  // n x 3 n_c
  VecX bias;           // v_hat, 3 n_c
  std::vector<double> friction;  // mu per contact
  VecX compliance;     // diagonal of R, 3 n_c

  int num_contacts() const { return static_cast<int>(friction.size()); }
  int num_dofs() const { return static_cast<int>(free_velocity.size()); }
  void validate() const;
};

enum class ContactMode { kOpen, kStick, kSlip };

/// KKT residuals of a solution, with y = J^T v - v_hat + R lambda.
struct ConeCertificate {
  /// |S(v - v*) - J lambda| / max(|S v*|, |J lambda|).
  double momentum_residual = 0.0;
  /// max_i |lambda_i . y_i| / (1 + |lambda| |v_c|).
  double complementarity = 0.0;
  /// max_i |lambda_i . y_i| / (|lambda| max(|v_c|, |J^T v*|, |v_hat|, |R lambda|)),
  /// free of units.
  double relative_complementarity = 0.0;
  /// Distance of lambda outside C, relative to |lambda|_inf.
  double impulse_cone_violation = 0.0;
  /// Distance of y outside C*, relative to the same velocity scale.
  double velocity_cone_violation = 0.0;

  bool passes(double tol) const {
    return momentum_residual <= tol && complementarity <= tol &&
           relative_complementarity <= tol && impulse_cone_violation <= tol &&
           velocity_cone_violation <= tol;
  }
};

struct ConeSolution {
  VecX velocity;  // v_p
  VecX impulse;   // lambda, 3 n_c
  int iterations = 0;
  bool converged = false;
  /// Set when rigid contacts had to be softened to recover feasibility.
  bool regularized = false;
  ConeCertificate certificate;
  std::vector<ContactMode> modes;
};

struct ConeSolverOptions {
  double tolerance = 1e-8;       // certificate tolerance
  double ipm_tolerance = 1e-13;  // interior-point stopping tolerance, scaled problem
  int max_iterations = 80;
  /// Compliance added to rigid contacts when the rigid problem has no
  /// feasible point, relative to the diagonal of the Delassus operator.
  double fallback_compliance = 1e-8;
  bool operator==(const ConeSolverOptions&) const = default;
};

/// Evaluates the KKT certificate of (v, lambda) for `problem`.
ConeCertificate certify(const ConeProblem& problem, const VecX& v, const VecX& lambda);

/// Classifies every contact as open, sticking or slipping.
std::vector<ContactMode> classify_contacts(const ConeProblem& problem, const VecX& v,
                                           const VecX& lambda);

/// Solves the cone-constrained QP with a primal-dual interior-point method
/// (Nesterov-Todd scaling, Mehrotra predictor-corrector). Throws
/// kMaxIterations only if `throw_on_failure` is set; otherwise the best
/// iterate is returned with converged = false.
ConeSolution solve_cone_qp(const ConeProblem& problem, const ConeSolverOptions& options = {},
                           bool throw_on_failure = false);

}  // namespace filsim
