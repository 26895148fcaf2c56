#pragma once

#include <stdexcept>
#include <string>

#include <Eigen/Core>
#include <Eigen/Geometry>

namespace filsim {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Quat = Eigen::Quaterniond;
using VecX = Eigen::VectorXd;
using MatX = Eigen::MatrixXd;

enum class ErrorCode {
  kDegenerateEdge,
  kAntiparallelTangents,
  kInvalidParameters,
  kTopologyMismatch,
  kUnsupportedPair,
  kResolutionTooCoarse,
  kDegenerateGradient,
  kNewtonDivergence,
  kFactorizationFailure,
  kMaxIterations,
  kParseError,
  kValidationError,
  kUnknownScenario,
  kStepFailure,
  kIoError,
};

const char* to_string(ErrorCode code);

/// Error raised by every module of the simulator. The code identifies the
/// failure class so callers (the CLI in particular) can map it to exit codes.
class SimError : public std::runtime_error {
 public:
  SimError(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what),
        code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0, -v.z(), v.y(), v.z(), 0, -v.x(), -v.y(), v.x(), 0;
  return m;
}

/// Any unit vector orthogonal to `v` (assumed unit).
Vec3 any_orthogonal(const Vec3& v);

/// Minimal rotation carrying unit vector `from` onto unit vector `to`,
/// applied to `u`. Requires from·to > -1.
Vec3 parallel_transport(const Vec3& u, const Vec3& from, const Vec3& to);

/// Signed angle from `a` to `b` about `axis` (all unit, a,b ⟂ axis).
double signed_angle(const Vec3& a, const Vec3& b, const Vec3& axis);

}  // namespace filsim
