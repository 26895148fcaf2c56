#include "filsim/common.hpp"

#include <cmath>

namespace filsim {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::kDegenerateEdge: return "DegenerateEdge";
    case ErrorCode::kAntiparallelTangents: return "AntiparallelTangents";
    case ErrorCode::kInvalidParameters: return "InvalidParameters";
    case ErrorCode::kTopologyMismatch: return "TopologyMismatch";
    case ErrorCode::kUnsupportedPair: return "UnsupportedPair";
    case ErrorCode::kResolutionTooCoarse: return "ResolutionTooCoarse";
    case ErrorCode::kDegenerateGradient: return "DegenerateGradient";
    case ErrorCode::kNewtonDivergence: return "NewtonDivergence";
    case ErrorCode::kFactorizationFailure: return "FactorizationFailure";
    case ErrorCode::kMaxIterations: return "MaxIterations";
    case ErrorCode::kParseError: return "ParseError";
    case ErrorCode::kValidationError: return "ValidationError";
    case ErrorCode::kUnknownScenario: return "UnknownScenario";
    case ErrorCode::kStepFailure: return "StepFailure";
    case ErrorCode::kIoError: return "IoError";
  }
  return "Unknown";
}

Vec3 any_orthogonal(const Vec3& v) {
  // Cross with the axis least aligned with v.
  Vec3 axis = Vec3::UnitX();
  if (std::abs(v.y()) < std::abs(v.x()) && std::abs(v.y()) <= std::abs(v.z()))
    axis = Vec3::UnitY();
  else if (std::abs(v.z()) < std::abs(v.x()))
    axis = Vec3::UnitZ();
  return v.cross(axis).normalized();
}

Vec3 parallel_transport(const Vec3& u, const Vec3& from, const Vec3& to) {
  const Vec3 b = from.cross(to);
  const double c = from.dot(to);
  // R = I + [b]x + [b]x^2 / (1 + c)
  const Vec3 bu = b.cross(u);
  return u + bu + b.cross(bu) / (1.0 + c);
}

double signed_angle(const Vec3& a, const Vec3& b, const Vec3& axis) {
  return std::atan2(a.cross(b).dot(axis), a.dot(b));
}

}  // namespace filsim
