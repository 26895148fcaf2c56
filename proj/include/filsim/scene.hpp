#pragma once

#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "filsim/stepper.hpp"

namespace filsim {

struct MaterialSpec {
  std::string name;
  double youngs_modulus = 0.0;
  double shear_modulus = 0.0;
  double density = 0.0;
  double rayleigh_alpha = 0.0;
  double rayleigh_beta = 0.0;
  std::string section = "circular";  // circular | rectangular
  double radius = 0.0;
  double width = 0.0;
  double height = 0.0;
  bool operator==(const MaterialSpec&) const = default;
};

enum class CurveKind { kStraight, kArc, kRing, kHelix, kPolyline };

/// Procedural centerline. Angles are measured about `axis` from `reference`.
struct RodSpec {
  std::string name;
  CurveKind curve = CurveKind::kStraight;
  int segments = 1;
  std::string material;
  Vec3 start = Vec3::Zero();  // straight
  Vec3 end = Vec3::UnitX();   // straight
  Vec3 center = Vec3::Zero();
  Vec3 axis = Vec3::UnitZ();
  Vec3 reference = Vec3::UnitX();
  double radius = 0.0;
  double angle_start = 0.0;  // arc
  double angle_end = 0.0;    // arc
  double tail_length = 0.0;  // arc: straight tangent tails at both ends
  int tail_segments = 0;
  double pitch = 0.0;  // helix rise per turn
  double turns = 1.0;  // helix
  std::vector<Vec3> points;  // polyline
  bool straight_rest = false;  // rest shape is the curve laid out straight
  bool fixed = false;          // every DoF clamped
  std::vector<int> clamp_nodes;  // negative indices count from the end
  std::vector<int> clamp_edges;
  bool self_collision = true;
  double friction = 0.0;
  Vec3 velocity = Vec3::Zero();
  bool operator==(const RodSpec&) const = default;
};

enum class ShapeKind { kSphere, kCapsule, kBox, kHalfSpace };

struct BodySpec {
  std::string name;
  ShapeKind shape = ShapeKind::kSphere;
  BodyMotion motion = BodyMotion::kDynamic;
  double radius = 0.0;
  double half_length = 0.0;
  Vec3 half_extents = Vec3::Zero();
  double mass = 0.0;  // inertia is that of a uniform solid
  Vec3 position = Vec3::Zero();
  Vec3 rotation_axis = Vec3::UnitZ();
  double rotation_angle = 0.0;
  Vec3 linear_velocity = Vec3::Zero();
  Vec3 angular_velocity = Vec3::Zero();
  double friction = 0.0;
  double p_max = 0.0;
  bool operator==(const BodySpec&) const = default;
};

/// Where a controller acts: a rod node (negative counts from the end) or a body.
struct TargetSpec {
  std::string rod;
  int node = 0;
  std::string body;
  bool operator==(const TargetSpec&) const = default;
};

struct PdSpec {
  std::string name;
  TargetSpec target;
  std::optional<Vec3> anchor;  // defaults to the target's initial position
  Vec3 anchor_velocity = Vec3::Zero();
  double kp = 0.0;
  double kd = 0.0;
  bool operator==(const PdSpec&) const = default;
};

struct RampSpec {
  std::string name;
  TargetSpec target;
  Vec3 direction = Vec3::UnitX();
  double initial = 0.0;
  double rate = 0.0;
  double limit = std::numeric_limits<double>::infinity();
  bool operator==(const RampSpec&) const = default;
};

struct FrictionSpec {
  std::string a, b;
  double mu = 0.0;
  bool operator==(const FrictionSpec&) const = default;
};

enum class LogFormat { kCsv, kJsonl };

struct OutputSpec {
  LogFormat format = LogFormat::kCsv;
  std::string path;
  bool log_contacts = false;
  bool log_states = true;
  bool operator==(const OutputSpec&) const = default;
};

struct SceneSpec {
  double duration = 1.0;
  Vec3 gravity = Vec3(0.0, 0.0, -9.81);
  unsigned seed = 0;
  StepperConfig stepper;
  ContactConfig contact;
  std::vector<MaterialSpec> materials;
  std::vector<RodSpec> rods;
  std::vector<BodySpec> bodies;
  std::vector<PdSpec> controllers;
  std::vector<RampSpec> ramps;
  std::vector<FrictionSpec> friction;
  OutputSpec output;

  bool operator==(const SceneSpec&) const = default;
  int num_steps() const;
};

struct Diagnostic {
  int line = 0;
  std::string field;
  std::string reason;
};

/// Parse or validation failure carrying one diagnostic per problem found.
class SceneError : public SimError {
 public:
  SceneError(ErrorCode code, std::vector<Diagnostic> diagnostics);
  const std::vector<Diagnostic>& diagnostics() const { return diagnostics_; }

 private:
  std::vector<Diagnostic> diagnostics_;
};

SceneSpec parse_scene(const std::string& text);
SceneSpec load_scene(const std::string& path);
std::string print_scene(const SceneSpec& spec);
/// Throws SceneError(kValidationError) listing every inconsistency.
void validate_scene(const SceneSpec& spec);

/// Replaces `key = value` in section `section` of a scene text, adding the
/// line if the key is absent. `section` is the header text, e.g. "rod rope".
std::string override_scene_value(const std::string& text, const std::string& section,
                                 const std::string& key, const std::string& value);

using ScenarioParams = std::map<std::string, double>;

/// capstan {wrap, segment_angle, mu, duration, ...}, ring_chain {n, ...},
/// overhand_knot {...}, sphere_on_plane {patch, ...}.
SceneSpec build_scenario(const std::string& name, const ScenarioParams& params = {});
std::vector<std::string> scenario_names();

/// Node positions of a rod as described by `spec`.
std::vector<Vec3> rod_centerline(const RodSpec& spec);

struct Simulation {
  SystemState state;
  StepperConfig stepper;
  ContactConfig contact;
  std::vector<std::string> probe_names;  // controllers then ramps
};

Simulation instantiate(const SceneSpec& spec);

}  // namespace filsim
