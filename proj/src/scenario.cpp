#include <algorithm>
#include <cmath>
#include <numbers>

#include "filsim/scene.hpp"

namespace filsim {

namespace {

constexpr double kPi = std::numbers::pi;

class Params {
 public:
  Params(const std::string& scenario, const ScenarioParams& given) : scenario_(scenario), given_(given) {}

  double get(const std::string& key, double fallback) {
    known_.push_back(key);
    auto it = given_.find(key);
    return it == given_.end() ? fallback : it->second;
  }
  int get_int(const std::string& key, int fallback) {
    const double x = get(key, fallback);
    if (x != std::round(x))
      throw SimError(ErrorCode::kValidationError, scenario_ + ": parameter '" + key + "' must be an integer");
    return static_cast<int>(x);
  }
  /// Rejects parameters the scenario does not read.
  void finish() const {
    for (const auto& [key, value] : given_)
      if (std::find(known_.begin(), known_.end(), key) == known_.end())
        throw SimError(ErrorCode::kValidationError, scenario_ + ": unknown parameter '" + key + "'");
  }

 private:
  std::string scenario_;
  const ScenarioParams& given_;
  std::vector<std::string> known_;
};

MaterialSpec circular(const std::string& name, double e, double g, double rho, double r) {
  MaterialSpec m;
  m.name = name;
  m.youngs_modulus = e;
  m.shear_modulus = g;
  m.density = rho;
  m.radius = r;
  return m;
}

SceneSpec capstan(Params& p) {
  const double wrap = p.get("wrap", 2.0 * kPi);
  const double dphi = p.get("segment_angle", kPi / 40.0);
  const double mu = p.get("mu", 0.2);
  const double post_radius = p.get("post_radius", 0.02);
  const double rope_radius = p.get("rope_radius", 5e-4);
  const double tail_length = p.get("tail_length", 0.05);
  const int tail_segments = p.get_int("tail_segments", 5);
  const double kp = p.get("kp", 100.0);
  const double kd = p.get("kd", 1.0);
  const double initial = p.get("initial_force", 0.1);
  const double rate = p.get("pull_rate", 1.0);

  SceneSpec s;
  s.duration = p.get("duration", 3.0);
  s.gravity = Vec3::Zero();
  s.stepper.dt = p.get("dt", 1e-3);
  s.materials.push_back(circular("rope", p.get("youngs_modulus", 1e8), p.get("shear_modulus", 4e7),
                                 p.get("density", 1000.0), rope_radius));

  RodSpec rope;
  rope.name = "rope";
  rope.curve = CurveKind::kArc;
  rope.material = "rope";
  rope.segments = std::max(1, static_cast<int>(std::lround(wrap / dphi)));
  // Nodes sit on the circle through which the chord midpoints touch the post.
  const double sweep = wrap / rope.segments;
  rope.radius = (post_radius + rope_radius) / std::cos(sweep / 2.0);
  rope.angle_start = -kPi / 2.0;
  rope.angle_end = rope.angle_start + wrap;
  rope.tail_length = tail_length;
  rope.tail_segments = tail_segments;
  rope.self_collision = false;
  rope.friction = mu;
  s.rods.push_back(rope);

  BodySpec post;
  post.name = "post";
  post.shape = ShapeKind::kCapsule;
  post.motion = BodyMotion::kFixed;
  post.radius = post_radius;
  post.half_length = p.get("post_half_length", 0.05);
  post.friction = mu;
  s.bodies.push_back(post);

  // Both ends leave the post along their tangents; end 1 is held, end 2 pulled.
  const std::vector<Vec3> nodes = rod_centerline(rope);
  PdSpec hold;
  hold.name = "T1";
  hold.target = {"rope", 0, ""};
  hold.kp = kp;
  hold.kd = kd;
  s.controllers.push_back(hold);
  RampSpec pull;
  pull.name = "T2";
  pull.target = {"rope", -1, ""};
  pull.direction = (nodes.back() - nodes[nodes.size() - 2]).normalized();
  pull.initial = initial;
  pull.rate = rate;
  s.ramps.push_back(pull);
  s.friction.push_back({"rope", "post", mu});
  return s;
}

SceneSpec ring_chain(Params& p) {
  const int n = p.get_int("n", 5);
  if (n < 1) throw SimError(ErrorCode::kValidationError, "ring_chain: n must be at least 1");
  const double radius = p.get("ring_radius", 0.01);
  const double wire = p.get("wire_radius", 1.25e-3);
  const double gap = p.get("gap", 5e-4);

  SceneSpec s;
  s.duration = p.get("duration", 1.0);
  s.stepper.dt = p.get("dt", 8e-4);
  s.materials.push_back(circular("ring", p.get("youngs_modulus", 1e7), p.get("shear_modulus", 1e7 / 3.0),
                                 p.get("density", 500.0), wire));
  s.materials.back().rayleigh_alpha = p.get("rayleigh_alpha", 0.0);
  s.materials.back().rayleigh_beta = p.get("rayleigh_beta", 0.0);
  const double mu = p.get("mu", 0.3);
  // Each ring hangs from the one above with its top `gap` below the contact.
  const double spacing = 2.0 * radius - 2.0 * wire - gap;
  for (int k = 0; k < n; ++k) {
    RodSpec r;
    r.name = "ring" + std::to_string(k);
    r.curve = CurveKind::kRing;
    r.material = "ring";
    r.segments = p.get_int("segments", 20);
    r.radius = radius;
    r.center = Vec3(0.0, 0.0, -spacing * k);
    r.axis = k % 2 == 0 ? Vec3::UnitY() : Vec3::UnitX();
    r.reference = Vec3::UnitZ();
    r.fixed = k == 0;
    r.self_collision = false;
    r.friction = mu;
    s.rods.push_back(r);
  }
  return s;
}

/// Open trefoil cut at the outermost point of a lobe, with straight tails
/// along the end tangents, resampled uniformly in arc length.
std::vector<Vec3> overhand_centerline(double scale, double cut, double tail, int knot_segments,
                                      int tail_segments) {
  auto curve = [](double t) {
    return Vec3(std::sin(t) + 2.0 * std::sin(2.0 * t), std::cos(t) - 2.0 * std::cos(2.0 * t),
                -std::sin(3.0 * t));
  };
  const double t0 = kPi / 3.0 + cut, t1 = kPi / 3.0 + 2.0 * kPi - cut;
  const int dense = 4000;
  std::vector<Vec3> pts;
  std::vector<double> arc{0.0};
  for (int i = 0; i <= dense; ++i) {
    pts.push_back(scale * curve(t0 + (t1 - t0) * i / dense));
    if (i > 0) arc.push_back(arc.back() + (pts[i] - pts[i - 1]).norm());
  }
  std::vector<Vec3> knot;
  size_t j = 0;
  for (int i = 0; i <= knot_segments; ++i) {
    const double s = arc.back() * i / knot_segments;
    while (j + 2 < arc.size() && arc[j + 1] < s) ++j;
    const double f = std::clamp((s - arc[j]) / (arc[j + 1] - arc[j]), 0.0, 1.0);
    knot.push_back(pts[j] + f * (pts[j + 1] - pts[j]));
  }
  const Vec3 ta = (knot[0] - knot[1]).normalized();
  const Vec3 tb = (knot.back() - knot[knot.size() - 2]).normalized();
  std::vector<Vec3> out;
  for (int i = tail_segments; i >= 1; --i) out.push_back(knot.front() + ta * (tail * i / tail_segments));
  out.insert(out.end(), knot.begin(), knot.end());
  for (int i = 1; i <= tail_segments; ++i) out.push_back(knot.back() + tb * (tail * i / tail_segments));
  return out;
}

SceneSpec overhand_knot(Params& p) {
  const double r = p.get("rope_radius", 2e-3);
  const double speed = p.get("pull_speed", 0.05);

  SceneSpec s;
  s.duration = p.get("duration", 0.5);
  s.gravity = Vec3::Zero();
  s.stepper.dt = p.get("dt", 5e-4);
  s.materials.push_back(circular("rope", p.get("youngs_modulus", 1e6), p.get("shear_modulus", 4e5),
                                 p.get("density", 1000.0), r));
  s.materials.back().rayleigh_alpha = p.get("rayleigh_alpha", 1.0);

  RodSpec rope;
  rope.name = "rope";
  rope.curve = CurveKind::kPolyline;
  rope.material = "rope";
  rope.points = overhand_centerline(p.get("scale", 0.01), p.get("cut", 0.35), p.get("tail_length", 0.04),
                                    p.get_int("knot_segments", 64), p.get_int("tail_segments", 10));
  rope.segments = static_cast<int>(rope.points.size()) - 1;
  rope.straight_rest = true;
  rope.friction = p.get("mu", 0.3);
  s.rods.push_back(rope);

  const Vec3 da = (rope.points[0] - rope.points[1]).normalized();
  const Vec3 db = (rope.points.back() - rope.points[rope.points.size() - 2]).normalized();
  const double kp = p.get("kp", 50.0), kd = p.get("kd", 0.5);
  for (int end = 0; end < 2; ++end) {
    PdSpec c;
    c.name = end == 0 ? "pull_a" : "pull_b";
    c.target = {"rope", end == 0 ? 0 : -1, ""};
    c.anchor_velocity = (end == 0 ? da : db) * speed;
    c.kp = kp;
    c.kd = kd;
    s.controllers.push_back(c);
  }
  return s;
}

SceneSpec sphere_on_plane(Params& p) {
  const bool patch = p.get("patch", 0.0) != 0.0;
  const double radius = p.get("radius", 0.1);
  const double mu = p.get("mu", 0.5);
  const double p_max = p.get("p_max", 1e6);

  SceneSpec s;
  s.duration = p.get("duration", 0.5);
  s.stepper.dt = p.get("dt", 1e-3);
  s.contact.model = patch ? ContactModel::kPatch : ContactModel::kPoint;

  BodySpec ground;
  ground.name = "ground";
  ground.shape = ShapeKind::kHalfSpace;
  ground.motion = BodyMotion::kFixed;
  ground.friction = mu;
  ground.p_max = p_max;
  s.bodies.push_back(ground);

  BodySpec ball;
  ball.name = "ball";
  ball.shape = ShapeKind::kSphere;
  ball.radius = radius;
  ball.mass = p.get("mass", 1.0);
  ball.position = Vec3(0.0, 0.0, radius + p.get("drop", 0.0));
  ball.friction = mu;
  ball.p_max = p_max;
  s.bodies.push_back(ball);
  return s;
}

}  // namespace

std::vector<std::string> scenario_names() {
  return {"capstan", "ring_chain", "overhand_knot", "sphere_on_plane"};
}

SceneSpec build_scenario(const std::string& name, const ScenarioParams& params) {
  Params p(name, params);
  SceneSpec s;
  if (name == "capstan") s = capstan(p);
  else if (name == "ring_chain") s = ring_chain(p);
  else if (name == "overhand_knot") s = overhand_knot(p);
  else if (name == "sphere_on_plane") s = sphere_on_plane(p);
  else throw SimError(ErrorCode::kUnknownScenario, "no scenario named '" + name + "'");
  p.finish();
  validate_scene(s);
  return s;
}

}  // namespace filsim
