#include "filsim/scene.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>

namespace filsim {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_ws(const std::string& s) {
  std::istringstream in(s);
  std::vector<std::string> out;
  for (std::string tok; in >> tok;) out.push_back(tok);
  return out;
}

std::string fmt(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

std::string fmt(const Vec3& v) { return fmt(v.x()) + " " + fmt(v.y()) + " " + fmt(v.z()); }

std::string fmt(bool b) { return b ? "true" : "false"; }

std::string fmt(const std::vector<int>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) out += (i ? " " : "") + std::to_string(v[i]);
  return out;
}

bool plain_number(const std::string& tok, double& out) {
  const char* end = tok.data() + tok.size();
  const auto r = std::from_chars(tok.data(), end, out);
  return r.ec == std::errc() && r.ptr == end;
}

/// A number, optionally written as [k*]pi[/m].
bool parse_number(const std::string& tok, double& out) {
  if (plain_number(tok, out)) return true;
  const auto p = tok.find("pi");
  if (p == std::string::npos) return false;
  double k = 1.0, m = 1.0;
  std::string head = tok.substr(0, p), tail = tok.substr(p + 2);
  if (head == "-") {
    k = -1.0;
  } else if (!head.empty()) {
    if (head.back() != '*' || !plain_number(head.substr(0, head.size() - 1), k)) return false;
  }
  if (!tail.empty()) {
    if (tail.front() != '/' || !plain_number(tail.substr(1), m) || m == 0.0) return false;
  }
  out = k * std::numbers::pi / m;
  return true;
}

struct ParseFailure {
  std::string reason;
};

double to_double(const std::string& v) {
  const auto toks = split_ws(v);
  double x = 0.0;
  if (toks.size() != 1 || !parse_number(toks[0], x)) throw ParseFailure{"expected a number, got '" + v + "'"};
  return x;
}

int to_int(const std::string& v) {
  const auto toks = split_ws(v);
  int x = 0;
  if (toks.size() != 1) throw ParseFailure{"expected an integer, got '" + v + "'"};
  const char* end = toks[0].data() + toks[0].size();
  const auto r = std::from_chars(toks[0].data(), end, x);
  if (r.ec != std::errc() || r.ptr != end) throw ParseFailure{"expected an integer, got '" + v + "'"};
  return x;
}

unsigned to_unsigned(const std::string& v) {
  const int x = to_int(v);
  if (x < 0) throw ParseFailure{"expected a non-negative integer"};
  return static_cast<unsigned>(x);
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ParseFailure{"expected true or false, got '" + v + "'"};
}

Vec3 to_vec3(const std::string& v) {
  const auto toks = split_ws(v);
  Vec3 x;
  if (toks.size() != 3) throw ParseFailure{"expected three numbers, got '" + v + "'"};
  for (int i = 0; i < 3; ++i)
    if (!parse_number(toks[i], x[i])) throw ParseFailure{"expected a number, got '" + toks[i] + "'"};
  return x;
}

std::vector<int> to_int_list(const std::string& v) {
  std::vector<int> out;
  for (const std::string& t : split_ws(v)) out.push_back(to_int(t));
  return out;
}

std::string to_name(const std::string& v) {
  const auto toks = split_ws(v);
  if (toks.size() != 1) throw ParseFailure{"expected a single word, got '" + v + "'"};
  return toks[0];
}

template <class E>
E to_enum(const std::string& v, std::initializer_list<std::pair<const char*, E>> options) {
  std::string names;
  for (const auto& [name, value] : options) {
    if (v == name) return value;
    names += (names.empty() ? "" : ", ") + std::string(name);
  }
  throw ParseFailure{"expected one of " + names + ", got '" + v + "'"};
}

const std::initializer_list<std::pair<const char*, CurveKind>> kCurves = {
    {"straight", CurveKind::kStraight}, {"arc", CurveKind::kArc}, {"ring", CurveKind::kRing},
    {"helix", CurveKind::kHelix}, {"polyline", CurveKind::kPolyline}};
const std::initializer_list<std::pair<const char*, ShapeKind>> kShapes = {
    {"sphere", ShapeKind::kSphere}, {"capsule", ShapeKind::kCapsule}, {"box", ShapeKind::kBox},
    {"halfspace", ShapeKind::kHalfSpace}};
const std::initializer_list<std::pair<const char*, BodyMotion>> kMotions = {
    {"dynamic", BodyMotion::kDynamic}, {"fixed", BodyMotion::kFixed},
    {"kinematic", BodyMotion::kKinematic}};
const std::initializer_list<std::pair<const char*, ContactModel>> kModels = {
    {"point", ContactModel::kPoint}, {"patch", ContactModel::kPatch}};
const std::initializer_list<std::pair<const char*, LogFormat>> kFormats = {
    {"csv", LogFormat::kCsv}, {"jsonl", LogFormat::kJsonl}};

template <class E>
const char* enum_name(E value, std::initializer_list<std::pair<const char*, E>> options) {
  for (const auto& [name, v] : options)
    if (v == value) return name;
  return "?";
}

using Setter = std::function<void(const std::string&)>;
using KeyTable = std::map<std::string, Setter>;

void target_keys(KeyTable& t, TargetSpec& target) {
  t["rod"] = [&](const std::string& v) { target.rod = to_name(v); };
  t["node"] = [&](const std::string& v) { target.node = to_int(v); };
  t["body"] = [&](const std::string& v) { target.body = to_name(v); };
}

bool valid_name(const std::string& s) {
  return !s.empty() && std::all_of(s.begin(), s.end(), [](char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-';
  });
}

/// Line of the key (or section) a diagnostic refers to, keyed "section|key".
using LineMap = std::map<std::string, int>;

class Validator {
 public:
  explicit Validator(const LineMap* lines) : lines_(lines) {}

  void fail(const std::string& section, const std::string& key, const std::string& reason) {
    int line = 0;
    if (lines_) {
      auto it = lines_->find(section + "|" + key);
      if (it == lines_->end()) it = lines_->find(section + "|");
      if (it != lines_->end()) line = it->second;
    }
    diags_.push_back({line, key.empty() ? section : section + "." + key, reason});
  }
  void check(bool ok, const std::string& section, const std::string& key, const std::string& reason) {
    if (!ok) fail(section, key, reason);
  }
  const std::vector<Diagnostic>& diagnostics() const { return diags_; }

 private:
  const LineMap* lines_;
  std::vector<Diagnostic> diags_;
};

int rod_node_count(const RodSpec& r) {
  switch (r.curve) {
    case CurveKind::kRing: return r.segments;
    case CurveKind::kArc: return r.segments + 2 * r.tail_segments + 1;
    case CurveKind::kPolyline: return static_cast<int>(r.points.size());
    default: return r.segments + 1;
  }
}

int rod_edge_count(const RodSpec& r) {
  return r.curve == CurveKind::kRing ? rod_node_count(r) : rod_node_count(r) - 1;
}

void validate_impl(const SceneSpec& s, const LineMap* lines) {
  Validator v(lines);
  v.check(s.duration > 0.0 && std::isfinite(s.duration), "scene", "duration", "must be positive");
  v.check(s.gravity.allFinite(), "scene", "gravity", "must be finite");
  const StepperConfig& c = s.stepper;
  v.check(c.dt > 0.0, "stepper", "dt", "must be positive");
  v.check(c.theta >= 0.0 && c.theta <= 1.0, "stepper", "theta", "must lie in [0, 1]");
  v.check(c.theta_vq >= 0.0 && c.theta_vq <= 1.0, "stepper", "theta_vq", "must lie in [0, 1]");
  v.check(c.newton_tolerance > 0.0, "stepper", "newton_tolerance", "must be positive");
  v.check(c.newton_max_iterations >= 1, "stepper", "newton_max_iterations", "must be at least 1");
  v.check(c.contact_newton_iterations >= 1, "stepper", "contact_newton_iterations", "must be at least 1");
  v.check(c.regularization > 0.0, "stepper", "regularization", "must be positive");
  const ContactConfig& cc = s.contact;
  v.check(cc.margin >= 0.0, "contact", "margin", "must be >= 0");
  v.check(cc.exclusion >= 0, "contact", "exclusion", "must be >= 0");
  v.check(cc.patch_resolution >= 0, "contact", "patch_resolution", "must be >= 0");
  v.check(cc.slab_depth > 0.0, "contact", "slab_depth", "must be positive");
  v.check(cc.bias_scale >= 0.0, "contact", "bias_scale", "must be >= 0");
  v.check(cc.solver.tolerance > 0.0, "contact", "tolerance", "must be positive");
  v.check(cc.solver.ipm_tolerance > 0.0, "contact", "ipm_tolerance", "must be positive");
  v.check(cc.solver.max_iterations >= 1, "contact", "max_iterations", "must be at least 1");
  v.check(cc.solver.fallback_compliance >= 0.0, "contact", "fallback_compliance", "must be >= 0");

  std::set<std::string> materials, objects, probes;
  for (const MaterialSpec& m : s.materials) {
    const std::string sec = "material " + m.name;
    v.check(valid_name(m.name), sec, "", "invalid name");
    v.check(materials.insert(m.name).second, sec, "", "duplicate material");
    v.check(m.youngs_modulus > 0.0, sec, "youngs_modulus", "must be positive");
    v.check(m.shear_modulus > 0.0, sec, "shear_modulus", "must be positive");
    v.check(m.density > 0.0, sec, "density", "must be positive");
    v.check(m.rayleigh_alpha >= 0.0, sec, "rayleigh_alpha", "must be >= 0");
    v.check(m.rayleigh_beta >= 0.0, sec, "rayleigh_beta", "must be >= 0");
    if (m.section == "circular") {
      v.check(m.radius > 0.0, sec, "radius", "must be positive");
    } else if (m.section == "rectangular") {
      v.check(m.width > 0.0, sec, "width", "must be positive");
      v.check(m.height > 0.0, sec, "height", "must be positive");
    } else {
      v.fail(sec, "section", "must be circular or rectangular");
    }
  }
  for (const RodSpec& r : s.rods) {
    const std::string sec = "rod " + r.name;
    v.check(valid_name(r.name), sec, "", "invalid name");
    v.check(objects.insert(r.name).second, sec, "", "duplicate rod or body name");
    v.check(materials.count(r.material) > 0, sec, "material", "undefined material '" + r.material + "'");
    v.check(r.segments >= 1, sec, "segments", "must be at least 1");
    v.check(r.friction >= 0.0, sec, "friction", "must be >= 0");
    v.check(r.velocity.allFinite(), sec, "velocity", "must be finite");
    const bool round = r.curve == CurveKind::kArc || r.curve == CurveKind::kRing ||
                       r.curve == CurveKind::kHelix;
    if (round) {
      v.check(r.radius > 0.0, sec, "radius", "must be positive");
      v.check(r.axis.norm() > 0.0, sec, "axis", "must be nonzero");
      v.check(r.reference.cross(r.axis).norm() > 1e-9 * r.reference.norm() * r.axis.norm(), sec,
              "reference", "must not be parallel to the axis");
    }
    switch (r.curve) {
      case CurveKind::kStraight:
        v.check((r.end - r.start).norm() > 0.0, sec, "end", "must differ from start");
        break;
      case CurveKind::kArc:
        v.check(r.angle_end != r.angle_start, sec, "angle_end", "must differ from angle_start");
        v.check(r.tail_length >= 0.0, sec, "tail_length", "must be >= 0");
        v.check(r.tail_segments >= 0, sec, "tail_segments", "must be >= 0");
        v.check((r.tail_length > 0.0) == (r.tail_segments > 0), sec, "tail_segments",
                "tails need both a length and a segment count");
        break;
      case CurveKind::kRing:
        v.check(r.segments >= 3, sec, "segments", "a ring needs at least 3 segments");
        v.check(!r.straight_rest, sec, "rest", "a ring cannot have a straight rest shape");
        break;
      case CurveKind::kHelix:
        v.check(r.turns > 0.0, sec, "turns", "must be positive");
        break;
      case CurveKind::kPolyline:
        v.check(r.points.size() >= 2, sec, "point", "a polyline needs at least 2 points");
        v.check(r.segments + 1 == static_cast<int>(r.points.size()), sec, "segments",
                "must equal the number of points minus one");
        break;
    }
    const int nodes = rod_node_count(r), edges = rod_edge_count(r);
    for (int k : r.clamp_nodes)
      v.check(k >= -nodes && k < nodes, sec, "clamp_nodes", "node index out of range");
    for (int k : r.clamp_edges)
      v.check(k >= -edges && k < edges, sec, "clamp_edges", "edge index out of range");
  }
  for (const BodySpec& b : s.bodies) {
    const std::string sec = "body " + b.name;
    v.check(valid_name(b.name), sec, "", "invalid name");
    v.check(objects.insert(b.name).second, sec, "", "duplicate rod or body name");
    switch (b.shape) {
      case ShapeKind::kSphere: v.check(b.radius > 0.0, sec, "radius", "must be positive"); break;
      case ShapeKind::kCapsule:
        v.check(b.radius > 0.0, sec, "radius", "must be positive");
        v.check(b.half_length >= 0.0, sec, "half_length", "must be >= 0");
        break;
      case ShapeKind::kBox:
        v.check((b.half_extents.array() > 0.0).all(), sec, "half_extents", "must be positive");
        break;
      case ShapeKind::kHalfSpace:
        v.check(b.motion != BodyMotion::kDynamic, sec, "motion", "a half-space cannot be dynamic");
        break;
    }
    if (b.motion == BodyMotion::kDynamic) v.check(b.mass > 0.0, sec, "mass", "must be positive");
    v.check(b.rotation_axis.norm() > 0.0, sec, "rotation_axis", "must be nonzero");
    v.check(b.friction >= 0.0, sec, "friction", "must be >= 0");
    v.check(b.p_max >= 0.0, sec, "p_max", "must be >= 0");
  }
  auto check_target = [&](const std::string& sec, const TargetSpec& t) {
    if (t.rod.empty() == t.body.empty()) {
      v.fail(sec, "rod", "exactly one of rod or body is required");
      return;
    }
    if (!t.rod.empty()) {
      auto it = std::find_if(s.rods.begin(), s.rods.end(), [&](const RodSpec& r) { return r.name == t.rod; });
      if (it == s.rods.end()) {
        v.fail(sec, "rod", "undefined rod '" + t.rod + "'");
      } else {
        const int n = rod_node_count(*it);
        v.check(t.node >= -n && t.node < n, sec, "node", "node index out of range");
      }
    } else {
      auto it = std::find_if(s.bodies.begin(), s.bodies.end(), [&](const BodySpec& b) { return b.name == t.body; });
      if (it == s.bodies.end()) v.fail(sec, "body", "undefined body '" + t.body + "'");
      else v.check(it->motion != BodyMotion::kFixed, sec, "body", "cannot act on a fixed body");
    }
  };
  for (const PdSpec& p : s.controllers) {
    const std::string sec = "pd " + p.name;
    v.check(valid_name(p.name), sec, "", "invalid name");
    v.check(probes.insert(p.name).second, sec, "", "duplicate controller name");
    check_target(sec, p.target);
    v.check(p.kp >= 0.0, sec, "kp", "must be >= 0");
    v.check(p.kd >= 0.0, sec, "kd", "must be >= 0");
  }
  for (const RampSpec& r : s.ramps) {
    const std::string sec = "ramp " + r.name;
    v.check(valid_name(r.name), sec, "", "invalid name");
    v.check(probes.insert(r.name).second, sec, "", "duplicate controller name");
    check_target(sec, r.target);
    v.check(r.direction.norm() > 0.0, sec, "direction", "must be nonzero");
    v.check(std::isfinite(r.initial) && std::isfinite(r.rate), sec, "rate", "must be finite");
    v.check(r.limit > 0.0, sec, "limit", "must be positive");
  }
  for (const FrictionSpec& f : s.friction) {
    v.check(objects.count(f.a) > 0, "friction", f.a + " " + f.b, "undefined object '" + f.a + "'");
    v.check(objects.count(f.b) > 0, "friction", f.a + " " + f.b, "undefined object '" + f.b + "'");
    v.check(f.mu >= 0.0, "friction", f.a + " " + f.b, "must be >= 0");
  }
  if (!v.diagnostics().empty()) throw SceneError(ErrorCode::kValidationError, v.diagnostics());
}

std::string describe(const std::vector<Diagnostic>& diags) {
  std::string out;
  for (const Diagnostic& d : diags) {
    if (!out.empty()) out += "; ";
    out += "line " + std::to_string(d.line) + ", " + d.field + ": " + d.reason;
  }
  return out;
}

}  // namespace

SceneError::SceneError(ErrorCode code, std::vector<Diagnostic> diagnostics)
    : SimError(code, describe(diagnostics)), diagnostics_(std::move(diagnostics)) {}

int SceneSpec::num_steps() const {
  return static_cast<int>(std::llround(std::ceil(duration / stepper.dt - 1e-9)));
}

void validate_scene(const SceneSpec& spec) { validate_impl(spec, nullptr); }

SceneSpec parse_scene(const std::string& text) {
  SceneSpec spec;
  std::vector<Diagnostic> diags;
  LineMap lines;
  KeyTable table;
  std::string section;
  std::set<std::string> seen_keys, seen_sections;
  bool in_friction = false;

  auto open_section = [&](const std::string& header, int line) {
    section = header;
    seen_keys.clear();
    in_friction = false;
    table.clear();
    lines[header + "|"] = line;
    const auto toks = split_ws(header);
    const std::string kind = toks.empty() ? "" : toks[0];
    const bool named = kind == "material" || kind == "rod" || kind == "body" || kind == "pd" || kind == "ramp";
    if (named ? toks.size() != 2 : toks.size() != 1) {
      diags.push_back({line, header, named ? "section needs exactly one name" : "unknown section"});
      return;
    }
    const bool singleton = !named;
    if (singleton && !seen_sections.insert(kind).second) {
      diags.push_back({line, header, "duplicate section"});
      return;
    }
    if (kind == "scene") {
      table["duration"] = [&](const std::string& v) { spec.duration = to_double(v); };
      table["gravity"] = [&](const std::string& v) { spec.gravity = to_vec3(v); };
      table["seed"] = [&](const std::string& v) { spec.seed = to_unsigned(v); };
    } else if (kind == "stepper") {
      StepperConfig& c = spec.stepper;
      table["dt"] = [&c](const std::string& v) { c.dt = to_double(v); };
      table["theta"] = [&c](const std::string& v) { c.theta = to_double(v); };
      table["theta_vq"] = [&c](const std::string& v) { c.theta_vq = to_double(v); };
      table["newton_tolerance"] = [&c](const std::string& v) { c.newton_tolerance = to_double(v); };
      table["newton_max_iterations"] = [&c](const std::string& v) { c.newton_max_iterations = to_int(v); };
      table["contact_newton_iterations"] = [&c](const std::string& v) { c.contact_newton_iterations = to_int(v); };
      table["regularization"] = [&c](const std::string& v) { c.regularization = to_double(v); };
    } else if (kind == "contact") {
      ContactConfig& c = spec.contact;
      table["model"] = [&c](const std::string& v) { c.model = to_enum(v, kModels); };
      table["margin"] = [&c](const std::string& v) { c.margin = to_double(v); };
      table["exclusion"] = [&c](const std::string& v) { c.exclusion = to_int(v); };
      table["patch_resolution"] = [&c](const std::string& v) { c.patch_resolution = to_int(v); };
      table["slab_depth"] = [&c](const std::string& v) { c.slab_depth = to_double(v); };
      table["bias_scale"] = [&c](const std::string& v) { c.bias_scale = to_double(v); };
      table["tolerance"] = [&c](const std::string& v) { c.solver.tolerance = to_double(v); };
      table["ipm_tolerance"] = [&c](const std::string& v) { c.solver.ipm_tolerance = to_double(v); };
      table["max_iterations"] = [&c](const std::string& v) { c.solver.max_iterations = to_int(v); };
      table["fallback_compliance"] = [&c](const std::string& v) { c.solver.fallback_compliance = to_double(v); };
    } else if (kind == "output") {
      OutputSpec& o = spec.output;
      table["format"] = [&o](const std::string& v) { o.format = to_enum(v, kFormats); };
      table["path"] = [&o](const std::string& v) { o.path = v; };
      table["log_contacts"] = [&o](const std::string& v) { o.log_contacts = to_bool(v); };
      table["log_states"] = [&o](const std::string& v) { o.log_states = to_bool(v); };
    } else if (kind == "friction") {
      in_friction = true;
    } else if (kind == "material") {
      MaterialSpec& m = spec.materials.emplace_back();
      m.name = toks[1];
      table["youngs_modulus"] = [&m](const std::string& v) { m.youngs_modulus = to_double(v); };
      table["shear_modulus"] = [&m](const std::string& v) { m.shear_modulus = to_double(v); };
      table["density"] = [&m](const std::string& v) { m.density = to_double(v); };
      table["rayleigh_alpha"] = [&m](const std::string& v) { m.rayleigh_alpha = to_double(v); };
      table["rayleigh_beta"] = [&m](const std::string& v) { m.rayleigh_beta = to_double(v); };
      table["section"] = [&m](const std::string& v) { m.section = to_name(v); };
      table["radius"] = [&m](const std::string& v) { m.radius = to_double(v); };
      table["width"] = [&m](const std::string& v) { m.width = to_double(v); };
      table["height"] = [&m](const std::string& v) { m.height = to_double(v); };
    } else if (kind == "rod") {
      RodSpec& r = spec.rods.emplace_back();
      r.name = toks[1];
      table["curve"] = [&r](const std::string& v) { r.curve = to_enum(v, kCurves); };
      table["segments"] = [&r](const std::string& v) { r.segments = to_int(v); };
      table["material"] = [&r](const std::string& v) { r.material = to_name(v); };
      table["start"] = [&r](const std::string& v) { r.start = to_vec3(v); };
      table["end"] = [&r](const std::string& v) { r.end = to_vec3(v); };
      table["center"] = [&r](const std::string& v) { r.center = to_vec3(v); };
      table["axis"] = [&r](const std::string& v) { r.axis = to_vec3(v); };
      table["reference"] = [&r](const std::string& v) { r.reference = to_vec3(v); };
      table["radius"] = [&r](const std::string& v) { r.radius = to_double(v); };
      table["angle_start"] = [&r](const std::string& v) { r.angle_start = to_double(v); };
      table["angle_end"] = [&r](const std::string& v) { r.angle_end = to_double(v); };
      table["tail_length"] = [&r](const std::string& v) { r.tail_length = to_double(v); };
      table["tail_segments"] = [&r](const std::string& v) { r.tail_segments = to_int(v); };
      table["pitch"] = [&r](const std::string& v) { r.pitch = to_double(v); };
      table["turns"] = [&r](const std::string& v) { r.turns = to_double(v); };
      table["point"] = [&r](const std::string& v) { r.points.push_back(to_vec3(v)); };
      table["rest"] = [&r](const std::string& v) {
        r.straight_rest = to_enum<bool>(v, {{"natural", false}, {"straight", true}});
      };
      table["fixed"] = [&r](const std::string& v) { r.fixed = to_bool(v); };
      table["clamp_nodes"] = [&r](const std::string& v) { r.clamp_nodes = to_int_list(v); };
      table["clamp_edges"] = [&r](const std::string& v) { r.clamp_edges = to_int_list(v); };
      table["self_collision"] = [&r](const std::string& v) { r.self_collision = to_bool(v); };
      table["friction"] = [&r](const std::string& v) { r.friction = to_double(v); };
      table["velocity"] = [&r](const std::string& v) { r.velocity = to_vec3(v); };
    } else if (kind == "body") {
      BodySpec& b = spec.bodies.emplace_back();
      b.name = toks[1];
      table["shape"] = [&b](const std::string& v) { b.shape = to_enum(v, kShapes); };
      table["motion"] = [&b](const std::string& v) { b.motion = to_enum(v, kMotions); };
      table["radius"] = [&b](const std::string& v) { b.radius = to_double(v); };
      table["half_length"] = [&b](const std::string& v) { b.half_length = to_double(v); };
      table["half_extents"] = [&b](const std::string& v) { b.half_extents = to_vec3(v); };
      table["mass"] = [&b](const std::string& v) { b.mass = to_double(v); };
      table["position"] = [&b](const std::string& v) { b.position = to_vec3(v); };
      table["rotation_axis"] = [&b](const std::string& v) { b.rotation_axis = to_vec3(v); };
      table["rotation_angle"] = [&b](const std::string& v) { b.rotation_angle = to_double(v); };
      table["linear_velocity"] = [&b](const std::string& v) { b.linear_velocity = to_vec3(v); };
      table["angular_velocity"] = [&b](const std::string& v) { b.angular_velocity = to_vec3(v); };
      table["friction"] = [&b](const std::string& v) { b.friction = to_double(v); };
      table["p_max"] = [&b](const std::string& v) { b.p_max = to_double(v); };
    } else if (kind == "pd") {
      PdSpec& p = spec.controllers.emplace_back();
      p.name = toks[1];
      target_keys(table, p.target);
      table["anchor"] = [&p](const std::string& v) { p.anchor = to_vec3(v); };
      table["anchor_velocity"] = [&p](const std::string& v) { p.anchor_velocity = to_vec3(v); };
      table["kp"] = [&p](const std::string& v) { p.kp = to_double(v); };
      table["kd"] = [&p](const std::string& v) { p.kd = to_double(v); };
    } else if (kind == "ramp") {
      RampSpec& r = spec.ramps.emplace_back();
      r.name = toks[1];
      target_keys(table, r.target);
      table["direction"] = [&r](const std::string& v) { r.direction = to_vec3(v); };
      table["initial"] = [&r](const std::string& v) { r.initial = to_double(v); };
      table["rate"] = [&r](const std::string& v) { r.rate = to_double(v); };
      table["limit"] = [&r](const std::string& v) { r.limit = to_double(v); };
    } else {
      diags.push_back({line, header, "unknown section"});
    }
  };

  // Vectors of sections are filled in place; reserve so references stay valid.
  const size_t max_sections = static_cast<size_t>(std::count(text.begin(), text.end(), '[')) + 1;
  spec.materials.reserve(max_sections);
  spec.rods.reserve(max_sections);
  spec.bodies.reserve(max_sections);
  spec.controllers.reserve(max_sections);
  spec.ramps.reserve(max_sections);

  std::istringstream in(text);
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        diags.push_back({line_no, line, "unterminated section header"});
        continue;
      }
      open_section(trim(line.substr(1, line.size() - 2)), line_no);
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      diags.push_back({line_no, line, "expected 'key = value'"});
      continue;
    }
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    if (section.empty()) {
      diags.push_back({line_no, key, "key outside of any section"});
      continue;
    }
    lines[section + "|" + key] = line_no;
    if (in_friction) {
      const auto names = split_ws(key);
      if (names.size() != 2) {
        diags.push_back({line_no, key, "friction entries are 'name_a name_b = mu'"});
        continue;
      }
      try {
        spec.friction.push_back({names[0], names[1], to_double(value)});
      } catch (const ParseFailure& f) {
        diags.push_back({line_no, key, f.reason});
      }
      continue;
    }
    auto it = table.find(key);
    if (it == table.end()) {
      if (!table.empty() || split_ws(section).size() <= 2)
        diags.push_back({line_no, section + "." + key, "unknown key '" + key + "'"});
      continue;
    }
    if (key != "point" && !seen_keys.insert(key).second) {
      diags.push_back({line_no, section + "." + key, "duplicate key"});
      continue;
    }
    try {
      it->second(value);
    } catch (const ParseFailure& f) {
      diags.push_back({line_no, section + "." + key, f.reason});
    }
  }
  if (!diags.empty()) {
    const bool unknown_only = std::all_of(diags.begin(), diags.end(), [](const Diagnostic& d) {
      return d.reason.rfind("unknown key", 0) == 0;
    });
    throw SceneError(unknown_only ? ErrorCode::kValidationError : ErrorCode::kParseError, diags);
  }
  validate_impl(spec, &lines);
  return spec;
}

SceneSpec load_scene(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SimError(ErrorCode::kIoError, "cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_scene(buf.str());
}

std::string print_scene(const SceneSpec& s) {
  std::ostringstream o;
  auto kv = [&](const std::string& k, const std::string& v) { o << k << " = " << v << "\n"; };
  o << "[scene]\n";
  kv("duration", fmt(s.duration));
  kv("gravity", fmt(s.gravity));
  kv("seed", std::to_string(s.seed));
  o << "\n[stepper]\n";
  kv("dt", fmt(s.stepper.dt));
  kv("theta", fmt(s.stepper.theta));
  kv("theta_vq", fmt(s.stepper.theta_vq));
  kv("newton_tolerance", fmt(s.stepper.newton_tolerance));
  kv("newton_max_iterations", std::to_string(s.stepper.newton_max_iterations));
  kv("contact_newton_iterations", std::to_string(s.stepper.contact_newton_iterations));
  kv("regularization", fmt(s.stepper.regularization));
  o << "\n[contact]\n";
  kv("model", enum_name(s.contact.model, kModels));
  kv("margin", fmt(s.contact.margin));
  kv("exclusion", std::to_string(s.contact.exclusion));
  kv("patch_resolution", std::to_string(s.contact.patch_resolution));
  kv("slab_depth", fmt(s.contact.slab_depth));
  kv("bias_scale", fmt(s.contact.bias_scale));
  kv("tolerance", fmt(s.contact.solver.tolerance));
  kv("ipm_tolerance", fmt(s.contact.solver.ipm_tolerance));
  kv("max_iterations", std::to_string(s.contact.solver.max_iterations));
  kv("fallback_compliance", fmt(s.contact.solver.fallback_compliance));
  o << "\n[output]\n";
  kv("format", enum_name(s.output.format, kFormats));
  kv("path", s.output.path);
  kv("log_contacts", fmt(s.output.log_contacts));
  kv("log_states", fmt(s.output.log_states));
  for (const MaterialSpec& m : s.materials) {
    o << "\n[material " << m.name << "]\n";
    kv("youngs_modulus", fmt(m.youngs_modulus));
    kv("shear_modulus", fmt(m.shear_modulus));
    kv("density", fmt(m.density));
    kv("rayleigh_alpha", fmt(m.rayleigh_alpha));
    kv("rayleigh_beta", fmt(m.rayleigh_beta));
    kv("section", m.section);
    kv("radius", fmt(m.radius));
    kv("width", fmt(m.width));
    kv("height", fmt(m.height));
  }
  for (const RodSpec& r : s.rods) {
    o << "\n[rod " << r.name << "]\n";
    kv("curve", enum_name(r.curve, kCurves));
    kv("segments", std::to_string(r.segments));
    kv("material", r.material);
    kv("start", fmt(r.start));
    kv("end", fmt(r.end));
    kv("center", fmt(r.center));
    kv("axis", fmt(r.axis));
    kv("reference", fmt(r.reference));
    kv("radius", fmt(r.radius));
    kv("angle_start", fmt(r.angle_start));
    kv("angle_end", fmt(r.angle_end));
    kv("tail_length", fmt(r.tail_length));
    kv("tail_segments", std::to_string(r.tail_segments));
    kv("pitch", fmt(r.pitch));
    kv("turns", fmt(r.turns));
    for (const Vec3& p : r.points) kv("point", fmt(p));
    kv("rest", r.straight_rest ? "straight" : "natural");
    kv("fixed", fmt(r.fixed));
    kv("clamp_nodes", fmt(r.clamp_nodes));
    kv("clamp_edges", fmt(r.clamp_edges));
    kv("self_collision", fmt(r.self_collision));
    kv("friction", fmt(r.friction));
    kv("velocity", fmt(r.velocity));
  }
  for (const BodySpec& b : s.bodies) {
    o << "\n[body " << b.name << "]\n";
    kv("shape", enum_name(b.shape, kShapes));
    kv("motion", enum_name(b.motion, kMotions));
    kv("radius", fmt(b.radius));
    kv("half_length", fmt(b.half_length));
    kv("half_extents", fmt(b.half_extents));
    kv("mass", fmt(b.mass));
    kv("position", fmt(b.position));
    kv("rotation_axis", fmt(b.rotation_axis));
    kv("rotation_angle", fmt(b.rotation_angle));
    kv("linear_velocity", fmt(b.linear_velocity));
    kv("angular_velocity", fmt(b.angular_velocity));
    kv("friction", fmt(b.friction));
    kv("p_max", fmt(b.p_max));
  }
  auto target = [&](const TargetSpec& t) {
    if (!t.body.empty()) {
      kv("body", t.body);
    } else {
      kv("rod", t.rod);
      kv("node", std::to_string(t.node));
    }
  };
  for (const PdSpec& p : s.controllers) {
    o << "\n[pd " << p.name << "]\n";
    target(p.target);
    if (p.anchor) kv("anchor", fmt(*p.anchor));
    kv("anchor_velocity", fmt(p.anchor_velocity));
    kv("kp", fmt(p.kp));
    kv("kd", fmt(p.kd));
  }
  for (const RampSpec& r : s.ramps) {
    o << "\n[ramp " << r.name << "]\n";
    target(r.target);
    kv("direction", fmt(r.direction));
    kv("initial", fmt(r.initial));
    kv("rate", fmt(r.rate));
    kv("limit", fmt(r.limit));
  }
  if (!s.friction.empty()) {
    o << "\n[friction]\n";
    for (const FrictionSpec& f : s.friction) kv(f.a + " " + f.b, fmt(f.mu));
  }
  return o.str();
}

std::string override_scene_value(const std::string& text, const std::string& section,
                                 const std::string& key, const std::string& value) {
  std::istringstream in(text);
  std::vector<std::string> out;
  std::string raw, current;
  bool found_section = false, replaced = false;
  int insert_at = -1;
  while (std::getline(in, raw)) {
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (!line.empty() && line.front() == '[' && line.back() == ']') {
      current = trim(line.substr(1, line.size() - 2));
      if (current == section) {
        found_section = true;
        insert_at = static_cast<int>(out.size()) + 1;
      }
    } else if (current == section && !replaced) {
      const auto eq = line.find('=');
      if (eq != std::string::npos && trim(line.substr(0, eq)) == key) {
        out.push_back(key + " = " + value);
        replaced = true;
        continue;
      }
    }
    out.push_back(raw);
  }
  if (!found_section) {
    out.push_back("");
    out.push_back("[" + section + "]");
    out.push_back(key + " = " + value);
  } else if (!replaced) {
    out.insert(out.begin() + insert_at, key + " = " + value);
  }
  std::string joined;
  for (const std::string& l : out) joined += l + "\n";
  return joined;
}

// ---------------------------------------------------------------------------

std::vector<Vec3> rod_centerline(const RodSpec& r) {
  std::vector<Vec3> nodes;
  const Vec3 axis = r.axis.normalized();
  const Vec3 e1 = (r.reference - r.reference.dot(axis) * axis).normalized();
  const Vec3 e2 = axis.cross(e1);
  auto on_circle = [&](double a) { return r.center + r.radius * (std::cos(a) * e1 + std::sin(a) * e2); };
  switch (r.curve) {
    case CurveKind::kStraight:
      for (int i = 0; i <= r.segments; ++i)
        nodes.push_back(r.start + (r.end - r.start) * (static_cast<double>(i) / r.segments));
      break;
    case CurveKind::kArc: {
      const double sweep = r.angle_end - r.angle_start;
      const double sign = sweep > 0.0 ? 1.0 : -1.0;
      auto tangent = [&](double a) { return sign * (-std::sin(a) * e1 + std::cos(a) * e2); };
      const Vec3 p0 = on_circle(r.angle_start), t0 = tangent(r.angle_start);
      for (int i = r.tail_segments; i >= 1; --i)
        nodes.push_back(p0 - t0 * (r.tail_length * i / r.tail_segments));
      for (int i = 0; i <= r.segments; ++i)
        nodes.push_back(on_circle(r.angle_start + sweep * i / r.segments));
      const Vec3 p1 = on_circle(r.angle_end), t1 = tangent(r.angle_end);
      for (int i = 1; i <= r.tail_segments; ++i)
        nodes.push_back(p1 + t1 * (r.tail_length * i / r.tail_segments));
      break;
    }
    case CurveKind::kRing:
      for (int i = 0; i < r.segments; ++i)
        nodes.push_back(on_circle(r.angle_start + 2.0 * std::numbers::pi * i / r.segments));
      break;
    case CurveKind::kHelix:
      for (int i = 0; i <= r.segments; ++i) {
        const double f = static_cast<double>(i) / r.segments;
        nodes.push_back(on_circle(r.angle_start + 2.0 * std::numbers::pi * r.turns * f) +
                        axis * (r.pitch * r.turns * f));
      }
      break;
    case CurveKind::kPolyline:
      nodes = r.points;
      break;
  }
  return nodes;
}

namespace {

Mat3 solid_inertia(const BodySpec& b) {
  const double m = b.mass;
  switch (b.shape) {
    case ShapeKind::kSphere: return Mat3::Identity() * 0.4 * m * b.radius * b.radius;
    case ShapeKind::kCapsule: {
      const double r = b.radius, h = b.half_length;
      const double vc = std::numbers::pi * r * r * 2.0 * h, vs = 4.0 / 3.0 * std::numbers::pi * r * r * r;
      const double mc = m * vc / (vc + vs), ms = m - mc;
      const double iz = 0.5 * mc * r * r + 0.4 * ms * r * r;
      const double ix = mc * (3.0 * r * r + 4.0 * h * h) / 12.0 + ms * (0.4 * r * r + h * h + 0.75 * h * r);
      return Vec3(ix, ix, iz).asDiagonal();
    }
    case ShapeKind::kBox: {
      const Vec3 e = 2.0 * b.half_extents;
      return Vec3(e.y() * e.y() + e.z() * e.z(), e.x() * e.x() + e.z() * e.z(),
                  e.x() * e.x() + e.y() * e.y()).asDiagonal() * (m / 12.0);
    }
    case ShapeKind::kHalfSpace: break;
  }
  return Mat3::Identity();
}

int wrap_index(int k, int n) { return k < 0 ? n + k : k; }

}  // namespace

Simulation instantiate(const SceneSpec& spec) {
  validate_scene(spec);
  Simulation sim;
  sim.stepper = spec.stepper;
  sim.contact = spec.contact;
  SystemState& s = sim.state;
  s.gravity = spec.gravity;

  std::map<std::string, RodParameters> materials;
  for (const MaterialSpec& m : spec.materials) {
    RodParameters p;
    p.youngs_modulus = m.youngs_modulus;
    p.shear_modulus = m.shear_modulus;
    p.density = m.density;
    p.rayleigh_alpha = m.rayleigh_alpha;
    p.rayleigh_beta = m.rayleigh_beta;
    if (m.section == "circular") p.section = CircularSection{m.radius};
    else p.section = RectangularSection{m.width, m.height};
    materials[m.name] = p;
  }
  std::map<std::string, int> rod_index, body_index;
  for (const RodSpec& r : spec.rods) {
    const std::vector<Vec3> nodes = rod_centerline(r);
    const bool closed = r.curve == CurveKind::kRing;
    RodBody rod;
    if (r.straight_rest) {
      std::vector<Vec3> rest{Vec3::Zero()};
      for (size_t i = 1; i < nodes.size(); ++i)
        rest.push_back(rest.back() + Vec3::UnitX() * (nodes[i] - nodes[i - 1]).norm());
      rod.state = with_initial_shape(make_rod(rest, closed), nodes);
    } else {
      rod.state = make_rod(nodes, closed);
    }
    rod.params = materials.at(r.material);
    rod.velocity = VecX::Zero(rod.state.num_dofs());
    for (int k = 0; k < rod.state.num_nodes(); ++k) rod.velocity.segment<3>(RodState::node_dof(k)) = r.velocity;
    if (r.fixed) {
      for (int d = 0; d < rod.state.num_dofs(); ++d) rod.fixed_dofs.push_back(d);
    } else {
      for (int k : r.clamp_nodes) {
        const int n = wrap_index(k, rod.state.num_nodes());
        for (int a = 0; a < 3; ++a) rod.fixed_dofs.push_back(RodState::node_dof(n) + a);
      }
      for (int k : r.clamp_edges)
        rod.fixed_dofs.push_back(RodState::edge_dof(wrap_index(k, rod.state.num_edges())));
    }
    for (int d : rod.fixed_dofs) rod.velocity[d] = 0.0;
    rod.self_collision = r.self_collision;
    rod.friction = r.friction;
    rod_index[r.name] = static_cast<int>(s.rods.size());
    s.rods.push_back(std::move(rod));
  }
  for (const BodySpec& b : spec.bodies) {
    RigidBody body;
    switch (b.shape) {
      case ShapeKind::kSphere: body.geometry = Sphere{b.radius}; break;
      case ShapeKind::kCapsule: body.geometry = Capsule{b.radius, b.half_length}; break;
      case ShapeKind::kBox: body.geometry = Box{b.half_extents}; break;
      case ShapeKind::kHalfSpace: body.geometry = HalfSpace{}; break;
    }
    body.motion = b.motion;
    body.mass = b.mass;
    body.inertia = solid_inertia(b);
    body.orientation = Quat(Eigen::AngleAxisd(b.rotation_angle, b.rotation_axis.normalized()));
    body.position = b.position;
    if (b.motion != BodyMotion::kFixed) {
      body.linear_velocity = b.linear_velocity;
      body.angular_velocity = b.angular_velocity;
    }
    body.friction = b.friction;
    body.p_max = b.p_max;
    body_index[b.name] = static_cast<int>(s.bodies.size());
    s.bodies.push_back(std::move(body));
  }
  auto attach = [&](const TargetSpec& t) {
    Attachment a;
    if (!t.body.empty()) {
      a.body = body_index.at(t.body);
    } else {
      a.rod = rod_index.at(t.rod);
      a.node = wrap_index(t.node, s.rods[a.rod].state.num_nodes());
    }
    return a;
  };
  auto position_of = [&](const Attachment& a) {
    return a.body >= 0 ? s.bodies[a.body].position : s.rods[a.rod].state.nodes[a.node];
  };
  for (const PdSpec& p : spec.controllers) {
    PdController c;
    c.point = attach(p.target);
    c.anchor = p.anchor ? *p.anchor : position_of(c.point);
    c.anchor_velocity = p.anchor_velocity;
    c.kp = p.kp;
    c.kd = p.kd;
    s.controllers.push_back(c);
    sim.probe_names.push_back(p.name);
  }
  for (const RampSpec& r : spec.ramps) {
    ForceRamp f;
    f.point = attach(r.target);
    f.direction = r.direction.normalized();
    f.initial = r.initial;
    f.rate = r.rate;
    f.limit = r.limit;
    s.ramps.push_back(f);
    sim.probe_names.push_back(r.name);
  }
  for (const FrictionSpec& f : spec.friction) {
    FrictionOverride o;
    auto side = [&](const std::string& name, ContactSide::Kind& kind, int& index) {
      if (rod_index.count(name)) {
        kind = ContactSide::Kind::kRodSegment;
        index = rod_index.at(name);
      } else {
        kind = ContactSide::Kind::kBody;
        index = body_index.at(name);
      }
    };
    side(f.a, o.kind_a, o.index_a);
    side(f.b, o.kind_b, o.index_b);
    o.mu = f.mu;
    sim.contact.friction_pairs.push_back(o);
  }
  s.validate();
  return sim;
}

}  // namespace filsim
