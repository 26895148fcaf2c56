#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <sstream>

#include <doctest.h>
#include <json.hpp>

#include "filsim/driver.hpp"

using namespace filsim;

namespace {

constexpr double kPi = std::numbers::pi;

const char* kMinimal = R"(
[scene]
duration = 0.1
gravity = 0 0 -9.81

[material wire]
youngs_modulus = 1e6
shear_modulus = 4e5
density = 1000
radius = 1e-3

[rod wire]
curve = straight
segments = 10
material = wire
start = 0 0 0.1
end = 0.2 0 0.1
)";

std::string scene_path(const std::string& name) { return std::string(SCENE_DIR) + "/" + name; }

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::stringstream in(s);
  for (std::string x; std::getline(in, x, sep);) out.push_back(x);
  return out;
}

SceneError expect_scene_error(const std::string& text) {
  try {
    parse_scene(text);
  } catch (const SceneError& e) {
    return e;
  }
  FAIL("scene parsed");
  return SceneError(ErrorCode::kParseError, {});
}

}  // namespace

TEST_CASE("minimal scene parses to one straight rod") {
  const SceneSpec s = parse_scene(kMinimal);
  CHECK(s.duration == doctest::Approx(0.1));
  CHECK(s.gravity.isApprox(Vec3(0, 0, -9.81)));
  REQUIRE(s.rods.size() == 1);
  CHECK(s.rods[0].curve == CurveKind::kStraight);
  CHECK(s.rods[0].segments == 10);
  CHECK(s.num_steps() == 100);
  const Simulation sim = instantiate(s);
  CHECK(sim.state.rods[0].state.num_nodes() == 11);
}

TEST_CASE("an unknown key is reported with its line") {
  const SceneError e = expect_scene_error(std::string(kMinimal) + "bogus_key = 3\n");
  CHECK(e.code() == ErrorCode::kValidationError);
  REQUIRE(e.diagnostics().size() == 1);
  CHECK(e.diagnostics()[0].field == "rod wire.bogus_key");
  CHECK(e.diagnostics()[0].line == static_cast<int>(lines_of(kMinimal).size()) + 1);
}

TEST_CASE("malformed input and inconsistent references are rejected") {
  CHECK(expect_scene_error("[scene\nduration = 1\n").code() == ErrorCode::kParseError);
  CHECK(expect_scene_error("[scene]\nduration 1\n").code() == ErrorCode::kParseError);
  CHECK(expect_scene_error("[scene]\nduration = -1\n").code() == ErrorCode::kValidationError);
  std::string missing = kMinimal;
  missing.replace(missing.find("material = wire"), 15, "material = steel");
  const SceneError e = expect_scene_error(missing);
  CHECK(e.code() == ErrorCode::kValidationError);
  CHECK(e.diagnostics()[0].field == "rod wire.material");
  std::string zero = kMinimal;
  zero.replace(zero.find("segments = 10"), 13, "segments = 0");
  CHECK(expect_scene_error(zero).code() == ErrorCode::kValidationError);
}

TEST_CASE("the shipped capstan scene has a full wrap, mu 0.2 and PD gains") {
  const SceneSpec s = load_scene(scene_path("capstan.scene"));
  REQUIRE(s.rods.size() == 1);
  const RodSpec& rope = s.rods[0];
  CHECK(rope.angle_end - rope.angle_start == doctest::Approx(2.0 * kPi));
  CHECK(rope.segments == 80);
  CHECK_FALSE(rope.self_collision);
  REQUIRE(s.friction.size() == 1);
  CHECK(s.friction[0].mu == 0.2);
  REQUIRE(s.controllers.size() == 1);
  CHECK(s.controllers[0].kp == 100.0);
  CHECK(s.controllers[0].kd == 1.0);
  REQUIRE(s.ramps.size() == 1);
}

TEST_CASE("print then parse reproduces every shipped scene and scenario") {
  for (const auto& entry : std::filesystem::directory_iterator(SCENE_DIR)) {
    CAPTURE(entry.path().string());
    const SceneSpec s = load_scene(entry.path().string());
    CHECK(parse_scene(print_scene(s)) == s);
  }
  for (const std::string& name : scenario_names()) {
    CAPTURE(name);
    const SceneSpec s = build_scenario(name);
    CHECK(parse_scene(print_scene(s)) == s);
  }
}

TEST_CASE("override_scene_value edits or appends a key") {
  const std::string edited = override_scene_value(kMinimal, "rod wire", "segments", "4");
  CHECK(parse_scene(edited).rods[0].segments == 4);
  const std::string added = override_scene_value(kMinimal, "rod wire", "friction", "0.7");
  CHECK(parse_scene(added).rods[0].friction == 0.7);
}

TEST_CASE("capstan at a full wrap has 80 arc segments of length close to R dphi") {
  const SceneSpec s = build_scenario("capstan", {{"wrap", 2.0 * kPi}, {"segment_angle", kPi / 40}});
  const RodSpec& rope = s.rods[0];
  CHECK(rope.segments == 80);
  const std::vector<Vec3> nodes = rod_centerline(rope);
  CHECK(nodes.size() == 80 + 2 * 5 + 1);
  const double r_eff = 0.02 + 5e-4;
  for (int i = 5; i < 85; ++i) CHECK((nodes[i + 1] - nodes[i]).norm() == doctest::Approx(r_eff * kPi / 40).epsilon(1e-3));
  // Chord midpoints touch the post surface offset by the rope radius.
  const Vec3 mid = 0.5 * (nodes[40] + nodes[41]);
  CHECK(std::hypot(mid.x(), mid.y()) == doctest::Approx(r_eff).epsilon(1e-12));
}

TEST_CASE("ring_chain(5) builds five interlocked rings of the given material") {
  const SceneSpec s = build_scenario("ring_chain", {{"n", 5}});
  REQUIRE(s.rods.size() == 5);
  REQUIRE(s.materials.size() == 1);
  CHECK(s.materials[0].radius == 1.25e-3);
  CHECK(s.materials[0].density == 500.0);
  CHECK(s.materials[0].youngs_modulus == 1e7);
  for (const RodSpec& r : s.rods) {
    CHECK(r.segments == 20);
    CHECK(r.radius == 0.01);
  }
  CHECK(s.rods[0].fixed);
  // Neighbours thread through each other: ring k+1's top is inside ring k.
  const Simulation sim = instantiate(s);
  for (int k = 0; k + 1 < 5; ++k) {
    double top = -1e9, bottom = 1e9;
    for (const Vec3& p : sim.state.rods[k].state.nodes) bottom = std::min(bottom, p.z());
    for (const Vec3& p : sim.state.rods[k + 1].state.nodes) top = std::max(top, p.z());
    CHECK(top > bottom);
  }
  Stepper stepper(sim.stepper, sim.contact);
  for (const ContactPoint& c : stepper.detect_contacts(sim.state)) CHECK(c.signed_distance >= 0.0);
}

TEST_CASE("the overhand knot starts without overlap") {
  const SceneSpec s = build_scenario("overhand_knot");
  const Simulation sim = instantiate(s);
  Stepper stepper(sim.stepper, sim.contact);
  // Tail segments two apart touch exactly.
  for (const ContactPoint& c : stepper.detect_contacts(sim.state)) CHECK(c.signed_distance >= -1e-12);
  CHECK(sim.probe_names == std::vector<std::string>{"pull_a", "pull_b"});
}

TEST_CASE("scenario errors") {
  try {
    build_scenario("pulley");
    FAIL("built");
  } catch (const SimError& e) {
    CHECK(e.code() == ErrorCode::kUnknownScenario);
  }
  try {
    build_scenario("capstan", {{"warp", 1.0}});
    FAIL("built");
  } catch (const SimError& e) {
    CHECK(e.code() == ErrorCode::kValidationError);
  }
  CHECK_NOTHROW(build_scenario("sphere_on_plane", {{"patch", 0}}));
  CHECK_NOTHROW(build_scenario("sphere_on_plane", {{"patch", 1}}));
}

TEST_CASE("a 10-step run logs 11 rows and an empty log only the header") {
  SceneSpec s = parse_scene(kMinimal);
  s.duration = 10 * s.stepper.dt;
  const RunLog log = run_simulation(s);
  CHECK(log.records.size() == 11);
  const auto rows = lines_of(format_log(log, LogFormat::kCsv));
  REQUIRE(rows.size() == 12);
  CHECK(rows[0] == "time,stretching,twisting,bending,kinetic,gravity,contacts,max_abs_phi,min_phi");
  for (size_t k = 1; k < rows.size(); ++k) CHECK(std::stod(split(rows[k], ',')[0]) == doctest::Approx((k - 1) * 1e-3));

  RunLog empty;
  empty.probe_names = {"T1"};
  const auto header = lines_of(format_log(empty, LogFormat::kCsv));
  REQUIRE(header.size() == 1);
  CHECK(header[0].ends_with("T1_fx,T1_fy,T1_fz"));
}

TEST_CASE("JSONL records parse back with states and contacts") {
  SceneSpec s = build_scenario("sphere_on_plane", {{"duration", 0.01}});
  s.output.log_contacts = true;
  const RunLog log = run_simulation(s);
  const auto rows = lines_of(format_log(log, LogFormat::kJsonl));
  REQUIRE(rows.size() == log.records.size());
  for (size_t k = 0; k < rows.size(); ++k) {
    const auto j = nlohmann::json::parse(rows[k]);
    CHECK(j["step"] == static_cast<int>(k));
    CHECK(j["q"].size() == static_cast<size_t>(log.records[k].q.size()));
    CHECK(j["v"].size() == j["q"].size() - 1);
    if (k > 0) {
      REQUIRE(j["contacts"].size() == 1);
      CHECK(j["solver"]["converged"] == true);
    }
  }
}

TEST_CASE("identical specs give identical logs") {
  const SceneSpec s = build_scenario("sphere_on_plane", {{"drop", 0.01}, {"duration", 0.1}});
  CHECK(format_log(run_simulation(s), LogFormat::kJsonl) == format_log(run_simulation(s), LogFormat::kJsonl));
}

TEST_CASE("a rod without gravity stays put for 100 steps") {
  SceneSpec s = parse_scene(kMinimal);
  s.gravity = Vec3::Zero();
  s.duration = 100 * s.stepper.dt;
  const RunLog log = run_simulation(s);
  REQUIRE(log.records.size() == 101);
  const VecX& q0 = log.records.front().q;
  for (const StepRecord& r : log.records) CHECK((r.q - q0).lpNorm<Eigen::Infinity>() <= 1e-12);
}

TEST_CASE("a resting sphere receives m g dt per step") {
  SceneSpec s = build_scenario("sphere_on_plane", {{"drop", 0.01}, {"duration", 0.5}});
  s.output.log_contacts = true;
  const RunLog log = run_simulation(s);
  const StepRecord& last = log.records.back();
  REQUIRE(last.contacts.size() == 1);
  CHECK(last.contacts[0].impulse.z() == doctest::Approx(9.81 * 1e-3).epsilon(1e-6));
}

TEST_CASE("a failed step ends the log with a failure record") {
  SceneSpec s = parse_scene(kMinimal);
  s.stepper.newton_tolerance = 1e-300;
  s.stepper.newton_max_iterations = 1;
  try {
    run_simulation(s);
    FAIL("run completed");
  } catch (const StepFailure& f) {
    CHECK(f.code() == ErrorCode::kStepFailure);
    REQUIRE(f.log().failure);
    CHECK(f.log().failure->step == 0);
    CHECK(f.log().failure->code == ErrorCode::kNewtonDivergence);
    CHECK(f.log().records.size() == 1);
    const auto csv = lines_of(format_log(f.log(), LogFormat::kCsv));
    CHECK(csv.back().starts_with("# failure step=0 "));
    const auto jsonl = lines_of(format_log(f.log(), LogFormat::kJsonl));
    CHECK(nlohmann::json::parse(jsonl.back())["failure"]["code"] == to_string(ErrorCode::kNewtonDivergence));
  }
}

TEST_CASE("capstan probe columns carry T1 and T2") {
  const SceneSpec s = build_scenario("capstan", {{"wrap", kPi / 2}, {"duration", 0.02}});
  const RunLog log = run_simulation(s);
  const auto rows = lines_of(format_log(log, LogFormat::kCsv));
  const auto header = split(rows[0], ',');
  const auto col = [&](const std::string& name) {
    return static_cast<size_t>(std::find(header.begin(), header.end(), name) - header.begin());
  };
  REQUIRE(col("T1_fx") < header.size());
  REQUIRE(col("T2_fz") < header.size());
  for (size_t k = 1; k < rows.size(); ++k) {
    const auto f = split(rows[k], ',');
    const double t = std::stod(f[0]);
    const Vec3 t2(std::stod(f[col("T2_fx")]), std::stod(f[col("T2_fy")]), std::stod(f[col("T2_fz")]));
    CHECK(t2.norm() == doctest::Approx(0.1 + t).epsilon(1e-12));
    CHECK(std::isfinite(std::stod(f[col("T1_fx")])));
  }
}

TEST_CASE("export_log writes the formatted text") {
  const SceneSpec s = build_scenario("sphere_on_plane", {{"duration", 0.005}});
  const RunLog log = run_simulation(s);
  const auto path = std::filesystem::temp_directory_path() / "filsim_export_test.csv";
  export_log(log, LogFormat::kCsv, path.string());
  std::ifstream in(path);
  std::stringstream buf;
  buf << in.rdbuf();
  CHECK(buf.str() == format_log(log, LogFormat::kCsv));
  std::filesystem::remove(path);
  CHECK_THROWS_AS(export_log(log, LogFormat::kCsv, "/nonexistent/dir/x.csv"), SimError);
}
