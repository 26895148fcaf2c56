// Acceptance runner: one PASS/FAIL line per criterion.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numbers>
#include <random>

#include <CLI11.hpp>

#include "filsim/driver.hpp"
#include "filsim/oracles.hpp"

using namespace filsim;

namespace {

constexpr double kPi = std::numbers::pi;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

struct LineFit {
  double slope = 0.0, intercept = 0.0, r2 = 0.0;
};

LineFit fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  LineFit f;
  f.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  f.intercept = (sy - f.slope * sx) / n;
  double ss_res = 0, ss_tot = 0;
  for (size_t i = 0; i < x.size(); ++i) {
    ss_res += std::pow(y[i] - f.slope * x[i] - f.intercept, 2);
    ss_tot += std::pow(y[i] - sy / n, 2);
  }
  f.r2 = ss_tot > 0 ? 1.0 - ss_res / ss_tot : 1.0;
  return f;
}

// Capstan ------------------------------------------------------------------

Outcome capstan_law() {
  const double mu = 0.2;
  std::vector<double> phis, logs;
  std::string points;
  bool points_ok = true;
  for (int k = 2; k <= 10; ++k) {
    const double phi = 0.2 * kPi * k;
    const SceneSpec spec = build_scenario("capstan", {{"wrap", phi}, {"mu", mu}, {"segment_angle", kPi / 40}});
    RunLog log;
    try {
      log = run_simulation(spec);
    } catch (const StepFailure& e) {
      return {false, fmt("wrap %.2fpi failed: %s", 0.2 * k, e.what())};
    }
    const size_t n = log.records.size(), first = n - std::max<size_t>(1, n / 5);
    double t1 = 0, t2 = 0;
    for (size_t i = first; i < n; ++i) {
      t1 += log.records[i].probe_forces[0].norm();
      t2 += log.records[i].probe_forces[1].norm();
    }
    const double lr = std::log(t2 / t1);
    phis.push_back(phi);
    logs.push_back(lr);
    const double err = lr - std::log(oracles::capstan_ratio(mu, phi));
    if (phi >= 0.8 * kPi - 1e-9 && std::abs(err) > 0.1) points_ok = false;
    points += fmt(" %.1fpi:%+.3f", 0.2 * k, err);
  }
  const LineFit f = fit_line(phis, logs);
  const bool slope_ok = std::abs(f.slope - mu) <= 0.1 * mu;
  return {slope_ok && points_ok, fmt("slope=%.4f (target 0.2 +-10%%) log-ratio errors%s", f.slope, points.c_str())};
}

// Rod derivatives ----------------------------------------------------------

RodState random_rod_state(std::mt19937& rng, int n) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  const double a = 0.2 * u(rng), b = 0.2 * u(rng), c = 0.4 * u(rng);
  std::vector<Vec3> x;
  for (int i = 0; i < n; ++i) {
    const double s = 0.3 * i;
    x.emplace_back(s, a * std::sin(3 * s) + 0.05 * u(rng), b * std::cos(2 * s) + c * s * s);
  }
  RodState rest = make_rod(x, false);
  for (Vec3& p : x) p += 0.04 * Vec3(u(rng), u(rng), u(rng));
  RodState s = with_initial_shape(rest, x);
  for (int j = 0; j < s.num_edges(); ++j) s.edge_angles[j] = 0.5 * u(rng);
  return s;
}

double rel_err(const MatX& a, const MatX& ref) {
  return (a - ref).cwiseAbs().maxCoeff() / std::max(1.0, ref.cwiseAbs().maxCoeff());
}

Outcome rod_derivatives() {
  std::mt19937 rng(101);
  RodParameters p;
  p.youngs_modulus = 1e5;
  p.shear_modulus = 4e4;
  p.section = CircularSection{0.05};
  p.density = 1000.0;
  double worst_g = 0.0, worst_h = 0.0;
  for (int trial = 0; trial < 50; ++trial) {
    const RodState s = random_rod_state(rng, 8);
    const VecX q = pack_coordinates(s);
    auto at = [&](const VecX& x) { return with_coordinates(s, {x.data(), static_cast<size_t>(x.size())}); };
    const VecX fd = oracles::fd_gradient([&](const VecX& x) { return elastic_energy(at(x), p).total(); }, q);
    worst_g = std::max(worst_g, rel_err(elastic_gradient(s, p), fd));
    const MatX jac = oracles::fd_jacobian([&](const VecX& x) { return elastic_gradient(at(x), p); }, q);
    worst_h = std::max(worst_h, rel_err(MatX(elastic_hessian(s, p)), 0.5 * (jac + jac.transpose())));
  }
  return {worst_g <= 1e-6 && worst_h <= 1e-5,
          fmt("50 states, gradient err %.2e (<= 1e-6), Hessian err %.2e (<= 1e-5)", worst_g, worst_h)};
}

// Certificates -------------------------------------------------------------

struct CertScan {
  int steps = 0, checked = 0, failed = 0;
  double worst = 0.0;
  std::string error;
};

CertScan scan_certificates(const SceneSpec& spec) {
  CertScan out;
  RunLog log;
  try {
    log = run_simulation(spec);
  } catch (const StepFailure& e) {
    out.error = e.what();
    log = e.log();
  }
  for (const StepRecord& r : log.records) {
    if (r.step == 0) continue;
    ++out.steps;
    if (r.num_contacts == 0) continue;
    ++out.checked;
    const ConeCertificate& c = r.certificate;
    out.worst = std::max({out.worst, c.relative_complementarity, c.impulse_cone_violation,
                          c.velocity_cone_violation});
    if (!c.passes(1e-8)) ++out.failed;
  }
  return out;
}

Outcome certificates() {
  const std::vector<std::pair<std::string, SceneSpec>> scenes = {
      {"sphere-drop(point)", build_scenario("sphere_on_plane", {{"drop", 0.05}, {"duration", 0.5}})},
      {"sphere-drop(patch)", build_scenario("sphere_on_plane", {{"drop", 0.05}, {"duration", 0.5}, {"patch", 1}})},
      {"ring_chain(3)", build_scenario("ring_chain", {{"n", 3}})},
      {"overhand_knot", build_scenario("overhand_knot")},
  };
  bool ok = true;
  std::string detail;
  for (const auto& [name, spec] : scenes) {
    const CertScan s = scan_certificates(spec);
    const bool pass = s.error.empty() && s.failed == 0 && s.checked > 0;
    ok = ok && pass;
    detail += fmt(" %s: %d/%d contact steps fail, worst %.1e%s;", name.c_str(), s.failed, s.checked, s.worst,
                  s.error.empty() ? "" : (" [" + s.error + "]").c_str());
  }
  return {ok, "tol 1e-8" + detail};
}

// Solver vs oracle ---------------------------------------------------------

double s_norm(const SparseMat& s, const VecX& x) { return std::sqrt(x.dot(s * x)); }

Outcome oracle_equivalence() {
  std::mt19937 rng(7);
  std::normal_distribution<double> g;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  int bad = 0;
  double worst_v = 0.0, worst_l = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int nc = std::uniform_int_distribution<int>(1, 5)(rng);
    const int n = std::uniform_int_distribution<int>(std::min(3 * nc, 12), 12)(rng);
    MatX a(n, n);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j) a(i, j) = g(rng);
    a = a * a.transpose() / n + MatX::Identity(n, n);
    MatX j = MatX::Zero(n, 3 * nc);
    for (int r = 0; r < n; ++r)
      for (int c = 0; c < 3 * nc; ++c)
        if (u(rng) < 0.7) j(r, c) = g(rng);
    ConeProblem p;
    p.schur = a.sparseView();
    p.free_velocity = VecX::NullaryExpr(n, [&] { return g(rng); });
    p.jacobian = j.sparseView();
    p.bias = VecX::Zero(3 * nc);
    p.compliance = VecX::Zero(3 * nc);
    for (int i = 0; i < nc; ++i) {
      p.bias[3 * i + 2] = u(rng) - 0.5;
      p.friction.push_back(u(rng) < 0.2 ? 0.0 : 0.1 + 0.9 * u(rng));
    }
    const ConeSolution sol = solve_cone_qp(p);
    const auto ref = oracles::dense_cone_qp(p);
    const double dv = s_norm(p.schur, sol.velocity - ref.velocity) / std::max(1.0, s_norm(p.schur, ref.velocity));
    const double dl = (sol.impulse - ref.impulse).lpNorm<Eigen::Infinity>() /
                      std::max(1.0, ref.impulse.lpNorm<Eigen::Infinity>());
    worst_v = std::max(worst_v, dv);
    worst_l = std::max(worst_l, dl);
    if (!sol.converged || dv > 1e-6 || dl > 1e-5) ++bad;
  }
  return {bad == 0, fmt("100 problems, %d disagree; worst S-norm dv %.2e (<= 1e-6), dlambda %.2e (<= 1e-5)",
                        bad, worst_v, worst_l)};
}

// Ring chain ---------------------------------------------------------------

Outcome ring_chain_static(bool ci) {
  const int n = ci ? 3 : 5;
  const double hold = ci ? 4.0 : 10.0;
  const double duration = ci ? 5.0 : 12.0;
  SceneSpec spec = build_scenario("ring_chain", {{"n", n}, {"duration", duration}});
  RunLog log;
  try {
    log = run_simulation(spec);
  } catch (const StepFailure& e) {
    return {false, fmt("ring_chain(%d) failed: %s", n, e.what())};
  }
  double settled = -1.0, min_phi = std::numeric_limits<double>::infinity();
  for (const StepRecord& r : log.records) {
    min_phi = std::min(min_phi, r.min_phi);
    const double speed = r.v.size() ? r.v.lpNorm<Eigen::Infinity>() : 0.0;
    if (speed >= 1e-3) settled = -1.0;
    else if (settled < 0.0) settled = r.time;
  }
  const double end = log.records.back().time;
  const bool ok = settled >= 0.0 && end - settled >= hold - 1e-9 && min_phi >= -1e-4;
  return {ok, fmt("ring_chain(%d), %.0f s: settled at %.3f s and held %.2f s (>= %.0f), min phi %.2e m (>= -1e-4)", n,
                  duration, settled, settled >= 0 ? end - settled : 0.0, hold, min_phi)};
}

Outcome ring_scaling() {
  std::vector<double> ns, walls;
  std::string detail;
  for (int n = 2; n <= 10; n += 2) {
    SceneSpec spec = build_scenario("ring_chain", {{"n", n}, {"duration", 1.0}});
    spec.output.log_states = false;
    RunLog log;
    try {
      log = run_simulation(spec);
    } catch (const StepFailure& e) {
      return {false, fmt("ring_chain(%d) failed: %s", n, e.what())};
    }
    ns.push_back(n);
    walls.push_back(log.summary.wall_time);
    detail += fmt(" n=%d:%.1fs", n, log.summary.wall_time);
  }
  const LineFit f = fit_line(ns, walls);
  return {f.r2 >= 0.9, fmt("R^2=%.4f (>= 0.9)%s", f.r2, detail.c_str())};
}

// Sphere -------------------------------------------------------------------

Outcome sphere_weight() {
  bool ok = true;
  std::string detail;
  for (int patch = 0; patch < 2; ++patch) {
    const SceneSpec spec = build_scenario("sphere_on_plane", {{"patch", patch}, {"duration", 1.0}});
    Simulation sim = instantiate(spec);
    Stepper stepper(sim.stepper, sim.contact);
    StepStats stats;
    for (int k = 0; k < spec.num_steps(); ++k) stats = stepper.step(sim.state);
    const double weight = sim.state.bodies[1].mass * 9.81;
    const double fz = body_contact_impulse(stats, 1).z() / sim.stepper.dt;
    const double err = std::abs(fz - weight) / weight;
    ok = ok && err <= 1e-3;
    detail += fmt(" %s %.6f N (rel err %.1e);", patch ? "patch" : "point", fz, err);
  }
  return {ok, "target 9.81 N +-1e-3 rel," + detail};
}

// Midpoint energy ----------------------------------------------------------

Outcome midpoint_energy() {
  std::mt19937 rng(9);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  RodParameters p;
  p.youngs_modulus = 1e5;
  p.shear_modulus = 4e4;
  p.section = CircularSection{5e-3};
  p.density = 1000.0;
  const int segments = 10;
  std::vector<Vec3> straight, bent;
  for (int i = 0; i <= segments; ++i) {
    const double s = 0.2 * i / segments, a = 2.0 * s;
    straight.emplace_back(s, 0.0, 0.0);
    bent.emplace_back(std::sin(a) / 2.0, (1.0 - std::cos(a)) / 2.0, 0.01 * u(rng));
  }
  RodBody rod;
  rod.state = with_initial_shape(make_rod(straight, false), bent);
  for (int j = 0; j < rod.state.num_edges(); ++j) rod.state.edge_angles[j] = u(rng);
  rod.params = p;
  rod.velocity = VecX::Zero(rod.state.num_dofs());
  SystemState s;
  s.rods.push_back(rod);
  Stepper stepper(StepperConfig{.dt = 1e-3, .theta = 0.5, .theta_vq = 0.5, .newton_tolerance = 1e-13});
  const double e0 = system_energy(s).total();
  double worst = 0.0;
  for (int k = 0; k < 1000; ++k) {
    stepper.step(s);
    worst = std::max(worst, std::abs(system_energy(s).total() - e0) / e0);
  }
  return {worst <= 0.02, fmt("max relative drift %.3e over 1 s (<= 0.02)", worst)};
}

// Knot ---------------------------------------------------------------------

Outcome knot_penetration() {
  const SceneSpec spec = build_scenario("overhand_knot");
  Simulation sim = instantiate(spec);
  Stepper stepper(sim.stepper, sim.contact);
  double min_phi = std::numeric_limits<double>::infinity();
  auto scan = [&] {
    for (const ContactPoint& c : stepper.detect_contacts(sim.state))
      min_phi = std::min(min_phi, c.signed_distance);
  };
  scan();
  for (int k = 0; k < spec.num_steps(); ++k) {
    try {
      stepper.step(sim.state);
    } catch (const SimError& e) {
      return {false, fmt("step %d failed: %s", k, e.what())};
    }
    scan();
  }
  return {min_phi >= -5e-4, fmt("%d steps, min signed distance %.3e m (>= -5e-4)", spec.num_steps(), min_phi)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  bool ci = false;
  std::vector<std::string> only;
  app.add_flag("--ci", ci, "Run the 3-ring, 5 s ring chain variant");
  app.add_option("--only", only, "Criteria to run (default all)");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"rod_derivatives", rod_derivatives},
      {"oracle_equivalence", oracle_equivalence},
      {"midpoint_energy", midpoint_energy},
      {"sphere_weight", sphere_weight},
      {"certificates", certificates},
      {"knot_penetration", knot_penetration},
      {"ring_chain_static", [ci] { return ring_chain_static(ci); }},
      {"ring_scaling", ring_scaling},
      {"capstan_law", capstan_law},
  };
  int failures = 0;
  for (const auto& [name, run] : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::printf("%s %s: %s [%.1f s]\n", o.pass ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), wall);
    std::fflush(stdout);
    failures += !o.pass;
  }
  return failures == 0 ? 0 : 1;
}
