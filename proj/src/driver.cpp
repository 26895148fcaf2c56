#include "filsim/driver.hpp"

#include <charconv>
#include <chrono>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace filsim {

namespace {

std::vector<Vec3> probe_forces(const SystemState& s, const StepperConfig& config, bool initial) {
  std::vector<Vec3> out;
  for (const PdController& c : s.controllers) {
    if (!initial) {
      out.push_back(c.last_force);
      continue;
    }
    const bool body = c.point.body >= 0;
    const Vec3 x = body ? s.bodies[c.point.body].position : s.rods[c.point.rod].state.nodes[c.point.node];
    const Vec3 v = body ? s.bodies[c.point.body].linear_velocity
                        : Vec3(s.rods[c.point.rod].velocity.segment<3>(RodState::node_dof(c.point.node)));
    out.push_back(c.kp * (c.target(s.time) - x) + c.kd * (c.anchor_velocity - v));
  }
  // Ramps act at t0 + theta dt of the step that ended at s.time.
  const double t = initial ? s.time : s.time - (1.0 - config.theta) * config.dt;
  for (const ForceRamp& f : s.ramps) out.push_back(f.force(t));
  return out;
}

StepRecord make_record(int step, const SystemState& s, const StepperConfig& config,
                       const OutputSpec& output, const std::vector<ContactPoint>& contacts,
                       const StepStats* stats) {
  StepRecord r;
  r.step = step;
  r.time = s.time;
  if (output.log_states) {
    r.q = s.coordinates();
    r.v = s.velocities();
  }
  r.num_contacts = static_cast<int>(contacts.size());
  for (size_t i = 0; i < contacts.size(); ++i) {
    const double phi = contacts[i].signed_distance;
    r.max_abs_phi = std::max(r.max_abs_phi, std::abs(phi));
    r.min_phi = std::min(r.min_phi, phi);
    if (output.log_contacts) {
      ContactRecord c;
      c.signed_distance = phi;
      c.position = contacts[i].position;
      c.normal = contacts[i].normal;
      if (stats) {
        c.impulse = stats->impulses.segment<3>(3 * i);
        if (i < stats->modes.size()) c.mode = stats->modes[i];
      }
      r.contacts.push_back(c);
    }
  }
  if (stats) {
    r.newton_iterations = stats->newton_iterations;
    r.newton_residual = stats->newton_residual;
    r.solver_iterations = stats->solver_iterations;
    r.solver_converged = stats->solver_converged;
    r.solver_regularized = stats->solver_regularized;
    r.certificate = stats->certificate;
  }
  r.energy = system_energy(s);
  r.probe_forces = probe_forces(s, config, stats == nullptr);
  return r;
}

std::string num(double x) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, x);
  return std::string(buf, r.ptr);
}

const char* mode_name(ContactMode m) {
  switch (m) {
    case ContactMode::kOpen: return "open";
    case ContactMode::kStick: return "stick";
    case ContactMode::kSlip: return "slip";
  }
  return "?";
}

nlohmann::json vec(const VecX& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
nlohmann::json vec(const Vec3& v) { return {v.x(), v.y(), v.z()}; }

nlohmann::json failure_json(const FailureRecord& f) {
  return {{"failure",
           {{"step", f.step}, {"time", f.time}, {"code", to_string(f.code)}, {"message", f.message}}}};
}

}  // namespace

StepFailure::StepFailure(RunLog log, const std::string& what)
    : SimError(ErrorCode::kStepFailure, what), log_(std::move(log)) {}

RunLog run_simulation(const SceneSpec& spec, const ProgressSink& progress) {
  const auto start = std::chrono::steady_clock::now();
  Simulation sim = instantiate(spec);
  Stepper stepper(sim.stepper, sim.contact);
  SystemState& state = sim.state;
  const int steps = spec.num_steps();
  const double t0 = state.time;

  RunLog log;
  log.probe_names = sim.probe_names;
  auto note = [&](const StepRecord& r) {
    log.summary.min_signed_distance = std::min(log.summary.min_signed_distance, r.min_phi);
    log.summary.max_penetration = std::max(log.summary.max_penetration, -r.min_phi);
    log.summary.certificates_pass = log.summary.certificates_pass && r.solver_converged;
  };
  log.records.push_back(make_record(0, state, sim.stepper, spec.output, stepper.detect_contacts(state), nullptr));
  note(log.records.back());

  for (int k = 0; k < steps; ++k) {
    FailureRecord failure;
    try {
      const StepStats stats = stepper.step(state);
      state.time = t0 + (k + 1) * sim.stepper.dt;
      if (!stats.solver_converged)
        throw SimError(ErrorCode::kMaxIterations, "contact solve did not meet its certificate");
      log.records.push_back(make_record(k + 1, state, sim.stepper, spec.output, stats.contacts, &stats));
      note(log.records.back());
      log.summary.steps = k + 1;
      if (progress) progress(k + 1, steps);
      continue;
    } catch (const SimError& e) {
      failure = {k, state.time, e.code(), e.what()};
    }
    log.failure = failure;
    log.summary.wall_time =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    const std::string what = "step " + std::to_string(failure.step) + ": " + failure.message;
    throw StepFailure(std::move(log), what);
  }
  log.summary.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return log;
}

std::string format_log(const RunLog& log, LogFormat format) {
  std::ostringstream o;
  if (format == LogFormat::kCsv) {
    o << "time,stretching,twisting,bending,kinetic,gravity,contacts,max_abs_phi,min_phi";
    for (const std::string& p : log.probe_names) o << "," << p << "_fx," << p << "_fy," << p << "_fz";
    o << "\n";
    for (const StepRecord& r : log.records) {
      const SystemEnergy& e = r.energy;
      o << num(r.time) << "," << num(e.stretching) << "," << num(e.twisting) << "," << num(e.bending)
        << "," << num(e.kinetic) << "," << num(e.gravity) << "," << r.num_contacts << ","
        << num(r.max_abs_phi) << "," << num(r.min_phi);
      for (const Vec3& f : r.probe_forces) o << "," << num(f.x()) << "," << num(f.y()) << "," << num(f.z());
      o << "\n";
    }
    if (log.failure) {
      const FailureRecord& f = *log.failure;
      o << "# failure step=" << f.step << " time=" << num(f.time) << " code=" << to_string(f.code)
        << " message=" << nlohmann::json(f.message).dump() << "\n";
    }
    return o.str();
  }
  for (const StepRecord& r : log.records) {
    nlohmann::json j;
    j["step"] = r.step;
    j["time"] = r.time;
    if (r.q.size() > 0 || r.v.size() > 0) {
      j["q"] = vec(r.q);
      j["v"] = vec(r.v);
    }
    j["energy"] = {{"stretching", r.energy.stretching}, {"twisting", r.energy.twisting},
                   {"bending", r.energy.bending},       {"kinetic", r.energy.kinetic},
                   {"gravity", r.energy.gravity}};
    j["num_contacts"] = r.num_contacts;
    j["max_abs_phi"] = r.max_abs_phi;
    if (std::isfinite(r.min_phi)) j["min_phi"] = r.min_phi;
    if (!r.contacts.empty()) {
      nlohmann::json cs = nlohmann::json::array();
      for (const ContactRecord& c : r.contacts)
        cs.push_back({{"phi", c.signed_distance}, {"impulse", vec(c.impulse)},
                      {"position", vec(c.position)}, {"normal", vec(c.normal)}, {"mode", mode_name(c.mode)}});
      j["contacts"] = cs;
    }
    j["solver"] = {{"newton_iterations", r.newton_iterations},
                   {"newton_residual", r.newton_residual},
                   {"iterations", r.solver_iterations},
                   {"converged", r.solver_converged},
                   {"regularized", r.solver_regularized},
                   {"momentum_residual", r.certificate.momentum_residual},
                   {"complementarity", r.certificate.complementarity},
                   {"relative_complementarity", r.certificate.relative_complementarity},
                   {"impulse_cone_violation", r.certificate.impulse_cone_violation},
                   {"velocity_cone_violation", r.certificate.velocity_cone_violation}};
    nlohmann::json probes = nlohmann::json::object();
    for (size_t i = 0; i < log.probe_names.size() && i < r.probe_forces.size(); ++i)
      probes[log.probe_names[i]] = vec(r.probe_forces[i]);
    j["probes"] = probes;
    o << j.dump() << "\n";
  }
  if (log.failure) o << failure_json(*log.failure).dump() << "\n";
  return o.str();
}

void export_log(const RunLog& log, LogFormat format, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw SimError(ErrorCode::kIoError, "cannot write " + path);
  out << format_log(log, format);
  out.flush();
  if (!out) throw SimError(ErrorCode::kIoError, "write to " + path + " failed");
}

}  // namespace filsim
