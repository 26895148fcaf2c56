#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "filsim/scene.hpp"

namespace filsim {

struct ContactRecord {
  double signed_distance = 0.0;
  Vec3 impulse = Vec3::Zero();  // (t1, t2, n)
  Vec3 position = Vec3::Zero();
  Vec3 normal = Vec3::UnitZ();
  ContactMode mode = ContactMode::kOpen;
};

/// State after `step` steps. Contact and solver fields describe the step that
/// produced it; record 0 holds the contacts detected in the initial state.
struct StepRecord {
  int step = 0;
  double time = 0.0;
  VecX q, v;
  int num_contacts = 0;
  double max_abs_phi = 0.0;
  double min_phi = std::numeric_limits<double>::infinity();
  std::vector<ContactRecord> contacts;
  int newton_iterations = 0;
  double newton_residual = 0.0;
  int solver_iterations = 0;
  bool solver_converged = true;
  bool solver_regularized = false;
  ConeCertificate certificate;
  SystemEnergy energy;
  std::vector<Vec3> probe_forces;  // controllers then ramps
};

struct FailureRecord {
  int step = 0;  // index of the step that failed
  double time = 0.0;
  ErrorCode code = ErrorCode::kStepFailure;
  std::string message;
};

struct RunSummary {
  double wall_time = 0.0;  // s
  int steps = 0;
  double max_penetration = 0.0;  // m, max of -phi over the run
  double min_signed_distance = std::numeric_limits<double>::infinity();
  bool certificates_pass = true;
};

struct RunLog {
  std::vector<std::string> probe_names;
  std::vector<StepRecord> records;
  RunSummary summary;
  std::optional<FailureRecord> failure;
};

/// Raised when a step cannot be completed; carries the log up to the last
/// good state, ending with the failure record.
class StepFailure : public SimError {
 public:
  StepFailure(RunLog log, const std::string& what);
  const RunLog& log() const { return log_; }

 private:
  RunLog log_;
};

using ProgressSink = std::function<void(int step, int total)>;

/// Runs `spec` for spec.num_steps() steps. Records keep q and v only when
/// spec.output.log_states is set and per-contact data only with log_contacts.
RunLog run_simulation(const SceneSpec& spec, const ProgressSink& progress = {});

/// CSV columns: time, stretching, twisting, bending, kinetic, gravity,
/// contacts, max_abs_phi, min_phi, then <probe>_fx, _fy, _fz per probe.
void export_log(const RunLog& log, LogFormat format, const std::string& path);
std::string format_log(const RunLog& log, LogFormat format);

}  // namespace filsim
