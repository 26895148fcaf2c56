// Batch command-line front end: run a scene file, run a named scenario, or
// sweep a parameter grid over either.

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <CLI11.hpp>

#include "filsim/driver.hpp"

using namespace filsim;

namespace {

enum class Verbosity { kQuiet, kInfo, kDebug };

Verbosity verbosity() {
  const char* env = std::getenv("SIM_LOG");
  if (!env) return Verbosity::kQuiet;
  const std::string v = env;
  if (v == "debug") return Verbosity::kDebug;
  if (v == "info") return Verbosity::kInfo;
  return Verbosity::kQuiet;
}

std::mutex log_mutex;

void info(const std::string& msg) {
  if (verbosity() == Verbosity::kQuiet) return;
  std::lock_guard lock(log_mutex);
  std::cerr << "[info] " << msg << "\n";
}

ProgressSink progress_sink(const std::string& label) {
  if (verbosity() != Verbosity::kDebug) return {};
  return [label](int step, int total) {
    std::lock_guard lock(log_mutex);
    std::cerr << "[debug] " << label << " step " << step << "/" << total << "\n";
  };
}

int exit_code(ErrorCode code) {
  switch (code) {
    case ErrorCode::kParseError:
    case ErrorCode::kValidationError:
    case ErrorCode::kUnknownScenario: return 2;
    case ErrorCode::kStepFailure: return 3;
    default: return 1;
  }
}

std::string read_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw SimError(ErrorCode::kIoError, "cannot read " + path);
  std::stringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

ScenarioParams parse_params(const std::vector<std::string>& items) {
  ScenarioParams out;
  for (const std::string& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos)
      throw SimError(ErrorCode::kValidationError, "parameter '" + item + "' is not key=value");
    try {
      size_t used = 0;
      const std::string value = item.substr(eq + 1);
      out[item.substr(0, eq)] = std::stod(value, &used);
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const std::logic_error&) {
      throw SimError(ErrorCode::kValidationError, "parameter '" + item + "' needs a numeric value");
    }
  }
  return out;
}

/// Mean of each probe's force magnitude over the final 20% of the records.
std::vector<double> probe_means(const RunLog& log) {
  std::vector<double> out(log.probe_names.size(), 0.0);
  const size_t n = log.records.size();
  const size_t first = n - std::max<size_t>(1, n / 5);
  for (size_t k = first; k < n; ++k)
    for (size_t i = 0; i < out.size(); ++i) out[i] += log.records[k].probe_forces[i].norm();
  for (double& x : out) x /= static_cast<double>(n - first);
  return out;
}

void report(const RunLog& log) {
  std::ostringstream o;
  o << "steps " << log.summary.steps << ", wall " << log.summary.wall_time << " s, max penetration "
    << log.summary.max_penetration << " m";
  info(o.str());
}

void write_log(const RunLog& log, const SceneSpec& spec) {
  if (spec.output.path.empty()) return;
  export_log(log, spec.output.format, spec.output.path);
  info("wrote " + spec.output.path);
}

int run_spec(const SceneSpec& spec, const std::string& label) {
  try {
    const RunLog log = run_simulation(spec, progress_sink(label));
    report(log);
    write_log(log, spec);
    return 0;
  } catch (const StepFailure& f) {
    std::cerr << "error: " << f.what() << "\n";
    write_log(f.log(), spec);
    return 3;
  }
}

struct Variation {
  std::string key;
  std::vector<std::string> values;
};

Variation parse_variation(const std::string& item) {
  const auto eq = item.find('=');
  if (eq == std::string::npos || eq == 0)
    throw SimError(ErrorCode::kValidationError, "--vary '" + item + "' is not key=v1,v2,...");
  Variation v{item.substr(0, eq), {}};
  std::stringstream list(item.substr(eq + 1));
  for (std::string x; std::getline(list, x, ',');)
    if (!x.empty()) v.values.push_back(x);
  if (v.values.empty()) throw SimError(ErrorCode::kValidationError, "--vary '" + item + "' has no values");
  return v;
}

/// Applies `section.key = value` to a scene text. Dots inside the section
/// part stand for spaces, so "rod.rope.friction" edits [rod rope].
std::string apply_override(const std::string& text, const std::string& dotted, const std::string& value) {
  const auto dot = dotted.rfind('.');
  if (dot == std::string::npos || dot == 0)
    throw SimError(ErrorCode::kValidationError, "--vary key '" + dotted + "' needs a section");
  std::string section = dotted.substr(0, dot);
  std::replace(section.begin(), section.end(), '.', ' ');
  return override_scene_value(text, section, dotted.substr(dot + 1), value);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Discrete elastic rod simulator with frictional contact"};
  app.require_subcommand(1);

  std::string scene_path, out_path, format, contact_model;
  double dt = 0.0, duration = 0.0, theta = -1.0, theta_vq = -1.0;
  bool log_contacts = false;
  CLI::App* run = app.add_subcommand("run", "Run a scene file");
  run->add_option("scene", scene_path, "Scene file")->required();
  run->add_option("--dt", dt, "Time step (s)")->check(CLI::PositiveNumber);
  run->add_option("--duration", duration, "Simulated time (s)")->check(CLI::PositiveNumber);
  run->add_option("--contact-model", contact_model, "point or patch")->check(CLI::IsMember({"point", "patch"}));
  run->add_option("--theta", theta, "theta of the integrator")->check(CLI::Range(0.0, 1.0));
  run->add_option("--theta-vq", theta_vq, "theta_vq of the integrator")->check(CLI::Range(0.0, 1.0));
  run->add_option("--out", out_path, "Log file");
  run->add_option("--format", format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));
  run->add_flag("--log-contacts", log_contacts, "Record every contact in the log");

  std::string scenario;
  std::vector<std::string> params;
  bool print_only = false;
  CLI::App* scen = app.add_subcommand("scenario", "Build and run a named scenario");
  scen->add_option("name", scenario, "capstan | ring_chain | overhand_knot | sphere_on_plane")->required();
  scen->add_option("--param", params, "Scenario parameter k=v")->allow_extra_args(false);
  scen->add_option("--out", out_path, "Log file");
  scen->add_option("--format", format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));
  scen->add_flag("--log-contacts", log_contacts, "Record every contact in the log");
  scen->add_flag("--print", print_only, "Print the scene instead of running it");

  std::string templ, out_dir;
  std::vector<std::string> vary;
  unsigned jobs = 1;
  CLI::App* sweep = app.add_subcommand("sweep", "Run a grid of variations of a scene");
  sweep->add_option("template", templ, "Scene file, or scenario:<name>")->required();
  sweep->add_option("--vary", vary, "key=v1,v2,... (section.key for scene files)")->required();
  sweep->add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  sweep->add_option("--out-dir", out_dir, "Directory for per-run logs");
  sweep->add_option("--format", format, "csv or jsonl")->check(CLI::IsMember({"csv", "jsonl"}));

  CLI11_PARSE(app, argc, argv);

  auto apply_output = [&](SceneSpec& spec) {
    if (!out_path.empty()) spec.output.path = out_path;
    if (format == "csv") spec.output.format = LogFormat::kCsv;
    if (format == "jsonl") spec.output.format = LogFormat::kJsonl;
    if (log_contacts) spec.output.log_contacts = true;
  };

  try {
    if (*run) {
      SceneSpec spec = load_scene(scene_path);
      if (dt > 0.0) spec.stepper.dt = dt;
      if (duration > 0.0) spec.duration = duration;
      if (!contact_model.empty())
        spec.contact.model = contact_model == "patch" ? ContactModel::kPatch : ContactModel::kPoint;
      if (theta >= 0.0) spec.stepper.theta = theta;
      if (theta_vq >= 0.0) spec.stepper.theta_vq = theta_vq;
      apply_output(spec);
      validate_scene(spec);
      return run_spec(spec, scene_path);
    }
    if (*scen) {
      SceneSpec spec = build_scenario(scenario, parse_params(params));
      apply_output(spec);
      if (print_only) {
        std::cout << print_scene(spec);
        return 0;
      }
      return run_spec(spec, scenario);
    }

    // Sweep: cartesian product of the variations.
    std::vector<Variation> vars;
    for (const std::string& v : vary) vars.push_back(parse_variation(v));
    const bool is_scenario = templ.rfind("scenario:", 0) == 0;
    const std::string base_text = is_scenario ? "" : read_file(templ);
    std::vector<std::vector<std::string>> grid{{}};
    for (const Variation& v : vars) {
      std::vector<std::vector<std::string>> next;
      for (const auto& row : grid)
        for (const std::string& x : v.values) {
          next.push_back(row);
          next.back().push_back(x);
        }
      grid = std::move(next);
    }
    std::vector<SceneSpec> specs;
    for (size_t i = 0; i < grid.size(); ++i) {
      SceneSpec spec;
      if (is_scenario) {
        std::vector<std::string> items;
        for (size_t k = 0; k < vars.size(); ++k) items.push_back(vars[k].key + "=" + grid[i][k]);
        spec = build_scenario(templ.substr(9), parse_params(items));
      } else {
        std::string text = base_text;
        for (size_t k = 0; k < vars.size(); ++k) text = apply_override(text, vars[k].key, grid[i][k]);
        spec = parse_scene(text);
      }
      apply_output(spec);
      spec.output.path.clear();
      if (!out_dir.empty()) {
        std::filesystem::create_directories(out_dir);
        const bool csv = spec.output.format == LogFormat::kCsv;
        spec.output.path = (std::filesystem::path(out_dir) / ("run_" + std::to_string(i) + (csv ? ".csv" : ".jsonl"))).string();
      }
      specs.push_back(std::move(spec));
    }

    std::vector<std::string> lines(specs.size());
    std::vector<int> codes(specs.size(), 0);
    std::atomic<size_t> next{0};
    auto worker = [&] {
      for (size_t i; (i = next++) < specs.size();) {
        std::ostringstream o;
        o << i;
        for (size_t k = 0; k < vars.size(); ++k) o << "," << grid[i][k];
        try {
          const RunLog log = run_simulation(specs[i], progress_sink("run " + std::to_string(i)));
          write_log(log, specs[i]);
          o << ",ok," << log.summary.steps << "," << log.summary.wall_time;
          for (double m : probe_means(log)) o << "," << m;
        } catch (const StepFailure& f) {
          write_log(f.log(), specs[i]);
          o << ",failed," << f.log().summary.steps << "," << f.log().summary.wall_time;
          codes[i] = 3;
        } catch (const SimError& e) {
          o << ",error,0,0";
          codes[i] = exit_code(e.code());
        }
        lines[i] = o.str();
      }
    };
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < std::max(1u, jobs); ++t) pool.emplace_back(worker);
    for (std::thread& t : pool) t.join();

    std::cout << "run";
    for (const Variation& v : vars) std::cout << "," << v.key;
    std::cout << ",status,steps,wall_time";
    for (const std::string& p : instantiate(specs[0]).probe_names) std::cout << "," << p << "_mean";
    std::cout << "\n";
    for (const std::string& l : lines) std::cout << l << "\n";
    return *std::max_element(codes.begin(), codes.end());
  } catch (const SimError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return exit_code(e.code());
  }
}
