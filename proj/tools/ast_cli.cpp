// Command-line front end for the lofi/hifi stress-testing pipeline.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ast/backward.hpp"
#include "ast/harness.hpp"
#include "ast/policy.hpp"
#include "ast/ppo.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ast;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::optional<bool> warm_start;
};

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  return json::parse(in);
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

harness::ExperimentConfig load_config(const Common& c,
                                      const std::string& fallback_preset) {
  harness::ExperimentConfig cfg = harness::preset(fallback_preset);
  if (!c.config.empty()) {
    auto j = read_json(c.config);
    if (!j.contains("preset")) j["preset"] = fallback_preset;
    cfg = j.get<harness::ExperimentConfig>();
  }
  if (c.seed) cfg.seeds = {*c.seed};
  if (c.warm_start) cfg.warm_start = *c.warm_start;
  cfg.validate();
  return cfg;
}

class MetricsFile {
 public:
  explicit MetricsFile(const fs::path& path) : out_(path) {
    if (!out_) throw Error("cannot write " + path.string());
  }
  harness::MetricsSink sink(std::uint64_t seed) {
    return [this, seed](const std::string& stage, const json& line) {
      auto l = line;
      l["seed"] = seed;
      l["stage"] = stage;
      out_ << l.dump() << '\n';
      out_.flush();
    };
  }
  harness::MetricsSink passthrough() {
    return [this](const std::string&, const json& line) {
      out_ << line.dump() << '\n';
      out_.flush();
    };
  }

 private:
  std::ofstream out_;
};

void add_common(CLI::App* cmd, Common& c, bool with_warm_start) {
  cmd->add_option("--config", c.config, "Experiment config JSON");
  cmd->add_option("--seed", c.seed, "Run a single seed");
  cmd->add_option("--out", c.out, "Output directory")->capture_default_str();
  if (with_warm_start) {
    cmd->add_option("--warm-start", c.warm_start, "Warm-start BA from the lofi policy");
  }
}

std::uint64_t first_seed(const harness::ExperimentConfig& cfg) {
  return cfg.seeds.front();
}

int cmd_run_drl(const Common& c, const std::string& fidelity) {
  const auto cfg = load_config(c, "time");
  const auto seed = first_seed(cfg);
  fs::create_directories(c.out);
  const auto& spec = fidelity == "hifi" ? cfg.hifi : cfg.lofi;
  const auto budget =
      fidelity == "hifi" ? cfg.budgets.max_hifi_steps : cfg.budgets.max_lofi_steps;

  auto sim = harness::make_sim(spec);
  policy::PolicyShape shape{sim->observation_dim(), sim->action_dim(), cfg.solver.hidden};
  ppo::Trainer trainer(policy::PolicyParams::initialize(shape, derive_seed(seed, 10)),
                       cfg.solver, cfg.reward, derive_seed(seed, 11));
  MetricsFile metrics(fs::path(c.out) / "metrics.jsonl");
  auto run = harness::run_until_failure(*sim, trainer, budget, fidelity + "_drl",
                                        metrics.sink(seed));

  write_text(fs::path(c.out) / "checkpoint.json",
             policy::to_checkpoint(trainer.params(), cfg).dump(2));
  json report = {{"seed", seed},
                 {"fidelity", fidelity},
                 {"found", run.found},
                 {"steps_to_failure", run.steps},
                 {"epochs", run.epochs},
                 {"final_reward", run.failure ? json(run.failure->total_return) : json(nullptr)}};
  if (run.failure) {
    std::ofstream traj(fs::path(c.out) / "failure.jsonl");
    write_trajectory_jsonl(traj, *run.failure);
  }
  write_text(fs::path(c.out) / "report.json", report.dump(2) + "\n");
  std::cout << report.dump() << '\n';
  return 0;
}

int cmd_make_demo(const Common& c) {
  const auto cfg = load_config(c, "time");
  const auto seed = first_seed(cfg);
  fs::create_directories(c.out);

  auto lofi = harness::make_sim(cfg.lofi);
  policy::PolicyShape shape{lofi->observation_dim(), lofi->action_dim(), cfg.solver.hidden};
  ppo::Trainer trainer(policy::PolicyParams::initialize(shape, derive_seed(seed, 10)),
                       cfg.solver, cfg.reward, derive_seed(seed, 11));
  MetricsFile metrics(fs::path(c.out) / "metrics.jsonl");
  auto run = harness::run_until_failure(*lofi, trainer, cfg.budgets.max_lofi_steps,
                                        "lofi_drl", metrics.sink(seed));
  write_text(fs::path(c.out) / "checkpoint.json",
             policy::to_checkpoint(trainer.params(), cfg).dump(2));
  if (!run.found) {
    std::cerr << "no lofi failure within " << run.steps << " steps\n";
    return 2;
  }
  auto hifi = harness::make_sim(cfg.hifi);
  auto demo = harness::adapt(*run.failure, cfg.lofi, cfg.adaptation, *hifi);
  demo.lofi_steps = run.steps;
  demo.lofi_config = cfg;
  std::ofstream out(fs::path(c.out) / "demo.jsonl");
  backward::write_demo_jsonl(out, demo);
  const auto meta = backward::demo_metadata(demo);
  write_text(fs::path(c.out) / "demo_meta.json", meta.dump(2) + "\n");
  std::cout << meta.dump() << '\n';
  return 0;
}

int cmd_run_ba(const Common& c, std::string demo_path, std::string checkpoint_path) {
  const auto cfg = load_config(c, "time");
  const auto seed = first_seed(cfg);
  fs::create_directories(c.out);
  if (demo_path.empty()) demo_path = (fs::path(c.out) / "demo.jsonl").string();
  if (checkpoint_path.empty()) {
    checkpoint_path = (fs::path(c.out) / "checkpoint.json").string();
  }

  std::ifstream demo_in(demo_path);
  if (!demo_in) throw Error("cannot open " + demo_path);
  auto demo = backward::read_demo_jsonl(demo_in);

  auto hifi = harness::make_sim(cfg.hifi);
  policy::PolicyShape shape{hifi->observation_dim(), hifi->action_dim(), cfg.solver.hidden};
  auto params = policy::PolicyParams::initialize(shape, derive_seed(seed, 30));
  std::string warm_note;
  bool warm = false;
  if (cfg.warm_start) {
    auto ws = backward::warm_start(read_json(checkpoint_path), shape.obs_dim,
                                   shape.action_dim, cfg.reinit_std,
                                   derive_seed(seed, 40));
    if (auto* p = std::get_if<policy::PolicyParams>(&ws)) {
      params = std::move(*p);
      warm = true;
    } else {
      warm_note = std::get<backward::Incompatibility>(ws).reason;
      std::cerr << "warm start skipped: " << warm_note << '\n';
    }
  }
  ppo::Trainer trainer(std::move(params), cfg.solver, cfg.reward,
                       derive_seed(seed, warm ? 41 : 31));
  MetricsFile metrics(fs::path(c.out) / "metrics.jsonl");
  auto sink = metrics.sink(seed);
  auto result = backward::run_backward(
      demo, *hifi, trainer, cfg.ba, cfg.budgets.max_hifi_steps,
      [&](const ppo::EpochResult& er, const backward::TraceEntry& te) {
        auto line = ppo::metrics_line(er);
        line.update(backward::trace_line(te));
        sink(warm ? "ba_warm" : "ba_scratch", line);
      });
  json report = {{"seed", seed},
                 {"outcome", backward::to_string(result.outcome)},
                 {"warm_started", warm},
                 {"warm_start_note", warm_note},
                 {"hifi_steps", result.hifi_steps_used},
                 {"epochs", result.epochs},
                 {"final_reward", result.failure_trajectory
                                      ? json(result.failure_trajectory->total_return)
                                      : json(nullptr)}};
  if (result.failure_trajectory) {
    std::ofstream traj(fs::path(c.out) / "failure.jsonl");
    write_trajectory_jsonl(traj, *result.failure_trajectory);
  }
  write_text(fs::path(c.out) / "report.json", report.dump(2) + "\n");
  std::cout << report.dump() << '\n';
  return result.outcome == backward::BAOutcome::failure_found ? 0 : 3;
}

int cmd_case_study(const Common& c, const std::string& name) {
  const auto cfg = load_config(c, name);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "config.json", json(cfg).dump(2) + "\n");
  MetricsFile metrics(fs::path(c.out) / "metrics.jsonl");
  auto report = harness::run_case_study(cfg, metrics.passthrough());
  write_text(fs::path(c.out) / "report.json", harness::report_json(report).dump(2) + "\n");
  const auto table = harness::render_table(report);
  write_text(fs::path(c.out) / "report.txt", table);
  std::cout << table;
  return 0;
}

int cmd_report(const Common& c, std::string in_path) {
  if (in_path.empty()) in_path = (fs::path(c.out) / "report.json").string();
  const auto report = harness::report_from_json(read_json(in_path));
  const auto table = harness::render_table(report);
  fs::create_directories(c.out);
  write_text(fs::path(c.out) / "report.txt", table);
  std::cout << table;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lofi-to-hifi adaptive stress testing with the backward algorithm"};
  app.require_subcommand(1);

  Common drl_opts, demo_opts, ba_opts, cs_opts, report_opts;
  std::string fidelity = "lofi";
  auto* drl = app.add_subcommand("run-drl", "Train PPO on one simulator until a failure");
  add_common(drl, drl_opts, false);
  drl->add_option("--fidelity", fidelity, "lofi or hifi")
      ->check(CLI::IsMember({"lofi", "hifi"}))
      ->capture_default_str();

  auto* demo = app.add_subcommand("make-demo", "Find a lofi failure and adapt it to hifi");
  add_common(demo, demo_opts, false);

  std::string demo_path, checkpoint_path;
  auto* ba = app.add_subcommand("run-ba", "Run the backward algorithm in hifi");
  add_common(ba, ba_opts, true);
  ba->add_option("--demo", demo_path, "Demonstration file (default <out>/demo.jsonl)");
  ba->add_option("--checkpoint", checkpoint_path,
                 "Lofi checkpoint for warm start (default <out>/checkpoint.json)");

  std::string case_name;
  auto* cs = app.add_subcommand("case-study", "Run a full case study over all seeds");
  add_common(cs, cs_opts, true);
  cs->add_option("name", case_name, "time | dynamics | tracker | perception")
      ->required()
      ->check(CLI::IsMember(harness::preset_names()));

  std::string report_in;
  auto* rep = app.add_subcommand("report", "Render report.json as a table");
  add_common(rep, report_opts, false);
  rep->add_option("--in", report_in, "Report JSON (default <out>/report.json)");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*drl) return cmd_run_drl(drl_opts, fidelity);
    if (*demo) return cmd_make_demo(demo_opts);
    if (*ba) return cmd_run_ba(ba_opts, demo_path, checkpoint_path);
    if (*cs) return cmd_case_study(cs_opts, case_name);
    if (*rep) return cmd_report(report_opts, report_in);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
