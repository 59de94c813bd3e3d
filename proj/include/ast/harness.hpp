#pragma once

// Experiment orchestration for the lofi-to-hifi case studies: DRL in lofi,
// demonstration adaptation, backward algorithm in hifi (from scratch and
// warm-started) and the DRL baseline in hifi.

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "ast/backward.hpp"
#include "ast/core.hpp"
#include "ast/crosswalk.hpp"
#include "ast/ppo.hpp"

namespace ast::harness {

struct SimSpec {
  crosswalk::ScenarioConfig scenario;
  crosswalk::FidelityConfig fidelity;
};

enum class AdaptationKind { repeat, replay, remap };

struct Adaptation {
  AdaptationKind kind = AdaptationKind::replay;
  int repeat = 1;
  std::vector<std::optional<int>> channel_map;  // remap only
  double fill = 0.0;
};

struct Budgets {
  std::int64_t max_lofi_steps = 500000;
  std::int64_t max_hifi_steps = 500000;
};

struct ExperimentConfig {
  std::string name;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  SimSpec lofi;
  SimSpec hifi;
  Adaptation adaptation;
  ppo::PPOConfig solver;
  backward::BAConfig ba;
  Budgets budgets;
  RewardConfig reward;
  bool warm_start = true;
  bool reinit_std = false;  // re-draw the log-std head after warm start

  void validate() const;
};

/// Built-in case studies: "time", "dynamics", "tracker", "perception".
ExperimentConfig preset(std::string_view name);
std::vector<std::string> preset_names();

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);

/// Called with (stage, metrics line) for every training epoch.
using MetricsSink = std::function<void(const std::string&, const nlohmann::json&)>;

struct DrlRun {
  bool found = false;
  std::int64_t steps = 0;
  int epochs = 0;
  std::optional<Trajectory> failure;
};

/// Trains until an epoch contains a failure or `max_steps` is reached.
DrlRun run_until_failure(Simulator& sim, ppo::Trainer& trainer,
                         std::int64_t max_steps, const std::string& stage,
                         const MetricsSink& sink);

std::unique_ptr<crosswalk::CrosswalkSim> make_sim(const SimSpec& spec);

backward::ExpertDemonstration adapt(const Trajectory& lofi,
                                    const SimSpec& lofi_spec,
                                    const Adaptation& adaptation,
                                    Simulator& hifi);

struct MethodResult {
  bool found = false;
  std::int64_t steps = 0;  // hifi steps, including the demo replay for BA
  std::optional<double> final_reward;
  std::string outcome;
};

struct SeedReport {
  std::uint64_t seed = 0;
  bool lofi_found = false;
  std::int64_t lofi_steps = 0;
  std::optional<double> lofi_final_reward;
  std::int64_t replay_steps = 0;
  bool demo_ends_in_failure = false;
  MethodResult drl_baseline;
  std::optional<MethodResult> ba_scratch;
  std::optional<MethodResult> ba_warm;
  std::string warm_start_note;
};

struct Summary {
  std::optional<double> lofi_steps;
  std::optional<double> baseline_steps;
  std::optional<double> baseline_reward;
  std::optional<double> ba_scratch_steps;
  std::optional<double> ba_scratch_reward;
  std::optional<double> ba_warm_steps;
  std::optional<double> ba_warm_reward;
  std::optional<double> ba_scratch_percent;
  std::optional<double> ba_warm_percent;
};

struct RunReport {
  std::string name;
  std::vector<SeedReport> seeds;
};

std::optional<double> median(std::vector<double> values);

/// Medians over the seeds where the method found a failure.
Summary summarize(const RunReport& report);

RunReport run_case_study(const ExperimentConfig& cfg, const MetricsSink& sink = {});

/// One seed of the pipeline.
SeedReport run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                    const MetricsSink& sink = {});

nlohmann::json report_json(const RunReport& report);
RunReport report_from_json(const nlohmann::json& j);
std::string render_table(const RunReport& report);

}  // namespace ast::harness
