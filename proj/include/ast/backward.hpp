#pragma once

// Backward algorithm over a single expert demonstration: adapts a
// low-fidelity failure into a high-fidelity demonstration, then trains from
// restart states that move from the end of the demonstration toward its
// start.

#include <functional>
#include <iosfwd>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "ast/core.hpp"
#include "ast/policy.hpp"
#include "ast/ppo.hpp"

namespace ast::backward {

class AdaptationError : public Error {
 public:
  using Error::Error;
};

struct DemoStep {
  Snapshot snapshot;  // hifi state before `action`
  EnvironmentAction action;
};

struct ExpertDemonstration {
  std::vector<DemoStep> steps;
  bool ends_in_failure = false;  // recomputed in hifi
  std::string adaptation;
  std::int64_t lofi_steps = 0;    // lofi search cost that produced the source
  std::int64_t replay_steps = 0;  // hifi steps spent replaying
  nlohmann::json lofi_config;

  int length() const { return static_cast<int>(steps.size()); }
};

/// Each lofi action repeated k times, replayed in hifi from reset.
ExpertDemonstration adapt_repeat(const Trajectory& lofi, int lofi_horizon,
                                 int k, Simulator& hifi);

/// Lofi actions replayed verbatim in hifi.
ExpertDemonstration adapt_replay(const Trajectory& lofi, int lofi_horizon,
                                 Simulator& hifi);

/// channel_map[i] is the lofi channel feeding hifi channel i, or empty to use
/// `fill_value`.
ExpertDemonstration adapt_remap(const Trajectory& lofi,
                                const std::vector<std::optional<int>>& channel_map,
                                double fill_value, Simulator& hifi);

/// Replays `actions` from the simulator's reset state, recording the state
/// before each action. Stops early if the simulator terminates.
ExpertDemonstration replay_actions(const std::vector<EnvironmentAction>& actions,
                                   Simulator& hifi);

struct BAConfig {
  int start_offset = 10;
  int backstep = 4;
  int max_epochs_per_step = 10;
  int reject_after_forced = 5;
  int restart_jitter = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const BAConfig& c);
void from_json(const nlohmann::json& j, BAConfig& c);

enum class BAStatus { running, found_from_start, rejected_spurious };

struct BASchedule {
  int tau = 0;
  int epochs_at_tau = 0;
  int consecutive_forced = 0;
  BAStatus status = BAStatus::running;
};

/// Pure schedule transition after one epoch at the current tau.
struct ScheduleStep {
  bool forced = false;
  bool finished = false;
};
ScheduleStep advance_schedule(BASchedule& s, bool failure_found,
                              const BAConfig& cfg);

enum class BAOutcome { failure_found, rejected_spurious, budget_exhausted };

std::string to_string(BAOutcome o);

struct TraceEntry {
  int epoch = 0;
  int tau = 0;  // restart index used by this epoch
  bool forced = false;
  bool failure_found = false;
  std::int64_t env_steps = 0;
};

struct BAResult {
  BAOutcome outcome = BAOutcome::budget_exhausted;
  std::optional<Trajectory> failure_trajectory;
  std::int64_t hifi_steps_used = 0;
  std::vector<TraceEntry> trace;
  int epochs = 0;
};

nlohmann::json trace_line(const TraceEntry& e);

using EpochCallback =
    std::function<void(const ppo::EpochResult&, const TraceEntry&)>;

/// `max_hifi_steps` <= 0 disables the budget.
BAResult run_backward(const ExpertDemonstration& demo, Simulator& hifi,
                      ppo::Trainer& trainer, const BAConfig& cfg,
                      std::int64_t max_hifi_steps,
                      const EpochCallback& on_epoch = {});

struct Incompatibility {
  std::string reason;
  policy::PolicyShape checkpoint;
  policy::PolicyShape required;
};

using WarmStart = std::variant<policy::PolicyParams, Incompatibility>;

/// Loads a lofi checkpoint for a hifi scenario with the given observation
/// and action dimensions. Never throws on shape mismatch.
WarmStart warm_start(const nlohmann::json& checkpoint, int obs_dim,
                     int action_dim, bool reinit_std = false,
                     std::uint64_t reinit_seed = 0);

void write_demo_jsonl(std::ostream& out, const ExpertDemonstration& demo);
ExpertDemonstration read_demo_jsonl(std::istream& in);

nlohmann::json demo_metadata(const ExpertDemonstration& demo);

}  // namespace ast::backward
