#include "ast/backward.hpp"

#include <algorithm>
#include <istream>
#include <ostream>
#include <set>

namespace ast::backward {

namespace {

void require_failure_source(const Trajectory& lofi) {
  if (lofi.steps.empty()) throw AdaptationError("lofi trajectory is empty");
}

}  // namespace

ExpertDemonstration replay_actions(const std::vector<EnvironmentAction>& actions,
                                   Simulator& hifi) {
  ExpertDemonstration demo;
  hifi.reset(0);
  const auto before = hifi.steps_taken();
  for (const auto& a : actions) {
    if (hifi.terminal()) break;
    demo.steps.push_back({hifi.snapshot(), a});
    const auto out = hifi.step(a);
    demo.ends_in_failure = out.event;
  }
  demo.replay_steps = hifi.steps_taken() - before;
  return demo;
}

ExpertDemonstration adapt_repeat(const Trajectory& lofi, int lofi_horizon,
                                 int k, Simulator& hifi) {
  require_failure_source(lofi);
  if (k < 1) throw AdaptationError("repeat factor must be >= 1");
  if (hifi.horizon() != k * lofi_horizon) {
    throw AdaptationError("hifi horizon " + std::to_string(hifi.horizon()) +
                          " != " + std::to_string(k) + " x lofi horizon " +
                          std::to_string(lofi_horizon));
  }
  std::vector<EnvironmentAction> actions;
  actions.reserve(lofi.steps.size() * k);
  for (const auto& s : lofi.steps) {
    if (s.action.size() != static_cast<std::size_t>(hifi.action_dim())) {
      throw AdaptationError("repeat adaptation needs equal action dimensions");
    }
    for (int i = 0; i < k; ++i) actions.push_back(s.action);
  }
  auto demo = replay_actions(actions, hifi);
  demo.adaptation = "repeat(" + std::to_string(k) + ")";
  return demo;
}

ExpertDemonstration adapt_replay(const Trajectory& lofi, int lofi_horizon,
                                 Simulator& hifi) {
  require_failure_source(lofi);
  const auto dim = lofi.steps.front().action.size();
  if (dim != static_cast<std::size_t>(hifi.action_dim())) {
    throw AdaptationError(
        "replay adaptation: lofi action dimension " + std::to_string(dim) +
        " != hifi " + std::to_string(hifi.action_dim()) +
        "; use remap adaptation");
  }
  if (lofi_horizon != hifi.horizon()) {
    throw AdaptationError("replay adaptation: horizons differ");
  }
  std::vector<EnvironmentAction> actions;
  for (const auto& s : lofi.steps) actions.push_back(s.action);
  auto demo = replay_actions(actions, hifi);
  demo.adaptation = "replay";
  return demo;
}

ExpertDemonstration adapt_remap(const Trajectory& lofi,
                                const std::vector<std::optional<int>>& channel_map,
                                double fill_value, Simulator& hifi) {
  require_failure_source(lofi);
  if (channel_map.size() != static_cast<std::size_t>(hifi.action_dim())) {
    throw AdaptationError("remap: channel map has " +
                          std::to_string(channel_map.size()) +
                          " entries, hifi action has " +
                          std::to_string(hifi.action_dim()));
  }
  const int lofi_dim = static_cast<int>(lofi.steps.front().action.size());
  for (const auto& c : channel_map) {
    if (c && (*c < 0 || *c >= lofi_dim)) {
      throw AdaptationError("remap: channel " + std::to_string(*c) +
                            " out of range for lofi dimension " +
                            std::to_string(lofi_dim));
    }
  }
  std::vector<EnvironmentAction> actions;
  for (const auto& s : lofi.steps) {
    EnvironmentAction a;
    a.values.reserve(channel_map.size());
    for (const auto& c : channel_map) {
      a.values.push_back(c ? s.action[static_cast<std::size_t>(*c)] : fill_value);
    }
    actions.push_back(std::move(a));
  }
  auto demo = replay_actions(actions, hifi);
  demo.adaptation = "remap";
  return demo;
}

void BAConfig::validate() const {
  if (start_offset < 1) throw Error("ba: start_offset must be >= 1");
  if (backstep < 1) throw Error("ba: backstep must be >= 1");
  if (max_epochs_per_step < 1) throw Error("ba: max_epochs_per_step must be >= 1");
  if (reject_after_forced < 1) throw Error("ba: reject_after_forced must be >= 1");
  if (restart_jitter < 0) throw Error("ba: restart_jitter must be >= 0");
}

void to_json(nlohmann::json& j, const BAConfig& c) {
  j = {{"start_offset", c.start_offset},
       {"backstep", c.backstep},
       {"max_epochs_per_step", c.max_epochs_per_step},
       {"reject_after_forced", c.reject_after_forced},
       {"restart_jitter", c.restart_jitter}};
}

void from_json(const nlohmann::json& j, BAConfig& c) {
  static const std::set<std::string> known = {
      "start_offset", "backstep", "max_epochs_per_step", "reject_after_forced",
      "restart_jitter"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error("ba config: unknown key '" + key + "'");
  }
  c.start_offset = j.value("start_offset", c.start_offset);
  c.backstep = j.value("backstep", c.backstep);
  c.max_epochs_per_step = j.value("max_epochs_per_step", c.max_epochs_per_step);
  c.reject_after_forced = j.value("reject_after_forced", c.reject_after_forced);
  c.restart_jitter = j.value("restart_jitter", c.restart_jitter);
}

ScheduleStep advance_schedule(BASchedule& s, bool failure_found,
                              const BAConfig& cfg) {
  ScheduleStep step;
  if (failure_found) {
    if (s.tau == 0) {
      s.status = BAStatus::found_from_start;
      step.finished = true;
      return step;
    }
    s.tau = std::max(0, s.tau - cfg.backstep);
    s.epochs_at_tau = 0;
    s.consecutive_forced = 0;
    return step;
  }
  if (++s.epochs_at_tau >= cfg.max_epochs_per_step) {
    s.tau = std::max(0, s.tau - 1);
    s.epochs_at_tau = 0;
    ++s.consecutive_forced;
    step.forced = true;
    if (s.consecutive_forced >= cfg.reject_after_forced) {
      s.status = BAStatus::rejected_spurious;
      step.finished = true;
    }
  }
  return step;
}

std::string to_string(BAOutcome o) {
  switch (o) {
    case BAOutcome::failure_found: return "failure_found";
    case BAOutcome::rejected_spurious: return "rejected_spurious";
    case BAOutcome::budget_exhausted: return "budget_exhausted";
  }
  return "?";
}

nlohmann::json trace_line(const TraceEntry& e) {
  return {{"epoch", e.epoch},
          {"tau", e.tau},
          {"forced", e.forced},
          {"failure_found", e.failure_found}};
}

BAResult run_backward(const ExpertDemonstration& demo, Simulator& hifi,
                      ppo::Trainer& trainer, const BAConfig& cfg,
                      std::int64_t max_hifi_steps,
                      const EpochCallback& on_epoch) {
  cfg.validate();
  const int length = demo.length();
  if (length < cfg.start_offset + 1) {
    throw Error("backward: demonstration of length " + std::to_string(length) +
                " is shorter than start_offset + 1");
  }
  for (int i = 0; i < length; ++i) {
    try {
      hifi.restore(demo.steps[i].snapshot);
    } catch (const ConfigMismatch& e) {
      throw ConfigMismatch("backward: demonstration step " + std::to_string(i) +
                           " does not match the hifi simulator: " + e.what());
    }
    if (hifi.time_index() != i) {
      throw ConfigMismatch("backward: demonstration step " + std::to_string(i) +
                           " has time index " +
                           std::to_string(hifi.time_index()));
    }
  }

  BAResult result;
  BASchedule sched;
  sched.tau = length - cfg.start_offset;
  const std::int64_t counter_before = hifi.steps_taken();

  while (true) {
    if (max_hifi_steps > 0 && result.hifi_steps_used >= max_hifi_steps) {
      result.outcome = BAOutcome::budget_exhausted;
      break;
    }
    std::vector<Snapshot> starts;
    const int jitter = sched.tau == 0 ? 0 : cfg.restart_jitter;
    for (int i = std::max(0, sched.tau - jitter);
         i <= std::min(length - 1, sched.tau + jitter); ++i) {
      starts.push_back(demo.steps[i].snapshot);
    }
    const int tau = sched.tau;
    auto er = trainer.train_epoch(hifi, starts);
    result.hifi_steps_used += er.env_steps;

    TraceEntry entry;
    entry.epoch = result.epochs++;
    entry.tau = tau;
    entry.failure_found = er.failure_found;
    entry.env_steps = er.env_steps;
    const auto step = advance_schedule(sched, er.failure_found, cfg);
    entry.forced = step.forced;
    result.trace.push_back(entry);
    if (on_epoch) on_epoch(er, entry);

    if (sched.status == BAStatus::found_from_start) {
      result.outcome = BAOutcome::failure_found;
      result.failure_trajectory = std::move(er.best_failure);
      break;
    }
    if (sched.status == BAStatus::rejected_spurious) {
      result.outcome = BAOutcome::rejected_spurious;
      break;
    }
  }
  if (hifi.steps_taken() - counter_before != result.hifi_steps_used) {
    throw Error("backward: hifi step counter disagrees with rollout lengths");
  }
  return result;
}

WarmStart warm_start(const nlohmann::json& checkpoint, int obs_dim,
                     int action_dim, bool reinit_std,
                     std::uint64_t reinit_seed) {
  policy::PolicyShape required{obs_dim, action_dim, 0};
  policy::PolicyShape found;
  try {
    const auto& shape = checkpoint.at("shape");
    found.obs_dim = shape.at("obs_dim").get<int>();
    found.action_dim = shape.at("action_dim").get<int>();
    found.hidden = shape.at("hidden").get<int>();
  } catch (const nlohmann::json::exception& e) {
    return Incompatibility{std::string("unreadable checkpoint shape: ") + e.what(),
                           found, required};
  }
  required.hidden = found.hidden;
  if (found.obs_dim != obs_dim || found.action_dim != action_dim) {
    return Incompatibility{
        "lofi policy has observation/action dims " +
            std::to_string(found.obs_dim) + "/" +
            std::to_string(found.action_dim) + " but the hifi scenario needs " +
            std::to_string(obs_dim) + "/" + std::to_string(action_dim),
        found, required};
  }
  try {
    auto params = policy::from_checkpoint(checkpoint);
    if (reinit_std) params.reinitialize_logstd(reinit_seed);
    return params;
  } catch (const std::exception& e) {
    return Incompatibility{std::string("checkpoint rejected: ") + e.what(),
                           found, required};
  }
}

void write_demo_jsonl(std::ostream& out, const ExpertDemonstration& demo) {
  for (std::size_t t = 0; t < demo.steps.size(); ++t) {
    const nlohmann::json line = {
        {"t", t},
        {"snapshot", base64_encode(demo.steps[t].snapshot)},
        {"action", demo.steps[t].action.values}};
    out << line.dump() << '\n';
  }
}

ExpertDemonstration read_demo_jsonl(std::istream& in) {
  ExpertDemonstration demo;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto j = nlohmann::json::parse(line);
    const auto t = j.at("t").get<std::size_t>();
    if (t != demo.steps.size()) {
      throw Error("demo file: expected t=" + std::to_string(demo.steps.size()) +
                  ", got " + std::to_string(t));
    }
    demo.steps.push_back(
        {base64_decode(j.at("snapshot").get<std::string>()),
         EnvironmentAction{j.at("action").get<std::vector<double>>()}});
  }
  return demo;
}

nlohmann::json demo_metadata(const ExpertDemonstration& demo) {
  return {{"length", demo.length()},
          {"ends_in_failure", demo.ends_in_failure},
          {"adaptation", demo.adaptation},
          {"lofi_steps", demo.lofi_steps},
          {"replay_steps", demo.replay_steps},
          {"lofi_config", demo.lofi_config}};
}

}  // namespace ast::backward
