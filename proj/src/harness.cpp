#include "ast/harness.hpp"

#include <algorithm>
#include <cstdio>
#include <set>
#include <sstream>

namespace ast::harness {

namespace {

using crosswalk::SensorModel;

// Stream tags for per-seed, per-method seeds.
enum Stream : std::uint64_t {
  kLofiInit = 10,
  kLofiTrain = 11,
  kBaselineInit = 20,
  kBaselineTrain = 21,
  kScratchInit = 30,
  kScratchTrain = 31,
  kWarmReinit = 40,
  kWarmTrain = 41,
};

std::string adaptation_name(AdaptationKind k) {
  switch (k) {
    case AdaptationKind::repeat: return "repeat";
    case AdaptationKind::replay: return "replay";
    case AdaptationKind::remap: return "remap";
  }
  return "?";
}

nlohmann::json opt_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

std::optional<double> opt_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j[key].is_null()) return std::nullopt;
  return j[key].get<double>();
}

nlohmann::json method_json(const MethodResult& m) {
  return {{"found", m.found},
          {"steps", m.steps},
          {"final_reward", opt_json(m.final_reward)},
          {"outcome", m.outcome}};
}

MethodResult method_from_json(const nlohmann::json& j) {
  MethodResult m;
  m.found = j.at("found").get<bool>();
  m.steps = j.at("steps").get<std::int64_t>();
  m.final_reward = opt_double(j, "final_reward");
  m.outcome = j.value("outcome", "");
  return m;
}

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw Error("experiment: seed list is empty");
  if (budgets.max_lofi_steps <= 0 || budgets.max_hifi_steps <= 0) {
    throw Error("experiment: budgets must be > 0");
  }
  lofi.scenario.validate();
  lofi.fidelity.validate();
  hifi.scenario.validate();
  hifi.fidelity.validate();
  solver.validate();
  ba.validate();
  reward.validate();
  const int lofi_dim = crosswalk::action_dim_for(lofi.fidelity.sensor_model);
  const int hifi_dim = crosswalk::action_dim_for(hifi.fidelity.sensor_model);
  switch (adaptation.kind) {
    case AdaptationKind::repeat:
      if (adaptation.repeat < 1) throw Error("experiment: repeat factor < 1");
      if (hifi.fidelity.horizon != adaptation.repeat * lofi.fidelity.horizon) {
        throw Error("experiment: repeat adaptation needs hifi horizon = k x lofi horizon");
      }
      if (lofi_dim != hifi_dim) {
        throw Error("experiment: repeat adaptation needs equal action dims");
      }
      break;
    case AdaptationKind::replay:
      if (lofi_dim != hifi_dim || lofi.fidelity.horizon != hifi.fidelity.horizon) {
        throw Error("experiment: replay adaptation needs equal action dims and horizons");
      }
      break;
    case AdaptationKind::remap:
      if (adaptation.channel_map.size() != static_cast<std::size_t>(hifi_dim)) {
        throw Error("experiment: channel_map size must equal hifi action dim");
      }
      for (const auto& c : adaptation.channel_map) {
        if (c && (*c < 0 || *c >= lofi_dim)) {
          throw Error("experiment: channel_map entry out of range");
        }
      }
      break;
  }
}

ExperimentConfig preset(std::string_view name) {
  ExperimentConfig c;
  c.name = std::string(name);
  c.solver.max_rollouts = 50;
  if (name == "time") {
    c.lofi.fidelity.dt = 0.5;
    c.lofi.fidelity.horizon = 10;
    c.adaptation = {AdaptationKind::repeat, 5, {}, 0.0};
  } else if (name == "dynamics") {
    c.lofi.fidelity.quantize_decimals = 1;
    c.adaptation = {AdaptationKind::replay, 1, {}, 0.0};
  } else if (name == "tracker") {
    c.lofi.fidelity.tracker_enabled = false;
    c.adaptation = {AdaptationKind::replay, 1, {}, 0.0};
  } else if (name == "perception") {
    for (auto* spec : {&c.lofi, &c.hifi}) {
      spec->scenario.ped_p0 = {0.0, -2.0};
      spec->scenario.car_x0 = -45.0;
    }
    c.hifi.fidelity.sensor_model = SensorModel::lidar;
    c.adaptation = {AdaptationKind::remap, 1, {0, 1, std::nullopt}, 0.0};
  } else {
    throw Error("unknown case study preset '" + std::string(name) + "'");
  }
  return c;
}

std::vector<std::string> preset_names() {
  return {"time", "dynamics", "tracker", "perception"};
}

void to_json(nlohmann::json& j, const ExperimentConfig& c) {
  nlohmann::json adaptation = {{"kind", adaptation_name(c.adaptation.kind)}};
  if (c.adaptation.kind == AdaptationKind::repeat) {
    adaptation["repeat"] = c.adaptation.repeat;
  }
  if (c.adaptation.kind == AdaptationKind::remap) {
    nlohmann::json map = nlohmann::json::array();
    for (const auto& ch : c.adaptation.channel_map) {
      map.push_back(ch ? nlohmann::json(*ch) : nlohmann::json(nullptr));
    }
    adaptation["channel_map"] = map;
    adaptation["fill"] = c.adaptation.fill;
  }
  j = {{"name", c.name},
       {"seeds", c.seeds},
       {"lofi", {{"scenario", c.lofi.scenario}, {"fidelity", c.lofi.fidelity}}},
       {"hifi", {{"scenario", c.hifi.scenario}, {"fidelity", c.hifi.fidelity}}},
       {"adaptation", adaptation},
       {"solver", c.solver},
       {"ba", c.ba},
       {"budgets",
        {{"max_lofi_steps", c.budgets.max_lofi_steps},
         {"max_hifi_steps", c.budgets.max_hifi_steps}}},
       {"reward",
        {{"alpha_miss", c.reward.alpha_miss}, {"beta_miss", c.reward.beta_miss}}},
       {"warm_start", c.warm_start},
       {"reinit_std", c.reinit_std}};
}

void from_json(const nlohmann::json& j, ExperimentConfig& c) {
  static const std::set<std::string> known = {
      "preset", "name",    "seeds",  "lofi",       "hifi",      "adaptation",
      "solver", "ba",      "budgets", "reward",    "warm_start", "reinit_std"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error("experiment: unknown key '" + key + "'");
  }
  if (j.contains("preset")) c = preset(j["preset"].get<std::string>());
  c.name = j.value("name", c.name);
  if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  for (auto [key, spec] : {std::pair{"lofi", &c.lofi}, std::pair{"hifi", &c.hifi}}) {
    if (!j.contains(key)) continue;
    const auto& s = j[key];
    if (s.contains("scenario")) {
      crosswalk::from_json(s["scenario"], spec->scenario);
    }
    if (s.contains("fidelity")) {
      crosswalk::from_json(s["fidelity"], spec->fidelity);
    }
  }
  if (j.contains("adaptation")) {
    const auto& a = j["adaptation"];
    const auto kind = a.at("kind").get<std::string>();
    if (kind == "repeat") {
      c.adaptation = {AdaptationKind::repeat, a.at("repeat").get<int>(), {}, 0.0};
    } else if (kind == "replay") {
      c.adaptation = {AdaptationKind::replay, 1, {}, 0.0};
    } else if (kind == "remap") {
      c.adaptation = {AdaptationKind::remap, 1, {}, a.value("fill", 0.0)};
      for (const auto& ch : a.at("channel_map")) {
        c.adaptation.channel_map.push_back(
            ch.is_null() ? std::nullopt : std::optional<int>(ch.get<int>()));
      }
    } else {
      throw Error("experiment: unknown adaptation kind '" + kind + "'");
    }
  }
  if (j.contains("solver")) ppo::from_json(j["solver"], c.solver);
  if (j.contains("ba")) backward::from_json(j["ba"], c.ba);
  if (j.contains("budgets")) {
    c.budgets.max_lofi_steps = j["budgets"].value("max_lofi_steps", c.budgets.max_lofi_steps);
    c.budgets.max_hifi_steps = j["budgets"].value("max_hifi_steps", c.budgets.max_hifi_steps);
  }
  if (j.contains("reward")) {
    c.reward.alpha_miss = j["reward"].value("alpha_miss", c.reward.alpha_miss);
    c.reward.beta_miss = j["reward"].value("beta_miss", c.reward.beta_miss);
  }
  c.warm_start = j.value("warm_start", c.warm_start);
  c.reinit_std = j.value("reinit_std", c.reinit_std);
}

DrlRun run_until_failure(Simulator& sim, ppo::Trainer& trainer,
                         std::int64_t max_steps, const std::string& stage,
                         const MetricsSink& sink) {
  DrlRun run;
  while (run.steps < max_steps) {
    auto er = trainer.train_epoch(sim, {});
    run.steps += er.env_steps;
    ++run.epochs;
    if (sink) sink(stage, ppo::metrics_line(er));
    if (er.failure_found) {
      run.found = true;
      run.failure = std::move(er.best_failure);
      break;
    }
  }
  return run;
}

std::unique_ptr<crosswalk::CrosswalkSim> make_sim(const SimSpec& spec) {
  return std::make_unique<crosswalk::CrosswalkSim>(spec.scenario, spec.fidelity);
}

backward::ExpertDemonstration adapt(const Trajectory& lofi,
                                    const SimSpec& lofi_spec,
                                    const Adaptation& adaptation,
                                    Simulator& hifi) {
  switch (adaptation.kind) {
    case AdaptationKind::repeat:
      return backward::adapt_repeat(lofi, lofi_spec.fidelity.horizon,
                                    adaptation.repeat, hifi);
    case AdaptationKind::replay:
      return backward::adapt_replay(lofi, lofi_spec.fidelity.horizon, hifi);
    case AdaptationKind::remap:
      return backward::adapt_remap(lofi, adaptation.channel_map,
                                   adaptation.fill, hifi);
  }
  throw Error("unknown adaptation");
}

SeedReport run_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                    const MetricsSink& sink) {
  cfg.validate();
  SeedReport r;
  r.seed = seed;

  auto lofi = make_sim(cfg.lofi);
  const policy::PolicyShape lofi_shape{lofi->observation_dim(),
                                       lofi->action_dim(), cfg.solver.hidden};
  ppo::Trainer lofi_trainer(
      policy::PolicyParams::initialize(lofi_shape, derive_seed(seed, kLofiInit)),
      cfg.solver, cfg.reward, derive_seed(seed, kLofiTrain));
  auto lofi_run = run_until_failure(*lofi, lofi_trainer,
                                    cfg.budgets.max_lofi_steps, "lofi_drl", sink);
  r.lofi_found = lofi_run.found;
  r.lofi_steps = lofi_run.steps;
  if (lofi_run.failure) r.lofi_final_reward = lofi_run.failure->total_return;

  auto hifi_shape_sim = make_sim(cfg.hifi);
  const policy::PolicyShape hifi_shape{hifi_shape_sim->observation_dim(),
                                       hifi_shape_sim->action_dim(),
                                       cfg.solver.hidden};

  auto run_ba = [&](ppo::Trainer& trainer, const backward::ExpertDemonstration& demo,
                    const std::string& stage) {
    auto hifi = make_sim(cfg.hifi);
    const auto budget = std::max<std::int64_t>(
        1, cfg.budgets.max_hifi_steps - demo.replay_steps);
    auto ba = backward::run_backward(
        demo, *hifi, trainer, cfg.ba, budget,
        [&](const ppo::EpochResult& er, const backward::TraceEntry& te) {
          if (!sink) return;
          auto line = ppo::metrics_line(er);
          line.update(backward::trace_line(te));
          sink(stage, line);
        });
    MethodResult m;
    m.found = ba.outcome == backward::BAOutcome::failure_found;
    m.steps = ba.hifi_steps_used + demo.replay_steps;
    if (ba.failure_trajectory) m.final_reward = ba.failure_trajectory->total_return;
    m.outcome = backward::to_string(ba.outcome);
    return m;
  };

  if (lofi_run.found) {
    auto replay_sim = make_sim(cfg.hifi);
    auto demo = adapt(*lofi_run.failure, cfg.lofi, cfg.adaptation, *replay_sim);
    demo.lofi_steps = lofi_run.steps;
    r.replay_steps = demo.replay_steps;
    r.demo_ends_in_failure = demo.ends_in_failure;

    ppo::Trainer scratch(
        policy::PolicyParams::initialize(hifi_shape, derive_seed(seed, kScratchInit)),
        cfg.solver, cfg.reward, derive_seed(seed, kScratchTrain));
    r.ba_scratch = run_ba(scratch, demo, "ba_scratch");

    if (cfg.warm_start) {
      auto ws = backward::warm_start(
          policy::to_checkpoint(lofi_trainer.params()), hifi_shape.obs_dim,
          hifi_shape.action_dim, cfg.reinit_std, derive_seed(seed, kWarmReinit));
      if (auto* params = std::get_if<policy::PolicyParams>(&ws)) {
        ppo::Trainer warm(std::move(*params), cfg.solver, cfg.reward,
                          derive_seed(seed, kWarmTrain));
        r.ba_warm = run_ba(warm, demo, "ba_warm");
      } else {
        r.warm_start_note = std::get<backward::Incompatibility>(ws).reason;
      }
    } else {
      r.warm_start_note = "warm start disabled";
    }
  }

  auto hifi = make_sim(cfg.hifi);
  ppo::Trainer baseline(
      policy::PolicyParams::initialize(hifi_shape, derive_seed(seed, kBaselineInit)),
      cfg.solver, cfg.reward, derive_seed(seed, kBaselineTrain));
  auto base_run = run_until_failure(*hifi, baseline, cfg.budgets.max_hifi_steps,
                                    "hifi_drl", sink);
  r.drl_baseline.found = base_run.found;
  r.drl_baseline.steps = base_run.steps;
  if (base_run.failure) r.drl_baseline.final_reward = base_run.failure->total_return;
  r.drl_baseline.outcome = base_run.found ? "failure_found" : "budget_exhausted";
  return r;
}

RunReport run_case_study(const ExperimentConfig& cfg, const MetricsSink& sink) {
  cfg.validate();
  RunReport report;
  report.name = cfg.name;
  for (auto seed : cfg.seeds) {
    MetricsSink seeded;
    if (sink) {
      seeded = [&, seed](const std::string& stage, const nlohmann::json& line) {
        auto l = line;
        l["seed"] = seed;
        l["stage"] = stage;
        sink(stage, l);
      };
    }
    report.seeds.push_back(run_seed(cfg, seed, seeded));
  }
  std::sort(report.seeds.begin(), report.seeds.end(),
            [](const SeedReport& a, const SeedReport& b) { return a.seed < b.seed; });
  return report;
}

std::optional<double> median(std::vector<double> v) {
  if (v.empty()) return std::nullopt;
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

Summary summarize(const RunReport& report) {
  std::vector<double> lofi, base, base_r, scratch, scratch_r, warm, warm_r;
  for (const auto& s : report.seeds) {
    if (s.lofi_found) lofi.push_back(static_cast<double>(s.lofi_steps));
    if (s.drl_baseline.found) {
      base.push_back(static_cast<double>(s.drl_baseline.steps));
      if (s.drl_baseline.final_reward) base_r.push_back(*s.drl_baseline.final_reward);
    }
    if (s.ba_scratch && s.ba_scratch->found) {
      scratch.push_back(static_cast<double>(s.ba_scratch->steps));
      if (s.ba_scratch->final_reward) scratch_r.push_back(*s.ba_scratch->final_reward);
    }
    if (s.ba_warm && s.ba_warm->found) {
      warm.push_back(static_cast<double>(s.ba_warm->steps));
      if (s.ba_warm->final_reward) warm_r.push_back(*s.ba_warm->final_reward);
    }
  }
  Summary out;
  out.lofi_steps = median(lofi);
  out.baseline_steps = median(base);
  out.baseline_reward = median(base_r);
  out.ba_scratch_steps = median(scratch);
  out.ba_scratch_reward = median(scratch_r);
  out.ba_warm_steps = median(warm);
  out.ba_warm_reward = median(warm_r);
  if (out.baseline_steps && *out.baseline_steps > 0) {
    if (out.ba_scratch_steps) {
      out.ba_scratch_percent = 100.0 * *out.ba_scratch_steps / *out.baseline_steps;
    }
    if (out.ba_warm_steps) {
      out.ba_warm_percent = 100.0 * *out.ba_warm_steps / *out.baseline_steps;
    }
  }
  return out;
}

nlohmann::json report_json(const RunReport& report) {
  nlohmann::json seeds = nlohmann::json::array();
  for (const auto& s : report.seeds) {
    nlohmann::json j = {{"seed", s.seed},
                        {"lofi_found", s.lofi_found},
                        {"lofi_steps_to_failure", s.lofi_steps},
                        {"lofi_final_reward", opt_json(s.lofi_final_reward)},
                        {"replay_steps", s.replay_steps},
                        {"demo_ends_in_failure", s.demo_ends_in_failure},
                        {"drl_baseline", method_json(s.drl_baseline)},
                        {"ba_scratch", s.ba_scratch ? method_json(*s.ba_scratch)
                                                    : nlohmann::json(nullptr)},
                        {"ba_warm", s.ba_warm ? method_json(*s.ba_warm)
                                              : nlohmann::json(nullptr)},
                        {"warm_start_note", s.warm_start_note}};
    seeds.push_back(std::move(j));
  }
  const auto sum = summarize(report);
  return {{"name", report.name},
          {"seeds", seeds},
          {"medians",
           {{"lofi_steps", opt_json(sum.lofi_steps)},
            {"drl_baseline_steps", opt_json(sum.baseline_steps)},
            {"drl_baseline_final_reward", opt_json(sum.baseline_reward)},
            {"ba_scratch_steps", opt_json(sum.ba_scratch_steps)},
            {"ba_scratch_final_reward", opt_json(sum.ba_scratch_reward)},
            {"ba_warm_steps", opt_json(sum.ba_warm_steps)},
            {"ba_warm_final_reward", opt_json(sum.ba_warm_reward)},
            {"ba_scratch_percent_of_hifi_steps", opt_json(sum.ba_scratch_percent)},
            {"ba_warm_percent_of_hifi_steps", opt_json(sum.ba_warm_percent)}}}};
}

RunReport report_from_json(const nlohmann::json& j) {
  RunReport r;
  r.name = j.value("name", "");
  for (const auto& s : j.at("seeds")) {
    SeedReport sr;
    sr.seed = s.at("seed").get<std::uint64_t>();
    sr.lofi_found = s.at("lofi_found").get<bool>();
    sr.lofi_steps = s.at("lofi_steps_to_failure").get<std::int64_t>();
    sr.lofi_final_reward = opt_double(s, "lofi_final_reward");
    sr.replay_steps = s.value("replay_steps", std::int64_t{0});
    sr.demo_ends_in_failure = s.value("demo_ends_in_failure", false);
    sr.drl_baseline = method_from_json(s.at("drl_baseline"));
    if (!s.at("ba_scratch").is_null()) sr.ba_scratch = method_from_json(s["ba_scratch"]);
    if (!s.at("ba_warm").is_null()) sr.ba_warm = method_from_json(s["ba_warm"]);
    sr.warm_start_note = s.value("warm_start_note", "");
    r.seeds.push_back(std::move(sr));
  }
  return r;
}

std::string render_table(const RunReport& report) {
  const auto sum = summarize(report);
  std::ostringstream out;
  out << "Case study: " << (report.name.empty() ? "(unnamed)" : report.name)
      << "\n";
  out << "Values are medians over " << report.seeds.size()
      << " seed(s), taken over the seeds where each method found a failure.\n";
  char line[256];
  auto row = [&](const std::string& algo, const std::string& steps,
                 const std::string& reward, const std::string& load,
                 const std::string& lofi, const std::string& pct) {
    std::snprintf(line, sizeof line, "%-10s %16s %14s %17s %12s %22s\n",
                  algo.c_str(), steps.c_str(), reward.c_str(), load.c_str(),
                  lofi.c_str(), pct.c_str());
    out << line;
  };
  row("Algorithm", "Steps to Failure", "Final Reward", "Load Lofi Policy?",
      "Lofi Steps", "Percent of Hifi Steps");
  if (report.seeds.empty()) return out.str();

  auto num = [](const std::optional<double>& v, const char* spec) {
    return v ? fmt(spec, *v) : std::string("n/a");
  };
  auto pct = [](const std::optional<double>& v) {
    return v ? fmt("%.1f%%", *v) : std::string("n/a");
  };
  const std::string lofi = num(sum.lofi_steps, "%.0f");
  const bool any_scratch = std::any_of(report.seeds.begin(), report.seeds.end(),
                                       [](const SeedReport& s) { return s.ba_scratch.has_value(); });
  const bool any_warm = std::any_of(report.seeds.begin(), report.seeds.end(),
                                    [](const SeedReport& s) { return s.ba_warm.has_value(); });
  if (any_scratch) {
    row("BA", num(sum.ba_scratch_steps, "%.0f"), num(sum.ba_scratch_reward, "%.1f"),
        "No", lofi, pct(sum.ba_scratch_percent));
  }
  if (any_warm) {
    row("BA", num(sum.ba_warm_steps, "%.0f"), num(sum.ba_warm_reward, "%.1f"),
        "Yes", lofi, pct(sum.ba_warm_percent));
  }
  row("Hifi", num(sum.baseline_steps, "%.0f"), num(sum.baseline_reward, "%.1f"),
      "--", "--", "--");
  if (!any_warm) {
    std::string reason = "no seed produced a lofi failure";
    for (const auto& s : report.seeds) {
      if (!s.warm_start_note.empty()) {
        reason = s.warm_start_note;
        break;
      }
    }
    out << "Warm-start row omitted: " << reason << "\n";
  }
  return out.str();
}

}  // namespace ast::harness
