#include "ast/ppo.hpp"

#include <algorithm>
#include <limits>
#include <cmath>
#include <numeric>
#include <set>

namespace ast::ppo {

namespace {

// Stream tags for derive_seed.
constexpr std::uint64_t kRolloutStream = 1;
constexpr std::uint64_t kShuffleStream = 2;

}  // namespace

void PPOConfig::validate() const {
  if (batch_size < 1) throw Error("ppo: batch_size must be >= 1");
  if (!(discount > 0.0 && discount <= 1.0)) throw Error("ppo: need 0 < discount <= 1");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) {
    throw Error("ppo: need 0 <= gae_lambda <= 1");
  }
  if (!(clip_epsilon > 0.0)) throw Error("ppo: clip_epsilon must be > 0");
  if (!(kl_limit > 0.0)) throw Error("ppo: kl_limit must be > 0");
  if (!(learning_rate > 0.0)) throw Error("ppo: learning_rate must be > 0");
  if (update_epochs < 1 || minibatches < 1) {
    throw Error("ppo: update_epochs and minibatches must be >= 1");
  }
  if (!(reward_scale > 0.0)) throw Error("ppo: reward_scale must be > 0");
  if (max_rollouts < 0) throw Error("ppo: max_rollouts must be >= 0");
  if (hidden < 1) throw Error("ppo: hidden must be >= 1");
}

void to_json(nlohmann::json& j, const PPOConfig& c) {
  j = {{"batch_size", c.batch_size},       {"discount", c.discount},
       {"gae_lambda", c.gae_lambda},       {"clip_epsilon", c.clip_epsilon},
       {"kl_limit", c.kl_limit},           {"learning_rate", c.learning_rate},
       {"update_epochs", c.update_epochs}, {"value_coef", c.value_coef},
       {"entropy_coef", c.entropy_coef},   {"minibatches", c.minibatches},
       {"max_grad_norm", c.max_grad_norm}, {"reward_scale", c.reward_scale},
       {"max_rollouts", c.max_rollouts},   {"hidden", c.hidden},
       {"normalize_actions", c.normalize_actions}};
}

void from_json(const nlohmann::json& j, PPOConfig& c) {
  static const std::set<std::string> known = {
      "batch_size",   "discount",     "gae_lambda",    "clip_epsilon",
      "kl_limit",     "learning_rate", "update_epochs", "value_coef",
      "entropy_coef", "minibatches",  "max_grad_norm", "reward_scale",
      "max_rollouts", "hidden", "normalize_actions"};
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) throw Error("ppo config: unknown key '" + key + "'");
  }
  c.batch_size = j.value("batch_size", c.batch_size);
  c.discount = j.value("discount", c.discount);
  c.gae_lambda = j.value("gae_lambda", c.gae_lambda);
  c.clip_epsilon = j.value("clip_epsilon", c.clip_epsilon);
  c.kl_limit = j.value("kl_limit", c.kl_limit);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.update_epochs = j.value("update_epochs", c.update_epochs);
  c.value_coef = j.value("value_coef", c.value_coef);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.minibatches = j.value("minibatches", c.minibatches);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.reward_scale = j.value("reward_scale", c.reward_scale);
  c.max_rollouts = j.value("max_rollouts", c.max_rollouts);
  c.normalize_actions = j.value("normalize_actions", c.normalize_actions);
  c.hidden = j.value("hidden", c.hidden);
}

GaeResult compute_gae(std::span<const double> rewards,
                      std::span<const double> values, double bootstrap,
                      double gamma, double lambda) {
  if (rewards.size() != values.size()) {
    throw DimensionMismatch("compute_gae values", rewards.size(), values.size());
  }
  const std::size_t n = rewards.size();
  GaeResult out;
  out.advantages.assign(n, 0.0);
  out.returns.assign(n, 0.0);
  double next_value = bootstrap;
  double next_adv = 0.0;
  for (std::size_t k = n; k-- > 0;) {
    const double delta = rewards[k] + gamma * next_value - values[k];
    next_adv = delta + gamma * lambda * next_adv;
    out.advantages[k] = next_adv;
    out.returns[k] = next_adv + values[k];
    next_value = values[k];
  }
  return out;
}

void normalize_advantages(std::span<double> adv, double eps) {
  if (adv.empty()) return;
  const double n = static_cast<double>(adv.size());
  const double mean = std::accumulate(adv.begin(), adv.end(), 0.0) / n;
  double var = 0.0;
  for (double a : adv) var += (a - mean) * (a - mean);
  const double sd = std::sqrt(var / n);
  for (double& a : adv) a = (a - mean) / (sd + eps);
}

double clipped_objective(double ratio, double advantage, double clip_epsilon) {
  const double clipped =
      std::clamp(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon);
  return std::min(ratio * advantage, clipped * advantage);
}

double kl_diag_gaussian(std::span<const double> mean1,
                        std::span<const double> std1,
                        std::span<const double> mean2,
                        std::span<const double> std2) {
  const std::size_t d = mean1.size();
  if (std1.size() != d || mean2.size() != d || std2.size() != d) {
    throw DimensionMismatch("kl_diag_gaussian", d, std2.size());
  }
  double kl = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    const double dm = mean1[i] - mean2[i];
    kl += std::log(std2[i] / std1[i]) +
          (std1[i] * std1[i] + dm * dm) / (2.0 * std2[i] * std2[i]) - 0.5;
  }
  return std::max(kl, 0.0);
}

Adam::Adam(std::size_t n, double learning_rate, double beta1, double beta2,
           double eps)
    : lr_(learning_rate),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps),
      m_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))),
      v_(Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n))) {}

void Adam::step(Eigen::VectorXd& params, const Eigen::VectorXd& grad) {
  ++t_;
  m_ = beta1_ * m_ + (1.0 - beta1_) * grad;
  v_ = beta2_ * v_ + (1.0 - beta2_) * grad.cwiseProduct(grad);
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  params.array() -=
      lr_ * (m_.array() / c1) / ((v_.array() / c2).sqrt() + eps_);
}

Trajectory Rollout::to_trajectory() const {
  Trajectory traj;
  for (const auto& s : steps) {
    traj.append({s.snapshot, s.env_action, s.reward, s.outcome});
  }
  return traj;
}

TrainingBatch make_batch(const std::vector<Rollout>& rollouts,
                         const PPOConfig& cfg) {
  TrainingBatch batch;
  std::vector<double> all_adv;
  std::vector<GaeResult> gaes;
  gaes.reserve(rollouts.size());
  for (const auto& ro : rollouts) {
    std::vector<double> rewards, values;
    rewards.reserve(ro.steps.size());
    values.reserve(ro.steps.size());
    for (const auto& s : ro.steps) {
      rewards.push_back(s.reward * cfg.reward_scale);
      values.push_back(s.value);
    }
    // Every rollout ends in a terminal state (failure or horizon), so the
    // bootstrap value is zero.
    gaes.push_back(compute_gae(rewards, values, 0.0, cfg.discount,
                               cfg.gae_lambda));
    all_adv.insert(all_adv.end(), gaes.back().advantages.begin(),
                   gaes.back().advantages.end());
  }
  normalize_advantages(all_adv);

  std::size_t k = 0;
  for (std::size_t e = 0; e < rollouts.size(); ++e) {
    const auto& ro = rollouts[e];
    std::vector<policy::StepTarget> ep;
    ep.reserve(ro.steps.size());
    for (std::size_t t = 0; t < ro.steps.size(); ++t) {
      const auto& s = ro.steps[t];
      policy::StepTarget st;
      st.obs = s.obs;
      st.action = s.action.values;
      st.old_log_prob = s.log_prob;
      st.advantage = all_adv[k++];
      st.value_target = gaes[e].returns[t];
      st.old_mean.assign(s.mean.data(), s.mean.data() + s.mean.size());
      st.old_std.assign(s.std.data(), s.std.data() + s.std.size());
      ep.push_back(std::move(st));
    }
    batch.steps += ep.size();
    batch.episodes.push_back(std::move(ep));
  }
  return batch;
}

policy::LossBreakdown ppo_loss(const TrainingBatch& batch,
                               const policy::PolicyParams& params,
                               const PPOConfig& cfg, Eigen::VectorXd* grad) {
  policy::LossConfig lc;
  lc.clip_epsilon = cfg.clip_epsilon;
  lc.value_weight = cfg.value_coef;
  lc.entropy_weight = cfg.entropy_coef;
  lc.normalizer = static_cast<double>(std::max<std::size_t>(batch.steps, 1));
  policy::LossBreakdown total;
  for (const auto& ep : batch.episodes) {
    const auto l = policy::episode_loss(params, ep, lc, grad);
    total.policy += l.policy;
    total.value += l.value;
    total.entropy += l.entropy;
    total.kl += l.kl;
    total.total += l.total;
  }
  return total;
}

nlohmann::json metrics_line(const EpochResult& r) {
  return {{"epoch", r.epoch},
          {"env_steps_cum", r.env_steps_cum},
          {"mean_return", r.mean_return},
          {"best_return", r.best_return},
          {"failure_found", r.failure_found},
          {"mean_kl", r.mean_kl},
          {"policy_loss", r.policy_loss},
          {"value_loss", r.value_loss}};
}

Trainer::Trainer(policy::PolicyParams params, PPOConfig cfg,
                 RewardConfig reward, std::uint64_t seed)
    : params_(std::move(params)),
      cfg_(cfg),
      reward_(reward),
      seed_(seed),
      adam_(params_.size(), cfg.learning_rate) {
  cfg_.validate();
  reward_.validate();
}

Rollout Trainer::collect_rollout(Simulator& sim, const Snapshot& start,
                                 Rng& rng) const {
  sim.restore(start);
  if (sim.terminal()) throw Error("rollout start state is terminal");
  Rollout ro;
  ro.start_t = sim.time_index();
  auto h = policy::HiddenState::zeros(params_.shape().hidden);
  const auto scale = sim.action_scale();
  if (scale.size() != static_cast<std::size_t>(sim.action_dim())) {
    throw DimensionMismatch("simulator action scale", sim.action_dim(), scale.size());
  }
  while (!sim.terminal()) {
    RolloutStep step;
    step.snapshot = sim.snapshot();
    step.obs = sim.observe();
    auto [out, h_next] = policy::policy_step(params_, h, step.obs);
    h = std::move(h_next);
    auto [action, lp] = policy::sample_action(out, rng);
    step.env_action = action;
    if (cfg_.normalize_actions) {
      for (std::size_t i = 0; i < scale.size(); ++i) step.env_action.values[i] *= scale[i];
    }
    step.action = std::move(action);
    step.log_prob = lp;
    step.value = out.value;
    step.mean = std::move(out.mean);
    step.std = std::move(out.std);
    step.outcome = sim.step(step.env_action);
    step.reward =
        step_reward(step.outcome, sim.time_index(), sim.horizon(), reward_);
    ro.total_return += step.reward;
    ro.steps.push_back(std::move(step));
  }
  ro.failure = ro.steps.back().outcome.event;
  return ro;
}

EpochResult Trainer::train_epoch(Simulator& sim,
                                 std::span<const Snapshot> starts) {
  if (sim.action_dim() != params_.shape().action_dim ||
      sim.observation_dim() != params_.shape().obs_dim) {
    throw DimensionMismatch("trainer/simulator observation",
                            params_.shape().obs_dim, sim.observation_dim());
  }
  std::vector<Snapshot> reset_start;
  if (starts.empty()) {
    sim.reset(seed_);
    reset_start.push_back(sim.snapshot());
    starts = reset_start;
  }
  const int max_rollouts =
      cfg_.max_rollouts > 0
          ? cfg_.max_rollouts
          : (cfg_.batch_size + sim.horizon() - 1) / sim.horizon();

  EpochResult result;
  result.epoch = epoch_;
  std::vector<Rollout> rollouts;
  std::int64_t steps = 0;
  const std::int64_t before = sim.steps_taken();
  try {
    while (steps < cfg_.batch_size &&
           static_cast<int>(rollouts.size()) < max_rollouts) {
      Rng rng(derive_seed(seed_, kRolloutStream,
                          (static_cast<std::uint64_t>(epoch_) << 32) |
                              rollouts.size()));
      const auto& start = starts[starts.size() == 1 ? 0 : rng.index(starts.size())];
      rollouts.push_back(collect_rollout(sim, start, rng));
      steps += static_cast<std::int64_t>(rollouts.back().steps.size());
    }
  } catch (const Error& e) {
    throw Error("epoch " + std::to_string(epoch_) + ": " + e.what());
  }
  // Steps are summed once per batch, after collection.
  env_steps_ += steps;
  result.env_steps = steps;
  result.env_steps_cum = env_steps_;
  result.rollouts = static_cast<int>(rollouts.size());
  if (sim.steps_taken() - before != steps) {
    throw Error("simulator step counter disagrees with rollout lengths");
  }

  double sum_return = 0.0;
  result.best_return = -std::numeric_limits<double>::infinity();
  const Rollout* best_failure = nullptr;
  for (const auto& ro : rollouts) {
    sum_return += ro.total_return;
    result.best_return = std::max(result.best_return, ro.total_return);
    if (ro.failure &&
        (!best_failure || ro.total_return > best_failure->total_return)) {
      best_failure = &ro;
    }
  }
  result.mean_return = sum_return / static_cast<double>(rollouts.size());
  if (best_failure) {
    result.failure_found = true;
    result.best_failure = best_failure->to_trajectory();
    result.best_failure_start_t = best_failure->start_t;
  }

  const auto stats = update(rollouts);
  result.mean_kl = stats.mean_kl;
  result.policy_loss = stats.policy_loss;
  result.value_loss = stats.value_loss;
  result.kl_stopped = stats.kl_stopped;
  result.updates_applied = stats.updates;
  ++epoch_;
  return result;
}

Trainer::UpdateStats Trainer::update(const std::vector<Rollout>& rollouts) {
  UpdateStats stats;
  const TrainingBatch batch = make_batch(rollouts, cfg_);
  const std::size_t n_eps = batch.episodes.size();
  const std::size_t n_mb =
      std::min<std::size_t>(static_cast<std::size_t>(cfg_.minibatches), n_eps);
  std::vector<std::size_t> order(n_eps);
  Rng rng(derive_seed(seed_, kShuffleStream, static_cast<std::uint64_t>(epoch_)));

  policy::LossConfig lc;
  lc.clip_epsilon = cfg_.clip_epsilon;
  lc.value_weight = cfg_.value_coef;
  lc.entropy_weight = cfg_.entropy_coef;
  Eigen::VectorXd grad(params_.size());

  for (int pass = 0; pass < cfg_.update_epochs && !stats.kl_stopped; ++pass) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng.engine());
    double pass_policy = 0.0;
    double pass_value = 0.0;
    for (std::size_t mb = 0; mb < n_mb; ++mb) {
      const std::size_t lo = mb * n_eps / n_mb;
      const std::size_t hi = (mb + 1) * n_eps / n_mb;
      std::size_t mb_steps = 0;
      for (std::size_t k = lo; k < hi; ++k) {
        mb_steps += batch.episodes[order[k]].size();
      }
      lc.normalizer = static_cast<double>(mb_steps);
      grad.setZero();
      policy::LossBreakdown mb_loss;
      for (std::size_t k = lo; k < hi; ++k) {
        const auto l =
            policy::episode_loss(params_, batch.episodes[order[k]], lc, &grad);
        mb_loss.policy += l.policy;
        mb_loss.value += l.value;
        mb_loss.kl += l.kl;
      }
      // The KL is measured at the current parameters; stop before applying
      // an update from a policy that has already moved too far.
      if (mb_loss.kl > cfg_.kl_limit) {
        stats.kl_stopped = true;
        break;
      }
      if (cfg_.max_grad_norm > 0.0) {
        const double norm = grad.norm();
        if (norm > cfg_.max_grad_norm) grad *= cfg_.max_grad_norm / norm;
      }
      adam_.step(params_.flat(), grad);
      ++stats.updates;
      pass_policy += mb_loss.policy * static_cast<double>(mb_steps);
      pass_value += mb_loss.value * static_cast<double>(mb_steps);
    }
    if (!stats.kl_stopped) {
      stats.policy_loss = pass_policy / static_cast<double>(batch.steps);
      stats.value_loss = pass_value / static_cast<double>(batch.steps);
    }
  }
  stats.mean_kl = ppo_loss(batch, params_, cfg_).kl;
  return stats;
}

}  // namespace ast::ppo
