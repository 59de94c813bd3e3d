#pragma once

// Clipped PPO with generalized advantage estimation over batches of rollouts
// from a black-box simulator.

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ast/core.hpp"
#include "ast/policy.hpp"

namespace ast::ppo {

struct PPOConfig {
  int batch_size = 5000;  // env steps per epoch
  double discount = 0.99;
  double gae_lambda = 0.95;
  double clip_epsilon = 0.2;
  double kl_limit = 1.0;
  double learning_rate = 3e-4;
  int update_epochs = 10;
  double value_coef = 0.5;
  double entropy_coef = 0.0;
  int minibatches = 4;
  double max_grad_norm = 0.5;  // 0 disables clipping
  // Rewards are multiplied by this before advantage and value estimation so
  // the miss penalty does not dominate the value loss.
  double reward_scale = 1e-3;
  // Cap on rollouts per epoch; 0 means ceil(batch_size / horizon), the count
  // a batch of full-length rollouts needs.
  int max_rollouts = 0;
  int hidden = 64;
  // The policy acts in units of the simulator's action_scale().
  bool normalize_actions = true;

  void validate() const;
};

void to_json(nlohmann::json& j, const PPOConfig& c);
void from_json(const nlohmann::json& j, PPOConfig& c);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

GaeResult compute_gae(std::span<const double> rewards,
                      std::span<const double> values, double bootstrap,
                      double gamma, double lambda);

/// In place to zero mean and unit std; eps guards the division.
void normalize_advantages(std::span<double> adv, double eps = 1e-8);

/// min(ratio * adv, clip(ratio, 1 - eps, 1 + eps) * adv)
double clipped_objective(double ratio, double advantage, double clip_epsilon);

/// KL(p1 || p2) for diagonal Gaussians, summed over dimensions.
double kl_diag_gaussian(std::span<const double> mean1,
                        std::span<const double> std1,
                        std::span<const double> mean2,
                        std::span<const double> std2);

class Adam {
 public:
  Adam(std::size_t n, double learning_rate, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8);
  void step(Eigen::VectorXd& params, const Eigen::VectorXd& grad);
  std::int64_t steps() const { return t_; }

 private:
  double lr_, beta1_, beta2_, eps_;
  Eigen::VectorXd m_, v_;
  std::int64_t t_ = 0;
};

struct RolloutStep {
  std::vector<double> obs;
  EnvironmentAction action;      // policy units
  EnvironmentAction env_action;  // as applied to the simulator
  double log_prob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  Snapshot snapshot;
  StepOutcome outcome;
};

struct Rollout {
  std::vector<RolloutStep> steps;
  int start_t = 0;
  double total_return = 0.0;
  bool failure = false;

  Trajectory to_trajectory() const;
};

/// A batch of episodes ready for the loss; advantages already normalized.
struct TrainingBatch {
  std::vector<std::vector<policy::StepTarget>> episodes;
  std::size_t steps = 0;
};

/// Clipped-surrogate loss plus value and entropy terms, averaged over every
/// step in the batch.
policy::LossBreakdown ppo_loss(const TrainingBatch& batch,
                               const policy::PolicyParams& params,
                               const PPOConfig& cfg,
                               Eigen::VectorXd* grad = nullptr);

struct EpochResult {
  int epoch = 0;
  std::int64_t env_steps = 0;
  std::int64_t env_steps_cum = 0;
  int rollouts = 0;
  double mean_return = 0.0;
  double best_return = 0.0;
  bool failure_found = false;
  std::optional<Trajectory> best_failure;
  int best_failure_start_t = 0;
  double mean_kl = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  bool kl_stopped = false;
  int updates_applied = 0;
};

nlohmann::json metrics_line(const EpochResult& r);

class Trainer {
 public:
  Trainer(policy::PolicyParams params, PPOConfig cfg, RewardConfig reward,
          std::uint64_t seed);

  /// Collects rollouts starting from snapshots drawn uniformly from
  /// `starts` (the simulator's reset state when empty), then runs the
  /// clipped PPO update.
  EpochResult train_epoch(Simulator& sim, std::span<const Snapshot> starts);

  Rollout collect_rollout(Simulator& sim, const Snapshot& start,
                          Rng& rng) const;

  const policy::PolicyParams& params() const { return params_; }
  const PPOConfig& config() const { return cfg_; }
  std::int64_t env_steps() const { return env_steps_; }
  int epoch() const { return epoch_; }

 private:
  struct UpdateStats {
    double mean_kl = 0.0;
    double policy_loss = 0.0;
    double value_loss = 0.0;
    bool kl_stopped = false;
    int updates = 0;
  };
  UpdateStats update(const std::vector<Rollout>& rollouts);

  policy::PolicyParams params_;
  PPOConfig cfg_;
  RewardConfig reward_;
  std::uint64_t seed_;
  Adam adam_;
  int epoch_ = 0;
  std::int64_t env_steps_ = 0;
};

TrainingBatch make_batch(const std::vector<Rollout>& rollouts,
                         const PPOConfig& cfg);

}  // namespace ast::ppo
