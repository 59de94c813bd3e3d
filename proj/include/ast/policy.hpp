#pragma once

// Recurrent Gaussian policy: a single GRU layer shared by a mean head, a
// state-dependent log-std head and a value head. Gradients are derived by
// hand for exactly the PPO losses used by the solver.

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "ast/core.hpp"

namespace ast::policy {

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct PolicyShape {
  int obs_dim = 0;
  int action_dim = 0;
  int hidden = 64;

  bool operator==(const PolicyShape&) const = default;
};

enum class Block : int {
  kWz, kUz, kBz,
  kWr, kUr, kBr,
  kWn, kUn, kBn,
  kWmean, kBmean,
  kWlogstd, kBlogstd,
  kWvalue, kBvalue,
  kCount
};

struct BlockLayout {
  std::string name;
  int rows = 0;
  int cols = 0;
  std::size_t offset = 0;
  std::size_t size() const { return static_cast<std::size_t>(rows) * cols; }
};

using RowMatrix =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixView = Eigen::Map<RowMatrix>;
using ConstMatrixView = Eigen::Map<const RowMatrix>;

/// All network parameters, stored contiguously so that optimizers and
/// serialization work on a single flat vector.
class PolicyParams {
 public:
  explicit PolicyParams(PolicyShape shape);

  /// Uniform in [-1/sqrt(fan_in), 1/sqrt(fan_in)]; head biases start at 0
  /// so the initial std is 1.
  static PolicyParams initialize(PolicyShape shape, std::uint64_t seed);

  const PolicyShape& shape() const { return shape_; }
  std::size_t size() const { return static_cast<std::size_t>(flat_.size()); }

  Eigen::VectorXd& flat() { return flat_; }
  const Eigen::VectorXd& flat() const { return flat_; }
  void set_flat(const Eigen::VectorXd& values);

  const BlockLayout& layout(Block b) const {
    return layouts_[static_cast<int>(b)];
  }
  const std::array<BlockLayout, static_cast<int>(Block::kCount)>& layouts()
      const {
    return layouts_;
  }

  MatrixView matrix(Block b);
  ConstMatrixView matrix(Block b) const;

  /// Re-draws the log-std head (weights uniform, bias 0).
  void reinitialize_logstd(std::uint64_t seed);

  bool operator==(const PolicyParams& other) const;

 private:
  PolicyShape shape_;
  std::array<BlockLayout, static_cast<int>(Block::kCount)> layouts_;
  Eigen::VectorXd flat_;
};

struct HiddenState {
  Eigen::VectorXd h;

  static HiddenState zeros(int hidden) {
    return {Eigen::VectorXd::Zero(hidden)};
  }
};

struct PolicyOutput {
  Eigen::VectorXd mean;
  Eigen::VectorXd std;
  double value = 0.0;
};

std::pair<PolicyOutput, HiddenState> policy_step(const PolicyParams& params,
                                                 const HiddenState& h,
                                                 std::span<const double> obs);

double log_prob(const PolicyOutput& out, std::span<const double> action);

/// a = mean + std * eps with eps ~ N(0, I).
std::pair<EnvironmentAction, double> sample_action(const PolicyOutput& out,
                                                   Rng& rng);

double entropy(const PolicyOutput& out);

/// One step of an episode fed to the loss.
struct StepTarget {
  std::vector<double> obs;
  std::vector<double> action;
  double old_log_prob = 0.0;
  double advantage = 0.0;
  double value_target = 0.0;
  // Distribution that generated `action`; when present the loss also
  // reports KL(old || new).
  std::vector<double> old_mean;
  std::vector<double> old_std;
};

struct LossConfig {
  double policy_weight = 1.0;
  double clip_epsilon = 0.2;
  double value_weight = 0.5;
  double entropy_weight = 0.0;
  double normalizer = 1.0;  // per-step terms are divided by this
};

/// Each field is already divided by `normalizer`.
struct LossBreakdown {
  double policy = 0.0;   // -sum min(rho*A, clip(rho)*A)
  double value = 0.0;    // sum (V - target)^2
  double entropy = 0.0;  // sum H
  double kl = 0.0;       // sum KL(old || new), steps with old_mean only
  double total = 0.0;    // weighted combination that is minimized
};

/// Runs the episode from a zero hidden state, evaluates the loss, and (when
/// `grad` is non-null) adds its gradient with respect to the flat parameter
/// vector to `*grad` by backpropagation through time.
LossBreakdown episode_loss(const PolicyParams& params,
                           std::span<const StepTarget> episode,
                           const LossConfig& cfg, Eigen::VectorXd* grad);

/// Per-step outputs for a whole episode, starting from a zero hidden state.
std::vector<PolicyOutput> run_episode(const PolicyParams& params,
                                      std::span<const StepTarget> episode);

nlohmann::json to_checkpoint(const PolicyParams& params,
                             const nlohmann::json& config_echo = {});

/// Throws DimensionMismatch or Error on malformed checkpoints.
PolicyParams from_checkpoint(const nlohmann::json& checkpoint);

}  // namespace ast::policy
