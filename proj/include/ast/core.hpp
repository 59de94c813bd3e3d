#pragma once

// Scenario-agnostic adaptive stress testing machinery: the simulator
// contract, the per-step reward, trajectories and seeded RNG streams.

#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ast {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class InvalidOutcome : public Error {
 public:
  using Error::Error;
};

class ConfigMismatch : public Error {
 public:
  using Error::Error;
};

class DimensionMismatch : public Error {
 public:
  DimensionMismatch(const std::string& what, std::size_t expected,
                    std::size_t actual);
  std::size_t expected() const { return expected_; }
  std::size_t actual() const { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

/// Adversarial disturbance applied to the simulator for one step. Units and
/// dimension are defined by the scenario.
struct EnvironmentAction {
  std::vector<double> values;

  std::size_t size() const { return values.size(); }
  double operator[](std::size_t i) const { return values[i]; }
  bool operator==(const EnvironmentAction&) const = default;
};

struct StepOutcome {
  bool event = false;          // state is in the failure set
  double log_likelihood = 0.0; // log P(action | state)
  bool terminal = false;
  double miss_distance = 0.0;  // meters, closest clearance so far
};

/// Finite stand-in for the infinite penalty on trajectories that reach the
/// horizon without a failure.
struct RewardConfig {
  double alpha_miss = 1e4;
  double beta_miss = 1e3;

  void validate() const;
};

using Snapshot = std::vector<std::uint8_t>;

struct TrajectoryStep {
  Snapshot state_snapshot;  // state before `action` is applied
  EnvironmentAction action;
  double reward = 0.0;
  StepOutcome outcome;
};

struct Trajectory {
  std::vector<TrajectoryStep> steps;
  double total_return = 0.0;
  bool ends_in_failure = false;

  void append(TrajectoryStep step);
  std::size_t size() const { return steps.size(); }
};

// t is the index of the state reached by the step (1 after the first step).
double step_reward(const StepOutcome& outcome, int t, int horizon,
                   const RewardConfig& cfg);

double trajectory_return(const Trajectory& traj);

/// Log-density of x under a diagonal Gaussian.
double gaussian_log_density(std::span<const double> x,
                            std::span<const double> mean,
                            std::span<const double> sigma);

/// Black-box simulator used by the solvers. Implementations must be
/// deterministic: the same reset seed and action sequence must reproduce the
/// same states bit-for-bit, and restore(snapshot()) must not perturb the
/// continuation.
class Simulator {
 public:
  virtual ~Simulator() = default;

  virtual int action_dim() const = 0;
  virtual int observation_dim() const = 0;
  virtual int horizon() const = 0;
  virtual int time_index() const = 0;
  virtual bool terminal() const = 0;

  virtual void reset(std::uint64_t seed) = 0;
  virtual StepOutcome step(const EnvironmentAction& action) = 0;
  virtual std::vector<double> observe() const = 0;
  /// Nominal per-channel disturbance scale; solvers may act in units of it.
  virtual std::vector<double> action_scale() const {
    return std::vector<double>(static_cast<std::size_t>(action_dim()), 1.0);
  }

  virtual Snapshot snapshot() const = 0;
  /// Throws ConfigMismatch when the bytes came from a differently configured
  /// simulator.
  virtual void restore(const Snapshot& bytes) = 0;

  /// Lifetime count of step() calls. Not affected by reset or restore.
  std::int64_t steps_taken() const { return steps_taken_; }

 protected:
  void count_step() { ++steps_taken_; }

 private:
  std::int64_t steps_taken_ = 0;
};

// splitmix64 finalizer; used to derive independent stream seeds.
std::uint64_t mix_seed(std::uint64_t x);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream_a,
                          std::uint64_t stream_b);

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal();
  double uniform();
  std::size_t index(std::size_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::uint64_t fnv1a(std::string_view bytes);

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> base64_decode(std::string_view text);

/// Writes one JSON object per step: {t, state, action, reward, event}. The
/// state is the base64-encoded snapshot.
void write_trajectory_jsonl(std::ostream& out, const Trajectory& traj,
                            int start_t = 0);

}  // namespace ast
