#pragma once

// Shared fixtures and independent reference implementations for the tests.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <numbers>
#include <vector>

#include "ast/core.hpp"
#include "ast/crosswalk.hpp"
#include "ast/policy.hpp"

namespace testsupport {

// A_t = sum_l (gamma*lambda)^l delta_{t+l}, evaluated as a plain double sum.
inline std::vector<double> brute_gae(const std::vector<double>& r,
                                     const std::vector<double>& v,
                                     double bootstrap, double gamma,
                                     double lambda) {
  const std::size_t n = r.size();
  std::vector<double> delta(n);
  for (std::size_t t = 0; t < n; ++t) {
    const double next = t + 1 < n ? v[t + 1] : bootstrap;
    delta[t] = r[t] + gamma * next - v[t];
  }
  std::vector<double> adv(n, 0.0);
  for (std::size_t t = 0; t < n; ++t) {
    for (std::size_t l = 0; t + l < n; ++l) {
      adv[t] += std::pow(gamma * lambda, static_cast<double>(l)) * delta[t + l];
    }
  }
  return adv;
}

inline double normal_logpdf(double x, double mu, double sigma) {
  const double z = (x - mu) / sigma;
  return -0.5 * z * z - std::log(sigma) - 0.5 * std::log(2.0 * std::numbers::pi);
}

// Deterministic fake simulator: a rollout restored at index s fails on its
// first step iff fails_from(s); otherwise it runs to the horizon. The action
// has no effect.
class ScriptedSim final : public ast::Simulator {
 public:
  ScriptedSim(int horizon, std::function<bool(int)> fails_from)
      : horizon_(horizon), fails_from_(std::move(fails_from)) {}

  int action_dim() const override { return 1; }
  int observation_dim() const override { return 2; }
  int horizon() const override { return horizon_; }
  int time_index() const override { return t_; }
  bool terminal() const override { return terminal_; }

  void reset(std::uint64_t) override {
    t_ = 0;
    start_ = 0;
    terminal_ = false;
  }

  ast::StepOutcome step(const ast::EnvironmentAction& a) override {
    count_step();
    ast::StepOutcome out;
    out.event = t_ == start_ && fails_from_(start_);
    ++t_;
    out.terminal = out.event || t_ >= horizon_;
    out.log_likelihood = normal_logpdf(a[0], 0.0, 1.0);
    out.miss_distance = 1.0;
    terminal_ = out.terminal;
    return out;
  }

  std::vector<double> observe() const override {
    return {static_cast<double>(t_) / horizon_, static_cast<double>(start_) / horizon_};
  }

  ast::Snapshot snapshot() const override {
    ast::Snapshot s(sizeof(int));
    std::memcpy(s.data(), &t_, sizeof(int));
    return s;
  }

  void restore(const ast::Snapshot& bytes) override {
    if (bytes.size() != sizeof(int)) throw ast::ConfigMismatch("scripted: bad snapshot");
    std::memcpy(&t_, bytes.data(), sizeof(int));
    start_ = t_;
    terminal_ = t_ >= horizon_;
  }

 private:
  int horizon_;
  std::function<bool(int)> fails_from_;
  int t_ = 0;
  int start_ = 0;
  bool terminal_ = false;
};

struct ExpectedEpoch {
  int tau;
  bool failure;
  bool forced;
};

enum class ExpectedEnd { found, rejected };

// Restart schedule written directly from its definition.
inline std::vector<ExpectedEpoch> expected_schedule(
    int demo_length, const std::function<bool(int)>& fails_from,
    ExpectedEnd* end, int max_epochs = 100000) {
  std::vector<ExpectedEpoch> out;
  int tau = demo_length - 10;
  int at_tau = 0;
  int forced_run = 0;
  while (static_cast<int>(out.size()) < max_epochs) {
    const bool f = fails_from(tau);
    if (f) {
      out.push_back({tau, true, false});
      if (tau == 0) {
        *end = ExpectedEnd::found;
        return out;
      }
      tau = tau - 4 < 0 ? 0 : tau - 4;
      at_tau = 0;
      forced_run = 0;
      continue;
    }
    ++at_tau;
    if (at_tau == 10) {
      out.push_back({tau, false, true});
      tau = tau - 1 < 0 ? 0 : tau - 1;
      at_tau = 0;
      if (++forced_run == 5) {
        *end = ExpectedEnd::rejected;
        return out;
      }
    } else {
      out.push_back({tau, false, false});
    }
  }
  return out;
}

// Scenario in which the car brakes hard as soon as the pedestrian is ahead
// and the pedestrian's acceleration is bounded.
inline ast::crosswalk::ScenarioConfig braking_scenario() {
  ast::crosswalk::ScenarioConfig sc;
  sc.emergency_brake = true;
  sc.ped_accel_limit = 2.0;
  return sc;
}

// Runs a constant action for a full episode; returns true on any collision.
inline bool constant_action_collides(const ast::crosswalk::ScenarioConfig& sc,
                                     const ast::crosswalk::FidelityConfig& fc,
                                     const std::vector<double>& action) {
  ast::crosswalk::CrosswalkSim sim(sc, fc);
  sim.reset(0);
  const ast::EnvironmentAction a{action};
  while (!sim.terminal()) {
    if (sim.step(a).event) return true;
  }
  return false;
}

// Exhaustive sweep over constant pedestrian accelerations and extreme
// sensor noise. Returns the number of colliding combinations.
inline int exhaustive_collisions(const ast::crosswalk::ScenarioConfig& sc,
                                 const ast::crosswalk::FidelityConfig& fc) {
  int hits = 0;
  const std::vector<double> noise = {-5.0, 0.0, 5.0};
  for (double ax = -10.0; ax <= 10.0 + 1e-9; ax += 1.0) {
    for (double ay = -10.0; ay <= 10.0 + 1e-9; ay += 1.0) {
      for (double n0 : noise) {
        for (double n1 : noise) {
          std::vector<double> a = {ax, ay, n0, n1};
          if (fc.sensor_model == ast::crosswalk::SensorModel::direct) {
            a.push_back(n0);
            a.push_back(n1);
          } else {
            a.resize(3);
          }
          hits += constant_action_collides(sc, fc, a) ? 1 : 0;
        }
      }
    }
  }
  return hits;
}

// Central finite-difference gradient of `f` at `x`.
inline Eigen::VectorXd numeric_gradient(
    const std::function<double(const Eigen::VectorXd&)>& f,
    const Eigen::VectorXd& x, double eps) {
  Eigen::VectorXd g(x.size());
  Eigen::VectorXd xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + eps;
    const double fp = f(xp);
    xp[i] = orig - eps;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor)
inline double max_relative_error(const Eigen::VectorXd& a,
                                 const Eigen::VectorXd& b, double floor = 1e-6) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double scale = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / scale);
  }
  return worst;
}

}  // namespace testsupport
