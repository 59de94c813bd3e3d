#include "ast/core.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <ostream>

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/binary_from_base64.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <json.hpp>

namespace ast {

DimensionMismatch::DimensionMismatch(const std::string& what,
                                     std::size_t expected, std::size_t actual)
    : Error(what + ": expected dimension " + std::to_string(expected) +
            ", got " + std::to_string(actual)),
      expected_(expected),
      actual_(actual) {}

void RewardConfig::validate() const {
  if (!(alpha_miss >= 0.0) || !(beta_miss >= 0.0)) {
    throw Error("reward config: alpha_miss and beta_miss must be >= 0");
  }
}

void Trajectory::append(TrajectoryStep step) {
  total_return += step.reward;
  ends_in_failure = step.outcome.event;
  steps.push_back(std::move(step));
}

double step_reward(const StepOutcome& outcome, int t, int horizon,
                   const RewardConfig& cfg) {
  if (!std::isfinite(outcome.log_likelihood)) {
    throw InvalidOutcome("step outcome has non-finite log likelihood");
  }
  if (outcome.event) return 0.0;
  if (t >= horizon) {
    return -(cfg.alpha_miss + cfg.beta_miss * outcome.miss_distance);
  }
  return outcome.log_likelihood;
}

double trajectory_return(const Trajectory& traj) {
  if (traj.steps.empty()) throw Error("trajectory_return: empty trajectory");
  double total = 0.0;
  for (const auto& s : traj.steps) total += s.reward;
  return total;
}

double gaussian_log_density(std::span<const double> x,
                            std::span<const double> mean,
                            std::span<const double> sigma) {
  if (x.size() != mean.size() || x.size() != sigma.size()) {
    throw DimensionMismatch("gaussian_log_density", mean.size(), x.size());
  }
  constexpr double kHalfLog2Pi = 0.91893853320467274178;
  double lp = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double z = (x[i] - mean[i]) / sigma[i];
    lp += -std::log(sigma[i]) - kHalfLog2Pi - 0.5 * z * z;
  }
  return lp;
}

std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x632BE59BD9B4E019ULL));
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream_a,
                          std::uint64_t stream_b) {
  return derive_seed(derive_seed(seed, stream_a), stream_b);
}

double Rng::normal() { return normal_(engine_); }

double Rng::uniform() {
  return std::uniform_real_distribution<double>(0.0, 1.0)(engine_);
}

std::size_t Rng::index(std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(engine_);
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : bytes) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string base64_encode(std::span<const std::uint8_t> bytes) {
  using namespace boost::archive::iterators;
  using It = base64_from_binary<
      transform_width<const std::uint8_t*, 6, 8>>;
  std::string out(It(bytes.data()), It(bytes.data() + bytes.size()));
  out.append((3 - bytes.size() % 3) % 3, '=');
  return out;
}

std::vector<std::uint8_t> base64_decode(std::string_view text) {
  using namespace boost::archive::iterators;
  using It = transform_width<binary_from_base64<const char*>, 8, 6>;
  std::size_t padding = 0;
  while (!text.empty() && text.back() == '=') {
    text.remove_suffix(1);
    ++padding;
  }
  if (text.empty()) return {};
  std::vector<std::uint8_t> out(It(text.data()), It(text.data() + text.size()));
  // transform_width may emit a trailing partial byte for unpadded input
  const std::size_t n = (text.size() * 6) / 8;
  out.resize(n);
  return out;
}

void write_trajectory_jsonl(std::ostream& out, const Trajectory& traj,
                            int start_t) {
  int t = start_t;
  for (const auto& step : traj.steps) {
    nlohmann::json line = {
        {"t", t++},
        {"state", base64_encode(step.state_snapshot)},
        {"action", step.action.values},
        {"reward", step.reward},
        {"event", step.outcome.event}};
    out << line.dump() << '\n';
  }
}

}  // namespace ast
