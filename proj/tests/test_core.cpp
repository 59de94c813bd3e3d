#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include <json.hpp>

#include "ast/core.hpp"
#include "support.hpp"

using namespace ast;

TEST_CASE("step_reward branches") {
  RewardConfig cfg;
  StepOutcome o;
  o.event = true;
  o.log_likelihood = -3.0;
  CHECK(step_reward(o, 13, 50, cfg) == 0.0);

  o.event = false;
  o.miss_distance = 1.2;
  CHECK(step_reward(o, 50, 50, cfg) == doctest::Approx(-11200.0).epsilon(1e-15));

  o.log_likelihood = -5.5136;
  CHECK(step_reward(o, 7, 50, cfg) == -5.5136);

  o.log_likelihood = std::nan("");
  CHECK_THROWS_AS(step_reward(o, 7, 50, cfg), InvalidOutcome);
}

TEST_CASE("event at the horizon is still a failure") {
  StepOutcome o;
  o.event = true;
  o.miss_distance = 5.0;
  CHECK(step_reward(o, 50, 50, RewardConfig{}) == 0.0);
}

TEST_CASE("reward config rejects negative constants") {
  RewardConfig cfg;
  cfg.beta_miss = -1.0;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("trajectory return sums rewards") {
  Trajectory t;
  for (double r : {-1.0, -2.0, 0.0}) t.append({{}, {}, r, {}});
  CHECK(trajectory_return(t) == -3.0);
  CHECK(t.total_return == -3.0);

  Trajectory single;
  StepOutcome fail;
  fail.event = true;
  single.append({{}, {}, 0.0, fail});
  CHECK(trajectory_return(single) == 0.0);
  CHECK(single.ends_in_failure);

  const double ll = -3.0 * std::log(2.0 * std::numbers::pi);
  Trajectory three;
  for (int i = 0; i < 3; ++i) three.append({{}, {}, ll, {}});
  CHECK(trajectory_return(three) == doctest::Approx(-16.5408).epsilon(1e-4));

  CHECK_THROWS_AS(trajectory_return(Trajectory{}), Error);
}

TEST_CASE("gaussian log density against the scalar formula") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const int d = 1 + static_cast<int>(rng.index(6));
    std::vector<double> x(d), mu(d), sigma(d);
    double expected = 0.0;
    for (int i = 0; i < d; ++i) {
      x[i] = 3.0 * rng.normal();
      mu[i] = rng.normal();
      sigma[i] = 0.05 + 2.0 * rng.uniform();
      expected += testsupport::normal_logpdf(x[i], mu[i], sigma[i]);
    }
    CHECK(std::abs(gaussian_log_density(x, mu, sigma) - expected) < 1e-12);
  }
  const std::vector<double> zero(6, 0.0), one(6, 1.0);
  CHECK(gaussian_log_density(zero, zero, one) == doctest::Approx(-5.5136).epsilon(1e-4));
  const std::vector<double> short_mean(2, 0.0);
  CHECK_THROWS_AS(gaussian_log_density(zero, short_mean, one), DimensionMismatch);
}

TEST_CASE("seed derivation is deterministic and separates streams") {
  CHECK(derive_seed(1, 2) == derive_seed(1, 2));
  CHECK(derive_seed(1, 2) != derive_seed(1, 3));
  CHECK(derive_seed(1, 2) != derive_seed(2, 2));
  CHECK(derive_seed(5, 1, 7) != derive_seed(5, 1, 8));
  Rng a(derive_seed(9, 1)), b(derive_seed(9, 1));
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
}

TEST_CASE("rng uniform and index ranges") {
  Rng r(11);
  for (int i = 0; i < 1000; ++i) {
    const double u = r.uniform();
    CHECK(u >= 0.0);
    CHECK(u < 1.0);
    CHECK(r.index(7) < 7u);
  }
}

TEST_CASE("base64 round trip") {
  Rng r(5);
  for (int n = 0; n < 40; ++n) {
    std::vector<std::uint8_t> bytes(n);
    for (auto& b : bytes) b = static_cast<std::uint8_t>(r.index(256));
    CHECK(base64_decode(base64_encode(bytes)) == bytes);
  }
  const std::string hello = "hello";
  CHECK(base64_encode(std::vector<std::uint8_t>(hello.begin(), hello.end())) == "aGVsbG8=");
}

TEST_CASE("fnv1a known values") {
  CHECK(fnv1a("") == 0xcbf29ce484222325ULL);
  CHECK(fnv1a("a") == 0xaf63dc4c8601ec8cULL);
}

TEST_CASE("trajectory jsonl has one line per step") {
  Trajectory t;
  StepOutcome o;
  t.append({{1, 2, 3}, EnvironmentAction{{0.5}}, -1.0, o});
  o.event = true;
  t.append({{4, 5}, EnvironmentAction{{-0.5}}, 0.0, o});
  std::ostringstream out;
  write_trajectory_jsonl(out, t, 3);
  std::istringstream in(out.str());
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("t").get<int>() == 3 + n);
    CHECK(j.contains("state"));
    CHECK(j.contains("action"));
    CHECK(j.contains("reward"));
    CHECK(j.at("event").get<bool>() == (n == 1));
    ++n;
  }
  CHECK(n == 2);
}

TEST_CASE("scripted simulator counts steps across reset and restore") {
  testsupport::ScriptedSim sim(50, [](int) { return false; });
  sim.reset(7);
  for (int i = 0; i < 50; ++i) sim.step(EnvironmentAction{{0.0}});
  CHECK(sim.steps_taken() == 50);
  CHECK(sim.terminal());
  const auto snap = [] {
    testsupport::ScriptedSim s(50, [](int) { return false; });
    s.reset(0);
    for (int i = 0; i < 20; ++i) s.step(EnvironmentAction{{0.0}});
    return s.snapshot();
  }();
  sim.restore(snap);
  CHECK(sim.time_index() == 20);
  CHECK(sim.steps_taken() == 50);
}
