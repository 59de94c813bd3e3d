#include <doctest.h>

#include <cmath>
#include <numbers>

#include "ast/policy.hpp"
#include "support.hpp"

using namespace ast;
using namespace ast::policy;

namespace {

// Scalar-loop GRU step used as a reference for the vectorized one.
std::vector<double> reference_gru(const PolicyParams& p, const std::vector<double>& h,
                                  const std::vector<double>& x) {
  const int H = p.shape().hidden;
  const int I = p.shape().obs_dim;
  auto affine = [&](Block W, Block U, Block b, const std::vector<double>& hh, int row) {
    double s = p.matrix(b)(row, 0);
    for (int j = 0; j < I; ++j) s += p.matrix(W)(row, j) * x[j];
    for (int j = 0; j < H; ++j) s += p.matrix(U)(row, j) * hh[j];
    return s;
  };
  auto sig = [](double v) { return 1.0 / (1.0 + std::exp(-v)); };
  std::vector<double> r(H), rh(H), out(H);
  for (int i = 0; i < H; ++i) r[i] = sig(affine(Block::kWr, Block::kUr, Block::kBr, h, i));
  for (int i = 0; i < H; ++i) rh[i] = r[i] * h[i];
  for (int i = 0; i < H; ++i) {
    const double z = sig(affine(Block::kWz, Block::kUz, Block::kBz, h, i));
    const double n = std::tanh(affine(Block::kWn, Block::kUn, Block::kBn, rh, i));
    out[i] = (1.0 - z) * n + z * h[i];
  }
  return out;
}

std::vector<StepTarget> random_episode(const PolicyParams& params, Rng& rng, int T,
                                       double ratio_spread, bool with_old) {
  const auto& s = params.shape();
  std::vector<StepTarget> ep(T);
  for (auto& st : ep) {
    for (int i = 0; i < s.obs_dim; ++i) st.obs.push_back(rng.normal());
    for (int i = 0; i < s.action_dim; ++i) st.action.push_back(rng.normal());
    st.advantage = rng.normal();
    st.value_target = rng.normal();
  }
  const auto outs = run_episode(params, ep);
  for (int t = 0; t < T; ++t) {
    ep[t].old_log_prob = log_prob(outs[t], ep[t].action) + ratio_spread * rng.normal();
    if (with_old) {
      for (int i = 0; i < s.action_dim; ++i) {
        ep[t].old_mean.push_back(outs[t].mean[i] + 0.3 * rng.normal());
        ep[t].old_std.push_back(outs[t].std[i] * std::exp(0.2 * rng.normal()));
      }
    }
  }
  return ep;
}

bool near_clip_kink(const PolicyParams& params, const std::vector<StepTarget>& ep,
                    double eps) {
  const auto outs = run_episode(params, ep);
  for (std::size_t t = 0; t < ep.size(); ++t) {
    const double ratio = std::exp(log_prob(outs[t], ep[t].action) - ep[t].old_log_prob);
    if (std::abs(ratio - (1.0 - eps)) < 1e-3 || std::abs(ratio - (1.0 + eps)) < 1e-3) {
      return true;
    }
  }
  return false;
}

double fd_error(const PolicyParams& params, const std::vector<StepTarget>& ep,
                const LossConfig& cfg) {
  Eigen::VectorXd analytic = Eigen::VectorXd::Zero(params.flat().size());
  episode_loss(params, ep, cfg, &analytic);
  PolicyParams probe = params;
  const auto numeric = testsupport::numeric_gradient(
      [&](const Eigen::VectorXd& x) {
        probe.set_flat(x);
        return episode_loss(probe, ep, cfg, nullptr).total;
      },
      params.flat(), 1e-5);
  return testsupport::max_relative_error(analytic, numeric, 1e-6);
}

}  // namespace

TEST_CASE("parameter layout") {
  PolicyParams p({11, 6, 64});
  const std::size_t H = 64, I = 11, A = 6;
  CHECK(p.size() == 3 * (H * I + H * H + H) + 2 * (A * H + A) + H + 1);
  CHECK(p.layout(Block::kWz).name == "gru.W_update");
  CHECK(p.layout(Block::kBvalue).offset + 1 == p.size());
  CHECK_THROWS_AS(PolicyParams({0, 6, 64}), Error);
}

TEST_CASE("initialization bounds and zero head biases") {
  const auto p = PolicyParams::initialize({5, 3, 16}, 1);
  const double in_bound = 1.0 / std::sqrt(5.0);
  const double h_bound = 1.0 / std::sqrt(16.0);
  CHECK(p.matrix(Block::kWz).cwiseAbs().maxCoeff() <= in_bound);
  CHECK(p.matrix(Block::kUn).cwiseAbs().maxCoeff() <= h_bound);
  CHECK(p.matrix(Block::kBmean).cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.matrix(Block::kBlogstd).cwiseAbs().maxCoeff() == 0.0);
  CHECK(p.matrix(Block::kBvalue)(0, 0) == 0.0);
  CHECK(PolicyParams::initialize({5, 3, 16}, 1) == p);
  CHECK_FALSE(PolicyParams::initialize({5, 3, 16}, 2) == p);
}

TEST_CASE("zero network output") {
  PolicyParams p({3, 2, 4});
  p.matrix(Block::kBmean)(0, 0) = 0.7;
  p.matrix(Block::kBmean)(1, 0) = -0.2;
  p.matrix(Block::kBlogstd)(0, 0) = 9.0;
  p.matrix(Block::kBlogstd)(1, 0) = -0.5;
  p.matrix(Block::kBvalue)(0, 0) = 1.5;
  const std::vector<double> obs(3, 0.0);
  const auto [out, h] = policy_step(p, HiddenState::zeros(4), obs);
  CHECK(h.h.cwiseAbs().maxCoeff() == 0.0);
  CHECK(out.mean[0] == 0.7);
  CHECK(out.mean[1] == -0.2);
  CHECK(out.std[0] == doctest::Approx(std::exp(2.0)));
  CHECK(out.std[1] == doctest::Approx(std::exp(-0.5)));
  CHECK(out.value == 1.5);
}

TEST_CASE("policy step matches the scalar reference") {
  const auto p = PolicyParams::initialize({4, 2, 8}, 3);
  Rng rng(1);
  auto h = HiddenState::zeros(8);
  std::vector<double> href(8, 0.0);
  for (int t = 0; t < 5; ++t) {
    std::vector<double> x(4);
    for (auto& v : x) v = rng.normal();
    auto [out, next] = policy_step(p, h, x);
    href = reference_gru(p, href, x);
    for (int i = 0; i < 8; ++i) CHECK(next.h[i] == doctest::Approx(href[i]).epsilon(1e-13));
    h = next;
  }
  const std::vector<double> bad(3, 0.0);
  CHECK_THROWS_AS(policy_step(p, h, bad), DimensionMismatch);
}

TEST_CASE("policy step is deterministic and episodes start from zero") {
  const auto p = PolicyParams::initialize({3, 2, 6}, 4);
  const std::vector<double> x = {0.1, -0.2, 0.3};
  const auto a = policy_step(p, HiddenState::zeros(6), x);
  const auto b = policy_step(p, HiddenState::zeros(6), x);
  CHECK(a.first.mean == b.first.mean);
  CHECK(a.second.h == b.second.h);

  std::vector<StepTarget> ep1(3), ep2(1);
  for (auto& s : ep1) s = {{0.5, 0.5, 0.5}, {0.0, 0.0}};
  ep2[0] = {x, {0.0, 0.0}};
  const auto o1 = run_episode(p, ep1);
  const auto o2 = run_episode(p, ep2);
  CHECK(o2[0].mean == a.first.mean);
  CHECK(o2[0].value == a.first.value);
}

TEST_CASE("log prob closed forms") {
  PolicyOutput out{Eigen::VectorXd::Zero(1), Eigen::VectorXd::Ones(1), 0.0};
  const std::vector<double> one = {1.0};
  CHECK(log_prob(out, one) == doctest::Approx(-1.41894).epsilon(1e-5));
  PolicyOutput o2{Eigen::Vector3d(0.1, -0.4, 2.0), Eigen::Vector3d(0.5, 1.5, 0.2), 0.0};
  const std::vector<double> at_mean = {0.1, -0.4, 2.0};
  const double expected = -(std::log(0.5) + std::log(1.5) + std::log(0.2)) -
                          1.5 * std::log(2.0 * std::numbers::pi);
  CHECK(log_prob(o2, at_mean) == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("samples stay finite at the std clamp bounds") {
  PolicyParams p({2, 3, 4});
  p.matrix(Block::kBlogstd)(0, 0) = -50.0;
  p.matrix(Block::kBlogstd)(1, 0) = 50.0;
  const std::vector<double> x = {0.0, 0.0};
  const auto [out, h] = policy_step(p, HiddenState::zeros(4), x);
  CHECK(out.std[0] == doctest::Approx(std::exp(-5.0)));
  CHECK(out.std[1] == doctest::Approx(std::exp(2.0)));
  Rng rng(2);
  for (int i = 0; i < 100; ++i) {
    const auto [a, lp] = sample_action(out, rng);
    CHECK(std::isfinite(lp));
    CHECK(lp == doctest::Approx(log_prob(out, a.values)));
  }
}

TEST_CASE("gradients match central differences per loss term") {
  Rng rng(17);
  const LossConfig policy_only{1.0, 0.2, 0.0, 0.0, 2.0};
  const LossConfig value_only{0.0, 0.2, 1.0, 0.0, 2.0};
  const LossConfig entropy_only{0.0, 0.2, 0.0, 1.0, 2.0};
  const LossConfig combined{1.0, 0.2, 0.5, 0.01, 2.0};
  int checked = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const auto p = PolicyParams::initialize({3, 2, 4}, 100 + trial);
    auto ep = random_episode(p, rng, 2, trial % 2 ? 0.6 : 0.05, false);
    if (near_clip_kink(p, ep, 0.2)) continue;
    ++checked;
    CHECK(fd_error(p, ep, policy_only) < 1e-4);
    CHECK(fd_error(p, ep, value_only) < 1e-4);
    CHECK(fd_error(p, ep, entropy_only) < 1e-4);
    CHECK(fd_error(p, ep, combined) < 1e-4);
  }
  CHECK(checked >= 10);
}

TEST_CASE("clipped branch has zero policy gradient") {
  const auto p = PolicyParams::initialize({3, 2, 4}, 5);
  Rng rng(1);
  auto ep = random_episode(p, rng, 2, 0.0, false);
  const auto outs = run_episode(p, ep);
  for (std::size_t t = 0; t < ep.size(); ++t) {
    // ratio = e, advantage positive: the clipped term is the minimum
    ep[t].old_log_prob = log_prob(outs[t], ep[t].action) - 1.0;
    ep[t].advantage = 1.0;
  }
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p.flat().size());
  const auto loss = episode_loss(p, ep, {1.0, 0.2, 0.0, 0.0, 2.0}, &g);
  CHECK(loss.policy == doctest::Approx(-1.2));
  CHECK(g.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("saturated log std gets no gradient") {
  PolicyParams p = PolicyParams::initialize({3, 2, 4}, 6);
  p.matrix(Block::kBlogstd).setConstant(40.0);
  Rng rng(2);
  auto ep = random_episode(p, rng, 2, 0.05, false);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(p.flat().size());
  episode_loss(p, ep, {1.0, 0.2, 0.5, 0.1, 1.0}, &g);
  const auto& l = p.layout(Block::kBlogstd);
  CHECK(g.segment(static_cast<Eigen::Index>(l.offset), l.size()).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradient is linear in the loss scale") {
  const auto p = PolicyParams::initialize({3, 2, 4}, 7);
  Rng rng(3);
  auto ep = random_episode(p, rng, 3, 0.1, false);
  Eigen::VectorXd g1 = Eigen::VectorXd::Zero(p.flat().size());
  Eigen::VectorXd g2 = Eigen::VectorXd::Zero(p.flat().size());
  const auto l1 = episode_loss(p, ep, {1.0, 0.2, 0.5, 0.1, 2.0}, &g1);
  const auto l2 = episode_loss(p, ep, {2.0, 0.2, 1.0, 0.2, 2.0}, &g2);
  CHECK(l2.total == doctest::Approx(2.0 * l1.total).epsilon(1e-14));
  CHECK((g2 - 2.0 * g1).cwiseAbs().maxCoeff() < 1e-13);

  // only the value head sees the value loss when other weights are zero
  Eigen::VectorXd gv = Eigen::VectorXd::Zero(p.flat().size());
  episode_loss(p, ep, {0.0, 0.2, 1.0, 0.0, 1.0}, &gv);
  for (Block b : {Block::kWmean, Block::kBmean, Block::kWlogstd, Block::kBlogstd}) {
    const auto& l = p.layout(b);
    CHECK(gv.segment(static_cast<Eigen::Index>(l.offset), l.size()).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("kl term is zero for the generating distribution") {
  const auto p = PolicyParams::initialize({3, 2, 4}, 8);
  Rng rng(4);
  auto ep = random_episode(p, rng, 3, 0.0, false);
  const auto outs = run_episode(p, ep);
  for (std::size_t t = 0; t < ep.size(); ++t) {
    ep[t].old_mean.assign(outs[t].mean.data(), outs[t].mean.data() + 2);
    ep[t].old_std.assign(outs[t].std.data(), outs[t].std.data() + 2);
  }
  const auto loss = episode_loss(p, ep, {}, nullptr);
  CHECK(std::abs(loss.kl) < 1e-14);
  auto shifted = random_episode(p, rng, 3, 0.0, true);
  CHECK(episode_loss(p, shifted, {}, nullptr).kl > 0.0);
}

TEST_CASE("checkpoint round trip") {
  const auto p = PolicyParams::initialize({11, 6, 8}, 9);
  const auto ck = to_checkpoint(p, {{"note", "x"}});
  const auto q = from_checkpoint(ck);
  CHECK(q == p);
  CHECK(to_checkpoint(q, {{"note", "x"}}).dump() == ck.dump());

  auto broken = ck;
  broken["params"]["gru.W_update"]["data"].erase(0);
  CHECK_THROWS_AS(from_checkpoint(broken), DimensionMismatch);
  auto missing = ck;
  missing["params"].erase("value_head.b");
  CHECK_THROWS_AS(from_checkpoint(missing), Error);
}

TEST_CASE("reinitialized log std head") {
  auto p = PolicyParams::initialize({3, 2, 4}, 10);
  const auto before = p;
  p.reinitialize_logstd(99);
  CHECK(p.matrix(Block::kWmean) == before.matrix(Block::kWmean));
  CHECK_FALSE(p.matrix(Block::kWlogstd) == before.matrix(Block::kWlogstd));
  CHECK(p.matrix(Block::kBlogstd).cwiseAbs().maxCoeff() == 0.0);
}
