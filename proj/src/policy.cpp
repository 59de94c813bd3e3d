#include "ast/policy.hpp"

#include <algorithm>
#include <cmath>

namespace ast::policy {

namespace {

constexpr double kHalfLog2Pi = 0.91893853320467274178;
constexpr double kVersion = 1;

const char* block_name(Block b) {
  switch (b) {
    case Block::kWz: return "gru.W_update";
    case Block::kUz: return "gru.U_update";
    case Block::kBz: return "gru.b_update";
    case Block::kWr: return "gru.W_reset";
    case Block::kUr: return "gru.U_reset";
    case Block::kBr: return "gru.b_reset";
    case Block::kWn: return "gru.W_candidate";
    case Block::kUn: return "gru.U_candidate";
    case Block::kBn: return "gru.b_candidate";
    case Block::kWmean: return "mean_head.W";
    case Block::kBmean: return "mean_head.b";
    case Block::kWlogstd: return "logstd_head.W";
    case Block::kBlogstd: return "logstd_head.b";
    case Block::kWvalue: return "value_head.W";
    case Block::kBvalue: return "value_head.b";
    case Block::kCount: break;
  }
  return "?";
}

Eigen::ArrayXd sigmoid(const Eigen::ArrayXd& x) {
  return 1.0 / (1.0 + (-x).exp());
}

// Forward activations for one episode, columns indexed by step.
struct EpisodeCache {
  Eigen::MatrixXd x;       // obs_dim x T
  Eigen::MatrixXd hs;      // hidden x (T+1); column 0 is the initial state
  Eigen::MatrixXd z, r, n, rh;
  Eigen::MatrixXd mean;    // action_dim x T
  Eigen::MatrixXd logstd_raw;
  Eigen::MatrixXd logstd;
  Eigen::RowVectorXd value;
};

void check_finite(std::span<const double> obs) {
  for (double v : obs) {
    if (!std::isfinite(v)) throw Error("policy: non-finite observation");
  }
}

EpisodeCache forward(const PolicyParams& p, std::span<const StepTarget> ep) {
  const auto& shape = p.shape();
  const int T = static_cast<int>(ep.size());
  const int H = shape.hidden;
  EpisodeCache c;
  c.x.resize(shape.obs_dim, T);
  for (int t = 0; t < T; ++t) {
    if (ep[t].obs.size() != static_cast<std::size_t>(shape.obs_dim)) {
      throw DimensionMismatch("policy observation", shape.obs_dim,
                              ep[t].obs.size());
    }
    check_finite(ep[t].obs);
    c.x.col(t) = Eigen::Map<const Eigen::VectorXd>(ep[t].obs.data(),
                                                   shape.obs_dim);
  }
  const Eigen::MatrixXd az =
      (p.matrix(Block::kWz) * c.x).colwise() + p.matrix(Block::kBz).col(0);
  const Eigen::MatrixXd ar =
      (p.matrix(Block::kWr) * c.x).colwise() + p.matrix(Block::kBr).col(0);
  const Eigen::MatrixXd an =
      (p.matrix(Block::kWn) * c.x).colwise() + p.matrix(Block::kBn).col(0);
  const auto uz = p.matrix(Block::kUz);
  const auto ur = p.matrix(Block::kUr);
  const auto un = p.matrix(Block::kUn);

  c.hs.resize(H, T + 1);
  c.hs.col(0).setZero();
  c.z.resize(H, T);
  c.r.resize(H, T);
  c.n.resize(H, T);
  c.rh.resize(H, T);
  for (int t = 0; t < T; ++t) {
    const auto hp = c.hs.col(t);
    c.z.col(t) = sigmoid((az.col(t) + uz * hp).array()).matrix();
    c.r.col(t) = sigmoid((ar.col(t) + ur * hp).array()).matrix();
    c.rh.col(t) = c.r.col(t).cwiseProduct(hp);
    c.n.col(t) = (an.col(t) + un * c.rh.col(t)).array().tanh().matrix();
    c.hs.col(t + 1) = (1.0 - c.z.col(t).array()) * c.n.col(t).array() +
                      c.z.col(t).array() * hp.array();
  }
  const auto hout = c.hs.rightCols(T);
  c.mean = (p.matrix(Block::kWmean) * hout).colwise() +
           p.matrix(Block::kBmean).col(0);
  c.logstd_raw = (p.matrix(Block::kWlogstd) * hout).colwise() +
                 p.matrix(Block::kBlogstd).col(0);
  c.logstd = c.logstd_raw.cwiseMax(kLogStdMin).cwiseMin(kLogStdMax);
  c.value = (p.matrix(Block::kWvalue) * hout).row(0).array() +
            p.matrix(Block::kBvalue)(0, 0);
  return c;
}

}  // namespace

PolicyParams::PolicyParams(PolicyShape shape) : shape_(shape) {
  if (shape.obs_dim < 1 || shape.action_dim < 1 || shape.hidden < 1) {
    throw Error("policy: dimensions must be positive");
  }
  const int I = shape.obs_dim;
  const int A = shape.action_dim;
  const int H = shape.hidden;
  const std::array<std::pair<int, int>, static_cast<int>(Block::kCount)> dims =
      {{{H, I}, {H, H}, {H, 1},
        {H, I}, {H, H}, {H, 1},
        {H, I}, {H, H}, {H, 1},
        {A, H}, {A, 1},
        {A, H}, {A, 1},
        {1, H}, {1, 1}}};
  std::size_t offset = 0;
  for (int b = 0; b < static_cast<int>(Block::kCount); ++b) {
    layouts_[b] = {block_name(static_cast<Block>(b)), dims[b].first,
                   dims[b].second, offset};
    offset += layouts_[b].size();
  }
  flat_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(offset));
}

PolicyParams PolicyParams::initialize(PolicyShape shape, std::uint64_t seed) {
  PolicyParams p(shape);
  Rng rng(seed);
  auto fill = [&](Block b, double bound) {
    auto m = p.matrix(b);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      m.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
    }
  };
  const double gru_in = 1.0 / std::sqrt(static_cast<double>(shape.obs_dim));
  const double gru_h = 1.0 / std::sqrt(static_cast<double>(shape.hidden));
  for (Block b : {Block::kWz, Block::kWr, Block::kWn}) fill(b, gru_in);
  for (Block b : {Block::kUz, Block::kUr, Block::kUn, Block::kBz, Block::kBr,
                  Block::kBn, Block::kWmean, Block::kWlogstd, Block::kWvalue}) {
    fill(b, gru_h);
  }
  return p;
}

void PolicyParams::set_flat(const Eigen::VectorXd& values) {
  if (values.size() != flat_.size()) {
    throw DimensionMismatch("policy flat parameters", size(),
                            static_cast<std::size_t>(values.size()));
  }
  flat_ = values;
}

MatrixView PolicyParams::matrix(Block b) {
  const auto& l = layout(b);
  return MatrixView(flat_.data() + l.offset, l.rows, l.cols);
}

ConstMatrixView PolicyParams::matrix(Block b) const {
  const auto& l = layout(b);
  return ConstMatrixView(flat_.data() + l.offset, l.rows, l.cols);
}

void PolicyParams::reinitialize_logstd(std::uint64_t seed) {
  Rng rng(seed);
  auto w = matrix(Block::kWlogstd);
  const double bound = 1.0 / std::sqrt(static_cast<double>(shape_.hidden));
  for (Eigen::Index i = 0; i < w.size(); ++i) {
    w.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
  }
  matrix(Block::kBlogstd).setZero();
}

bool PolicyParams::operator==(const PolicyParams& other) const {
  return shape_ == other.shape_ && flat_ == other.flat_;
}

std::pair<PolicyOutput, HiddenState> policy_step(const PolicyParams& p,
                                                 const HiddenState& h,
                                                 std::span<const double> obs) {
  const auto& shape = p.shape();
  if (obs.size() != static_cast<std::size_t>(shape.obs_dim)) {
    throw DimensionMismatch("policy observation", shape.obs_dim, obs.size());
  }
  if (h.h.size() != shape.hidden) {
    throw DimensionMismatch("policy hidden state", shape.hidden,
                            static_cast<std::size_t>(h.h.size()));
  }
  check_finite(obs);
  const Eigen::Map<const Eigen::VectorXd> x(obs.data(), shape.obs_dim);
  const Eigen::VectorXd z =
      sigmoid((p.matrix(Block::kWz) * x + p.matrix(Block::kUz) * h.h +
               p.matrix(Block::kBz).col(0))
                  .array())
          .matrix();
  const Eigen::VectorXd r =
      sigmoid((p.matrix(Block::kWr) * x + p.matrix(Block::kUr) * h.h +
               p.matrix(Block::kBr).col(0))
                  .array())
          .matrix();
  const Eigen::VectorXd rh = r.cwiseProduct(h.h);
  const Eigen::VectorXd n =
      (p.matrix(Block::kWn) * x + p.matrix(Block::kUn) * rh +
       p.matrix(Block::kBn).col(0))
          .array()
          .tanh()
          .matrix();
  HiddenState next{((1.0 - z.array()) * n.array() + z.array() * h.h.array())
                       .matrix()};

  PolicyOutput out;
  out.mean = p.matrix(Block::kWmean) * next.h + p.matrix(Block::kBmean).col(0);
  const Eigen::VectorXd ls =
      (p.matrix(Block::kWlogstd) * next.h + p.matrix(Block::kBlogstd).col(0))
          .cwiseMax(kLogStdMin)
          .cwiseMin(kLogStdMax);
  out.std = ls.array().exp().matrix();
  out.value = (p.matrix(Block::kWvalue) * next.h)(0) +
              p.matrix(Block::kBvalue)(0, 0);
  return {std::move(out), std::move(next)};
}

double log_prob(const PolicyOutput& out, std::span<const double> action) {
  if (action.size() != static_cast<std::size_t>(out.mean.size())) {
    throw DimensionMismatch("policy action", out.mean.size(), action.size());
  }
  double lp = 0.0;
  for (Eigen::Index i = 0; i < out.mean.size(); ++i) {
    const double z = (action[i] - out.mean[i]) / out.std[i];
    lp += -std::log(out.std[i]) - kHalfLog2Pi - 0.5 * z * z;
  }
  return lp;
}

std::pair<EnvironmentAction, double> sample_action(const PolicyOutput& out,
                                                   Rng& rng) {
  EnvironmentAction a;
  a.values.resize(out.mean.size());
  for (Eigen::Index i = 0; i < out.mean.size(); ++i) {
    a.values[i] = out.mean[i] + out.std[i] * rng.normal();
  }
  const double lp = log_prob(out, a.values);
  return {std::move(a), lp};
}

double entropy(const PolicyOutput& out) {
  return (out.std.array().log() + kHalfLog2Pi + 0.5).sum();
}

std::vector<PolicyOutput> run_episode(const PolicyParams& params,
                                      std::span<const StepTarget> episode) {
  const auto c = forward(params, episode);
  std::vector<PolicyOutput> outs(episode.size());
  for (std::size_t t = 0; t < episode.size(); ++t) {
    const auto col = static_cast<Eigen::Index>(t);
    outs[t].mean = c.mean.col(col);
    outs[t].std = c.logstd.col(col).array().exp().matrix();
    outs[t].value = c.value(col);
  }
  return outs;
}

LossBreakdown episode_loss(const PolicyParams& params,
                           std::span<const StepTarget> episode,
                           const LossConfig& cfg, Eigen::VectorXd* grad) {
  if (episode.empty()) throw Error("episode_loss: empty episode");
  const auto& shape = params.shape();
  const int T = static_cast<int>(episode.size());
  const int A = shape.action_dim;
  const double inv_n = 1.0 / cfg.normalizer;
  const auto c = forward(params, episode);

  LossBreakdown loss;
  Eigen::MatrixXd d_mean = Eigen::MatrixXd::Zero(A, T);
  Eigen::MatrixXd d_logstd = Eigen::MatrixXd::Zero(A, T);
  Eigen::RowVectorXd d_value = Eigen::RowVectorXd::Zero(T);

  for (int t = 0; t < T; ++t) {
    const auto& step = episode[t];
    if (step.action.size() != static_cast<std::size_t>(A)) {
      throw DimensionMismatch("policy action", A, step.action.size());
    }
    double lp = 0.0;
    double ent = 0.0;
    Eigen::VectorXd u(A);  // standardized residual
    for (int i = 0; i < A; ++i) {
      const double ls = c.logstd(i, t);
      u[i] = (step.action[i] - c.mean(i, t)) * std::exp(-ls);
      lp += -ls - kHalfLog2Pi - 0.5 * u[i] * u[i];
      ent += ls + kHalfLog2Pi + 0.5;
    }
    const double ratio = std::exp(lp - step.old_log_prob);
    const double adv = step.advantage;
    const double lo = 1.0 - cfg.clip_epsilon;
    const double hi = 1.0 + cfg.clip_epsilon;
    const double unclipped = ratio * adv;
    const double clipped = std::clamp(ratio, lo, hi) * adv;
    loss.policy -= std::min(unclipped, clipped) * inv_n;
    const double verr = c.value(t) - step.value_target;
    loss.value += verr * verr * inv_n;
    loss.entropy += ent * inv_n;
    if (!step.old_mean.empty()) {
      double kl = 0.0;
      for (int i = 0; i < A; ++i) {
        const double s_new = std::exp(c.logstd(i, t));
        const double s_old = step.old_std[i];
        const double dm = step.old_mean[i] - c.mean(i, t);
        kl += std::log(s_new / s_old) +
              (s_old * s_old + dm * dm) / (2.0 * s_new * s_new) - 0.5;
      }
      loss.kl += kl * inv_n;
    }

    if (!grad) continue;
    // d(policy term)/d(log prob); zero when the clipped branch is the min
    const double d_lp =
        unclipped <= clipped ? -cfg.policy_weight * unclipped * inv_n : 0.0;
    for (int i = 0; i < A; ++i) {
      const double ls = c.logstd(i, t);
      d_mean(i, t) = d_lp * u[i] * std::exp(-ls);
      d_logstd(i, t) =
          d_lp * (u[i] * u[i] - 1.0) - cfg.entropy_weight * inv_n;
    }
    d_value(t) = 2.0 * cfg.value_weight * verr * inv_n;
  }
  loss.total = cfg.policy_weight * loss.policy + cfg.value_weight * loss.value -
               cfg.entropy_weight * loss.entropy;
  if (!grad) return loss;

  if (grad->size() != params.flat().size()) {
    throw DimensionMismatch("policy gradient", params.size(),
                            static_cast<std::size_t>(grad->size()));
  }
  auto gview = [&](Block b) {
    const auto& l = params.layout(b);
    return MatrixView(grad->data() + l.offset, l.rows, l.cols);
  };

  // The clamp has zero derivative outside its range.
  for (int t = 0; t < T; ++t) {
    for (int i = 0; i < A; ++i) {
      const double raw = c.logstd_raw(i, t);
      if (raw <= kLogStdMin || raw >= kLogStdMax) d_logstd(i, t) = 0.0;
    }
  }

  const auto hout = c.hs.rightCols(T);
  gview(Block::kWmean) += d_mean * hout.transpose();
  gview(Block::kBmean) += d_mean.rowwise().sum();
  gview(Block::kWlogstd) += d_logstd * hout.transpose();
  gview(Block::kBlogstd) += d_logstd.rowwise().sum();
  gview(Block::kWvalue) += d_value * hout.transpose();
  gview(Block::kBvalue)(0, 0) += d_value.sum();

  Eigen::MatrixXd d_h = params.matrix(Block::kWmean).transpose() * d_mean +
                        params.matrix(Block::kWlogstd).transpose() * d_logstd +
                        params.matrix(Block::kWvalue).transpose() * d_value;

  const int H = shape.hidden;
  Eigen::MatrixXd d_az(H, T), d_ar(H, T), d_an(H, T);
  const auto uz = params.matrix(Block::kUz);
  const auto ur = params.matrix(Block::kUr);
  const auto un = params.matrix(Block::kUn);
  Eigen::VectorXd d_next = Eigen::VectorXd::Zero(H);
  for (int t = T - 1; t >= 0; --t) {
    const Eigen::ArrayXd dh = (d_h.col(t) + d_next).array();
    const Eigen::ArrayXd z = c.z.col(t).array();
    const Eigen::ArrayXd r = c.r.col(t).array();
    const Eigen::ArrayXd n = c.n.col(t).array();
    const Eigen::ArrayXd hp = c.hs.col(t).array();

    const Eigen::ArrayXd dn = dh * (1.0 - z);
    const Eigen::ArrayXd dz = dh * (hp - n);
    d_an.col(t) = (dn * (1.0 - n * n)).matrix();
    const Eigen::ArrayXd d_rh = (un.transpose() * d_an.col(t)).array();
    d_ar.col(t) = (d_rh * hp * r * (1.0 - r)).matrix();
    d_az.col(t) = (dz * z * (1.0 - z)).matrix();
    d_next = (dh * z + d_rh * r).matrix() + ur.transpose() * d_ar.col(t) +
             uz.transpose() * d_az.col(t);
  }

  const auto hprev = c.hs.leftCols(T);
  gview(Block::kWz) += d_az * c.x.transpose();
  gview(Block::kUz) += d_az * hprev.transpose();
  gview(Block::kBz) += d_az.rowwise().sum();
  gview(Block::kWr) += d_ar * c.x.transpose();
  gview(Block::kUr) += d_ar * hprev.transpose();
  gview(Block::kBr) += d_ar.rowwise().sum();
  gview(Block::kWn) += d_an * c.x.transpose();
  gview(Block::kUn) += d_an * c.rh.transpose();
  gview(Block::kBn) += d_an.rowwise().sum();
  return loss;
}

nlohmann::json to_checkpoint(const PolicyParams& params,
                             const nlohmann::json& config_echo) {
  const auto& shape = params.shape();
  nlohmann::json arrays = nlohmann::json::object();
  for (const auto& l : params.layouts()) {
    std::vector<double> data(params.flat().data() + l.offset,
                             params.flat().data() + l.offset + l.size());
    arrays[l.name] = {{"shape", {l.rows, l.cols}}, {"data", std::move(data)}};
  }
  return {{"version", kVersion},
          {"config", config_echo},
          {"shape",
           {{"obs_dim", shape.obs_dim},
            {"action_dim", shape.action_dim},
            {"hidden", shape.hidden}}},
          {"params", std::move(arrays)}};
}

PolicyParams from_checkpoint(const nlohmann::json& j) {
  if (!j.is_object() || !j.contains("shape") || !j.contains("params")) {
    throw Error("checkpoint: missing 'shape' or 'params'");
  }
  if (j.value("version", 0.0) != kVersion) {
    throw Error("checkpoint: unsupported version");
  }
  PolicyShape shape;
  shape.obs_dim = j["shape"].at("obs_dim").get<int>();
  shape.action_dim = j["shape"].at("action_dim").get<int>();
  shape.hidden = j["shape"].at("hidden").get<int>();
  PolicyParams params(shape);
  const auto& arrays = j["params"];
  for (const auto& l : params.layouts()) {
    if (!arrays.contains(l.name)) {
      throw Error("checkpoint: missing parameter array '" + l.name + "'");
    }
    const auto& entry = arrays[l.name];
    const auto dims = entry.at("shape").get<std::vector<int>>();
    if (dims.size() != 2 || dims[0] != l.rows || dims[1] != l.cols) {
      throw DimensionMismatch("checkpoint array '" + l.name + "'", l.size(),
                              dims.size() == 2
                                  ? static_cast<std::size_t>(dims[0]) * dims[1]
                                  : 0);
    }
    const auto data = entry.at("data").get<std::vector<double>>();
    if (data.size() != l.size()) {
      throw DimensionMismatch("checkpoint array '" + l.name + "'", l.size(),
                              data.size());
    }
    std::copy(data.begin(), data.end(), params.flat().data() + l.offset);
  }
  return params;
}

}  // namespace ast::policy
