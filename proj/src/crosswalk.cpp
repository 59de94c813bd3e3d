#include "ast/crosswalk.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numbers>
#include <set>

namespace ast::crosswalk {

namespace {

constexpr double kMinReading = 1e-6;
constexpr std::uint32_t kSnapshotMagic = 0x43575331;  // "CWS1"

void check_keys(const nlohmann::json& j, const std::set<std::string>& known,
                const char* what) {
  if (!j.is_object()) throw Error(std::string(what) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!known.count(key)) {
      throw Error(std::string(what) + ": unknown key '" + key + "'");
    }
  }
}

template <typename T>
void read_opt(const nlohmann::json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) it->get_to(out);
}

class ByteWriter {
 public:
  template <typename T>
  void put(const T& value) {
    static_assert(std::is_trivially_copyable_v<T>);
    const auto* p = reinterpret_cast<const std::uint8_t*>(&value);
    bytes_.insert(bytes_.end(), p, p + sizeof(T));
  }
  void put(Vec2 v) {
    put(v.x);
    put(v.y);
  }
  Snapshot take() { return std::move(bytes_); }

 private:
  Snapshot bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(const Snapshot& bytes) : bytes_(bytes) {}

  template <typename T>
  T get() {
    static_assert(std::is_trivially_copyable_v<T>);
    if (pos_ + sizeof(T) > bytes_.size()) {
      throw ConfigMismatch("crosswalk snapshot truncated");
    }
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }
  Vec2 get_vec() {
    Vec2 v;
    v.x = get<double>();
    v.y = get<double>();
    return v;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const Snapshot& bytes_;
  std::size_t pos_ = 0;
};

Vec2 quantize_vec(Vec2 v, int decimals) {
  return {ast::crosswalk::quantize(v.x, decimals),
          ast::crosswalk::quantize(v.y, decimals)};
}

}  // namespace

void FidelityConfig::validate() const {
  if (!(dt > 0.0)) throw Error("fidelity: dt must be > 0");
  if (horizon < 1) throw Error("fidelity: horizon must be >= 1");
  if (quantize_decimals && *quantize_decimals < 0) {
    throw Error("fidelity: quantize_decimals must be >= 0");
  }
}

void LidarConfig::validate() const {
  if (n_beams < 2) throw Error("lidar: n_beams must be >= 2");
  if (!(fov > 0.0 && fov <= 360.0)) throw Error("lidar: fov must be in (0, 360]");
  if (!(max_range > 0.0)) throw Error("lidar: max_range must be > 0");
}

double LidarConfig::beam_angle(int i) const {
  const double fov_rad = fov * std::numbers::pi / 180.0;
  // A full circle would otherwise place the first and last beams on top of
  // each other.
  const double spacing =
      fov >= 360.0 ? fov_rad / n_beams : fov_rad / (n_beams - 1);
  return -0.5 * fov_rad + spacing * i;
}

void ScenarioConfig::validate() const {
  if (!(street_y_min < street_y_max)) {
    throw Error("scenario: street_y_min must be < street_y_max");
  }
  if (!(car_length > 0.0 && car_width > 0.0 && ped_radius > 0.0)) {
    throw Error("scenario: geometric extents must be > 0");
  }
  if (!(tracker_alpha > 0.0 && tracker_alpha < 1.0) || !(tracker_beta > 0.0)) {
    throw Error("scenario: tracker gains need 0 < alpha < 1 and beta > 0");
  }
  for (double s : action_sigma) {
    if (!(s > 0.0)) throw Error("scenario: action_sigma entries must be > 0");
  }
  if (ped_accel_limit && !(*ped_accel_limit > 0.0)) {
    throw Error("scenario: ped_accel_limit must be > 0");
  }
  lidar.validate();
}

std::vector<double> default_action_sigma(SensorModel model) {
  if (model == SensorModel::direct) return {1.0, 1.0, 0.3, 0.3, 0.3, 0.3};
  return {1.0, 1.0, 0.5};
}

int action_dim_for(SensorModel model) {
  return model == SensorModel::direct ? 6 : 3;
}

double idm_acceleration(const VehicleState& veh,
                        std::optional<double> lead_gap,
                        std::optional<double> lead_speed,
                        const IdmParams& p) {
  double a = 1.0 - std::pow(veh.v / p.v_desired, p.delta);
  if (lead_gap) {
    if (!(*lead_gap > 0.0)) {
      throw GeometryError("idm: lead gap must be positive");
    }
    const double dv = veh.v - lead_speed.value_or(0.0);
    const double dynamic =
        veh.v * p.t_headway + veh.v * dv / (2.0 * std::sqrt(p.a_max * p.b_comfort));
    const double s_star = p.s0 + std::max(0.0, dynamic);
    a -= (s_star / *lead_gap) * (s_star / *lead_gap);
  }
  return std::clamp(p.a_max * a, p.decel_limit, p.a_max);
}

bool in_street(double y, const ScenarioConfig& cfg) {
  return cfg.street_y_min < y && y < cfg.street_y_max;
}

bool pedestrian_in_street(const PedestrianState& ped,
                          const ScenarioConfig& cfg) {
  return in_street(ped.p.y, cfg);
}

PedestrianState kinematic_step(const PedestrianState& ped, Vec2 accel,
                               double dt) {
  PedestrianState next;
  next.v = ped.v + dt * accel;
  next.p = ped.p + dt * ped.v + (0.5 * dt * dt) * accel;
  return next;
}

VehicleState kinematic_step(const VehicleState& veh, double accel, double dt) {
  VehicleState next;
  next.a = accel;
  const double v_end = veh.v + accel * dt;
  if (v_end >= 0.0) {
    next.v = v_end;
    next.x = veh.x + veh.v * dt + 0.5 * accel * dt * dt;
  } else {
    // stops within the step
    next.v = 0.0;
    next.x = veh.x + veh.v * veh.v / (-2.0 * accel);
  }
  return next;
}

Measurement sense_direct(const PedestrianState& ped, const VehicleState& veh,
                         const std::array<double, 4>& noise) {
  Measurement m;
  m.rel_position = {ped.p.x - veh.x + noise[0], ped.p.y + noise[1]};
  m.velocity = {ped.v.x + noise[2], ped.v.y + noise[3]};
  return m;
}

LidarScan sense_lidar(const PedestrianState& ped, const VehicleState& veh,
                      double beam_noise, const LidarConfig& lidar,
                      double car_length, double ped_radius) {
  const Vec2 origin{veh.x + 0.5 * car_length, 0.0};
  const Vec2 c = ped.p - origin;
  const double c2 = c.x * c.x + c.y * c.y;
  const double r2 = ped_radius * ped_radius;

  LidarScan scan;
  scan.readings.assign(lidar.n_beams, lidar.max_range);
  Vec2 sum;
  int hits = 0;
  for (int i = 0; i < lidar.n_beams; ++i) {
    const double theta = lidar.beam_angle(i);
    const Vec2 d{std::cos(theta), std::sin(theta)};
    double range;
    if (c2 <= r2) {
      range = kMinReading;
    } else {
      const double proj = c.x * d.x + c.y * d.y;
      const double perp2 = c2 - proj * proj;
      if (proj <= 0.0 || perp2 > r2) continue;
      range = std::max(proj - std::sqrt(r2 - perp2), kMinReading);
    }
    if (range >= lidar.max_range) continue;
    const double reading =
        std::clamp(range + beam_noise, kMinReading, lidar.max_range);
    scan.readings[i] = reading;
    sum = sum + (origin + reading * d);
    ++hits;
  }
  if (hits > 0) scan.est_position = (1.0 / hits) * sum;
  return scan;
}

TrackerState tracker_update(const TrackerState& trk, Vec2 z, Vec2 init_velocity,
                            double dt, double alpha, double beta) {
  if (!trk.initialized) return {z, init_velocity, true};
  const Vec2 p_pred = trk.p_hat + dt * trk.v_hat;
  const Vec2 residual = z - p_pred;
  TrackerState next;
  next.p_hat = p_pred + alpha * residual;
  next.v_hat = trk.v_hat + (beta / dt) * residual;
  next.initialized = true;
  return next;
}

CollisionResult collision_check(const VehicleState& veh,
                                const PedestrianState& ped,
                                const ScenarioConfig& cfg) {
  const double dx =
      std::max(std::abs(ped.p.x - veh.x) - 0.5 * cfg.car_length, 0.0);
  const double dy = std::max(std::abs(ped.p.y) - 0.5 * cfg.car_width, 0.0);
  const double dist = std::hypot(dx, dy);
  CollisionResult out;
  out.event = dist <= cfg.ped_radius;
  out.miss_distance = std::max(dist - cfg.ped_radius, 0.0);
  return out;
}

double quantize(double value, int decimals) {
  const double scale = std::pow(10.0, decimals);
  return std::round(value * scale) / scale;
}

void quantize_state(CrosswalkState& s, int decimals) {
  s.veh.x = quantize(s.veh.x, decimals);
  s.veh.v = quantize(s.veh.v, decimals);
  s.veh.a = quantize(s.veh.a, decimals);
  s.ped.p = quantize_vec(s.ped.p, decimals);
  s.ped.v = quantize_vec(s.ped.v, decimals);
  s.trk.p_hat = quantize_vec(s.trk.p_hat, decimals);
  s.trk.v_hat = quantize_vec(s.trk.v_hat, decimals);
  s.belief.p = quantize_vec(s.belief.p, decimals);
  s.belief.v = quantize_vec(s.belief.v, decimals);
  if (s.prev_centroid) s.prev_centroid = quantize_vec(*s.prev_centroid, decimals);
}

CrosswalkSim::CrosswalkSim(ScenarioConfig scenario, FidelityConfig fidelity)
    : scenario_(std::move(scenario)), fidelity_(fidelity) {
  scenario_.validate();
  fidelity_.validate();
  sigma_ = scenario_.action_sigma.empty()
               ? default_action_sigma(fidelity_.sensor_model)
               : scenario_.action_sigma;
  const auto dim = static_cast<std::size_t>(action_dim_for(fidelity_.sensor_model));
  if (sigma_.size() != dim) {
    throw DimensionMismatch("scenario action_sigma", dim, sigma_.size());
  }
  const nlohmann::json echo = {{"scenario", scenario_}, {"fidelity", fidelity_}};
  fingerprint_ = fnv1a(echo.dump());
  reset(0);
}

int CrosswalkSim::action_dim() const {
  return action_dim_for(fidelity_.sensor_model);
}

int CrosswalkSim::observation_dim() const {
  return fidelity_.sensor_model == SensorModel::direct ? 11 : 10;
}

void CrosswalkSim::reset(std::uint64_t /*seed*/) {
  // The scenario has a fixed initial state; all randomness enters through
  // the adversary's actions.
  state_ = CrosswalkState{};
  state_.veh = {scenario_.car_x0, scenario_.car_v0, 0.0};
  state_.ped = {scenario_.ped_p0, scenario_.ped_v0};
  if (fidelity_.quantize_decimals) {
    quantize_state(state_, *fidelity_.quantize_decimals);
  }
  const auto c = collision_check(state_.veh, state_.ped, scenario_);
  state_.min_clearance = c.miss_distance;
  state_.collided = c.event;
  state_.terminal = c.event;
}

StepOutcome CrosswalkSim::step(const EnvironmentAction& action) {
  if (state_.terminal) throw Error("crosswalk: step called on terminal state");
  if (action.size() != static_cast<std::size_t>(action_dim())) {
    throw DimensionMismatch("crosswalk action", action_dim(), action.size());
  }
  for (double v : action.values) {
    if (!std::isfinite(v)) throw Error("crosswalk: non-finite action");
  }
  const double dt = fidelity_.dt;
  const auto& sc = scenario_;
  CrosswalkState& s = state_;

  Vec2 ped_accel{action[0], action[1]};
  if (sc.ped_accel_limit) {
    const double lim = *sc.ped_accel_limit;
    ped_accel = {std::clamp(ped_accel.x, -lim, lim),
                 std::clamp(ped_accel.y, -lim, lim)};
  }

  std::optional<Vec2> z;
  Vec2 z_vel;
  Vec2 init_vel;
  if (fidelity_.sensor_model == SensorModel::direct) {
    const auto m =
        sense_direct(s.ped, s.veh, {action[2], action[3], action[4], action[5]});
    z = m.rel_position + Vec2{s.veh.x, 0.0};
    z_vel = m.velocity;
    init_vel = m.velocity;
  } else {
    const auto scan = sense_lidar(s.ped, s.veh, action[2], sc.lidar,
                                  sc.car_length, sc.ped_radius);
    z = scan.est_position;
    if (z && s.prev_centroid) z_vel = (1.0 / dt) * (*z - *s.prev_centroid);
    s.prev_centroid = scan.est_position;
  }

  if (z) {
    if (fidelity_.tracker_enabled) {
      s.trk = tracker_update(s.trk, *z, init_vel, dt, sc.tracker_alpha,
                             sc.tracker_beta);
      s.belief = {s.trk.p_hat, s.trk.v_hat, true};
    } else {
      s.belief = {*z, z_vel, true};
    }
  } else if (fidelity_.tracker_enabled && s.trk.initialized) {
    s.trk.p_hat = s.trk.p_hat + dt * s.trk.v_hat;
    s.belief = {s.trk.p_hat, s.trk.v_hat, true};
  } else {
    s.belief = Belief{};
  }

  double accel;
  if (sc.emergency_brake) {
    const bool ahead = s.ped.p.x + sc.ped_radius > s.veh.x - 0.5 * sc.car_length;
    accel = ahead ? sc.idm.decel_limit
                  : idm_acceleration(s.veh, std::nullopt, std::nullopt, sc.idm);
  } else {
    std::optional<double> gap;
    std::optional<double> lead_speed;
    if (s.belief.valid && in_street(s.belief.p.y, sc)) {
      const double g = s.belief.p.x - s.veh.x - 0.5 * sc.car_length;
      if (g > 0.0) {
        gap = g;
        lead_speed = s.belief.v.x;
      }
    }
    accel = idm_acceleration(s.veh, gap, lead_speed, sc.idm);
  }

  s.veh = kinematic_step(s.veh, accel, dt);
  s.ped = kinematic_step(s.ped, ped_accel, dt);
  s.t += 1;
  if (fidelity_.quantize_decimals) quantize_state(s, *fidelity_.quantize_decimals);

  const auto collision = collision_check(s.veh, s.ped, sc);
  s.min_clearance = std::min(s.min_clearance, collision.miss_distance);
  s.collided = collision.event;
  s.terminal = collision.event || s.t >= fidelity_.horizon;

  static const std::vector<double> zeros(6, 0.0);
  StepOutcome out;
  out.event = collision.event;
  out.terminal = s.terminal;
  out.miss_distance = s.min_clearance;
  out.log_likelihood = gaussian_log_density(
      action.values, std::span(zeros).first(action.size()), sigma_);
  count_step();
  return out;
}

std::vector<double> observation(const CrosswalkState& s,
                                const FidelityConfig& fidelity) {
  std::vector<double> obs = {
      s.veh.x / 100.0,  s.veh.v / 11.17, s.ped.p.x / 10.0, s.ped.p.y / 10.0,
      s.ped.v.x / 2.0,  s.ped.v.y / 2.0,
      static_cast<double>(s.t) / fidelity.horizon};
  if (fidelity.sensor_model == SensorModel::direct) {
    obs.insert(obs.end(), {s.belief.p.x / 10.0, s.belief.p.y / 10.0,
                           s.belief.v.x / 2.0, s.belief.v.y / 2.0});
  } else {
    obs.insert(obs.end(), {s.belief.p.x / 10.0, s.belief.p.y / 10.0,
                           s.belief.valid ? 1.0 : 0.0});
  }
  return obs;
}

std::vector<double> CrosswalkSim::observe() const {
  return observation(state_, fidelity_);
}

Snapshot CrosswalkSim::snapshot() const {
  const auto& s = state_;
  ByteWriter w;
  w.put(kSnapshotMagic);
  w.put(fingerprint_);
  w.put(s.veh.x);
  w.put(s.veh.v);
  w.put(s.veh.a);
  w.put(s.ped.p);
  w.put(s.ped.v);
  w.put(s.trk.p_hat);
  w.put(s.trk.v_hat);
  w.put(static_cast<std::uint8_t>(s.trk.initialized));
  w.put(s.belief.p);
  w.put(s.belief.v);
  w.put(static_cast<std::uint8_t>(s.belief.valid));
  w.put(static_cast<std::uint8_t>(s.prev_centroid.has_value()));
  w.put(s.prev_centroid.value_or(Vec2{}));
  w.put(static_cast<std::int32_t>(s.t));
  w.put(static_cast<std::uint8_t>(s.terminal));
  w.put(static_cast<std::uint8_t>(s.collided));
  w.put(s.min_clearance);
  return w.take();
}

void CrosswalkSim::restore(const Snapshot& bytes) {
  ByteReader r(bytes);
  if (r.get<std::uint32_t>() != kSnapshotMagic) {
    throw ConfigMismatch("not a crosswalk snapshot");
  }
  if (r.get<std::uint64_t>() != fingerprint_) {
    throw ConfigMismatch(
        "crosswalk snapshot was taken under a different scenario/fidelity "
        "configuration");
  }
  CrosswalkState s;
  s.veh.x = r.get<double>();
  s.veh.v = r.get<double>();
  s.veh.a = r.get<double>();
  s.ped.p = r.get_vec();
  s.ped.v = r.get_vec();
  s.trk.p_hat = r.get_vec();
  s.trk.v_hat = r.get_vec();
  s.trk.initialized = r.get<std::uint8_t>() != 0;
  s.belief.p = r.get_vec();
  s.belief.v = r.get_vec();
  s.belief.valid = r.get<std::uint8_t>() != 0;
  const bool has_centroid = r.get<std::uint8_t>() != 0;
  const Vec2 centroid = r.get_vec();
  if (has_centroid) s.prev_centroid = centroid;
  s.t = r.get<std::int32_t>();
  s.terminal = r.get<std::uint8_t>() != 0;
  s.collided = r.get<std::uint8_t>() != 0;
  s.min_clearance = r.get<double>();
  if (!r.done()) throw ConfigMismatch("crosswalk snapshot has trailing bytes");
  state_ = s;
}

void to_json(nlohmann::json& j, const Vec2& v) { j = {v.x, v.y}; }

void from_json(const nlohmann::json& j, Vec2& v) {
  if (!j.is_array() || j.size() != 2) throw Error("expected a 2-vector");
  v = {j[0].get<double>(), j[1].get<double>()};
}

void to_json(nlohmann::json& j, const IdmParams& p) {
  j = {{"v_desired", p.v_desired}, {"a_max", p.a_max},
       {"b_comfort", p.b_comfort}, {"delta", p.delta},
       {"s0", p.s0},               {"t_headway", p.t_headway},
       {"decel_limit", p.decel_limit}};
}

void from_json(const nlohmann::json& j, IdmParams& p) {
  check_keys(j, {"v_desired", "a_max", "b_comfort", "delta", "s0", "t_headway",
                 "decel_limit"},
             "idm");
  read_opt(j, "v_desired", p.v_desired);
  read_opt(j, "a_max", p.a_max);
  read_opt(j, "b_comfort", p.b_comfort);
  read_opt(j, "delta", p.delta);
  read_opt(j, "s0", p.s0);
  read_opt(j, "t_headway", p.t_headway);
  read_opt(j, "decel_limit", p.decel_limit);
}

void to_json(nlohmann::json& j, const LidarConfig& c) {
  j = {{"n_beams", c.n_beams}, {"fov", c.fov}, {"max_range", c.max_range}};
}

void from_json(const nlohmann::json& j, LidarConfig& c) {
  check_keys(j, {"n_beams", "fov", "max_range"}, "lidar");
  read_opt(j, "n_beams", c.n_beams);
  read_opt(j, "fov", c.fov);
  read_opt(j, "max_range", c.max_range);
}

void to_json(nlohmann::json& j, const ScenarioConfig& c) {
  j = {{"car_x0", c.car_x0},
       {"car_v0", c.car_v0},
       {"ped_p0", c.ped_p0},
       {"ped_v0", c.ped_v0},
       {"street_y_min", c.street_y_min},
       {"street_y_max", c.street_y_max},
       {"idm", c.idm},
       {"car_length", c.car_length},
       {"car_width", c.car_width},
       {"ped_radius", c.ped_radius},
       {"action_sigma", c.action_sigma},
       {"tracker_alpha", c.tracker_alpha},
       {"tracker_beta", c.tracker_beta},
       {"lidar", c.lidar},
       {"emergency_brake", c.emergency_brake},
       {"ped_accel_limit", c.ped_accel_limit
                               ? nlohmann::json(*c.ped_accel_limit)
                               : nlohmann::json(nullptr)}};
}

void from_json(const nlohmann::json& j, ScenarioConfig& c) {
  check_keys(j,
             {"car_x0", "car_v0", "ped_p0", "ped_v0", "street_y_min",
              "street_y_max", "idm", "car_length", "car_width", "ped_radius",
              "action_sigma", "tracker_alpha", "tracker_beta", "lidar",
              "emergency_brake", "ped_accel_limit"},
             "scenario");
  read_opt(j, "car_x0", c.car_x0);
  read_opt(j, "car_v0", c.car_v0);
  read_opt(j, "ped_p0", c.ped_p0);
  read_opt(j, "ped_v0", c.ped_v0);
  read_opt(j, "street_y_min", c.street_y_min);
  read_opt(j, "street_y_max", c.street_y_max);
  read_opt(j, "idm", c.idm);
  read_opt(j, "car_length", c.car_length);
  read_opt(j, "car_width", c.car_width);
  read_opt(j, "ped_radius", c.ped_radius);
  read_opt(j, "action_sigma", c.action_sigma);
  read_opt(j, "tracker_alpha", c.tracker_alpha);
  read_opt(j, "tracker_beta", c.tracker_beta);
  read_opt(j, "lidar", c.lidar);
  read_opt(j, "emergency_brake", c.emergency_brake);
  if (auto it = j.find("ped_accel_limit"); it != j.end()) {
    if (it->is_null()) {
      c.ped_accel_limit.reset();
    } else {
      c.ped_accel_limit = it->get<double>();
    }
  }
}

void to_json(nlohmann::json& j, const FidelityConfig& c) {
  j = {{"dt", c.dt},
       {"horizon", c.horizon},
       {"quantize_decimals", c.quantize_decimals
                                 ? nlohmann::json(*c.quantize_decimals)
                                 : nlohmann::json(nullptr)},
       {"tracker_enabled", c.tracker_enabled},
       {"sensor_model",
        c.sensor_model == SensorModel::direct ? "direct" : "lidar"}};
}

void from_json(const nlohmann::json& j, FidelityConfig& c) {
  check_keys(j, {"dt", "horizon", "quantize_decimals", "tracker_enabled",
                 "sensor_model"},
             "fidelity");
  read_opt(j, "dt", c.dt);
  read_opt(j, "horizon", c.horizon);
  if (auto it = j.find("quantize_decimals"); it != j.end()) {
    if (it->is_null()) {
      c.quantize_decimals.reset();
    } else {
      c.quantize_decimals = it->get<int>();
    }
  }
  read_opt(j, "tracker_enabled", c.tracker_enabled);
  if (auto it = j.find("sensor_model"); it != j.end()) {
    const auto name = it->get<std::string>();
    if (name == "direct") {
      c.sensor_model = SensorModel::direct;
    } else if (name == "lidar") {
      c.sensor_model = SensorModel::lidar;
    } else {
      throw Error("fidelity: unknown sensor_model '" + name + "'");
    }
  }
}

void to_json(nlohmann::json& j, const CrosswalkState& s) {
  j = {{"t", s.t},
       {"veh", {{"x", s.veh.x}, {"v", s.veh.v}, {"a", s.veh.a}}},
       {"ped", {{"p", s.ped.p}, {"v", s.ped.v}}},
       {"belief", {{"p", s.belief.p}, {"v", s.belief.v}, {"valid", s.belief.valid}}},
       {"collided", s.collided},
       {"min_clearance", s.min_clearance}};
}

}  // namespace ast::crosswalk
