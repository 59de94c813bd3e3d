#pragma once

// Pedestrian-crossing scenario. A car driven by a modified intelligent driver
// model approaches a crosswalk at x = 0 while the adversary controls the
// pedestrian's acceleration and the noise on the car's perception.

#include <array>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "ast/core.hpp"

namespace ast::crosswalk {

class GeometryError : public Error {
 public:
  using Error::Error;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  bool operator==(const Vec2&) const = default;
};

inline Vec2 operator+(Vec2 a, Vec2 b) { return {a.x + b.x, a.y + b.y}; }
inline Vec2 operator-(Vec2 a, Vec2 b) { return {a.x - b.x, a.y - b.y}; }
inline Vec2 operator*(double s, Vec2 a) { return {s * a.x, s * a.y}; }

struct VehicleState {
  double x = 0.0;  // longitudinal position of the car's center
  double v = 0.0;
  double a = 0.0;

  bool operator==(const VehicleState&) const = default;
};

struct PedestrianState {
  Vec2 p;
  Vec2 v;

  bool operator==(const PedestrianState&) const = default;
};

struct TrackerState {
  Vec2 p_hat;
  Vec2 v_hat;
  bool initialized = false;

  bool operator==(const TrackerState&) const = default;
};

enum class SensorModel { direct, lidar };

struct FidelityConfig {
  double dt = 0.1;
  int horizon = 50;
  std::optional<int> quantize_decimals;
  bool tracker_enabled = true;
  SensorModel sensor_model = SensorModel::direct;

  void validate() const;
};

struct IdmParams {
  double v_desired = 11.17;
  double a_max = 2.0;
  double b_comfort = 4.0;
  double delta = 4.0;
  double s0 = 2.0;
  double t_headway = 1.5;
  double decel_limit = -8.0;
};

struct LidarConfig {
  int n_beams = 30;
  double fov = 180.0;  // degrees
  double max_range = 100.0;

  void validate() const;
  double beam_angle(int i) const;  // radians, 0 = straight ahead
};

struct ScenarioConfig {
  double car_x0 = -55.0;
  double car_v0 = 11.17;
  Vec2 ped_p0{0.0, -1.85};
  Vec2 ped_v0{0.0, 1.0};
  double street_y_min = -1.85;
  double street_y_max = 5.55;
  IdmParams idm;
  double car_length = 4.5;
  double car_width = 2.0;
  double ped_radius = 0.3;
  // Empty means the sensor model's default.
  std::vector<double> action_sigma;
  double tracker_alpha = 0.85;
  double tracker_beta = 0.85 * 0.85 / (2.0 - 0.85);
  LidarConfig lidar;
  // Test variant: the car brakes at decel_limit whenever the pedestrian is
  // ahead of its rear bumper.
  bool emergency_brake = false;
  // Per-axis bound on the pedestrian acceleration actually applied.
  std::optional<double> ped_accel_limit;

  void validate() const;
};

std::vector<double> default_action_sigma(SensorModel model);
int action_dim_for(SensorModel model);

struct Measurement {
  Vec2 rel_position;  // pedestrian position relative to the car center
  Vec2 velocity;
};

struct LidarScan {
  std::vector<double> readings;
  std::optional<Vec2> est_position;  // world frame
};

struct CollisionResult {
  bool event = false;
  double miss_distance = 0.0;
};

double idm_acceleration(const VehicleState& veh,
                        std::optional<double> lead_gap,
                        std::optional<double> lead_speed,
                        const IdmParams& params);

bool in_street(double y, const ScenarioConfig& cfg);
bool pedestrian_in_street(const PedestrianState& ped,
                          const ScenarioConfig& cfg);

PedestrianState kinematic_step(const PedestrianState& ped, Vec2 accel,
                               double dt);
VehicleState kinematic_step(const VehicleState& veh, double accel, double dt);

Measurement sense_direct(const PedestrianState& ped, const VehicleState& veh,
                         const std::array<double, 4>& noise);

LidarScan sense_lidar(const PedestrianState& ped, const VehicleState& veh,
                      double beam_noise, const LidarConfig& lidar,
                      double car_length, double ped_radius);

/// Fixed-gain alpha-beta update on an absolute position measurement. On the
/// first call the filter initializes to the measurement and
/// `init_velocity`.
TrackerState tracker_update(const TrackerState& trk, Vec2 z, Vec2 init_velocity,
                            double dt, double alpha, double beta);

CollisionResult collision_check(const VehicleState& veh,
                                const PedestrianState& ped,
                                const ScenarioConfig& cfg);

/// Round half away from zero.
double quantize(double value, int decimals);

/// What the car believes about the pedestrian after perception.
struct Belief {
  Vec2 p;
  Vec2 v;
  bool valid = false;

  bool operator==(const Belief&) const = default;
};

struct CrosswalkState {
  VehicleState veh;
  PedestrianState ped;
  TrackerState trk;
  Belief belief;
  std::optional<Vec2> prev_centroid;  // lidar only
  int t = 0;
  bool terminal = false;
  bool collided = false;
  double min_clearance = 0.0;

  bool operator==(const CrosswalkState&) const = default;
};

void quantize_state(CrosswalkState& state, int decimals);

class CrosswalkSim final : public Simulator {
 public:
  CrosswalkSim(ScenarioConfig scenario, FidelityConfig fidelity);

  int action_dim() const override;
  int observation_dim() const override;
  int horizon() const override { return fidelity_.horizon; }
  int time_index() const override { return state_.t; }
  bool terminal() const override { return state_.terminal; }

  void reset(std::uint64_t seed) override;
  StepOutcome step(const EnvironmentAction& action) override;
  std::vector<double> observe() const override;
  std::vector<double> action_scale() const override { return sigma_; }

  Snapshot snapshot() const override;
  void restore(const Snapshot& bytes) override;

  const CrosswalkState& state() const { return state_; }
  const ScenarioConfig& scenario() const { return scenario_; }
  const FidelityConfig& fidelity() const { return fidelity_; }
  const std::vector<double>& action_sigma() const { return sigma_; }
  std::uint64_t fingerprint() const { return fingerprint_; }

 private:
  ScenarioConfig scenario_;
  FidelityConfig fidelity_;
  std::vector<double> sigma_;
  std::uint64_t fingerprint_;
  CrosswalkState state_;
};

std::vector<double> observation(const CrosswalkState& state,
                                const FidelityConfig& fidelity);

void to_json(nlohmann::json& j, const Vec2& v);
void from_json(const nlohmann::json& j, Vec2& v);
void to_json(nlohmann::json& j, const IdmParams& p);
void from_json(const nlohmann::json& j, IdmParams& p);
void to_json(nlohmann::json& j, const LidarConfig& c);
void from_json(const nlohmann::json& j, LidarConfig& c);
void to_json(nlohmann::json& j, const ScenarioConfig& c);
void from_json(const nlohmann::json& j, ScenarioConfig& c);
void to_json(nlohmann::json& j, const FidelityConfig& c);
void from_json(const nlohmann::json& j, FidelityConfig& c);
void to_json(nlohmann::json& j, const CrosswalkState& s);

}  // namespace ast::crosswalk
