#pragma once

#include <map>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "respalloc/dynamics.hpp"
#include "respalloc/filter.hpp"
#include "respalloc/rng.hpp"
#include "respalloc/sequence.hpp"

namespace resp {

// What an agent would do absent the others.
struct DesiredPolicy {
  std::string kind = "speed_feedback";  // speed_feedback | accel_along_velocity
  double magnitude = 1.0;               // accel_along_velocity: constant accel, m/s^2
  double target_speed = 10.0;           // speed_feedback
  double gain = 0.5;                    // speed_feedback, 1/s
  double u_bound = 4.0;

  bool valid() const;
  // One row per state; heading used when the agent is near rest.
  Eigen::MatrixXd eval(const std::vector<AgentPhysState>& states,
                       const std::vector<double>& headings) const;
};

// Linear feedback toward target_speed along the travel direction, clipped.
Control desired_control(const AgentPhysState& state, double heading, double target_speed,
                        double gain, double u_bound = 4.0);

struct CorridorConfig {
  double x_gap_min = 8.0;   // m, initial separation range
  double x_gap_max = 18.0;
  double speed_min = 1.0;  // m/s per agent
  double speed_max = 4.0;
  Eigen::Vector2d mode_mean_a = Eigen::Vector2d(0.8, 0.2);
  Eigen::Vector2d mode_mean_b = Eigen::Vector2d(0.2, 0.8);
  double mode_std = 0.05;
  double skew_slope = 0.01;     // per meter of |dp_x|
  double mixture_weight = 0.5;  // P(mode a)
  double u_des_mag = 1.0;       // m/s^2 constant acceleration along velocity

  bool valid() const;
  // Mode mean after the x-distance skew (clamped to [0, 1] per component).
  Eigen::Vector2d skewed_mean(int mode, double x_dist) const;
};

// Bimodal conditional gamma draw; also reports which mode was taken.
Eigen::Vector2d sample_synthetic_gamma(const RelativeState& s, const CorridorConfig& cfg,
                                       Rng& rng, int* mode_out = nullptr);

struct Dataset {
  std::vector<SceneDatum> data;
  std::vector<long> episode_of;  // same length as data
  nlohmann::json metadata;
};

// Ground-truth responsibilities for evaluation only; never fed to training.
struct GammaSidecar {
  Eigen::MatrixXd gamma;  // K x 2
  std::vector<int> mode;
};

Dataset gen_corridor_dataset(const CorridorConfig& cfg, long count, const FilterConfig& fcfg,
                             Rng& rng, GammaSidecar* sidecar = nullptr);

struct IntersectionConfig {
  double lane_offset = 1.75;   // m, right-hand lane offset from arm centerline
  double spawn_radius = 30.0;  // m, arm entry distance from the center
  double exit_radius = 35.0;
  double target_speed = 10.0;  // m/s
  double speed_jitter = 2.0;   // +- on per-agent target speed
  double gain = 0.5;           // 1/s
  double u_bound = 4.0;
  double dt = 0.1;             // 10 Hz
  long episode_steps = 120;
  long max_agents = 6;
  double yield_zone = 14.0;      // m, arrival ordering measured here
  double conflict_radius = 5.0;  // m, box the yielder must stop outside of
  double stop_margin = 1.5;      // m
  double brake_accel = 2.0;      // m/s^2 comfortable stopping profile
  double headway_s = 3.0;        // s between same-arm spawns
  long t_history = 10;           // window length for slicing
  long slice_stride = 5;
  long horizon = 10;             // future steps stored for evaluation

  bool valid() const;
};

// Per-track trajectory store, grouped by id with frame-sorted records.
struct TrackRecord {
  long track_id = 0;
  long frame_id = 0;
  double timestamp_ms = 0.0;
  int agent_type = 0;
  double x = 0.0, y = 0.0;
  double vx = 0.0, vy = 0.0;
  double psi_rad = 0.0;
  double length = 4.0, width = 2.0;
};
using TrackTable = std::map<long, std::vector<TrackRecord>>;

// Scripted 4-way crossing with a first-arrival priority rule. Slices episodes
// into (history, u at window end) pairs with evaluation futures attached.
// episodes_out (optional) receives the raw per-episode tracks.
Dataset gen_intersection_dataset(const IntersectionConfig& cfg, long n_episodes, Rng& rng,
                                 std::vector<TrackTable>* episodes_out = nullptr);

// Ego plus the n_max-1 nearest agents at the reference time; ties broken by
// lower id. Input: (id, position) pairs of agents present at that time.
std::vector<long> select_agents(const std::vector<std::pair<long, Eigen::Vector2d>>& present,
                                long ego_id, long n_max);

// History window ending at t_end_frame for every track present there.
std::vector<AgentTrack> slice_tracks(const TrackTable& table, long t_end_frame, long t_history);

// Deterministic 80/20-style split on episode labels.
std::pair<Dataset, Dataset> split_by_episode(const Dataset& ds, double test_fraction, Rng& rng);

}  // namespace resp
