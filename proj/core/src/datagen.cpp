#include "respalloc/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "respalloc/errors.hpp"

namespace resp {

bool DesiredPolicy::valid() const {
  if (kind != "speed_feedback" && kind != "accel_along_velocity") return false;
  if (kind == "speed_feedback" && (gain <= 0.0 || target_speed < 0.0)) return false;
  if (kind == "accel_along_velocity" && magnitude < 0.0) return false;
  return u_bound > 0.0;
}

Control desired_control(const AgentPhysState& state, double heading, double target_speed,
                        double gain, double u_bound) {
  if (gain <= 0.0) throw InvalidInputError("desired_control: gain must be > 0");
  const double speed = state.velocity.norm();
  const Eigen::Vector2d dir = speed > 0.1 ? Eigen::Vector2d(state.velocity / speed)
                                          : Eigen::Vector2d(std::cos(heading), std::sin(heading));
  Control c;
  c.acceleration = gain * (target_speed * dir - state.velocity);
  c.acceleration = c.acceleration.cwiseMax(-u_bound).cwiseMin(u_bound);
  return c;
}

Eigen::MatrixXd DesiredPolicy::eval(const std::vector<AgentPhysState>& states,
                                    const std::vector<double>& headings) const {
  if (!valid()) throw InvalidInputError("invalid desired policy");
  if (states.size() != headings.size())
    throw InvalidInputError("desired policy: states/headings size mismatch");
  Eigen::MatrixXd u(static_cast<long>(states.size()), kControlDim);
  for (std::size_t i = 0; i < states.size(); ++i) {
    if (kind == "speed_feedback") {
      u.row(i) = desired_control(states[i], headings[i], target_speed, gain, u_bound)
                     .acceleration.transpose();
    } else {
      const double speed = states[i].velocity.norm();
      const Eigen::Vector2d dir =
          speed > 0.1 ? Eigen::Vector2d(states[i].velocity / speed)
                      : Eigen::Vector2d(std::cos(headings[i]), std::sin(headings[i]));
      Eigen::Vector2d a = magnitude * dir;
      u.row(i) = a.cwiseMax(-u_bound).cwiseMin(u_bound).transpose();
    }
  }
  return u;
}

bool CorridorConfig::valid() const {
  return x_gap_min > 0.0 && x_gap_max >= x_gap_min && speed_min > 0.0 &&
         speed_max >= speed_min && mode_std > 0.0 && mixture_weight > 0.0 &&
         mixture_weight < 1.0 && skew_slope >= 0.0 && u_des_mag > 0.0;
}

Eigen::Vector2d CorridorConfig::skewed_mean(int mode, double x_dist) const {
  const double s = skew_slope * std::abs(x_dist);
  Eigen::Vector2d m;
  if (mode == 0)
    m = mode_mean_a + Eigen::Vector2d(s, -s);
  else
    m = mode_mean_b + Eigen::Vector2d(-s, s);
  return m.cwiseMax(0.0).cwiseMin(1.0);
}

Eigen::Vector2d sample_synthetic_gamma(const RelativeState& s, const CorridorConfig& cfg,
                                       Rng& rng, int* mode_out) {
  if (!cfg.valid()) throw InvalidInputError("invalid corridor config");
  const int mode = rng.uniform(0.0, 1.0) < cfg.mixture_weight ? 0 : 1;
  if (mode_out) *mode_out = mode;
  Eigen::Vector2d g = cfg.skewed_mean(mode, s.dp.x());
  g.x() += cfg.mode_std * rng.normal();
  g.y() += cfg.mode_std * rng.normal();
  return g;
}

Dataset gen_corridor_dataset(const CorridorConfig& cfg, long count, const FilterConfig& fcfg,
                             Rng& rng, GammaSidecar* sidecar) {
  if (count < 1) throw InvalidInputError("gen_corridor_dataset: count must be >= 1");
  if (!cfg.valid() || !fcfg.valid()) throw InvalidInputError("gen_corridor_dataset: bad config");

  Dataset ds;
  ds.metadata = {{"generator", "corridor"}, {"count", count}};
  if (sidecar) {
    sidecar->gamma.resize(count, 2);
    sidecar->mode.clear();
    sidecar->mode.reserve(count);
  }

  long attempts = 0;
  const long max_attempts = 50 * count + 100;
  while (static_cast<long>(ds.data.size()) < count) {
    if (++attempts > max_attempts)
      throw NumericError("gen_corridor_dataset: too many filter failures");
    const double gap = rng.uniform(cfg.x_gap_min, cfg.x_gap_max);
    const double v0 = rng.uniform(cfg.speed_min, cfg.speed_max);
    const double v1 = rng.uniform(cfg.speed_min, cfg.speed_max);

    std::vector<AgentPhysState> states(2);
    states[0] = {Eigen::Vector2d(-gap / 2.0, 0.0), Eigen::Vector2d(v0, 0.0)};
    states[1] = {Eigen::Vector2d(gap / 2.0, 0.0), Eigen::Vector2d(-v1, 0.0)};

    Eigen::VectorXd u_des_flat(4);
    u_des_flat << cfg.u_des_mag, 0.0, -cfg.u_des_mag, 0.0;

    int mode = 0;
    const Eigen::Vector2d gamma = sample_synthetic_gamma(relative_state(states[0], states[1]),
                                                         cfg, rng, &mode);
    ResponsibilityVector rv;
    rv.gamma = gamma;
    FilterResult fr;
    try {
      fr = project(u_des_flat, states, rv, fcfg);
    } catch (const ConvexityError&) {
      continue;  // gamma draw broke the guard; redraw
    }
    if (fr.qp_status != QPStatus::optimal) continue;

    std::vector<AgentTrack> tracks(2);
    for (int a = 0; a < 2; ++a) {
      AgentTrack& tr = tracks[a];
      tr.agent_id = a;
      tr.agent_type = 0;
      AgentToken tok;
      tok.position = states[a].position;
      tok.velocity = states[a].velocity;
      tok.heading = a == 0 ? 0.0 : M_PI;
      tr.steps = {tok};
      tr.present = {1};
    }

    SceneDatum datum;
    datum.seq = flatten_scene(tracks, /*n_max=*/2);
    datum.u.resize(2, 2);
    datum.u.row(0) = fr.u.segment<2>(0).transpose();
    datum.u.row(1) = fr.u.segment<2>(2).transpose();
    datum.u_des.resize(2, 2);
    datum.u_des.row(0) = u_des_flat.segment<2>(0).transpose();
    datum.u_des.row(1) = u_des_flat.segment<2>(2).transpose();

    if (sidecar) {
      sidecar->gamma.row(static_cast<long>(ds.data.size())) = gamma.transpose();
      sidecar->mode.push_back(mode);
    }
    ds.episode_of.push_back(static_cast<long>(ds.data.size()));
    ds.data.push_back(std::move(datum));
  }
  return ds;
}

bool IntersectionConfig::valid() const {
  return lane_offset > 0.0 && spawn_radius > lane_offset && exit_radius >= spawn_radius &&
         target_speed > 0.0 && speed_jitter >= 0.0 && gain > 0.0 && u_bound > 0.0 && dt > 0.0 &&
         episode_steps >= 2 && max_agents >= 1 && yield_zone > conflict_radius &&
         conflict_radius > 0.0 && stop_margin >= 0.0 && brake_accel > 0.0 && headway_s > 0.0 &&
         t_history >= 1 && slice_stride >= 1 && horizon >= 0;
}

namespace {

struct SimAgent {
  long id = 0;
  int arm = 0;  // 0:+y 1:+x 2:-y 3:-x travel direction
  long spawn_step = 0;
  double target_speed = 10.0;
  AgentPhysState state;
  double heading = 0.0;
  bool active = false;
  bool done = false;
  // Static right-of-way key (spawn time + nominal transit time). A total
  // order fixed at spawn cannot deadlock and lets juniors brake along the
  // whole approach instead of discovering the conflict at the yield zone.
  double priority = 0.0;

  // per-step records, indexed by absolute step
  std::vector<char> present;
  std::vector<Eigen::Vector2d> pos, vel, u_applied, u_nominal;
  std::vector<double> head;
};

Eigen::Vector2d arm_dir(int arm) {
  switch (arm & 3) {
    case 0: return {0.0, 1.0};
    case 1: return {1.0, 0.0};
    case 2: return {0.0, -1.0};
    default: return {-1.0, 0.0};
  }
}

// Right-hand lane offset relative to the travel direction.
Eigen::Vector2d arm_spawn(int arm, const IntersectionConfig& cfg) {
  const Eigen::Vector2d d = arm_dir(arm);
  const Eigen::Vector2d right(d.y(), -d.x());
  return -cfg.spawn_radius * d + cfg.lane_offset * right;
}

bool conflicting(int arm_a, int arm_b) { return (arm_a & 1) != (arm_b & 1); }

// Signed progress along the path; negative before the center.
double progress(const SimAgent& a) { return a.state.position.dot(arm_dir(a.arm)); }

}  // namespace

Dataset gen_intersection_dataset(const IntersectionConfig& cfg, long n_episodes, Rng& rng,
                                 std::vector<TrackTable>* episodes_out) {
  if (!cfg.valid()) throw InvalidInputError("gen_intersection_dataset: bad config");
  if (n_episodes < 1) throw InvalidInputError("gen_intersection_dataset: n_episodes must be >= 1");

  Dataset ds;
  ds.metadata = {{"generator", "intersection"}, {"episodes", n_episodes}};
  if (episodes_out) episodes_out->clear();

  for (long ep = 0; ep < n_episodes; ++ep) {
    // Spawn schedule: per arm, headway-separated entries; global agent cap.
    std::vector<SimAgent> agents;
    {
      long next_id = 0;
      const double spawn_window = 0.6 * static_cast<double>(cfg.episode_steps) * cfg.dt;
      std::vector<double> arm_next(4);
      for (int a = 0; a < 4; ++a) arm_next[a] = rng.uniform(0.0, 3.0);
      bool progress_made = true;
      while (static_cast<long>(agents.size()) < cfg.max_agents && progress_made) {
        progress_made = false;
        for (int a = 0; a < 4 && static_cast<long>(agents.size()) < cfg.max_agents; ++a) {
          if (arm_next[a] > spawn_window) continue;
          SimAgent ag;
          ag.id = next_id++;
          ag.arm = a;
          ag.spawn_step = static_cast<long>(arm_next[a] / cfg.dt);
          ag.target_speed =
              std::max(1.0, cfg.target_speed + rng.uniform(-cfg.speed_jitter, cfg.speed_jitter));
          ag.priority = arm_next[a] + cfg.spawn_radius / ag.target_speed;
          agents.push_back(ag);
          arm_next[a] += cfg.headway_s + rng.uniform(0.0, 3.0);
          progress_made = true;
        }
      }
    }

    const long S = cfg.episode_steps;
    for (auto& ag : agents) {
      ag.present.assign(S, 0);
      ag.pos.assign(S, Eigen::Vector2d::Zero());
      ag.vel.assign(S, Eigen::Vector2d::Zero());
      ag.u_applied.assign(S, Eigen::Vector2d::Zero());
      ag.u_nominal.assign(S, Eigen::Vector2d::Zero());
      ag.head.assign(S, 0.0);
    }

    for (long t = 0; t < S; ++t) {
      for (auto& ag : agents) {
        if (!ag.active && !ag.done && ag.spawn_step == t) {
          const Eigen::Vector2d d = arm_dir(ag.arm);
          ag.state.position = arm_spawn(ag.arm, cfg);
          ag.state.velocity = 0.6 * ag.target_speed * d;
          ag.heading = std::atan2(d.y(), d.x());
          ag.active = true;
        }
      }
      for (auto& ag : agents) {
        if (!ag.active) continue;
        const double tau = progress(ag);
        const double speed_along = ag.state.velocity.dot(arm_dir(ag.arm));

        double v_des = ag.target_speed;
        // Right-of-way: a junior on a crossing path follows a comfortable
        // braking profile toward a stop outside the conflict box until every
        // senior crossing agent has cleared it. The rule stays active up to
        // the path center so a junior that creeps past the stop line keeps
        // holding instead of being released into the box.
        if (tau < 0.0) {
          for (const auto& other : agents) {
            if (&other == &ag || other.done) continue;
            if (!conflicting(ag.arm, other.arm)) continue;
            if (!other.active) continue;  // seniors spawn before juniors approach
            if (progress(other) > cfg.conflict_radius + 1.0) continue;  // cleared
            const bool other_first = other.priority < ag.priority ||
                                     (other.priority == ag.priority && other.id < ag.id);
            if (!other_first) continue;
            const double s_stop = -tau - cfg.conflict_radius - cfg.stop_margin;
            v_des = std::min(v_des, std::sqrt(2.0 * cfg.brake_accel * std::max(0.0, s_stop)));
          }
        }
        // Car following on the same approach.
        for (const auto& other : agents) {
          if (&other == &ag || !other.active || other.arm != ag.arm) continue;
          const double gap = progress(other) - tau;
          if (gap <= 0.0 || gap > 15.0) continue;
          const double v_lead = other.state.velocity.dot(arm_dir(other.arm));
          const double v_follow =
              std::max(0.0, v_lead) +
              std::sqrt(2.0 * cfg.brake_accel * std::max(0.0, gap - 5.0));
          v_des = std::min(v_des, v_follow);
        }

        // Proportional speed tracking is fine when cruising, but on the brake
        // side it only decays speed exponentially, and the integral of that
        // decay lets a holding agent creep meters past its stop line. Brake
        // deadbeat instead: request the full per-step decrement and let the
        // clip below bound the actual deceleration.
        const Eigen::Vector2d dir = arm_dir(ag.arm);
        const Eigen::Vector2d v_lat = ag.state.velocity - speed_along * dir;
        const double u_along = v_des < speed_along
                                   ? (v_des - speed_along) / cfg.dt
                                   : cfg.gain * (v_des - speed_along);
        Eigen::Vector2d u = u_along * dir - cfg.gain * v_lat;
        u = u.cwiseMax(-cfg.u_bound).cwiseMin(cfg.u_bound);

        const Control u_nom =
            desired_control(ag.state, ag.heading, ag.target_speed, cfg.gain, cfg.u_bound);

        ag.present[t] = 1;
        ag.pos[t] = ag.state.position;
        ag.vel[t] = ag.state.velocity;
        ag.u_applied[t] = u;
        ag.u_nominal[t] = u_nom.acceleration;
        ag.head[t] = ag.heading;
      }

      for (auto& ag : agents) {
        if (!ag.active) continue;
        Control c;
        c.acceleration = ag.u_applied[t];
        ag.state = step(ag.state, c, cfg.dt);
        if (ag.state.velocity.norm() > 0.1)
          ag.heading = std::atan2(ag.state.velocity.y(), ag.state.velocity.x());
        if (progress(ag) > 0.0 && ag.state.position.norm() > cfg.exit_radius) {
          ag.active = false;
          ag.done = true;
        }
      }
    }

    if (episodes_out) {
      TrackTable table;
      for (const auto& ag : agents) {
        for (long t = 0; t < S; ++t) {
          if (!ag.present[t]) continue;
          TrackRecord r;
          r.track_id = ag.id;
          r.frame_id = t;
          r.timestamp_ms = static_cast<double>(t) * cfg.dt * 1000.0;
          r.agent_type = 0;
          r.x = ag.pos[t].x();
          r.y = ag.pos[t].y();
          r.vx = ag.vel[t].x();
          r.vy = ag.vel[t].y();
          r.psi_rad = ag.head[t];
          table[ag.id].push_back(r);
        }
      }
      episodes_out->push_back(std::move(table));
    }

    // Slice into (history, u at end) data with futures for evaluation.
    for (long t_end = cfg.t_history - 1; t_end < S; t_end += cfg.slice_stride) {
      std::vector<const SimAgent*> here;
      for (const auto& ag : agents)
        if (ag.present[t_end]) here.push_back(&ag);
      if (here.empty()) continue;

      std::vector<AgentTrack> tracks;
      tracks.reserve(here.size());
      for (const SimAgent* ag : here) {
        AgentTrack tr;
        tr.agent_id = ag->id;
        tr.agent_type = 0;
        tr.steps.resize(cfg.t_history);
        tr.present.resize(cfg.t_history);
        for (long k = 0; k < cfg.t_history; ++k) {
          const long t = t_end - cfg.t_history + 1 + k;
          const bool ok = t >= 0 && ag->present[t];
          tr.present[k] = ok ? 1 : 0;
          if (ok) {
            tr.steps[k].position = ag->pos[t];
            tr.steps[k].velocity = ag->vel[t];
            tr.steps[k].heading = ag->head[t];
          }
        }
        tracks.push_back(std::move(tr));
      }

      SceneDatum datum;
      datum.seq = flatten_scene(tracks, cfg.max_agents);
      const long n_max = cfg.max_agents;
      datum.u = Eigen::MatrixXd::Zero(n_max, 2);
      datum.u_des = Eigen::MatrixXd::Zero(n_max, 2);
      for (std::size_t a = 0; a < here.size(); ++a) {
        datum.u.row(static_cast<long>(a)) = here[a]->u_applied[t_end].transpose();
        datum.u_des.row(static_cast<long>(a)) = here[a]->u_nominal[t_end].transpose();
      }
      if (cfg.horizon > 0) {
        datum.future = Eigen::MatrixXd::Zero(cfg.horizon, 2 * n_max);
        datum.future_valid = Eigen::MatrixXd::Zero(cfg.horizon, n_max);
        for (long h = 0; h < cfg.horizon; ++h) {
          const long t = t_end + 1 + h;
          if (t >= S) break;
          for (std::size_t a = 0; a < here.size(); ++a) {
            if (!here[a]->present[t]) continue;
            datum.future(h, 2 * static_cast<long>(a)) = here[a]->pos[t].x();
            datum.future(h, 2 * static_cast<long>(a) + 1) = here[a]->pos[t].y();
            datum.future_valid(h, static_cast<long>(a)) = 1.0;
          }
        }
      }
      ds.episode_of.push_back(ep);
      ds.data.push_back(std::move(datum));
    }
  }
  ds.metadata["count"] = ds.data.size();
  return ds;
}

std::vector<long> select_agents(const std::vector<std::pair<long, Eigen::Vector2d>>& present,
                                long ego_id, long n_max) {
  if (n_max < 1) throw InvalidInputError("select_agents: n_max must be >= 1");
  const Eigen::Vector2d* ego_pos = nullptr;
  for (const auto& [id, p] : present)
    if (id == ego_id) ego_pos = &p;
  if (!ego_pos) throw InvalidInputError("select_agents: ego absent at reference time");

  std::vector<std::pair<long, double>> others;
  for (const auto& [id, p] : present)
    if (id != ego_id) others.emplace_back(id, (p - *ego_pos).norm());
  std::sort(others.begin(), others.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second < b.second;
    return a.first < b.first;
  });

  std::vector<long> out{ego_id};
  for (std::size_t i = 0; i < others.size() && static_cast<long>(out.size()) < n_max; ++i)
    out.push_back(others[i].first);
  return out;
}

std::vector<AgentTrack> slice_tracks(const TrackTable& table, long t_end_frame, long t_history) {
  if (t_history < 1) throw InvalidInputError("slice_tracks: t_history must be >= 1");
  std::vector<AgentTrack> out;
  for (const auto& [id, recs] : table) {
    const bool at_end = std::any_of(recs.begin(), recs.end(),
                                    [&](const TrackRecord& r) { return r.frame_id == t_end_frame; });
    if (!at_end) continue;
    AgentTrack tr;
    tr.agent_id = id;
    tr.agent_type = recs.front().agent_type;
    tr.steps.resize(t_history);
    tr.present.assign(t_history, 0);
    for (const TrackRecord& r : recs) {
      const long k = r.frame_id - (t_end_frame - t_history + 1);
      if (k < 0 || k >= t_history) continue;
      tr.present[k] = 1;
      tr.steps[k].agent_type = r.agent_type;
      tr.steps[k].position = Eigen::Vector2d(r.x, r.y);
      tr.steps[k].velocity = Eigen::Vector2d(r.vx, r.vy);
      tr.steps[k].heading = r.psi_rad;
    }
    out.push_back(std::move(tr));
  }
  return out;
}

std::pair<Dataset, Dataset> split_by_episode(const Dataset& ds, double test_fraction, Rng& rng) {
  if (test_fraction <= 0.0 || test_fraction >= 1.0)
    throw InvalidInputError("split_by_episode: fraction must be in (0,1)");
  if (ds.data.size() != ds.episode_of.size())
    throw InvalidInputError("split_by_episode: missing episode labels");

  std::vector<long> episodes = ds.episode_of;
  std::sort(episodes.begin(), episodes.end());
  episodes.erase(std::unique(episodes.begin(), episodes.end()), episodes.end());
  for (std::size_t i = episodes.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(rng.uniform(0.0, static_cast<double>(i)));
    std::swap(episodes[i - 1], episodes[std::min(j, i - 1)]);
  }
  long n_test = std::max<long>(1, std::lround(test_fraction * static_cast<double>(episodes.size())));
  if (n_test >= static_cast<long>(episodes.size())) n_test = static_cast<long>(episodes.size()) - 1;

  std::vector<char> is_test_ep;
  {
    const long max_ep = *std::max_element(episodes.begin(), episodes.end());
    is_test_ep.assign(max_ep + 1, 0);
    for (long i = 0; i < n_test; ++i) is_test_ep[episodes[i]] = 1;
  }

  Dataset train, test;
  train.metadata = ds.metadata;
  test.metadata = ds.metadata;
  train.metadata["split"] = "train";
  test.metadata["split"] = "test";
  for (std::size_t i = 0; i < ds.data.size(); ++i) {
    Dataset& dst = is_test_ep[ds.episode_of[i]] ? test : train;
    dst.data.push_back(ds.data[i]);
    dst.episode_of.push_back(ds.episode_of[i]);
  }
  if (train.data.empty() || test.data.empty())
    throw NumericError("split_by_episode: degenerate split");
  return {std::move(train), std::move(test)};
}

}  // namespace resp
