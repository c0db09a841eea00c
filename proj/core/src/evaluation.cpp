#include "respalloc/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "respalloc/errors.hpp"

namespace resp {

namespace {

// Drop the oldest step, append the new states at the last slot. Agents keep
// their validity from the window end; departed agents' history shifts out.
void advance_window(SceneSequence& seq, const std::vector<char>& live,
                    const std::vector<AgentPhysState>& states,
                    const std::vector<double>& headings) {
  const long n = seq.n_max, T = seq.t_max;
  for (long t = 0; t + 1 < T; ++t) {
    for (long a = 0; a < n; ++a) {
      seq.tokens[seq.flat_index(a, t)] = seq.tokens[seq.flat_index(a, t + 1)];
      seq.valid[seq.flat_index(a, t)] = seq.valid[seq.flat_index(a, t + 1)];
    }
  }
  for (long a = 0; a < n; ++a) {
    const long i = seq.flat_index(a, T - 1);
    if (live[a]) {
      AgentToken tok;
      tok.agent_type = seq.tokens[i].agent_type;
      tok.position = states[a].position;
      tok.velocity = states[a].velocity;
      tok.heading = headings[a];
      seq.tokens[i] = tok;
      seq.valid[i] = 1;
      seq.current_states[a] = states[a];
    } else {
      seq.tokens[i] = AgentToken{};
      seq.valid[i] = 0;
    }
  }
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return std::sqrt(s / (static_cast<double>(xs.size()) - 1.0));
}

}  // namespace

RolloutResult rollout(const CVAEModel* model, const SceneSequence& seq,
                      const DesiredPolicy& policy, const RolloutConfig& rcfg,
                      const FilterConfig& fcfg, Rng rng) {
  if (rcfg.horizon < 0 || rcfg.dt <= 0.0 || rcfg.n_samples < 1)
    throw InvalidInputError("rollout: bad rollout config");
  if (!policy.valid()) throw InvalidInputError("rollout: bad policy");

  const long n = seq.n_max;
  RolloutResult out;
  out.n_max = n;
  out.agent_valid.resize(n);
  for (long a = 0; a < n; ++a) out.agent_valid[a] = seq.agent_valid(a) ? 1 : 0;

  for (long s = 0; s < rcfg.n_samples; ++s) {
    Rng parent = rng;
    Rng child = parent.split(static_cast<std::uint64_t>(rcfg.sample_base + s));

    RolloutSample sample;
    sample.positions = Eigen::MatrixXd::Zero(rcfg.horizon, 2 * n);
    sample.gammas = Eigen::MatrixXd::Zero(rcfg.horizon, n);
    sample.epsilons = Eigen::VectorXd::Zero(rcfg.horizon);

    SceneSequence window = seq;
    std::vector<AgentPhysState> states = window.current_states;
    std::vector<double> headings(n, 0.0);
    for (long a = 0; a < n; ++a) {
      const long t = window.last_valid_time(a);
      if (t >= 0) headings[a] = window.tokens[window.flat_index(a, t)].heading;
    }

    for (long h = 0; h < rcfg.horizon; ++h) {
      Eigen::MatrixXd u_des = policy.eval(states, headings);
      for (long a = 0; a < n; ++a)
        if (!out.agent_valid[a]) u_des.row(a).setZero();

      Eigen::MatrixXd u = u_des;
      if (model) {
        ControlSample cs = sample_controls(*model, window, u_des, fcfg, child);
        if (!cs.filter_ok) {
          sample.ok = false;
          break;
        }
        u = cs.u;
        sample.gammas.row(h) = cs.gamma.transpose();
        sample.epsilons[h] = cs.epsilon;
      }

      for (long a = 0; a < n; ++a) {
        if (!out.agent_valid[a]) continue;
        Control ctl;
        ctl.acceleration = u.row(a).transpose();
        states[a] = step(states[a], ctl, rcfg.dt);
        const double speed = states[a].velocity.norm();
        if (speed > 0.1) headings[a] = std::atan2(states[a].velocity.y(), states[a].velocity.x());
        sample.positions(h, 2 * a) = states[a].position.x();
        sample.positions(h, 2 * a + 1) = states[a].position.y();
      }
      sample.steps_done = h + 1;
      advance_window(window, out.agent_valid, states, headings);
    }
    out.samples.push_back(std::move(sample));
  }
  return out;
}

namespace {

void check_metric_shapes(const std::vector<Eigen::MatrixXd>& pred, const Eigen::MatrixXd& gt,
                         const Eigen::MatrixXd& valid) {
  if (pred.empty()) throw InvalidInputError("metrics: no predicted samples");
  if (gt.cols() != 2 * valid.cols() || gt.rows() != valid.rows())
    throw InvalidInputError("metrics: gt/valid shape mismatch");
  for (const auto& p : pred)
    if (p.rows() != gt.rows() || p.cols() != gt.cols())
      throw InvalidInputError("metrics: pred/gt shape mismatch");
}

double displacement(const Eigen::MatrixXd& pred, const Eigen::MatrixXd& gt, long h, long a) {
  const double dx = pred(h, 2 * a) - gt(h, 2 * a);
  const double dy = pred(h, 2 * a + 1) - gt(h, 2 * a + 1);
  return std::hypot(dx, dy);
}

}  // namespace

double ade(const std::vector<Eigen::MatrixXd>& pred_samples, const Eigen::MatrixXd& gt,
           const Eigen::MatrixXd& valid, bool best_of_k) {
  check_metric_shapes(pred_samples, gt, valid);
  const long H = gt.rows(), A = valid.cols();

  if (!best_of_k) {
    double sum = 0.0;
    long count = 0;
    for (const auto& p : pred_samples)
      for (long h = 0; h < H; ++h)
        for (long a = 0; a < A; ++a)
          if (valid(h, a) != 0.0) {
            sum += displacement(p, gt, h, a);
            ++count;
          }
    if (count == 0) throw InvalidInputError("ade: empty valid mask");
    return sum / static_cast<double>(count);
  }

  double sum = 0.0;
  long count = 0;
  for (long a = 0; a < A; ++a) {
    long steps = 0;
    for (long h = 0; h < H; ++h) steps += valid(h, a) != 0.0 ? 1 : 0;
    if (steps == 0) continue;
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : pred_samples) {
      double traj = 0.0;
      for (long h = 0; h < H; ++h)
        if (valid(h, a) != 0.0) traj += displacement(p, gt, h, a);
      best = std::min(best, traj / static_cast<double>(steps));
    }
    sum += best;
    ++count;
  }
  if (count == 0) throw InvalidInputError("ade: empty valid mask");
  return sum / static_cast<double>(count);
}

double miss_rate(const std::vector<Eigen::MatrixXd>& pred_samples, const Eigen::MatrixXd& gt,
                 const Eigen::MatrixXd& valid, double threshold, bool best_of_k) {
  check_metric_shapes(pred_samples, gt, valid);
  const long H = gt.rows(), A = valid.cols();

  long misses = 0, total = 0;
  for (long a = 0; a < A; ++a) {
    long steps = 0;
    for (long h = 0; h < H; ++h) steps += valid(h, a) != 0.0 ? 1 : 0;
    if (steps == 0) continue;
    if (best_of_k) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& p : pred_samples) {
        double worst = 0.0;
        for (long h = 0; h < H; ++h)
          if (valid(h, a) != 0.0) worst = std::max(worst, displacement(p, gt, h, a));
        best = std::min(best, worst);
      }
      ++total;
      misses += best > threshold ? 1 : 0;
    } else {
      for (const auto& p : pred_samples) {
        double worst = 0.0;
        for (long h = 0; h < H; ++h)
          if (valid(h, a) != 0.0) worst = std::max(worst, displacement(p, gt, h, a));
        ++total;
        misses += worst > threshold ? 1 : 0;
      }
    }
  }
  if (total == 0) throw InvalidInputError("miss_rate: empty valid mask");
  return static_cast<double>(misses) / static_cast<double>(total);
}

DensityGrid gamma_density_grid(const CVAEModel& m, const std::vector<SceneSequence>& scenes,
                               const Eigen::VectorXd& axis_values, const std::string& axis_name,
                               long agent, long bins, long n_samples, const FilterConfig& fcfg,
                               Rng& rng, double lo, double hi) {
  if (scenes.empty() || bins < 1 || n_samples < 1 || hi <= lo)
    throw InvalidInputError("gamma_density_grid: bad arguments");
  if (static_cast<long>(scenes.size()) != axis_values.size())
    throw InvalidInputError("gamma_density_grid: axis length mismatch");

  DensityGrid grid;
  grid.axis = axis_name;
  grid.axis_values = axis_values;
  grid.lo = lo;
  grid.hi = hi;
  grid.density = Eigen::MatrixXd::Zero(bins, static_cast<long>(scenes.size()));

  const double width = (hi - lo) / static_cast<double>(bins);
  for (std::size_t c = 0; c < scenes.size(); ++c) {
    if (agent < 0 || agent >= scenes[c].n_max)
      throw InvalidInputError("gamma_density_grid: agent index out of range");
    const Eigen::MatrixXd draws = sample_gamma(m, scenes[c], n_samples, fcfg, rng);
    for (long s = 0; s < draws.rows(); ++s) {
      const double g = std::clamp(draws(s, agent), lo, hi);
      long b = static_cast<long>((g - lo) / width);
      b = std::clamp(b, 0L, bins - 1);
      grid.density(b, static_cast<long>(c)) += 1.0;
    }
    grid.density.col(static_cast<long>(c)) /= static_cast<double>(n_samples);
  }
  return grid;
}

CrossSection control_cross_section(const Dataset& data, const CVAEModel* model,
                                   const FilterConfig& fcfg, long agent, long component,
                                   const AxisFn& axis, const std::string& axis_name,
                                   long samples_per_datum, Rng& rng) {
  if (component < 0 || component > 1)
    throw InvalidInputError("control_cross_section: component must be 0 (x) or 1 (y)");
  CrossSection cs;
  cs.axis = axis_name;
  cs.component = std::string("u_") + (component == 0 ? "x" : "y") + "[" +
                 std::to_string(agent) + "]";
  for (const SceneDatum& datum : data.data) {
    if (agent < 0 || agent >= datum.seq.n_max)
      throw InvalidInputError("control_cross_section: agent index out of range");
    const double x = axis(datum);
    cs.truth_axis.push_back(x);
    cs.truth_value.push_back(datum.u(agent, component));
    if (!model) continue;
    for (long s = 0; s < samples_per_datum; ++s) {
      ControlSample draw = sample_controls(*model, datum.seq, datum.u_des, fcfg, rng);
      if (!draw.filter_ok) continue;
      cs.model_axis.push_back(x);
      cs.model_value.push_back(draw.u(agent, component));
    }
  }
  return cs;
}

std::vector<MetricRow> compare_baselines(const Dataset& test, const std::vector<NamedModel>& models,
                                         const DesiredPolicy& policy, const RolloutConfig& rcfg,
                                         const FilterConfig& fcfg,
                                         const std::vector<std::uint64_t>& seeds) {
  if (seeds.empty()) throw InvalidInputError("compare_baselines: need at least one seed");

  std::vector<MetricRow> rows;
  for (const NamedModel& nm : models) {
    std::vector<double> ades, misses;
    for (const std::uint64_t seed : seeds) {
      Rng seed_rng(seed);
      double dist_sum = 0.0;
      long dist_count = 0;
      long traj_total = 0, traj_miss = 0;

      for (std::size_t i = 0; i < test.data.size(); ++i) {
        const SceneDatum& datum = test.data[i];
        if (datum.future.size() == 0) continue;
        const long H = std::min<long>(rcfg.horizon, datum.future.rows());
        Rng scene_rng = seed_rng.split(i);
        RolloutResult rr = rollout(nm.model, datum.seq, policy, rcfg, fcfg, scene_rng);

        for (const RolloutSample& sm : rr.samples) {
          if (!sm.ok) continue;
          for (long a = 0; a < rr.n_max; ++a) {
            if (!rr.agent_valid[a]) continue;
            double worst = 0.0;
            long steps = 0;
            for (long h = 0; h < std::min(H, sm.steps_done); ++h) {
              if (datum.future_valid(h, a) == 0.0) continue;
              const double d = displacement(sm.positions, datum.future, h, a);
              dist_sum += d;
              ++dist_count;
              worst = std::max(worst, d);
              ++steps;
            }
            if (steps > 0) {
              ++traj_total;
              traj_miss += worst > 1.0 ? 1 : 0;
            }
          }
        }
      }
      if (dist_count == 0)
        throw InvalidInputError("compare_baselines: test split has no usable futures");
      ades.push_back(dist_sum / static_cast<double>(dist_count));
      misses.push_back(static_cast<double>(traj_miss) / static_cast<double>(traj_total));
    }

    MetricRow row;
    row.name = nm.name;
    row.n_seeds = static_cast<long>(seeds.size());
    row.ade_mean = 0.0;
    for (double v : ades) row.ade_mean += v;
    row.ade_mean /= static_cast<double>(ades.size());
    row.miss_mean = 0.0;
    for (double v : misses) row.miss_mean += v;
    row.miss_mean /= static_cast<double>(misses.size());
    row.ade_std = sample_std(ades, row.ade_mean);
    row.miss_std = sample_std(misses, row.miss_mean);
    rows.push_back(row);
  }
  return rows;
}

double wasserstein1(std::vector<double> a, std::vector<double> b) {
  if (a.empty() || b.empty()) throw InvalidInputError("wasserstein1: empty sample");
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  const double na = static_cast<double>(a.size());
  const double nb = static_cast<double>(b.size());

  // Integral of |F_a - F_b| over the merged support.
  std::size_t ia = 0, ib = 0;
  double w = 0.0;
  double prev = std::min(a.front(), b.front());
  while (ia < a.size() || ib < b.size()) {
    double x;
    if (ia == a.size()) x = b[ib];
    else if (ib == b.size()) x = a[ia];
    else x = std::min(a[ia], b[ib]);
    const double fa = static_cast<double>(ia) / na;
    const double fb = static_cast<double>(ib) / nb;
    w += std::abs(fa - fb) * (x - prev);
    while (ia < a.size() && a[ia] == x) ++ia;
    while (ib < b.size() && b[ib] == x) ++ib;
    prev = x;
  }
  return w;
}

double quantile(std::vector<double> v, double p) {
  if (v.empty()) throw InvalidInputError("quantile: empty sample");
  if (p < 0.0 || p > 1.0) throw InvalidInputError("quantile: p outside [0, 1]");
  std::sort(v.begin(), v.end());
  const double h = p * (static_cast<double>(v.size()) - 1.0);
  const auto lo = static_cast<std::size_t>(h);
  if (lo + 1 >= v.size()) return v.back();
  return v[lo] + (h - static_cast<double>(lo)) * (v[lo + 1] - v[lo]);
}

double iqr(std::vector<double> v) { return quantile(v, 0.75) - quantile(v, 0.25); }

nlohmann::json to_json(const DensityGrid& g) {
  nlohmann::json j;
  j["axis"] = g.axis;
  j["axis_values"] = std::vector<double>(g.axis_values.data(),
                                         g.axis_values.data() + g.axis_values.size());
  j["lo"] = g.lo;
  j["hi"] = g.hi;
  j["bins"] = g.density.rows();
  nlohmann::json cols = nlohmann::json::array();
  for (long c = 0; c < g.density.cols(); ++c) {
    nlohmann::json col = nlohmann::json::array();
    for (long b = 0; b < g.density.rows(); ++b) col.push_back(g.density(b, c));
    cols.push_back(col);
  }
  j["density"] = cols;
  return j;
}

nlohmann::json to_json(const CrossSection& c) {
  nlohmann::json j;
  j["axis"] = c.axis;
  j["component"] = c.component;
  j["truth"] = {{"axis", c.truth_axis}, {"value", c.truth_value}};
  j["model"] = {{"axis", c.model_axis}, {"value", c.model_value}};
  return j;
}

void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path);
  if (!out) throw IoError("write_metrics_csv: cannot open " + path);
  out << "model,ade_mean,ade_std,miss_mean,miss_std,n_seeds\n";
  out.precision(17);
  for (const MetricRow& r : rows) {
    out << r.name << ',' << r.ade_mean << ',' << r.ade_std << ',' << r.miss_mean << ','
        << r.miss_std << ',' << r.n_seeds << '\n';
  }
  if (!out) throw IoError("write_metrics_csv: write failed for " + path);
}

}  // namespace resp
