#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include "respalloc/cvae.hpp"
#include "respalloc/datagen.hpp"

namespace resp {

struct RolloutConfig {
  long horizon = 10;   // steps
  double dt = 0.1;     // s
  long n_samples = 32;
  long sample_base = 0;    // tag offset for per-sample rng streams
  bool best_of_k = false;  // metrics take the best sample per trajectory
};

struct RolloutSample {
  Eigen::MatrixXd positions;  // horizon × 2*n_max, x/y interleaved per slot
  Eigen::MatrixXd gammas;     // horizon × n_max (activated draws)
  Eigen::VectorXd epsilons;   // horizon
  long steps_done = 0;        // rows past this are zero
  bool ok = true;             // false when a filter failure cut the sample short
};

struct RolloutResult {
  std::vector<RolloutSample> samples;
  std::vector<char> agent_valid;  // slots simulated (valid at the window end)
  long n_max = 0;
};

// Autoregressive prediction: per step, encode the history window, draw gamma
// from the prior, project through the filter, integrate, and append the new
// states to the window. model == nullptr rolls out the desired policy
// unfiltered (the u_desired heuristic); direct-u models skip the filter.
// rng is taken by value: sample k uses the child stream split(sample_base+k)
// of the incoming state, so the sampling structure is reproducible.
RolloutResult rollout(const CVAEModel* model, const SceneSequence& seq,
                      const DesiredPolicy& policy, const RolloutConfig& rcfg,
                      const FilterConfig& fcfg, Rng rng);

// Mean Euclidean displacement over samples, agents, and steps where valid is
// set. pred samples and gt are horizon × 2n position arrays (x/y interleaved);
// valid is horizon × n. best_of_k keeps the best sample per agent trajectory.
double ade(const std::vector<Eigen::MatrixXd>& pred_samples, const Eigen::MatrixXd& gt,
           const Eigen::MatrixXd& valid, bool best_of_k = false);

// Fraction of (sample, agent) trajectories whose max displacement error over
// valid steps exceeds the threshold.
double miss_rate(const std::vector<Eigen::MatrixXd>& pred_samples, const Eigen::MatrixXd& gt,
                 const Eigen::MatrixXd& valid, double threshold = 1.0, bool best_of_k = false);

// Column-normalized histograms of sampled gamma for one agent, one column per
// conditioning scene. Draws are clamped into [lo, hi] so every column sums
// to exactly 1.
struct DensityGrid {
  std::string axis;            // conditioning variable name
  Eigen::VectorXd axis_values; // one per column
  double lo = 0.0;
  double hi = 1.0;
  Eigen::MatrixXd density;     // bins × n_columns
};

DensityGrid gamma_density_grid(const CVAEModel& m, const std::vector<SceneSequence>& scenes,
                               const Eigen::VectorXd& axis_values, const std::string& axis_name,
                               long agent, long bins, long n_samples, const FilterConfig& fcfg,
                               Rng& rng, double lo = 0.0, double hi = 1.0);

// Paired scatter export of one control component against a scene axis:
// ground truth straight from the dataset, model values sampled per datum.
struct CrossSection {
  std::string axis;
  std::string component;  // e.g. "u_x[1]"
  std::vector<double> truth_axis;
  std::vector<double> truth_value;
  std::vector<double> model_axis;
  std::vector<double> model_value;
};

using AxisFn = std::function<double(const SceneDatum&)>;

CrossSection control_cross_section(const Dataset& data, const CVAEModel* model,
                                   const FilterConfig& fcfg, long agent, long component,
                                   const AxisFn& axis, const std::string& axis_name,
                                   long samples_per_datum, Rng& rng);

struct MetricRow {
  std::string name;
  double ade_mean = 0.0;
  double ade_std = 0.0;
  double miss_mean = 0.0;
  double miss_std = 0.0;
  long n_seeds = 0;
};

struct NamedModel {
  std::string name;
  const CVAEModel* model = nullptr;  // nullptr = u_desired heuristic row
};

// Rollout metrics on every test datum that carries a future, one row per
// model, mean ± sample std over the given evaluation seeds.
std::vector<MetricRow> compare_baselines(const Dataset& test, const std::vector<NamedModel>& models,
                                         const DesiredPolicy& policy, const RolloutConfig& rcfg,
                                         const FilterConfig& fcfg,
                                         const std::vector<std::uint64_t>& seeds);

// Exact 1-Wasserstein distance between two empirical 1-D distributions.
double wasserstein1(std::vector<double> a, std::vector<double> b);
// Linear-interpolation quantile (the common "type 7" rule), p in [0, 1].
double quantile(std::vector<double> v, double p);
double iqr(std::vector<double> v);

nlohmann::json to_json(const DensityGrid& g);
nlohmann::json to_json(const CrossSection& c);
void write_metrics_csv(const std::string& path, const std::vector<MetricRow>& rows);

}  // namespace resp
