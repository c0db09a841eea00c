#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "respalloc/cvae.hpp"
#include "respalloc/datagen.hpp"

namespace resp {

struct BetaSchedule {
  double start_epoch = 0.0;
  double end_epoch = 1.0;
  double max_beta = 1.0;
};

// 0 before start, linear ramp to max_beta at end, constant after.
double beta_schedule(double epoch, const BetaSchedule& s);

struct TrainConfig {
  double learning_rate = 1e-3;
  long epochs = 40;
  long batch_size = 32;
  BetaSchedule beta;  // default ramp over the first 30% of epochs; see resolve()
  bool beta_set = false;
  unsigned long long seed = 0;
  double adam_b1 = 0.9;
  double adam_b2 = 0.999;
  double adam_eps = 1e-8;
  double clip_norm = 10.0;
  long checkpoint_every = 0;      // epochs; 0 = final only
  std::string checkpoint_dir;    // empty = no checkpoints written by train()

  bool valid() const { return learning_rate >= 0.0 && epochs >= 1 && batch_size >= 1; }
  BetaSchedule resolved_beta() const;
};

struct AdamState {
  Eigen::VectorXd m;
  Eigen::VectorXd v;
  long t = 0;
};

// Bias-corrected Adam update in place. Returns false (and leaves params and
// moments untouched) when the gradient is non-finite.
bool adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
               const TrainConfig& cfg);

struct EpochLog {
  long epoch = 0;
  double loss = 0.0;
  double kl = 0.0;
  double nll = 0.0;
  double mean_epsilon = 0.0;
  double beta = 0.0;
  long skipped = 0;
  double wall_s = 0.0;
};

struct TrainResult {
  std::vector<EpochLog> history;
};

TrainResult train(CVAEModel& model, const Dataset& data, const TrainConfig& tcfg,
                  const FilterConfig& fcfg, Rng& rng);

// Deterministic gamma-network baseline: no latent, decoder head on the agent
// feature alone; minimizes mean squared error between observed and filtered
// controls.
struct DetModel {
  CVAEConfig cfg;  // encoder/activation/head sizes; latent fields unused
  ParamStore params;
};

DetModel make_det(const CVAEConfig& cfg);
void init_det(DetModel& model, Rng& rng);

struct DetLossResult {
  double loss = 0.0;
  double mean_epsilon = 0.0;
  long skipped = 0;
};

DetLossResult det_loss(const DetModel& model, const std::vector<SceneDatum>& batch,
                       const FilterConfig& fcfg, bool skip_filter_failures,
                       Eigen::VectorXd* grad = nullptr);

// Deterministic per-agent gamma prediction (activated), eval path.
Eigen::VectorXd det_gamma(const DetModel& model, const SceneSequence& seq,
                          const FilterConfig& fcfg);

TrainResult train_deterministic(DetModel& model, const Dataset& data, const TrainConfig& tcfg,
                                const FilterConfig& fcfg, Rng& rng);

}  // namespace resp
