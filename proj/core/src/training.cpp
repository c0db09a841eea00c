#include "respalloc/training.hpp"

#include <chrono>
#include <cmath>

#include "respalloc/checkpoint.hpp"
#include "respalloc/errors.hpp"

namespace resp {

double beta_schedule(double epoch, const BetaSchedule& s) {
  if (s.end_epoch < s.start_epoch) throw InvalidInputError("beta_schedule: end before start");
  if (epoch < s.start_epoch) return 0.0;
  if (epoch >= s.end_epoch) return s.max_beta;
  const double span = s.end_epoch - s.start_epoch;
  if (span <= 0.0) return s.max_beta;
  return s.max_beta * (epoch - s.start_epoch) / span;
}

BetaSchedule TrainConfig::resolved_beta() const {
  if (beta_set) return beta;
  BetaSchedule s;
  s.start_epoch = 0.0;
  s.end_epoch = std::max(1.0, 0.3 * static_cast<double>(epochs));
  s.max_beta = 1.0;
  return s;
}

bool adam_step(Eigen::VectorXd& params, const Eigen::VectorXd& grad, AdamState& state,
               const TrainConfig& cfg) {
  if (grad.size() != params.size()) throw InvalidInputError("adam_step: size mismatch");
  if (!grad.allFinite()) return false;
  if (state.m.size() != params.size()) {
    state.m = Eigen::VectorXd::Zero(params.size());
    state.v = Eigen::VectorXd::Zero(params.size());
    state.t = 0;
  }
  state.t += 1;
  state.m = cfg.adam_b1 * state.m + (1.0 - cfg.adam_b1) * grad;
  state.v = cfg.adam_b2 * state.v + (1.0 - cfg.adam_b2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.adam_b1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.adam_b2, static_cast<double>(state.t));
  const Eigen::VectorXd mhat = state.m / bc1;
  const Eigen::VectorXd vhat = state.v / bc2;
  params -= cfg.learning_rate *
            (mhat.array() / (vhat.array().sqrt() + cfg.adam_eps)).matrix();
  return true;
}

namespace {

void clip_gradient(Eigen::VectorXd& grad, double clip_norm) {
  if (clip_norm <= 0.0) return;
  const double n = grad.norm();
  if (n > clip_norm) grad *= clip_norm / n;
}

std::vector<std::size_t> shuffled_indices(std::size_t n, Rng& rng) {
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  for (std::size_t i = n; i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(idx[i - 1], idx[j]);
  }
  return idx;
}

}  // namespace

TrainResult train(CVAEModel& model, const Dataset& data, const TrainConfig& tcfg,
                  const FilterConfig& fcfg, Rng& rng) {
  if (data.data.empty()) throw InvalidInputError("train: empty dataset");
  if (!tcfg.valid()) throw InvalidInputError("train: bad train config");

  const BetaSchedule beta = tcfg.resolved_beta();
  AdamState adam;
  TrainResult result;

  for (long epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const double beta_kl = beta_schedule(static_cast<double>(epoch), beta);
    const double progress = static_cast<double>(epoch) / std::max(1.0, tcfg.epochs - 1.0);
    ElboOptions opts;
    opts.beta_kl = beta_kl;
    opts.gumbel_tau = std::max(0.5, std::exp(-2.0 * progress));
    opts.skip_filter_failures = true;

    const std::vector<std::size_t> order = shuffled_indices(data.data.size(), rng);
    const auto bs = static_cast<std::size_t>(tcfg.batch_size);
    double loss_sum = 0.0, kl_sum = 0.0, nll_sum = 0.0, eps_sum = 0.0;
    long n_batches = 0, skipped = 0;

    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<SceneDatum> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i)
        batch.push_back(data.data[order[i]]);

      Eigen::VectorXd grad;
      ElboResult er;
      try {
        er = elbo_loss(model, batch, opts, fcfg, rng, &grad);
      } catch (const NumericError&) {
        skipped += static_cast<long>(batch.size());
        continue;  // whole batch unusable; move on
      }
      clip_gradient(grad, tcfg.clip_norm);
      adam_step(model.params.flat(), grad, adam, tcfg);
      if (!model.params.flat().allFinite())
        throw NumericError("train: parameters became non-finite at epoch " +
                           std::to_string(epoch));

      loss_sum += er.loss;
      kl_sum += er.kl;
      nll_sum += er.nll;
      eps_sum += er.mean_epsilon;
      skipped += er.skipped;
      ++n_batches;
    }
    if (n_batches == 0) throw NumericError("train: no usable batches in epoch");

    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / n_batches;
    log.kl = kl_sum / n_batches;
    log.nll = nll_sum / n_batches;
    log.mean_epsilon = eps_sum / n_batches;
    log.beta = beta_kl;
    log.skipped = skipped;
    log.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(log);

    if (!tcfg.checkpoint_dir.empty() && tcfg.checkpoint_every > 0 &&
        (epoch + 1) % tcfg.checkpoint_every == 0) {
      Checkpoint ck;
      ck.meta = {{"epoch", epoch + 1}, {"loss", log.loss}};
      ck.params = model.params;
      save_checkpoint(tcfg.checkpoint_dir + "/checkpoint_epoch" + std::to_string(epoch + 1) +
                          ".json",
                      ck);
    }
  }
  return result;
}

// ---- deterministic baseline -------------------------------------------------

namespace {

MLPSpec det_dec_spec(const CVAEConfig& cfg) {
  MLPSpec s;
  s.input = cfg.encoder.d_model;
  s.hidden = {cfg.head_hidden};
  s.output = 1;
  s.activation = cfg.encoder.activation;
  return s;
}

}  // namespace

DetModel make_det(const CVAEConfig& cfg) {
  if (!cfg.encoder.valid() || cfg.head_hidden < 1)
    throw InvalidInputError("make_det: bad config");
  DetModel m;
  m.cfg = cfg;
  register_encoder(m.params, "enc", cfg.encoder);
  register_mlp(m.params, "dec", det_dec_spec(cfg));
  return m;
}

void init_det(DetModel& model, Rng& rng) { model.params.init_params(rng); }

DetLossResult det_loss(const DetModel& model, const std::vector<SceneDatum>& batch,
                       const FilterConfig& fcfg, bool skip_filter_failures,
                       Eigen::VectorXd* grad) {
  if (batch.empty()) throw InvalidInputError("det_loss: empty batch");

  ad::Tape tape;
  ParamBinding bind(tape, model.params);
  DetLossResult res;
  ad::Var total;
  long n_used = 0;
  double eps_sum = 0.0;

  for (std::size_t d = 0; d < batch.size(); ++d) {
    const SceneDatum& datum = batch[d];
    ContextFeatures ctx = encode_context(bind, "enc", model.cfg.encoder, datum.seq);
    const long n = ctx.features.rows();
    long n_valid = 0;
    for (char v : ctx.agent_valid) n_valid += v ? 1 : 0;
    if (n_valid == 0) {
      ++res.skipped;
      continue;
    }

    ad::Var raw = mlp_forward(bind, "dec", det_dec_spec(model.cfg), ctx.features);
    ad::Var act = apply_activation_var(raw, model.cfg.activation, fcfg.beta1, ctx.agent_valid);

    Eigen::MatrixXd sel = Eigen::MatrixXd::Zero(n_valid, n);
    Eigen::VectorXd u_des_flat(2 * n_valid), u_obs_flat(2 * n_valid);
    std::vector<AgentPhysState> states;
    long r = 0;
    for (long a = 0; a < n; ++a) {
      if (!ctx.agent_valid[a]) continue;
      sel(r, a) = 1.0;
      u_des_flat.segment<2>(2 * r) = datum.u_des.row(a).transpose();
      u_obs_flat.segment<2>(2 * r) = datum.u.row(a).transpose();
      states.push_back(datum.seq.current_states[a]);
      ++r;
    }
    ad::Var gamma_compact = tape.matmul(tape.constant(sel), act);

    ResponsibilityVector gamma;
    gamma.gamma = gamma_compact.value().col(0);
    FilterResult fr;
    try {
      fr = project(u_des_flat, states, gamma, fcfg);
      if (fr.qp_status != QPStatus::optimal) throw NumericError("filter QP did not converge");
    } catch (const std::runtime_error& e) {
      if (skip_filter_failures) {
        ++res.skipped;
        continue;
      }
      throw NumericError(std::string(e.what()) + " (datum " + std::to_string(d) + ")");
    }
    eps_sum += fr.epsilon;

    const int ig = gamma_compact.index();
    ad::Var u_node =
        tape.custom(Eigen::MatrixXd(fr.u), {gamma_compact},
                    [fr, u_des_flat, gamma, fcfg, ig](ad::Tape& t, const Eigen::MatrixXd& g) {
                      ProjectGrads pg = project_vjp(fr, u_des_flat, gamma, fcfg, g.col(0));
                      t.accumulate(ig, Eigen::MatrixXd(pg.dgamma));
                    });
    ad::Var sumsq =
        tape.sum(tape.square(tape.sub(tape.constant(Eigen::MatrixXd(u_obs_flat)), u_node)));
    total = total.defined() ? tape.add(total, sumsq) : sumsq;
    ++n_used;
  }

  if (n_used == 0) throw NumericError("det_loss: every datum skipped");
  ad::Var loss = tape.scale(total, 1.0 / static_cast<double>(n_used));
  if (grad) {
    tape.backward(loss);
    grad->setZero(model.params.size());
    bind.collect_grads(*grad);
  }
  res.loss = loss.value()(0, 0);
  res.mean_epsilon = eps_sum / static_cast<double>(n_used);
  return res;
}

Eigen::VectorXd det_gamma(const DetModel& model, const SceneSequence& seq,
                          const FilterConfig& fcfg) {
  ad::Tape tape;
  ParamBinding bind(tape, model.params);
  ContextFeatures ctx = encode_context(bind, "enc", model.cfg.encoder, seq);
  ad::Var raw = mlp_forward(bind, "dec", det_dec_spec(model.cfg), ctx.features);
  ad::Var act = apply_activation_var(raw, model.cfg.activation, fcfg.beta1, ctx.agent_valid);
  Eigen::VectorXd out = act.value().col(0);
  for (long a = 0; a < out.size(); ++a)
    if (!ctx.agent_valid[a]) out[a] = 0.0;
  return out;
}

TrainResult train_deterministic(DetModel& model, const Dataset& data, const TrainConfig& tcfg,
                                const FilterConfig& fcfg, Rng& rng) {
  if (data.data.empty()) throw InvalidInputError("train_deterministic: empty dataset");
  if (!tcfg.valid()) throw InvalidInputError("train_deterministic: bad train config");

  AdamState adam;
  TrainResult result;
  for (long epoch = 0; epoch < tcfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    const std::vector<std::size_t> order = shuffled_indices(data.data.size(), rng);
    const auto bs = static_cast<std::size_t>(tcfg.batch_size);
    double loss_sum = 0.0, eps_sum = 0.0;
    long n_batches = 0, skipped = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<SceneDatum> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i)
        batch.push_back(data.data[order[i]]);
      Eigen::VectorXd grad;
      DetLossResult lr;
      try {
        lr = det_loss(model, batch, fcfg, /*skip_filter_failures=*/true, &grad);
      } catch (const NumericError&) {
        skipped += static_cast<long>(batch.size());
        continue;
      }
      clip_gradient(grad, tcfg.clip_norm);
      adam_step(model.params.flat(), grad, adam, tcfg);
      if (!model.params.flat().allFinite())
        throw NumericError("train_deterministic: parameters became non-finite");
      loss_sum += lr.loss;
      eps_sum += lr.mean_epsilon;
      skipped += lr.skipped;
      ++n_batches;
    }
    if (n_batches == 0) throw NumericError("train_deterministic: no usable batches");
    EpochLog log;
    log.epoch = epoch;
    log.loss = loss_sum / n_batches;
    log.mean_epsilon = eps_sum / n_batches;
    log.skipped = skipped;
    log.wall_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    result.history.push_back(log);
  }
  return result;
}

}  // namespace resp
