#include "respalloc/cvae.hpp"

#include <cmath>

#include "respalloc/errors.hpp"

namespace resp {

namespace {

constexpr double kLog2Pi = 1.8378770664093453;

MLPSpec uembed_spec(const CVAEConfig& cfg) {
  MLPSpec s;
  s.input = kControlDim;
  s.output = cfg.u_embed;
  s.activation = cfg.encoder.activation;
  return s;
}

MLPSpec prior_spec(const CVAEConfig& cfg) {
  MLPSpec s;
  s.input = cfg.encoder.d_model;
  s.hidden = {cfg.head_hidden};
  s.output = cfg.latent == "discrete" ? cfg.n_categories : 2 * cfg.d_z;
  s.activation = cfg.encoder.activation;
  return s;
}

MLPSpec posterior_spec(const CVAEConfig& cfg) {
  MLPSpec s = prior_spec(cfg);
  s.input = cfg.encoder.d_model + 2 * cfg.u_embed;
  return s;
}

MLPSpec decoder_spec(const CVAEConfig& cfg) {
  MLPSpec s;
  s.input = cfg.latent_dim() + cfg.encoder.d_model + cfg.latent_dim();
  s.hidden = {cfg.head_hidden};
  if (cfg.decoder_output == "direct_u")
    s.output = kControlDim;
  else
    s.output = cfg.latent == "discrete" ? 2 : 1;  // discrete: per-category gamma mean/log_var
  s.activation = cfg.encoder.activation;
  return s;
}

Eigen::MatrixXd row_mask(const std::vector<char>& agent_valid, long cols) {
  Eigen::MatrixXd m = Eigen::MatrixXd::Zero(static_cast<long>(agent_valid.size()), cols);
  for (long a = 0; a < static_cast<long>(agent_valid.size()); ++a)
    if (agent_valid[a]) m.row(a).setOnes();
  return m;
}

// P z averages the other valid agents' rows; zero row when alone/invalid.
Eigen::MatrixXd pool_matrix(const std::vector<char>& agent_valid) {
  const long n = static_cast<long>(agent_valid.size());
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(n, n);
  for (long i = 0; i < n; ++i) {
    if (!agent_valid[i]) continue;
    long n_other = 0;
    for (long j = 0; j < n; ++j)
      if (j != i && agent_valid[j]) ++n_other;
    if (n_other == 0) continue;
    for (long j = 0; j < n; ++j)
      if (j != i && agent_valid[j]) p(i, j) = 1.0 / static_cast<double>(n_other);
  }
  return p;
}

Eigen::MatrixXd valid_select(const std::vector<char>& agent_valid) {
  const long n = static_cast<long>(agent_valid.size());
  long n_valid = 0;
  for (char v : agent_valid) n_valid += v ? 1 : 0;
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(n_valid, n);
  long r = 0;
  for (long a = 0; a < n; ++a)
    if (agent_valid[a]) s(r++, a) = 1.0;
  return s;
}

long count_valid(const std::vector<char>& agent_valid) {
  long n = 0;
  for (char v : agent_valid) n += v ? 1 : 0;
  return n;
}

}  // namespace

bool CVAEConfig::valid() const {
  if (!encoder.valid() || !recon.valid()) return false;
  if (d_z < 1 || head_hidden < 1 || u_embed < 1) return false;
  if (latent != "gaussian" && latent != "discrete") return false;
  if (latent == "discrete" && n_categories < 2) return false;
  if (decoder_output != "gamma" && decoder_output != "direct_u") return false;
  if (latent == "discrete" && decoder_output == "direct_u") return false;
  return true;
}

CVAEModel make_cvae(const CVAEConfig& cfg) {
  if (!cfg.valid()) throw InvalidInputError("invalid CVAE config");
  CVAEModel m;
  m.cfg = cfg;
  register_encoder(m.params, "enc", cfg.encoder);
  register_mlp(m.params, "uembed", uembed_spec(cfg));
  register_mlp(m.params, "prior", prior_spec(cfg));
  register_mlp(m.params, "post", posterior_spec(cfg));
  register_mlp(m.params, "dec", decoder_spec(cfg));
  if (cfg.recon.learn_sigma) m.params.add("recon.log_sigma", 1, 1);
  return m;
}

void init_cvae(CVAEModel& model, Rng& rng) {
  model.params.init_params(rng);
  if (model.cfg.recon.learn_sigma) {
    Eigen::MatrixXd ls(1, 1);
    ls(0, 0) = std::log(model.cfg.recon.sigma);
    model.params.set("recon.log_sigma", ls);
  }
}

// ---- tape path --------------------------------------------------------------

LatentGaussianVar prior_head(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx) {
  if (cfg.latent != "gaussian") throw InvalidInputError("prior_head: gaussian latent only");
  ad::Var out = mlp_forward(p, "prior", prior_spec(cfg), ctx.features);
  ad::Tape& t = *out.tape();
  const long n = out.rows();
  LatentGaussianVar g;
  g.mean = t.block(out, 0, 0, n, cfg.d_z);
  g.log_var = t.clamp(t.block(out, 0, cfg.d_z, n, cfg.d_z), kLogVarMin, kLogVarMax);
  return g;
}

namespace {

ad::Var posterior_input(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx,
                        const Eigen::MatrixXd& u_obs) {
  const long n = ctx.features.rows();
  if (u_obs.rows() != n || u_obs.cols() != kControlDim)
    throw InvalidInputError("posterior: u_obs must be n_max x 2");
  for (long a = 0; a < n; ++a) {
    if (ctx.agent_valid[a] && !u_obs.row(a).allFinite())
      throw InvalidInputError("posterior: missing control for valid agent " + std::to_string(a));
  }
  Eigen::MatrixXd u_clean = u_obs;
  for (long a = 0; a < n; ++a)
    if (!ctx.agent_valid[a]) u_clean.row(a).setZero();

  ad::Tape& t = *ctx.features.tape();
  return mlp_forward(p, "uembed", uembed_spec(cfg), t.constant(u_clean));
}

}  // namespace

LatentGaussianVar posterior_head(ParamBinding& p, const CVAEConfig& cfg,
                                 const ContextFeatures& ctx, const Eigen::MatrixXd& u_obs) {
  if (cfg.latent != "gaussian") throw InvalidInputError("posterior_head: gaussian latent only");
  ad::Tape& t = *ctx.features.tape();
  ad::Var emb = posterior_input(p, cfg, ctx, u_obs);
  ad::Var pooled = t.matmul(t.constant(pool_matrix(ctx.agent_valid)), emb);
  ad::Var in = t.concat_cols({ctx.features, emb, pooled});
  ad::Var out = mlp_forward(p, "post", posterior_spec(cfg), in);
  const long n = out.rows();
  LatentGaussianVar g;
  g.mean = t.block(out, 0, 0, n, cfg.d_z);
  g.log_var = t.clamp(t.block(out, 0, cfg.d_z, n, cfg.d_z), kLogVarMin, kLogVarMax);
  return g;
}

ad::Var prior_logits(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx) {
  if (cfg.latent != "discrete") throw InvalidInputError("prior_logits: discrete latent only");
  return mlp_forward(p, "prior", prior_spec(cfg), ctx.features);
}

ad::Var posterior_logits(ParamBinding& p, const CVAEConfig& cfg, const ContextFeatures& ctx,
                         const Eigen::MatrixXd& u_obs) {
  if (cfg.latent != "discrete") throw InvalidInputError("posterior_logits: discrete latent only");
  ad::Tape& t = *ctx.features.tape();
  ad::Var emb = posterior_input(p, cfg, ctx, u_obs);
  ad::Var pooled = t.matmul(t.constant(pool_matrix(ctx.agent_valid)), emb);
  ad::Var in = t.concat_cols({ctx.features, emb, pooled});
  return mlp_forward(p, "post", posterior_spec(cfg), in);
}

ad::Var reparam_sample_var(LatentGaussianVar g, const Eigen::MatrixXd& noise) {
  ad::Tape& t = *g.mean.tape();
  if (noise.rows() != g.mean.rows() || noise.cols() != g.mean.cols())
    throw InvalidInputError("reparam_sample: noise shape mismatch");
  ad::Var std = t.exp(t.scale(g.log_var, 0.5));
  return t.add(g.mean, t.mul(std, t.constant(noise)));
}

ad::Var decode_gamma_var(ParamBinding& p, const CVAEConfig& cfg, ad::Var z,
                         const ContextFeatures& ctx) {
  ad::Tape& t = *z.tape();
  if (z.rows() != ctx.features.rows() || z.cols() != cfg.latent_dim())
    throw InvalidInputError("decode_gamma: z shape mismatch");
  ad::Var pooled = t.matmul(t.constant(pool_matrix(ctx.agent_valid)), z);
  ad::Var in = t.concat_cols({z, ctx.features, pooled});
  return mlp_forward(p, "dec", decoder_spec(cfg), in);
}

ad::Var kl_gaussian_var(LatentGaussianVar q, LatentGaussianVar p,
                        const std::vector<char>& agent_valid) {
  ad::Tape& t = *q.mean.tape();
  if (q.mean.rows() != p.mean.rows() || q.mean.cols() != p.mean.cols())
    throw InvalidInputError("kl_gaussian: shape mismatch");
  ad::Var dl = t.sub(q.log_var, p.log_var);
  ad::Var term = t.add(t.exp(dl), t.mul(t.square(t.sub(q.mean, p.mean)), t.exp(t.neg(p.log_var))));
  term = t.sub(term, dl);  // exp(lq-lp) + (mq-mp)^2 e^{-lp} + lp - lq
  const Eigen::MatrixXd mask = row_mask(agent_valid, q.mean.cols());
  ad::Var s = t.sum(t.cmul(term, mask));
  const double n_terms = mask.sum();
  return t.scale(t.add_const(s, -n_terms), 0.5);
}

ad::Var kl_categorical_var(ad::Var q_logits, ad::Var p_logits,
                           const std::vector<char>& agent_valid) {
  ad::Tape& t = *q_logits.tape();
  if (q_logits.rows() != p_logits.rows() || q_logits.cols() != p_logits.cols())
    throw InvalidInputError("kl_categorical: shape mismatch");
  ad::Var logq = t.add_colvec(q_logits, t.neg(t.logsumexp_rows(q_logits)));
  ad::Var logp = t.add_colvec(p_logits, t.neg(t.logsumexp_rows(p_logits)));
  ad::Var klm = t.mul(t.exp(logq), t.sub(logq, logp));
  return t.sum(t.cmul(klm, row_mask(agent_valid, q_logits.cols())));
}

ad::Var apply_activation_var(ad::Var raw, Activation mode, double beta1,
                             const std::vector<char>& agent_valid) {
  ad::Tape& t = *raw.tape();
  if (raw.cols() != 1) throw InvalidInputError("apply_activation_var: raw must be N x 1");
  switch (mode) {
    case Activation::none:
      return raw;
    case Activation::softmax: {
      Eigen::MatrixXd allow(1, raw.rows());
      for (long a = 0; a < raw.rows(); ++a) allow(0, a) = agent_valid[a] ? 1.0 : 0.0;
      return t.transpose(t.softmax_masked(t.transpose(raw), allow));
    }
    case Activation::clip_zero:
      return t.max_const(raw, 0.0);
    case Activation::clip_neg_beta:
      return t.max_const(raw, -beta1 + kConvexityFloor);
    case Activation::tanh:
      return t.max_const(t.tanh(raw), -beta1 + kConvexityFloor);
  }
  throw InvalidInputError("apply_activation_var: unknown mode");
}

ad::Var gumbel_softmax_var(ad::Var logits, double temperature,
                           const Eigen::MatrixXd& gumbel_noise) {
  if (temperature <= 0.0) throw InvalidInputError("gumbel_softmax: temperature must be > 0");
  ad::Tape& t = *logits.tape();
  if (gumbel_noise.rows() != logits.rows() || gumbel_noise.cols() != logits.cols())
    throw InvalidInputError("gumbel_softmax: noise shape mismatch");
  ad::Var pert = t.scale(t.add(logits, t.constant(gumbel_noise)), 1.0 / temperature);
  return t.softmax_masked(pert, Eigen::MatrixXd::Ones(logits.rows(), logits.cols()));
}

// ---- plain evaluation path ----------------------------------------------------

namespace {

struct EvalPass {
  ad::Tape tape;
  ParamBinding bind;
  ContextFeatures ctx;

  EvalPass(const CVAEModel& m, const SceneSequence& seq)
      : bind(tape, m.params), ctx(encode_context(bind, "enc", m.cfg.encoder, seq)) {}
};

Eigen::MatrixXd zero_invalid_rows(Eigen::MatrixXd m, const std::vector<char>& agent_valid) {
  for (long a = 0; a < m.rows(); ++a)
    if (!agent_valid[a]) m.row(a).setZero();
  return m;
}

}  // namespace

LatentGaussian prior(const CVAEModel& m, const SceneSequence& seq) {
  EvalPass pass(m, seq);
  LatentGaussianVar g = prior_head(pass.bind, m.cfg, pass.ctx);
  LatentGaussian out;
  out.mean = zero_invalid_rows(g.mean.value(), pass.ctx.agent_valid);
  out.log_var = zero_invalid_rows(g.log_var.value(), pass.ctx.agent_valid);
  return out;
}

LatentGaussian posterior(const CVAEModel& m, const SceneSequence& seq,
                         const Eigen::MatrixXd& u_obs) {
  EvalPass pass(m, seq);
  LatentGaussianVar g = posterior_head(pass.bind, m.cfg, pass.ctx, u_obs);
  LatentGaussian out;
  out.mean = zero_invalid_rows(g.mean.value(), pass.ctx.agent_valid);
  out.log_var = zero_invalid_rows(g.log_var.value(), pass.ctx.agent_valid);
  return out;
}

Eigen::MatrixXd reparam_sample(const LatentGaussian& g, const Eigen::MatrixXd& noise) {
  if (noise.rows() != g.mean.rows() || noise.cols() != g.mean.cols())
    throw InvalidInputError("reparam_sample: noise shape mismatch");
  return g.mean + ((g.log_var.array() * 0.5).exp() * noise.array()).matrix();
}

Eigen::MatrixXd decode_gamma(const CVAEModel& m, const Eigen::MatrixXd& z,
                             const SceneSequence& seq) {
  EvalPass pass(m, seq);
  ad::Var out = decode_gamma_var(pass.bind, m.cfg, pass.tape.constant(z), pass.ctx);
  return zero_invalid_rows(out.value(), pass.ctx.agent_valid);
}

double kl_gaussian(const LatentGaussian& q, const LatentGaussian& p) {
  if (q.mean.rows() != p.mean.rows() || q.mean.cols() != p.mean.cols() ||
      q.log_var.rows() != q.mean.rows() || p.log_var.rows() != p.mean.rows())
    throw InvalidInputError("kl_gaussian: shape mismatch");
  const Eigen::ArrayXXd dl = q.log_var.array() - p.log_var.array();
  const Eigen::ArrayXXd sq = (q.mean.array() - p.mean.array()).square();
  return 0.5 * (dl.exp() + sq * (-p.log_var.array()).exp() - 1.0 - dl).sum();
}

Eigen::MatrixXd gumbel_softmax_sample(const Eigen::MatrixXd& logits, double temperature,
                                      Rng& rng) {
  if (temperature <= 0.0) throw InvalidInputError("gumbel_softmax: temperature must be > 0");
  Eigen::MatrixXd y(logits.rows(), logits.cols());
  for (long r = 0; r < logits.rows(); ++r) {
    Eigen::ArrayXd pert(logits.cols());
    for (long c = 0; c < logits.cols(); ++c)
      pert[c] = (logits(r, c) + rng.gumbel()) / temperature;
    pert -= pert.maxCoeff();
    const Eigen::ArrayXd e = pert.exp();
    y.row(r) = (e / e.sum()).matrix().transpose();
  }
  return y;
}

namespace {

// Plain latent draw from the prior: gaussian reparameterization or a hard
// one-hot category per agent.
Eigen::MatrixXd draw_prior_latent(const CVAEModel& m, EvalPass& pass, Rng& rng) {
  const long n = pass.ctx.features.rows();
  if (m.cfg.latent == "gaussian") {
    LatentGaussianVar g = prior_head(pass.bind, m.cfg, pass.ctx);
    Eigen::MatrixXd noise(n, m.cfg.d_z);
    for (long r = 0; r < n; ++r)
      for (long c = 0; c < m.cfg.d_z; ++c) noise(r, c) = rng.normal();
    return g.mean.value() + ((g.log_var.value().array() * 0.5).exp() * noise.array()).matrix();
  }
  ad::Var logits = prior_logits(pass.bind, m.cfg, pass.ctx);
  Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, m.cfg.n_categories);
  for (long r = 0; r < n; ++r) {
    Eigen::ArrayXd l = logits.value().row(r).array();
    l -= l.maxCoeff();
    Eigen::ArrayXd probs = l.exp();
    probs /= probs.sum();
    double u = rng.uniform(0.0, 1.0);
    long k = 0;
    for (; k < probs.size() - 1; ++k) {
      u -= probs[k];
      if (u <= 0.0) break;
    }
    z(r, k) = 1.0;
  }
  return z;
}

// Raw gamma draw given a latent (adds the per-category Gaussian for the
// discrete decoder).
Eigen::VectorXd raw_gamma_from_latent(const CVAEModel& m, EvalPass& pass,
                                      const Eigen::MatrixXd& z, Rng& rng) {
  ad::Var dec = decode_gamma_var(pass.bind, m.cfg, pass.tape.constant(z), pass.ctx);
  const Eigen::MatrixXd& v = dec.value();
  if (m.cfg.latent == "gaussian") return v.col(0);
  Eigen::VectorXd raw(v.rows());
  for (long r = 0; r < v.rows(); ++r) {
    const double lv = std::clamp(v(r, 1), kLogVarMin, kLogVarMax);
    raw[r] = v(r, 0) + std::exp(0.5 * lv) * rng.normal();
  }
  return raw;
}

}  // namespace

Eigen::MatrixXd sample_gamma(const CVAEModel& m, const SceneSequence& seq, long n_samples,
                             const FilterConfig& fcfg, Rng& rng) {
  if (n_samples < 0) throw InvalidInputError("sample_gamma: negative sample count");
  if (m.cfg.decoder_output != "gamma")
    throw InvalidInputError("sample_gamma: model does not decode responsibilities");
  EvalPass pass(m, seq);
  const long n = pass.ctx.features.rows();
  Eigen::MatrixXd out = Eigen::MatrixXd::Zero(n_samples, n);
  if (n_samples == 0) return out;

  const Eigen::MatrixXd sel = valid_select(pass.ctx.agent_valid);
  for (long s = 0; s < n_samples; ++s) {
    const Eigen::MatrixXd z = draw_prior_latent(m, pass, rng);
    const Eigen::VectorXd raw_full = raw_gamma_from_latent(m, pass, z, rng);
    const ResponsibilityVector g =
        apply_activation(sel * raw_full, m.cfg.activation, fcfg.beta1);
    long r = 0;
    for (long a = 0; a < n; ++a)
      if (pass.ctx.agent_valid[a]) out(s, a) = g.gamma(r++);
  }
  return out;
}

GammaGMM gamma_gmm(const CVAEModel& m, const SceneSequence& seq) {
  if (m.cfg.latent != "discrete") throw InvalidInputError("gamma_gmm: discrete latent only");
  EvalPass pass(m, seq);
  const long n = pass.ctx.features.rows();
  const long K = m.cfg.n_categories;

  ad::Var logits = prior_logits(pass.bind, m.cfg, pass.ctx);
  GammaGMM out;
  out.weight = Eigen::MatrixXd::Zero(n, K);
  out.mean = Eigen::MatrixXd::Zero(n, K);
  out.var = Eigen::MatrixXd::Zero(n, K);
  for (long r = 0; r < n; ++r) {
    if (!pass.ctx.agent_valid[r]) continue;
    Eigen::ArrayXd l = logits.value().row(r).array();
    l -= l.maxCoeff();
    Eigen::ArrayXd e = l.exp();
    out.weight.row(r) = (e / e.sum()).matrix().transpose();
  }
  for (long k = 0; k < K; ++k) {
    Eigen::MatrixXd z = Eigen::MatrixXd::Zero(n, K);
    z.col(k).setOnes();
    ad::Var dec = decode_gamma_var(pass.bind, m.cfg, pass.tape.constant(z), pass.ctx);
    for (long r = 0; r < n; ++r) {
      if (!pass.ctx.agent_valid[r]) continue;
      out.mean(r, k) = dec.value()(r, 0);
      out.var(r, k) = std::exp(std::clamp(dec.value()(r, 1), kLogVarMin, kLogVarMax));
    }
  }
  return out;
}

ControlSample sample_controls(const CVAEModel& m, const SceneSequence& seq,
                              const Eigen::MatrixXd& u_des, const FilterConfig& fcfg, Rng& rng) {
  EvalPass pass(m, seq);
  const long n = pass.ctx.features.rows();
  if (u_des.rows() != n || u_des.cols() != kControlDim)
    throw InvalidInputError("sample_controls: u_des must be n_max x 2");

  ControlSample out;
  out.u = Eigen::MatrixXd::Zero(n, kControlDim);
  out.gamma = Eigen::VectorXd::Zero(n);

  const Eigen::MatrixXd z = draw_prior_latent(m, pass, rng);

  if (m.cfg.decoder_output == "direct_u") {
    ad::Var dec = decode_gamma_var(pass.bind, m.cfg, pass.tape.constant(z), pass.ctx);
    out.u = zero_invalid_rows(dec.value(), pass.ctx.agent_valid);
    return out;
  }

  const Eigen::VectorXd raw_full = raw_gamma_from_latent(m, pass, z, rng);
  const Eigen::MatrixXd sel = valid_select(pass.ctx.agent_valid);
  const long n_valid = sel.rows();
  if (n_valid == 0) return out;

  Eigen::VectorXd u_des_flat(kControlDim * n_valid);
  std::vector<AgentPhysState> states;
  states.reserve(n_valid);
  long r = 0;
  for (long a = 0; a < n; ++a) {
    if (!pass.ctx.agent_valid[a]) continue;
    u_des_flat.segment<kControlDim>(kControlDim * r) = u_des.row(a).transpose();
    states.push_back(seq.current_states[a]);
    ++r;
  }

  try {
    const ResponsibilityVector g =
        apply_activation(sel * raw_full, m.cfg.activation, fcfg.beta1);
    const FilterResult fr = project(u_des_flat, states, g, fcfg);
    if (fr.qp_status != QPStatus::optimal) {
      out.filter_ok = false;
      return out;
    }
    out.epsilon = fr.epsilon;
    r = 0;
    for (long a = 0; a < n; ++a) {
      if (!pass.ctx.agent_valid[a]) continue;
      out.u.row(a) = fr.u.segment<kControlDim>(kControlDim * r).transpose();
      out.gamma(a) = g.gamma(r);
      ++r;
    }
  } catch (const ConvexityError&) {
    out.filter_ok = false;
  }
  return out;
}

// ---- ELBO ---------------------------------------------------------------------

ElboResult elbo_loss(const CVAEModel& m, const std::vector<SceneDatum>& batch,
                     const ElboOptions& opts, const FilterConfig& fcfg, Rng& rng,
                     Eigen::VectorXd* grad) {
  if (batch.empty()) throw InvalidInputError("elbo_loss: empty batch");
  if (!m.cfg.valid()) throw InvalidInputError("elbo_loss: invalid model config");

  ad::Tape tape;
  ParamBinding bind(tape, m.params);
  ElboResult res;
  bool degenerate = false;

  ad::Var total;
  long n_used = 0;
  double kl_sum = 0.0, nll_sum = 0.0, eps_sum = 0.0;
  long eps_count = 0;

  for (std::size_t d = 0; d < batch.size(); ++d) {
    const SceneDatum& datum = batch[d];
    ContextFeatures ctx = encode_context(bind, "enc", m.cfg.encoder, datum.seq);
    const long n = ctx.features.rows();
    const long n_valid = count_valid(ctx.agent_valid);
    if (n_valid == 0) {
      ++res.skipped;
      continue;
    }

    // KL and the posterior latent draw.
    ad::Var kl;
    ad::Var z;
    Eigen::MatrixXd gamma_noise;  // discrete decoder's per-agent draw
    if (m.cfg.latent == "gaussian") {
      LatentGaussianVar q = posterior_head(bind, m.cfg, ctx, datum.u);
      LatentGaussianVar pr = prior_head(bind, m.cfg, ctx);
      kl = kl_gaussian_var(q, pr, ctx.agent_valid);
      Eigen::MatrixXd noise(n, m.cfg.d_z);
      for (long i = 0; i < noise.size(); ++i) noise(i / m.cfg.d_z, i % m.cfg.d_z) = rng.normal();
      z = reparam_sample_var(q, noise);
    } else {
      ad::Var ql = posterior_logits(bind, m.cfg, ctx, datum.u);
      ad::Var pl = prior_logits(bind, m.cfg, ctx);
      kl = kl_categorical_var(ql, pl, ctx.agent_valid);
      Eigen::MatrixXd gn(n, m.cfg.n_categories);
      for (long r2 = 0; r2 < gn.rows(); ++r2)
        for (long c = 0; c < gn.cols(); ++c) gn(r2, c) = rng.gumbel();
      z = gumbel_softmax_var(ql, opts.gumbel_tau, gn);
      gamma_noise.resize(n, 1);
      for (long r2 = 0; r2 < n; ++r2) gamma_noise(r2, 0) = rng.normal();
    }

    ad::Var dec = decode_gamma_var(bind, m.cfg, z, ctx);

    // Reconstruction sum of squares, via the filter for gamma decoders.
    ad::Var sumsq;
    double eps_here = -1.0;
    if (m.cfg.decoder_output == "direct_u") {
      Eigen::MatrixXd u_obs = batch[d].u;
      for (long a = 0; a < n; ++a)
        if (!ctx.agent_valid[a]) u_obs.row(a).setZero();
      ad::Var pred = tape.cmul(dec, row_mask(ctx.agent_valid, kControlDim));
      sumsq = tape.sum(tape.square(tape.sub(tape.constant(u_obs), pred)));
    } else {
      ad::Var raw;
      if (m.cfg.latent == "gaussian") {
        raw = dec;  // N x 1
      } else {
        ad::Var gmean = tape.block(dec, 0, 0, n, 1);
        ad::Var glv = tape.clamp(tape.block(dec, 0, 1, n, 1), kLogVarMin, kLogVarMax);
        raw = tape.add(gmean, tape.mul(tape.exp(tape.scale(glv, 0.5)), tape.constant(gamma_noise)));
      }
      ad::Var act = apply_activation_var(raw, m.cfg.activation, fcfg.beta1, ctx.agent_valid);
      const Eigen::MatrixXd sel = valid_select(ctx.agent_valid);
      ad::Var gamma_compact = tape.matmul(tape.constant(sel), act);

      Eigen::VectorXd u_des_flat(kControlDim * n_valid);
      Eigen::VectorXd u_obs_flat(kControlDim * n_valid);
      std::vector<AgentPhysState> states;
      states.reserve(n_valid);
      long r = 0;
      for (long a = 0; a < n; ++a) {
        if (!ctx.agent_valid[a]) continue;
        u_des_flat.segment<kControlDim>(kControlDim * r) = datum.u_des.row(a).transpose();
        u_obs_flat.segment<kControlDim>(kControlDim * r) = datum.u.row(a).transpose();
        states.push_back(datum.seq.current_states[a]);
        ++r;
      }

      ResponsibilityVector gamma;
      gamma.gamma = gamma_compact.value().col(0);
      FilterResult fr;
      try {
        fr = project(u_des_flat, states, gamma, fcfg);
        if (fr.qp_status != QPStatus::optimal)
          throw NumericError("filter QP did not converge");
      } catch (const std::runtime_error& e) {
        if (opts.skip_filter_failures) {
          ++res.skipped;
          continue;
        }
        throw NumericError(std::string(e.what()) + " (datum " + std::to_string(d) + ")");
      }
      eps_here = fr.epsilon;

      const int ig = gamma_compact.index();
      ad::Var u_node = tape.custom(
          Eigen::MatrixXd(fr.u), {gamma_compact},
          [fr, u_des_flat, gamma, fcfg, ig, &degenerate](ad::Tape& t, const Eigen::MatrixXd& g) {
            ProjectGrads pg = project_vjp(fr, u_des_flat, gamma, fcfg, g.col(0));
            if (pg.degenerate) degenerate = true;
            t.accumulate(ig, Eigen::MatrixXd(pg.dgamma));
          });
      sumsq = tape.sum(tape.square(tape.sub(tape.constant(Eigen::MatrixXd(u_obs_flat)), u_node)));
    }

    // Gaussian likelihood normalization over the valid control dims.
    const double m_dims = static_cast<double>(kControlDim * n_valid);
    ad::Var nll;
    if (m.cfg.recon.learn_sigma) {
      ad::Var ls = tape.clamp(bind["recon.log_sigma"], -5.0, 5.0);
      ad::Var quad = tape.scale(tape.mul(sumsq, tape.exp(tape.scale(ls, -2.0))), 0.5);
      nll = tape.add(quad, tape.add_const(tape.scale(ls, m_dims), 0.5 * m_dims * kLog2Pi));
    } else {
      const double s2 = m.cfg.recon.sigma * m.cfg.recon.sigma;
      nll = tape.add_const(tape.scale(sumsq, 0.5 / s2),
                           m_dims * (std::log(m.cfg.recon.sigma) + 0.5 * kLog2Pi));
    }

    ad::Var datum_loss = tape.add(tape.scale(kl, opts.beta_kl), nll);
    total = total.defined() ? tape.add(total, datum_loss) : datum_loss;
    ++n_used;
    kl_sum += kl.value()(0, 0);
    nll_sum += nll.value()(0, 0);
    if (eps_here >= 0.0) {
      eps_sum += eps_here;
      ++eps_count;
    }
  }

  if (n_used == 0) throw NumericError("elbo_loss: every datum in the batch was skipped");
  ad::Var loss = tape.scale(total, 1.0 / static_cast<double>(n_used));

  if (grad) {
    tape.backward(loss);
    grad->setZero(m.params.size());
    bind.collect_grads(*grad);
  }

  res.loss = loss.value()(0, 0);
  res.kl = kl_sum / static_cast<double>(n_used);
  res.nll = nll_sum / static_cast<double>(n_used);
  res.mean_epsilon = eps_count > 0 ? eps_sum / static_cast<double>(eps_count) : 0.0;
  res.degenerate_vjp = degenerate;
  return res;
}

}  // namespace resp
