#include <cmath>
#include <vector>

#include <doctest.h>

#include "respalloc/cvae.hpp"
#include "respalloc/errors.hpp"
#include "respalloc/rng.hpp"

using namespace resp;
using ad::Mat;

namespace {

CVAEConfig small_config() {
  CVAEConfig cfg;
  cfg.encoder.kind = "mlp";
  cfg.encoder.d_model = 8;
  cfg.encoder.mlp_hidden = {12};
  cfg.encoder.n_max = 3;
  cfg.encoder.t_max = 2;
  cfg.d_z = 2;
  cfg.head_hidden = 8;
  cfg.u_embed = 8;
  return cfg;
}

SceneSequence small_scene(Rng& rng, long n_agents, long n_max, long t_max) {
  std::vector<AgentTrack> tracks;
  for (long i = 0; i < n_agents; ++i) {
    AgentTrack tr;
    tr.agent_id = i;
    tr.steps.resize(t_max);
    tr.present.assign(t_max, 1);
    for (long t = 0; t < t_max; ++t) {
      tr.steps[t].position = {rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)};
      tr.steps[t].velocity = {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
      tr.steps[t].heading = rng.uniform(-3.0, 3.0);
    }
    tracks.push_back(tr);
  }
  return flatten_scene(tracks, n_max);
}

Mat random_mat(Rng& rng, long r, long c, double lo = -1.0, double hi = 1.0) {
  Mat m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// KL(q||p) for one diagonal Gaussian row computed the long way.
double kl_row(const Eigen::VectorXd& mq, const Eigen::VectorXd& lq, const Eigen::VectorXd& mp,
              const Eigen::VectorXd& lp) {
  double kl = 0.0;
  for (long d = 0; d < mq.size(); ++d) {
    const double vq = std::exp(lq(d)), vp = std::exp(lp(d));
    kl += 0.5 * (lp(d) - lq(d) + (vq + (mq(d) - mp(d)) * (mq(d) - mp(d))) / vp - 1.0);
  }
  return kl;
}

}  // namespace

TEST_SUITE("cvae") {

TEST_CASE("kl_gaussian matches the closed form and is nonnegative") {
  Rng rng(81);
  const long d = 3;
  for (int trial = 0; trial < 200; ++trial) {
    LatentGaussian q, p;
    q.mean = random_mat(rng, 2, d, -2.0, 2.0);
    q.log_var = random_mat(rng, 2, d, -2.0, 2.0);
    p.mean = random_mat(rng, 2, d, -2.0, 2.0);
    p.log_var = random_mat(rng, 2, d, -2.0, 2.0);

    double expect = 0.0;
    for (long r = 0; r < 2; ++r)
      expect += kl_row(q.mean.row(r), q.log_var.row(r), p.mean.row(r), p.log_var.row(r));

    const double kl = kl_gaussian(q, p);
    CHECK(kl == doctest::Approx(expect).epsilon(1e-10));
    CHECK(kl >= 0.0);
  }
  // Zero iff equal.
  LatentGaussian g;
  g.mean = random_mat(rng, 3, d);
  g.log_var = random_mat(rng, 3, d);
  CHECK(kl_gaussian(g, g) == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
}

TEST_CASE("kl_gaussian agrees with a Monte Carlo estimate") {
  // KL = E_q[log q(z) - log p(z)] estimated by sampling; slow convergence, so
  // a loose tolerance and a single fixed pair.
  LatentGaussian q, p;
  q.mean = (Mat(1, 2) << 0.4, -0.3).finished();
  q.log_var = (Mat(1, 2) << -0.5, 0.2).finished();
  p.mean = (Mat(1, 2) << -0.1, 0.1).finished();
  p.log_var = (Mat(1, 2) << 0.3, -0.4).finished();

  Rng rng(82);
  const long n = 400000;
  double acc = 0.0;
  for (long i = 0; i < n; ++i) {
    double logq = 0.0, logp = 0.0;
    for (long dcol = 0; dcol < 2; ++dcol) {
      const double sq = std::exp(0.5 * q.log_var(0, dcol));
      const double z = q.mean(0, dcol) + sq * rng.normal();
      const double dq = (z - q.mean(0, dcol)) / sq;
      logq += -0.5 * dq * dq - 0.5 * q.log_var(0, dcol);
      const double sp = std::exp(0.5 * p.log_var(0, dcol));
      const double dp = (z - p.mean(0, dcol)) / sp;
      logp += -0.5 * dp * dp - 0.5 * p.log_var(0, dcol);
    }
    acc += logq - logp;
  }
  CHECK(kl_gaussian(q, p) == doctest::Approx(acc / n).epsilon(0.02));
}

TEST_CASE("tape KL matches the plain version and only counts valid agents") {
  Rng rng(83);
  LatentGaussian q, p;
  q.mean = random_mat(rng, 3, 2);
  q.log_var = random_mat(rng, 3, 2);
  p.mean = random_mat(rng, 3, 2);
  p.log_var = random_mat(rng, 3, 2);

  ad::Tape tape;
  LatentGaussianVar qv{tape.leaf(q.mean), tape.leaf(q.log_var)};
  LatentGaussianVar pv{tape.leaf(p.mean), tape.leaf(p.log_var)};

  const double all = kl_gaussian_var(qv, pv, {1, 1, 1}).value()(0, 0);
  CHECK(all == doctest::Approx(kl_gaussian(q, p)).epsilon(1e-12));

  const double partial = kl_gaussian_var(qv, pv, {1, 0, 1}).value()(0, 0);
  LatentGaussian q2, p2;
  q2.mean = Mat(2, 2);
  q2.mean << q.mean.row(0), q.mean.row(2);
  q2.log_var = Mat(2, 2);
  q2.log_var << q.log_var.row(0), q.log_var.row(2);
  p2.mean = Mat(2, 2);
  p2.mean << p.mean.row(0), p.mean.row(2);
  p2.log_var = Mat(2, 2);
  p2.log_var << p.log_var.row(0), p.log_var.row(2);
  CHECK(partial == doctest::Approx(kl_gaussian(q2, p2)).epsilon(1e-12));
}

TEST_CASE("reparameterization is exact") {
  Rng rng(84);
  LatentGaussian g;
  g.mean = random_mat(rng, 2, 3);
  g.log_var = random_mat(rng, 2, 3);
  const Mat noise = random_mat(rng, 2, 3, -2.0, 2.0);
  const Mat z = reparam_sample(g, noise);
  for (long i = 0; i < 2; ++i)
    for (long j = 0; j < 3; ++j)
      CHECK(z(i, j) ==
            doctest::Approx(g.mean(i, j) + std::exp(0.5 * g.log_var(i, j)) * noise(i, j)));

  ad::Tape tape;
  LatentGaussianVar gv{tape.leaf(g.mean), tape.leaf(g.log_var)};
  CHECK((reparam_sample_var(gv, noise).value() - z).norm() == doctest::Approx(0.0).scale(1.0));
}

TEST_CASE("gumbel softmax concentrates as temperature drops") {
  Rng rng(85);
  Mat logits(2, 4);
  logits << 2.0, 0.0, -1.0, 0.5, -0.3, 1.7, 0.2, 0.0;

  const Mat hot = gumbel_softmax_sample(logits, 0.05, rng);
  for (long r = 0; r < 2; ++r) {
    CHECK(hot.row(r).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(hot.row(r).maxCoeff() > 0.99);  // nearly one-hot
  }
  const Mat warm = gumbel_softmax_sample(logits, 5.0, rng);
  for (long r = 0; r < 2; ++r) {
    CHECK(warm.row(r).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(warm.row(r).maxCoeff() < 0.9);  // stays soft
  }

  // Empirical argmax frequencies follow the softmax probabilities.
  const long trials = 20000;
  Eigen::Vector4d counts = Eigen::Vector4d::Zero();
  for (long t = 0; t < trials; ++t) {
    const Mat s = gumbel_softmax_sample(logits.topRows(1), 0.05, rng);
    long arg;
    s.row(0).maxCoeff(&arg);
    counts(arg) += 1.0;
  }
  Eigen::Vector4d probs = (logits.row(0).array() - logits.row(0).maxCoeff()).exp();
  probs /= probs.sum();
  for (long kcat = 0; kcat < 4; ++kcat)
    CHECK(counts(kcat) / trials == doctest::Approx(probs(kcat)).epsilon(0.1).scale(1.0));
}

TEST_CASE("apply_activation_var matches the plain activation on valid rows") {
  Rng rng(86);
  const std::vector<char> valid{1, 1, 0};
  for (auto mode : {Activation::softmax, Activation::clip_zero, Activation::clip_neg_beta,
                    Activation::tanh}) {
    Mat raw = random_mat(rng, 3, 1, -2.0, 2.0);
    ad::Tape tape;
    const Mat got = apply_activation_var(tape.leaf(raw), mode, 0.1, valid).value();
    // Plain path on the two valid rows only (softmax normalizes over them).
    Eigen::VectorXd raw2(2);
    raw2 << raw(0, 0), raw(1, 0);
    const Eigen::VectorXd expect = apply_activation(raw2, mode, 0.1).gamma;
    CAPTURE(to_string(mode));
    CHECK(got(0, 0) == doctest::Approx(expect(0)).epsilon(1e-12));
    CHECK(got(1, 0) == doctest::Approx(expect(1)).epsilon(1e-12));
    // Only softmax couples rows, so only it needs the invalid row masked out
    // of the normalization; elementwise modes are cleaned up downstream.
    if (mode == Activation::softmax) CHECK(got(2, 0) == 0.0);
  }
}

TEST_CASE("model construction registers prior, posterior, decoder") {
  CVAEConfig cfg = small_config();
  CVAEModel m = make_cvae(cfg);
  CHECK(m.params.size() > 0);
  Rng rng(87);
  init_cvae(m, rng);
  CHECK(m.params.flat().allFinite());
  CHECK(m.params.flat().lpNorm<Eigen::Infinity>() > 0.0);

  CVAEConfig bad = cfg;
  bad.d_z = 0;
  CHECK_THROWS_AS(make_cvae(bad), InvalidInputError);
}

TEST_CASE("prior and posterior heads produce finite per-agent gaussians") {
  CVAEConfig cfg = small_config();
  CVAEModel m = make_cvae(cfg);
  Rng rng(88);
  init_cvae(m, rng);

  Rng scene_rng(89);
  SceneSequence seq = small_scene(scene_rng, 2, cfg.encoder.n_max, cfg.encoder.t_max);

  const LatentGaussian pr = prior(m, seq);
  REQUIRE(pr.mean.rows() == cfg.encoder.n_max);
  REQUIRE(pr.mean.cols() == cfg.d_z);
  CHECK(pr.mean.allFinite());
  CHECK(pr.log_var.maxCoeff() <= kLogVarMax);
  CHECK(pr.log_var.minCoeff() >= kLogVarMin);
  CHECK(pr.mean.row(2).norm() == 0.0);  // invalid agent zeroed

  const Mat u_obs = random_mat(scene_rng, cfg.encoder.n_max, 2);
  const LatentGaussian po = posterior(m, seq, u_obs);
  CHECK(po.mean.allFinite());
  // Posterior must actually use the observed controls.
  Mat u2 = u_obs;
  u2(0, 0) += 0.5;
  const LatentGaussian po2 = posterior(m, seq, u2);
  CHECK((po2.mean - po.mean).lpNorm<Eigen::Infinity>() > 0.0);
}

TEST_CASE("sample_gamma stays in bounds and is deterministic per rng state") {
  CVAEConfig cfg = small_config();
  cfg.activation = Activation::tanh;
  CVAEModel m = make_cvae(cfg);
  Rng rng(90);
  init_cvae(m, rng);

  Rng scene_rng(91);
  SceneSequence seq = small_scene(scene_rng, 2, cfg.encoder.n_max, cfg.encoder.t_max);
  FilterConfig fcfg;

  Rng s1(400), s2(400);
  const Mat a = sample_gamma(m, seq, 50, fcfg, s1);
  const Mat b = sample_gamma(m, seq, 50, fcfg, s2);
  REQUIRE(a.rows() == 50);
  REQUIRE(a.cols() == cfg.encoder.n_max);
  CHECK((a - b).norm() == 0.0);
  CHECK(a.col(2).norm() == 0.0);
  CHECK(a.leftCols(2).minCoeff() >= -fcfg.beta1 + kConvexityFloor - 1e-12);
  CHECK(a.leftCols(2).maxCoeff() <= 1.0);
  // Distinct rng state gives distinct draws.
  Rng s3(401);
  CHECK((sample_gamma(m, seq, 50, fcfg, s3) - a).norm() > 0.0);
}

TEST_CASE("sample_controls runs the projection and flags validity") {
  CVAEConfig cfg = small_config();
  CVAEModel m = make_cvae(cfg);
  Rng rng(92);
  init_cvae(m, rng);

  Rng scene_rng(93);
  SceneSequence seq = small_scene(scene_rng, 2, cfg.encoder.n_max, cfg.encoder.t_max);
  const Mat u_des = random_mat(scene_rng, cfg.encoder.n_max, 2);
  FilterConfig fcfg;

  Rng draw(94);
  const ControlSample cs = sample_controls(m, seq, u_des, fcfg, draw);
  CHECK(cs.filter_ok);
  CHECK(cs.u.allFinite());
  CHECK(cs.u.row(2).norm() == 0.0);
  CHECK(cs.u.cwiseAbs().maxCoeff() <= fcfg.u_bound + 1e-7);
  CHECK(cs.gamma.size() == cfg.encoder.n_max);

  CVAEConfig direct = cfg;
  direct.decoder_output = "direct_u";
  CVAEModel md = make_cvae(direct);
  Rng rng2(95);
  init_cvae(md, rng2);
  Rng draw2(96);
  const ControlSample du = sample_controls(md, seq, u_des, fcfg, draw2);
  CHECK(du.filter_ok);
  CHECK(du.epsilon == 0.0);
  CHECK(du.u.row(2).norm() == 0.0);
}

TEST_CASE("elbo gradient matches finite differences end to end") {
  // Microbatch through the full pipeline including the QP layer. FD on every
  // parameter is too slow, so probe a random subset of coordinates.
  CVAEConfig cfg = small_config();
  cfg.encoder.n_max = 2;
  CVAEModel m = make_cvae(cfg);
  Rng rng(97);
  init_cvae(m, rng);

  Rng scene_rng(98);
  SceneDatum datum;
  datum.seq = small_scene(scene_rng, 2, 2, cfg.encoder.t_max);
  // Keep the pair far apart so the active set is empty and stable under FD.
  datum.seq.tokens[datum.seq.flat_index(0, 1)].position = {-20.0, 0.0};
  datum.seq.tokens[datum.seq.flat_index(1, 1)].position = {20.0, 0.0};
  datum.seq.current_states[0].position = {-20.0, 0.0};
  datum.seq.current_states[1].position = {20.0, 0.0};
  datum.u = random_mat(scene_rng, 2, 2);
  datum.u_des = random_mat(scene_rng, 2, 2);

  FilterConfig fcfg;
  ElboOptions opts;
  opts.beta_kl = 0.7;

  Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.params.size());
  Rng fixed(1234);
  const ElboResult base = elbo_loss(m, {datum}, opts, fcfg, fixed, &grad);
  CHECK(base.skipped == 0);
  CHECK(std::isfinite(base.loss));
  CHECK(base.kl >= -1e-9);
  CHECK(grad.allFinite());
  CHECK(grad.norm() > 0.0);

  Rng pick(99);
  const double h = 1e-5;
  int tested = 0;
  for (int probe = 0; probe < 25; ++probe) {
    const long i = static_cast<long>(pick.below(static_cast<unsigned long>(m.params.size())));
    CVAEModel mp = m, mm = m;
    mp.params.flat()(i) += h;
    mm.params.flat()(i) -= h;
    Rng rp(1234), rm(1234);  // same noise draws as the analytic pass
    const double lp = elbo_loss(mp, {datum}, opts, fcfg, rp, nullptr).loss;
    const double lm = elbo_loss(mm, {datum}, opts, fcfg, rm, nullptr).loss;
    const double fd = (lp - lm) / (2.0 * h);
    if (std::abs(fd) < 1e-10 && std::abs(grad(i)) < 1e-10) continue;
    ++tested;
    CAPTURE(i);
    CHECK(std::abs(grad(i) - fd) / std::max(1.0, std::abs(fd)) < 1e-3);
  }
  CHECK(tested >= 10);
}

TEST_CASE("elbo loss is reproducible for a fixed rng state") {
  CVAEConfig cfg = small_config();
  CVAEModel m = make_cvae(cfg);
  Rng rng(100);
  init_cvae(m, rng);

  Rng scene_rng(101);
  SceneDatum datum;
  datum.seq = small_scene(scene_rng, 3, cfg.encoder.n_max, cfg.encoder.t_max);
  datum.u = random_mat(scene_rng, cfg.encoder.n_max, 2);
  datum.u_des = random_mat(scene_rng, cfg.encoder.n_max, 2);

  FilterConfig fcfg;
  Rng r1(55), r2(55);
  const ElboResult a = elbo_loss(m, {datum}, {}, fcfg, r1, nullptr);
  const ElboResult b = elbo_loss(m, {datum}, {}, fcfg, r2, nullptr);
  CHECK(a.loss == b.loss);
  CHECK(a.kl == b.kl);
  CHECK(a.nll == b.nll);
}

TEST_CASE("discrete latent pipeline produces a mixture over gamma") {
  CVAEConfig cfg = small_config();
  cfg.latent = "discrete";
  cfg.n_categories = 3;
  CVAEModel m = make_cvae(cfg);
  Rng rng(102);
  init_cvae(m, rng);

  Rng scene_rng(103);
  SceneSequence seq = small_scene(scene_rng, 2, cfg.encoder.n_max, cfg.encoder.t_max);
  const GammaGMM gmm = gamma_gmm(m, seq);
  REQUIRE(gmm.weight.rows() == cfg.encoder.n_max);
  REQUIRE(gmm.weight.cols() == 3);
  for (long a = 0; a < 2; ++a) {
    CHECK(gmm.weight.row(a).sum() == doctest::Approx(1.0).epsilon(1e-9));
    CHECK(gmm.weight.row(a).minCoeff() >= 0.0);
    CHECK(gmm.var.row(a).minCoeff() > 0.0);
  }
  CHECK(gmm.weight.row(2).sum() == 0.0);  // invalid agent

  // The discrete ELBO path also runs.
  SceneDatum datum;
  datum.seq = seq;
  datum.u = random_mat(scene_rng, cfg.encoder.n_max, 2);
  datum.u_des = random_mat(scene_rng, cfg.encoder.n_max, 2);
  FilterConfig fcfg;
  Rng r(104);
  Eigen::VectorXd grad = Eigen::VectorXd::Zero(m.params.size());
  const ElboResult res = elbo_loss(m, {datum}, {}, fcfg, r, &grad);
  CHECK(std::isfinite(res.loss));
  CHECK(res.kl >= -1e-9);
  CHECK(grad.allFinite());
  CHECK(grad.norm() > 0.0);
}

}  // TEST_SUITE
