// End-to-end acceptance checks for the responsibility-allocation stack.
// Each criterion prints exactly one PASS/FAIL line on stdout; progress for
// the slow model-training criteria goes to stderr. Run without arguments for
// all ten criteria, or pass criterion numbers to run a subset — the ctest
// registration groups them by runtime. Exit status is 0 iff every selected
// criterion passed.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "respalloc/barrier.hpp"
#include "respalloc/cvae.hpp"
#include "respalloc/datagen.hpp"
#include "respalloc/dynamics.hpp"
#include "respalloc/errors.hpp"
#include "respalloc/evaluation.hpp"
#include "respalloc/filter.hpp"
#include "respalloc/qp.hpp"
#include "respalloc/rng.hpp"
#include "respalloc/sequence.hpp"
#include "respalloc/training.hpp"

namespace fs = std::filesystem;
using namespace resp;
using Eigen::MatrixXd;
using Eigen::VectorXd;
using nlohmann::json;

namespace {

struct CheckFail : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& what) {
  if (!ok) throw CheckFail(what);
}

double now_s() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream ss;
  ss.precision(prec);
  ss << v;
  return ss.str();
}

void note(const std::string& msg) { std::cerr << "[acceptance] " << msg << "\n"; }

// ---------------------------------------------------------------------------
// criterion 1: QP solver vs a projected-gradient oracle

MatrixXd random_mat(Rng& rng, long r, long c, double lo = -1.0, double hi = 1.0) {
  MatrixXd m(r, c);
  for (long i = 0; i < r; ++i)
    for (long j = 0; j < c; ++j) m(i, j) = rng.uniform(lo, hi);
  return m;
}

// Random strictly convex QP with a guaranteed strictly feasible point.
QPProblem random_qp(Rng& rng, int n, int k) {
  QPProblem p;
  MatrixXd B = random_mat(rng, n, n);
  p.Q = B * B.transpose() + 0.3 * MatrixXd::Identity(n, n);
  p.q = random_mat(rng, n, 1);
  p.A = random_mat(rng, k, n);
  VectorXd x0 = random_mat(rng, n, 1);
  p.b = p.A * x0;
  for (int i = 0; i < k; ++i) p.b(i) += rng.uniform(0.05, 1.5);
  return p;
}

double objective(const QPProblem& p, const VectorXd& x) {
  return 0.5 * x.dot(p.Q * x) + p.q.dot(x);
}

// Accelerated projected gradient ascent on the dual; primal recovered as
// x = -Q^-1 (q + A'lam).
VectorXd dual_pg_solve(const QPProblem& p, int iters = 20000) {
  const Eigen::LLT<MatrixXd> llt(p.Q);
  const MatrixXd AQiAt = p.A * llt.solve(p.A.transpose());
  double L = 1e-12;
  if (p.k() > 0) {
    Eigen::SelfAdjointEigenSolver<MatrixXd> es(AQiAt);
    L = std::max(L, es.eigenvalues().maxCoeff());
  }
  VectorXd lam = VectorXd::Zero(p.k());
  VectorXd y = lam;
  double t = 1.0;
  for (int it = 0; it < iters; ++it) {
    const VectorXd grad = -p.A * llt.solve(p.q + p.A.transpose() * y) - p.b;
    VectorXd lam_next = (y + grad / L).cwiseMax(0.0);
    const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    y = lam_next + ((t - 1.0) / t_next) * (lam_next - lam);
    lam = lam_next;
    t = t_next;
  }
  return -llt.solve(p.q + p.A.transpose() * lam);
}

double kkt_residual(const QPProblem& p, const QPSolution& s) {
  double r = (p.Q * s.x + p.q + p.A.transpose() * s.lambda).lpNorm<Eigen::Infinity>();
  if (p.k() > 0) {
    const VectorXd slack = p.b - p.A * s.x;
    r = std::max(r, std::max(0.0, -slack.minCoeff()));
    r = std::max(r, std::max(0.0, -s.lambda.minCoeff()));
    r = std::max(r, s.lambda.cwiseProduct(slack).lpNorm<Eigen::Infinity>());
  }
  return r;
}

std::string criterion1() {
  const double t0 = now_s();
  Rng rng(41);
  double max_kkt = 0.0, max_gap = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(10));
    const int k = static_cast<int>(rng.below(16));
    const QPProblem p = random_qp(rng, n, k);
    const QPSolution sol = qp_solve(p);
    require(sol.status == QPStatus::optimal, "trial " + std::to_string(trial) + ": not optimal");
    const double res = kkt_residual(p, sol);
    require(res <= 1e-6,
            "trial " + std::to_string(trial) + ": kkt residual " + fmt(res));
    const double obj = objective(p, sol.x);
    const double obj_ref = objective(p, dual_pg_solve(p));
    const double gap = std::abs(obj - obj_ref) / std::max(1.0, std::abs(obj_ref));
    require(gap <= 1e-5, "trial " + std::to_string(trial) + ": objective gap " + fmt(gap));
    max_kkt = std::max(max_kkt, res);
    max_gap = std::max(max_gap, gap);
  }
  const double dt = now_s() - t0;
  require(dt < 10.0, "runtime " + fmt(dt) + " s exceeds 10 s");
  return "200 random QPs, max kkt " + fmt(max_kkt, 2) + ", max objective gap " + fmt(max_gap, 2);
}

// ---------------------------------------------------------------------------
// criterion 2: filter vjp vs central finite differences

std::vector<AgentPhysState> random_states(Rng& rng, int n, double spread) {
  std::vector<AgentPhysState> states(n);
  for (auto& s : states) {
    s.position = {rng.uniform(-spread, spread), rng.uniform(-spread, spread)};
    s.velocity = {rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)};
  }
  return states;
}

VectorXd random_vec(Rng& rng, long n, double lo, double hi) {
  VectorXd v(n);
  for (long i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

std::string criterion2() {
  const double t0 = now_s();
  Rng rng(42);
  const FilterConfig cfg;
  const double h = 1e-4;
  int checked = 0, with_active = 0, fully_inactive = 0;
  double worst = 0.0;
  for (int trial = 0; trial < 4000 && checked < 50; ++trial) {
    const int N = 2 + static_cast<int>(rng.below(3));
    // Alternate crowded and spread-out scenes so both active and inactive
    // CBF rows show up in the sample.
    auto states = random_states(rng, N, trial % 2 == 0 ? 4.0 : 25.0);
    const VectorXd u_des = random_vec(rng, 2 * N, -3.0, 3.0);
    ResponsibilityVector gamma{random_vec(rng, N, 0.15, 0.9)};

    FilterResult res;
    try {
      res = project(u_des, states, gamma, cfg);
    } catch (const NumericError&) {
      continue;
    }
    if (res.qp_status != QPStatus::optimal) continue;

    // Keep only instances with strict complementarity margins: a row whose
    // multiplier and slack are both small is ambiguous to classify and puts
    // the finite-difference probe astride an active-set change. The last row
    // (-eps <= 0) is special: the interior point leaves eps parked at
    // sqrt(mu / 2 beta2) when nothing binds, so judge it by regime instead —
    // either clearly parked near zero or clearly free.
    const VectorXd slack = res.problem.b - res.problem.A * res.solution.x;
    bool borderline = false;
    for (int i = 0; i + 1 < res.problem.k(); ++i)
      if (res.solution.lambda(i) < 1e-2 && slack(i) < 1e-2) borderline = true;
    if (res.epsilon > 1e-4 && res.epsilon < 1e-2) borderline = true;
    if (borderline) continue;

    const VectorXd upstream = random_vec(rng, 2 * N, -1.0, 1.0);
    const ProjectGrads g = project_vjp(res, u_des, gamma, cfg, upstream);
    if (g.degenerate) continue;

    bool cbf_active = false;
    const int n_pairs = N * (N - 1) / 2;
    for (int i = 0; i < n_pairs; ++i)
      if (res.solution.lambda(i) > 1e-3) cbf_active = true;
    (cbf_active ? with_active : fully_inactive) += 1;

    bool ok = true;
    for (int i = 0; i < N && ok; ++i) {
      ResponsibilityVector gp = gamma, gm = gamma;
      gp.gamma(i) += h;
      gm.gamma(i) -= h;
      FilterResult rp, rm;
      try {
        rp = project(u_des, states, gp, cfg);
        rm = project(u_des, states, gm, cfg);
      } catch (const NumericError&) {
        ok = false;
        break;
      }
      if (rp.qp_status != QPStatus::optimal || rm.qp_status != QPStatus::optimal) {
        ok = false;
        break;
      }
      const double fd = (upstream.dot(rp.u) - upstream.dot(rm.u)) / (2.0 * h);
      const double rel = std::abs(g.dgamma(i) - fd) / std::max(1.0, std::abs(fd));
      worst = std::max(worst, rel);
      require(rel < 1e-3, "trial " + std::to_string(trial) + " gamma[" + std::to_string(i) +
                              "]: vjp " + fmt(g.dgamma(i)) + " vs fd " + fmt(fd));
    }
    if (ok) ++checked;
  }
  require(checked >= 50, "only " + std::to_string(checked) + " usable instances");
  require(with_active >= 10, "only " + std::to_string(with_active) + " instances with active rows");
  require(fully_inactive >= 10,
          "only " + std::to_string(fully_inactive) + " fully inactive instances");
  const double dt = now_s() - t0;
  require(dt < 30.0, "runtime " + fmt(dt) + " s exceeds 30 s");
  return std::to_string(checked) + " instances (" + std::to_string(with_active) + " active / " +
         std::to_string(fully_inactive) + " inactive), worst rel err " + fmt(worst, 2);
}

// ---------------------------------------------------------------------------
// criterion 3: closed-loop forward invariance on a head-on corridor

std::string criterion3() {
  FilterConfig cfg;
  cfg.beta2 = 1e7;  // push the slack to the 1e-6 tolerance scale
  std::vector<AgentPhysState> states(2);
  states[0] = {Eigen::Vector2d(-5.0, 0.0), Eigen::Vector2d(2.0, 0.0)};
  states[1] = {Eigen::Vector2d(5.0, 0.0), Eigen::Vector2d(-2.0, 0.0)};
  ResponsibilityVector gamma{(VectorXd(2) << 0.5, 0.5).finished()};
  VectorXd u_des(4);
  u_des << 1.0, 0.0, -1.0, 0.0;  // keep accelerating toward each other

  const double b0 = barrier_value(relative_state(states[0], states[1]), cfg.barrier);
  require(b0 > 0.0, "start not strictly feasible");

  const double dt = 0.05;
  double min_b = b0, max_eps = 0.0, min_dist = 1e9;
  for (int step_i = 0; step_i < 400; ++step_i) {
    const FilterResult fr = project(u_des, states, gamma, cfg);
    require(fr.qp_status == QPStatus::optimal, "step " + std::to_string(step_i) + ": filter QP");
    max_eps = std::max(max_eps, fr.epsilon);
    require(fr.epsilon <= 1e-6,
            "step " + std::to_string(step_i) + ": epsilon " + fmt(fr.epsilon));
    for (int a = 0; a < 2; ++a) {
      Control u;
      u.acceleration = fr.u.segment<2>(2 * a);
      states[a] = step(states[a], u, dt);
    }
    const double b = barrier_value(relative_state(states[0], states[1]), cfg.barrier);
    min_b = std::min(min_b, b);
    min_dist = std::min(min_dist, (states[0].position - states[1].position).norm());
    require(b >= -1e-6, "step " + std::to_string(step_i) + ": barrier " + fmt(b));
  }
  return "400 steps, min barrier " + fmt(min_b, 4) + ", max slack " + fmt(max_eps, 2) +
         ", min separation " + fmt(min_dist, 4) + " m";
}

// ---------------------------------------------------------------------------
// criterion 8: encoder permutation / padding / masking properties

AgentTrack make_track(Rng& rng, long id, long t_max, int type = 0) {
  AgentTrack tr;
  tr.agent_id = id;
  tr.agent_type = type;
  tr.steps.resize(t_max);
  tr.present.assign(t_max, 1);
  Eigen::Vector2d p{rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)};
  Eigen::Vector2d v{rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)};
  for (long t = 0; t < t_max; ++t) {
    tr.steps[t].agent_type = type;
    tr.steps[t].position = p + 0.1 * t * v;
    tr.steps[t].velocity = v;
    tr.steps[t].heading = std::atan2(v.y(), v.x());
  }
  return tr;
}

MatrixXd run_encoder(const EncoderConfig& cfg, const ParamStore& store, const SceneSequence& seq,
                     std::vector<char>* valid_out = nullptr) {
  ad::Tape tape;
  ParamBinding params(tape, store);
  ContextFeatures ctx = encode_context(params, "enc", cfg, seq);
  if (valid_out) *valid_out = ctx.agent_valid;
  return ctx.features.value();
}

std::string criterion8() {
  EncoderConfig cfg;
  cfg.d_model = 16;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.ff_hidden = 16;
  cfg.n_max = 4;
  cfg.t_max = 3;

  ParamStore store;
  register_encoder(store, "enc", cfg);
  Rng init_rng(81);
  store.init_params(init_rng);

  // Permutation equivariance.
  Rng scene_rng(82);
  std::vector<AgentTrack> tracks;
  for (long i = 0; i < 3; ++i) tracks.push_back(make_track(scene_rng, 10 + i, cfg.t_max));
  const MatrixXd base = run_encoder(cfg, store, flatten_scene(tracks, cfg.n_max));
  std::vector<AgentTrack> swapped{tracks[2], tracks[1], tracks[0]};
  const MatrixXd perm = run_encoder(cfg, store, flatten_scene(swapped, cfg.n_max));
  double perm_err = (perm.row(0) - base.row(2)).lpNorm<Eigen::Infinity>();
  perm_err = std::max(perm_err, (perm.row(1) - base.row(1)).lpNorm<Eigen::Infinity>());
  perm_err = std::max(perm_err, (perm.row(2) - base.row(0)).lpNorm<Eigen::Infinity>());
  require(perm_err <= 1e-6, "permutation equivariance error " + fmt(perm_err));

  // Padding invariance: widening n_max must not move outputs at all.
  EncoderConfig wide = cfg;
  wide.n_max = 7;
  ParamStore store_wide;
  register_encoder(store_wide, "enc", wide);
  require(store_wide.size() == store.size(), "encoder params depend on n_max");
  store_wide.flat() = store.flat();
  std::vector<char> valid;
  const MatrixXd out_wide = run_encoder(wide, store_wide, flatten_scene(tracks, 7), &valid);
  const double pad_err = (out_wide.topRows(3) - base.topRows(3)).lpNorm<Eigen::Infinity>();
  require(pad_err == 0.0, "padding changed outputs by " + fmt(pad_err));
  for (long a = 3; a < 7; ++a) {
    require(!valid[a], "padding slot marked valid");
    require(out_wide.row(a).lpNorm<Eigen::Infinity>() == 0.0, "padding row not zero");
  }

  // Masked-token independence: poisoned invalid slots must not leak.
  std::vector<AgentTrack> gap_tracks{tracks[0], tracks[1]};
  gap_tracks[1].present[0] = 0;
  SceneSequence seq = flatten_scene(gap_tracks, cfg.n_max);
  const MatrixXd clean = run_encoder(cfg, store, seq);
  SceneSequence dirty = seq;
  for (long a = 0; a < cfg.n_max; ++a) {
    for (long t = 0; t < cfg.t_max; ++t) {
      if (dirty.is_valid(a, t)) continue;
      AgentToken& tok = dirty.tokens[dirty.flat_index(a, t)];
      tok.position = {1e6, -1e6};
      tok.velocity = {999.0, 999.0};
      tok.heading = 3.0;
      tok.agent_type = 9;
    }
  }
  const MatrixXd poisoned = run_encoder(cfg, store, dirty);
  const double leak = (poisoned - clean).lpNorm<Eigen::Infinity>();
  require(leak == 0.0, "masked tokens leaked " + fmt(leak));

  return "permutation err " + fmt(perm_err, 2) + ", padding/masking exactly invariant";
}

// ---------------------------------------------------------------------------
// shared corridor bundle: paper-config model trained on 10k bimodal scenes

CVAEConfig corridor_model_config() {
  CVAEConfig mc;
  mc.encoder.kind = "mlp";
  mc.encoder.mlp_hidden = {16, 16, 16};
  mc.encoder.activation = "tanh";
  mc.encoder.d_model = 16;
  mc.encoder.n_max = 2;
  mc.encoder.t_max = 1;
  mc.d_z = 2;
  mc.decoder_output = "gamma";
  mc.activation = Activation::tanh;
  mc.head_hidden = 16;
  mc.u_embed = 16;
  return mc;
}

struct CorridorBundle {
  CorridorConfig ccfg;
  FilterConfig fcfg;
  Dataset train;
  CVAEModel model;
  TrainResult hist;
};

const CorridorBundle& corridor_bundle() {
  static std::unique_ptr<CorridorBundle> bundle;
  if (bundle) return *bundle;
  bundle = std::make_unique<CorridorBundle>();
  note("generating 10k corridor scenes...");
  Rng gen_rng(1001);
  bundle->train = gen_corridor_dataset(bundle->ccfg, 10000, bundle->fcfg, gen_rng);

  bundle->model = make_cvae(corridor_model_config());
  Rng init_rng(1002);
  init_cvae(bundle->model, init_rng);
  TrainConfig tcfg;
  tcfg.learning_rate = 1e-3;
  tcfg.epochs = 40;
  tcfg.batch_size = 32;
  tcfg.seed = 1003;
  note("training the corridor model (40 epochs over 10k scenes)...");
  const double t0 = now_s();
  Rng train_rng(1004);
  bundle->hist = train(bundle->model, bundle->train, tcfg, bundle->fcfg, train_rng);
  note("corridor training done in " + fmt(now_s() - t0, 4) + " s, final loss " +
       fmt(bundle->hist.history.back().loss, 4));
  return *bundle;
}

// One conditioning scene shaped exactly like the generator's output.
SceneSequence make_corridor_scene(double gap, double v0, double v1) {
  std::vector<AgentTrack> tracks(2);
  for (int a = 0; a < 2; ++a) {
    AgentTrack& tr = tracks[a];
    tr.agent_id = a;
    tr.agent_type = 0;
    AgentToken tok;
    tok.position = {a == 0 ? -gap / 2.0 : gap / 2.0, 0.0};
    tok.velocity = {a == 0 ? v0 : -v1, 0.0};
    tok.heading = a == 0 ? 0.0 : M_PI;
    tr.steps = {tok};
    tr.present = {1};
  }
  return flatten_scene(tracks, 2);
}

// Plain 1-D 2-means with min/max initialization.
struct KMeans2 {
  double lo_center = 0.0, hi_center = 0.0;
  double lo_weight = 0.0;
};

KMeans2 kmeans2(const std::vector<double>& vals) {
  double c0 = *std::min_element(vals.begin(), vals.end());
  double c1 = *std::max_element(vals.begin(), vals.end());
  for (int it = 0; it < 100; ++it) {
    double s0 = 0.0, s1 = 0.0;
    long n0 = 0, n1 = 0;
    for (double v : vals) {
      if (std::abs(v - c0) <= std::abs(v - c1)) {
        s0 += v;
        ++n0;
      } else {
        s1 += v;
        ++n1;
      }
    }
    if (n0 == 0 || n1 == 0) break;
    const double next0 = s0 / n0, next1 = s1 / n1;
    if (next0 == c0 && next1 == c1) break;
    c0 = next0;
    c1 = next1;
  }
  KMeans2 out;
  out.lo_center = std::min(c0, c1);
  out.hi_center = std::max(c0, c1);
  long n_lo = 0;
  for (double v : vals)
    if (std::abs(v - out.lo_center) <= std::abs(v - out.hi_center)) ++n_lo;
  out.lo_weight = static_cast<double>(n_lo) / static_cast<double>(vals.size());
  return out;
}

const double kGapSlices[5] = {9.0, 11.0, 13.0, 15.0, 17.0};

std::string criterion4() {
  const CorridorBundle& b = corridor_bundle();
  Rng rng(2001);
  double worst_center = 0.0;
  std::string weights;
  for (double gap : kGapSlices) {
    const SceneSequence scene = make_corridor_scene(gap, 2.5, 2.5);
    const MatrixXd draws = sample_gamma(b.model, scene, 1000, b.fcfg, rng);
    std::vector<double> vals(draws.rows());
    for (long i = 0; i < draws.rows(); ++i) vals[i] = draws(i, 0);
    const KMeans2 km = kmeans2(vals);

    // Ground truth: agent 0's responsibility mode means after the x-skew.
    const double truth_hi = b.ccfg.skewed_mean(0, gap).x();
    const double truth_lo = b.ccfg.skewed_mean(1, gap).x();
    const double err_hi = std::abs(km.hi_center - truth_hi);
    const double err_lo = std::abs(km.lo_center - truth_lo);
    worst_center = std::max(worst_center, std::max(err_hi, err_lo));
    require(err_hi <= 0.15, "gap " + fmt(gap, 2) + ": high cluster " + fmt(km.hi_center) +
                                " vs truth " + fmt(truth_hi));
    require(err_lo <= 0.15, "gap " + fmt(gap, 2) + ": low cluster " + fmt(km.lo_center) +
                                " vs truth " + fmt(truth_lo));
    require(km.lo_weight >= 0.3 && km.lo_weight <= 0.7,
            "gap " + fmt(gap, 2) + ": cluster weight " + fmt(km.lo_weight));
    weights += (weights.empty() ? "" : "/") + fmt(km.lo_weight, 2);
  }
  return "5 slices, worst center error " + fmt(worst_center, 2) + ", low-mode weights " + weights;
}

std::string criterion5() {
  const CorridorBundle& b = corridor_bundle();
  double worst_ratio = 0.0;
  for (int si = 0; si < 5; ++si) {
    const double gap = kGapSlices[si];
    CorridorConfig slice_cfg = b.ccfg;
    slice_cfg.x_gap_min = gap;
    slice_cfg.x_gap_max = gap;
    Rng truth_rng(3001 + si);
    const Dataset slice = gen_corridor_dataset(slice_cfg, 400, b.fcfg, truth_rng);

    std::vector<double> truth, model_vals;
    Rng model_rng(3101 + si);
    for (const SceneDatum& d : slice.data) {
      truth.push_back(d.u(0, 0));
      const ControlSample cs = sample_controls(b.model, d.seq, d.u_des, b.fcfg, model_rng);
      if (cs.filter_ok) model_vals.push_back(cs.u(0, 0));
    }
    require(model_vals.size() >= 300, "gap " + fmt(gap, 2) + ": only " +
                                          std::to_string(model_vals.size()) + " usable samples");
    const double w1 = wasserstein1(truth, model_vals);
    const double spread = iqr(truth);
    worst_ratio = std::max(worst_ratio, w1 / spread);
    require(w1 <= 0.15 * spread, "gap " + fmt(gap, 2) + ": W1 " + fmt(w1) + " vs 0.15*iqr " +
                                     fmt(0.15 * spread));
  }
  return "5 slices, worst W1/iqr " + fmt(worst_ratio, 2) + " (limit 0.15)";
}

// ---------------------------------------------------------------------------
// criterion 9: ELBO machinery

SceneDatum far_apart_datum() {
  std::vector<AgentTrack> tracks(2);
  for (int a = 0; a < 2; ++a) {
    AgentTrack& tr = tracks[a];
    tr.agent_id = a;
    AgentToken tok;
    tok.position = {a == 0 ? -20.0 : 20.0, 0.0};
    tok.velocity = {a == 0 ? 1.0 : -1.0, 0.0};
    tok.heading = a == 0 ? 0.0 : M_PI;
    tr.steps = {tok};
    tr.present = {1};
  }
  SceneDatum d;
  d.seq = flatten_scene(tracks, 2);
  d.u.resize(2, 2);
  d.u << 0.3, 0.1, -0.2, 0.05;
  d.u_des.resize(2, 2);
  d.u_des << 0.5, 0.0, -0.5, 0.0;
  return d;
}

std::string criterion9() {
  // (a) KL nonnegativity, zero exactly on equal parameters.
  Rng rng(6001);
  long zero_count = 0;
  for (long i = 0; i < 100000; ++i) {
    LatentGaussian q, p;
    q.mean = random_mat(rng, 1, 4, -2.0, 2.0);
    q.log_var = random_mat(rng, 1, 4, -2.0, 2.0);
    if (rng.uniform() < 0.1) {
      p = q;
    } else {
      p.mean = random_mat(rng, 1, 4, -2.0, 2.0);
      p.log_var = random_mat(rng, 1, 4, -2.0, 2.0);
    }
    const double kl = kl_gaussian(q, p);
    require(kl >= 0.0, "kl " + fmt(kl) + " < 0 at pair " + std::to_string(i));
    const double diff = std::max((q.mean - p.mean).lpNorm<Eigen::Infinity>(),
                                 (q.log_var - p.log_var).lpNorm<Eigen::Infinity>());
    if (diff <= 1e-9) {
      require(kl == 0.0, "equal pair gave kl " + fmt(kl));
      ++zero_count;
    } else {
      require(kl > 0.0, "distinct pair gave kl " + fmt(kl));
    }
  }
  require(zero_count > 5000, "too few equal pairs sampled");

  // (b) end-to-end elbo gradient vs finite differences on a 2-agent batch.
  CVAEModel m = make_cvae(corridor_model_config());
  Rng init_rng(6002);
  init_cvae(m, init_rng);
  const std::vector<SceneDatum> batch{far_apart_datum()};
  const FilterConfig fcfg;
  ElboOptions opts;
  opts.beta_kl = 0.7;

  VectorXd grad;
  {
    Rng eval_rng(1234);
    elbo_loss(m, batch, opts, fcfg, eval_rng, &grad);
  }
  const double h = 1e-5;
  Rng probe_rng(6003);
  int compared = 0;
  double worst_rel = 0.0;
  for (int probe = 0; probe < 40 && compared < 25; ++probe) {
    const long idx = static_cast<long>(probe_rng.below(m.params.size()));
    const double keep = m.params.flat()(idx);
    m.params.flat()(idx) = keep + h;
    Rng rp(1234);
    const double lp = elbo_loss(m, batch, opts, fcfg, rp).loss;
    m.params.flat()(idx) = keep - h;
    Rng rm(1234);
    const double lm = elbo_loss(m, batch, opts, fcfg, rm).loss;
    m.params.flat()(idx) = keep;
    const double fd = (lp - lm) / (2.0 * h);
    if (std::abs(fd) < 1e-6) continue;
    ++compared;
    const double rel = std::abs(grad(idx) - fd) / std::max(std::abs(fd), std::abs(grad(idx)));
    worst_rel = std::max(worst_rel, rel);
    require(rel <= 1e-3, "param " + std::to_string(idx) + ": grad " + fmt(grad(idx)) +
                             " vs fd " + fmt(fd));
  }
  require(compared >= 10, "only " + std::to_string(compared) + " gradient probes compared");

  // (c) the shared corridor run must at least halve its training loss.
  const CorridorBundle& b = corridor_bundle();
  const double first = b.hist.history.front().loss;
  const double last = b.hist.history.back().loss;
  require(last < 0.5 * first,
          "loss " + fmt(first) + " -> " + fmt(last) + " did not halve");

  return "kl >= 0 on 1e5 pairs, elbo fd worst rel " + fmt(worst_rel, 2) + ", loss " +
         fmt(first, 3) + " -> " + fmt(last, 3);
}

// ---------------------------------------------------------------------------
// criterion 10: deterministic baseline vs CVAE reconstruction

// Mean over data and posterior draws of the squared control reconstruction
// error, normalized like det_loss (sum over valid agents, mean over samples).
double cvae_posterior_recon(const CVAEModel& m, const std::vector<SceneDatum>& data,
                            const FilterConfig& fcfg, long draws, Rng& rng) {
  double total = 0.0;
  long used = 0;
  for (const SceneDatum& datum : data) {
    const LatentGaussian q = posterior(m, datum.seq, datum.u);
    const long n = datum.seq.n_max;
    std::vector<long> valid;
    for (long a = 0; a < n; ++a)
      if (datum.seq.agent_valid(a)) valid.push_back(a);
    if (valid.empty()) continue;
    VectorXd u_des_flat(2 * static_cast<long>(valid.size()));
    VectorXd u_obs_flat(2 * static_cast<long>(valid.size()));
    std::vector<AgentPhysState> states;
    for (std::size_t r = 0; r < valid.size(); ++r) {
      u_des_flat.segment<2>(2 * r) = datum.u_des.row(valid[r]).transpose();
      u_obs_flat.segment<2>(2 * r) = datum.u.row(valid[r]).transpose();
      states.push_back(datum.seq.current_states[valid[r]]);
    }
    for (long k = 0; k < draws; ++k) {
      MatrixXd noise(n, m.cfg.d_z);
      for (long i = 0; i < noise.size(); ++i) noise(i) = rng.normal();
      const MatrixXd z = reparam_sample(q, noise);
      const MatrixXd raw = decode_gamma(m, z, datum.seq);
      VectorXd raw_compact(valid.size());
      for (std::size_t r = 0; r < valid.size(); ++r) raw_compact(r) = raw(valid[r], 0);
      FilterResult fr;
      try {
        const ResponsibilityVector gamma =
            apply_activation(raw_compact, m.cfg.activation, fcfg.beta1);
        fr = project(u_des_flat, states, gamma, fcfg);
      } catch (const std::runtime_error&) {
        continue;
      }
      if (fr.qp_status != QPStatus::optimal) continue;
      total += (u_obs_flat - fr.u).squaredNorm();
      ++used;
    }
  }
  require(used > 0, "no usable posterior reconstructions");
  return total / static_cast<double>(used);
}

std::string criterion10() {
  const CorridorBundle& b = corridor_bundle();

  DetModel det = make_det(corridor_model_config());
  Rng det_init(7001);
  init_det(det, det_init);
  TrainConfig tcfg;
  tcfg.learning_rate = 1e-3;
  tcfg.epochs = 15;
  tcfg.batch_size = 32;
  tcfg.seed = 7002;
  note("training the deterministic baseline (15 epochs)...");
  Rng det_rng(7003);
  train_deterministic(det, b.train, tcfg, b.fcfg, det_rng);

  Rng eval_rng(7004);
  const Dataset eval_ds = gen_corridor_dataset(b.ccfg, 1000, b.fcfg, eval_rng);

  // Same normalization on both sides: mean over samples of the per-scene
  // squared error summed across agents.
  double det_total = 0.0;
  long det_used = 0;
  for (std::size_t i = 0; i < eval_ds.data.size(); i += 100) {
    const std::size_t hi = std::min(eval_ds.data.size(), i + 100);
    const std::vector<SceneDatum> chunk(eval_ds.data.begin() + i, eval_ds.data.begin() + hi);
    const DetLossResult r = det_loss(det, chunk, b.fcfg, true);
    const long used = static_cast<long>(chunk.size()) - r.skipped;
    det_total += r.loss * static_cast<double>(used);
    det_used += used;
  }
  const double det_err = det_total / static_cast<double>(det_used);

  Rng cvae_rng(7005);
  const double cvae_err = cvae_posterior_recon(b.model, eval_ds.data, b.fcfg, 8, cvae_rng);

  require(det_err > cvae_err, "deterministic " + fmt(det_err) + " not above cvae " +
                                  fmt(cvae_err));
  return "recon mse: deterministic " + fmt(det_err, 3) + " > cvae posterior " + fmt(cvae_err, 3);
}

// ---------------------------------------------------------------------------
// criteria 6/7: intersection baselines and the CLI ablation sweep

struct IntersectionBundle {
  IntersectionConfig icfg;
  FilterConfig fcfg;
  Dataset train, test;
  CVAEModel resp, direct;
};

const IntersectionBundle& intersection_bundle() {
  static std::unique_ptr<IntersectionBundle> bundle;
  if (bundle) return *bundle;
  bundle = std::make_unique<IntersectionBundle>();
  note("generating the intersection dataset (48 episodes)...");
  Rng gen_rng(8001);
  const Dataset all = gen_intersection_dataset(bundle->icfg, 48, gen_rng);
  Rng split_rng(8002);
  std::tie(bundle->train, bundle->test) = split_by_episode(all, 0.2, split_rng);
  note("train " + std::to_string(bundle->train.data.size()) + " / test " +
       std::to_string(bundle->test.data.size()) + " scenes");

  CVAEConfig mc = corridor_model_config();
  mc.encoder.n_max = bundle->icfg.max_agents;
  mc.encoder.t_max = bundle->icfg.t_history;

  TrainConfig tcfg;
  tcfg.learning_rate = 1e-3;
  tcfg.epochs = 12;
  tcfg.batch_size = 32;

  bundle->resp = make_cvae(mc);
  Rng resp_init(8003);
  init_cvae(bundle->resp, resp_init);
  tcfg.seed = 8004;
  note("training the responsibility model (12 epochs)...");
  Rng resp_rng(8005);
  train(bundle->resp, bundle->train, tcfg, bundle->fcfg, resp_rng);

  CVAEConfig dcfg = mc;
  dcfg.decoder_output = "direct_u";
  bundle->direct = make_cvae(dcfg);
  Rng direct_init(8006);
  init_cvae(bundle->direct, direct_init);
  tcfg.seed = 8007;
  note("training the direct-u model (12 epochs)...");
  Rng direct_rng(8008);
  train(bundle->direct, bundle->train, tcfg, bundle->fcfg, direct_rng);
  return *bundle;
}

std::string criterion6() {
  const IntersectionBundle& b = intersection_bundle();
  const DesiredPolicy policy;  // matches the generator's speed feedback
  RolloutConfig rcfg;
  rcfg.horizon = 10;  // 1 s at 10 Hz
  rcfg.dt = b.icfg.dt;
  rcfg.n_samples = 6;

  std::vector<NamedModel> models{
      {"direct_u", &b.direct}, {"resp_tanh", &b.resp}, {"u_desired", nullptr}};
  std::string summary;
  for (std::uint64_t seed : {901ull, 902ull, 903ull}) {
    const std::vector<MetricRow> rows =
        compare_baselines(b.test, models, policy, rcfg, b.fcfg, {seed});
    std::map<std::string, MetricRow> by_name;
    for (const MetricRow& r : rows) by_name[r.name] = r;
    const double ade_direct = by_name.at("direct_u").ade_mean;
    const double ade_resp = by_name.at("resp_tanh").ade_mean;
    const double ade_des = by_name.at("u_desired").ade_mean;
    const double miss_resp = by_name.at("resp_tanh").miss_mean;
    const double miss_des = by_name.at("u_desired").miss_mean;
    require(ade_direct <= ade_resp, "seed " + std::to_string(seed) + ": ade direct " +
                                        fmt(ade_direct) + " > resp " + fmt(ade_resp));
    require(ade_resp < ade_des, "seed " + std::to_string(seed) + ": ade resp " + fmt(ade_resp) +
                                    " !< u_desired " + fmt(ade_des));
    require(miss_resp < miss_des, "seed " + std::to_string(seed) + ": miss resp " +
                                      fmt(miss_resp) + " !< u_desired " + fmt(miss_des));
    summary += (summary.empty() ? "" : "; ") + std::string("seed ") + std::to_string(seed) +
               " ade " + fmt(ade_direct, 3) + " <= " + fmt(ade_resp, 3) + " < " + fmt(ade_des, 3);
  }
  return summary;
}

int run_cli(const fs::path& work, const std::string& args, std::string* output = nullptr) {
  static int call_no = 0;
  const fs::path log = work / ("log_" + std::to_string(call_no++) + ".txt");
  const std::string cmd =
      std::string(RESPALLOC_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int rc = std::system(cmd.c_str());
  if (output) {
    std::ifstream in(log);
    std::stringstream ss;
    ss << in.rdbuf();
    *output = ss.str();
  }
  require(rc != -1, "std::system failed");
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -2;
}

void write_json_file(const fs::path& p, const json& j) {
  std::ofstream out(p);
  out << j.dump(2) << '\n';
}

std::string criterion7() {
  const fs::path work = fs::temp_directory_path() / "respalloc_acceptance_c7";
  fs::remove_all(work);
  fs::create_directories(work);

  json base = {
      {"dataset", "intersection"},
      {"intersection_episodes", 8},
      {"test_fraction", 0.25},
      {"intersection", {{"episode_steps", 80}, {"max_agents", 4}}},
      {"model",
       {{"encoder", {{"kind", "mlp"}, {"mlp_hidden", {8}}, {"d_model", 8}}},
        {"d_z", 2},
        {"head_hidden", 8},
        {"u_embed", 8}}},
      {"train", {{"epochs", 1}, {"batch_size", 32}}},
  };
  write_json_file(work / "base.json", base);

  std::string out;
  int rc = run_cli(work, "generate --config " + (work / "base.json").string() + " --seed 5 --out " +
                             (work / "data").string(),
                   &out);
  require(rc == 0, "generate failed: " + out);

  const fs::path sweep = work / "sweep";
  fs::create_directories(sweep);
  const std::vector<std::string> activations{"none", "softmax", "clip_zero", "clip_neg_beta",
                                             "tanh"};
  int seed = 20;
  for (const std::string& name : activations) {
    json cfg = base;
    cfg["model"]["activation"] = name;
    const fs::path cfg_path = work / ("train_" + name + ".json");
    write_json_file(cfg_path, cfg);
    rc = run_cli(work, "train --config " + cfg_path.string() + " --data " +
                           (work / "data" / "train.jsonl").string() + " --out " +
                           (work / ("run_" + name)).string() + " --seed " + std::to_string(seed++),
                 &out);
    require(rc == 0, "train " + name + " failed: " + out);
    fs::copy_file(work / ("run_" + name) / "checkpoint.json", sweep / (name + ".json"));
  }
  {
    json cfg = base;
    cfg["model"]["decoder_output"] = "direct_u";
    const fs::path cfg_path = work / "train_direct_u.json";
    write_json_file(cfg_path, cfg);
    rc = run_cli(work, "train --config " + cfg_path.string() + " --data " +
                           (work / "data" / "train.jsonl").string() + " --out " +
                           (work / "run_direct_u").string() + " --seed " + std::to_string(seed++),
                 &out);
    require(rc == 0, "train direct_u failed: " + out);
    fs::copy_file(work / "run_direct_u" / "checkpoint.json", sweep / "direct_u.json");
  }

  rc = run_cli(work, "eval --config " + (work / "base.json").string() + " --data " +
                         (work / "data" / "test.jsonl").string() + " --checkpoint " +
                         sweep.string() + " --ablation-sweep --samples 4 --out " +
                         (work / "eval").string(),
               &out);
  require(rc == 0, "eval --ablation-sweep failed: " + out);

  std::ifstream in(work / "eval" / "metrics.csv");
  require(in.good(), "metrics.csv missing");
  std::string line;
  std::getline(in, line);
  require(line == "model,ade_mean,ade_std,miss_mean,miss_std,n_seeds",
          "unexpected header: " + line);
  std::set<std::string> names;
  long rows = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    ++rows;
    std::stringstream ss(line);
    std::string field;
    std::getline(ss, field, ',');
    names.insert(field);
    double ade_mean, ade_std, miss_mean, miss_std;
    long n_seeds;
    char comma;
    ss >> ade_mean >> comma >> ade_std >> comma >> miss_mean >> comma >> miss_std >> comma >>
        n_seeds;
    require(std::isfinite(ade_mean) && std::isfinite(ade_std) && std::isfinite(miss_mean) &&
                std::isfinite(miss_std),
            field + ": non-finite metrics");
    require(ade_std >= 0.0 && miss_std >= 0.0, field + ": negative std");
    require(n_seeds >= 3, field + ": n_seeds " + std::to_string(n_seeds));
  }
  require(rows == 7, "expected 7 rows, got " + std::to_string(rows));
  const std::set<std::string> expected{"none",          "softmax",  "clip_zero", "clip_neg_beta",
                                       "tanh",          "direct_u", "u_desired"};
  require(names == expected, "row names mismatch");
  return "7 sweep rows (5 activations + direct_u + u_desired), n_seeds >= 3, finite stds";
}

// ---------------------------------------------------------------------------

struct Criterion {
  int id;
  const char* label;
  std::string (*fn)();
};

const Criterion kCriteria[] = {
    {1, "QP solutions match a projected-gradient oracle", criterion1},
    {2, "filter vjp matches finite differences", criterion2},
    {3, "closed-loop forward invariance", criterion3},
    {4, "bimodal responsibility recovery", criterion4},
    {5, "control distribution match (Wasserstein-1)", criterion5},
    {6, "intersection baseline ordering", criterion6},
    {7, "CLI ablation sweep completeness", criterion7},
    {8, "encoder permutation/padding/masking properties", criterion8},
    {9, "ELBO machinery", criterion9},
    {10, "deterministic baseline vs CVAE reconstruction", criterion10},
};

}  // namespace

int main(int argc, char** argv) {
  std::vector<int> selected;
  for (int i = 1; i < argc; ++i) selected.push_back(std::atoi(argv[i]));
  if (selected.empty())
    for (const Criterion& c : kCriteria) selected.push_back(c.id);

  bool all_ok = true;
  for (int want : selected) {
    const Criterion* crit = nullptr;
    for (const Criterion& c : kCriteria)
      if (c.id == want) crit = &c;
    if (!crit) {
      std::cerr << "unknown criterion " << want << "\n";
      return 2;
    }
    const double t0 = now_s();
    std::string detail;
    bool ok = true;
    try {
      detail = crit->fn();
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    all_ok &= ok;
    std::ostringstream line;
    line << "criterion " << std::setw(2) << crit->id << ": " << (ok ? "PASS" : "FAIL") << "  "
         << crit->label << " — " << detail << "  [" << fmt(now_s() - t0, 3) << " s]";
    std::cout << line.str() << std::endl;
  }
  return all_ok ? 0 : 1;
}
