#include <benchmark/benchmark.h>

#include "respalloc/cvae.hpp"
#include "respalloc/datagen.hpp"
#include "respalloc/filter.hpp"
#include "respalloc/qp.hpp"
#include "respalloc/rng.hpp"

using namespace resp;

namespace {

std::vector<AgentPhysState> ring_states(long n) {
  std::vector<AgentPhysState> states(n);
  for (long i = 0; i < n; ++i) {
    const double th = 2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n);
    states[i].position = 12.0 * Eigen::Vector2d(std::cos(th), std::sin(th));
    states[i].velocity = -3.0 * Eigen::Vector2d(std::cos(th), std::sin(th));
  }
  return states;
}

Eigen::VectorXd inward_u_des(const std::vector<AgentPhysState>& states) {
  Eigen::VectorXd u(2 * static_cast<long>(states.size()));
  for (std::size_t i = 0; i < states.size(); ++i)
    u.segment<2>(2 * static_cast<long>(i)) = -0.5 * states[i].position.normalized();
  return u;
}

void BM_qp_solve(benchmark::State& state) {
  const long n = state.range(0);
  const auto states = ring_states(n);
  const Eigen::VectorXd u_des = inward_u_des(states);
  FilterConfig cfg;
  ResponsibilityVector gamma;
  gamma.gamma = Eigen::VectorXd::Constant(n, 0.5);
  QPProblem problem = build_filter_qp(u_des, states, gamma.gamma, cfg);
  for (auto _ : state) {
    QPSolution sol = qp_solve(problem, cfg.qp);
    benchmark::DoNotOptimize(sol.x.data());
  }
}
BENCHMARK(BM_qp_solve)->Arg(2)->Arg(4)->Arg(6);

void BM_project_vjp(benchmark::State& state) {
  const long n = state.range(0);
  const auto states = ring_states(n);
  const Eigen::VectorXd u_des = inward_u_des(states);
  FilterConfig cfg;
  ResponsibilityVector gamma;
  gamma.gamma = Eigen::VectorXd::Constant(n, 0.5);
  const Eigen::VectorXd upstream = Eigen::VectorXd::Ones(2 * n);
  for (auto _ : state) {
    FilterResult fr = project(u_des, states, gamma, cfg);
    ProjectGrads pg = project_vjp(fr, u_des, gamma, cfg, upstream);
    benchmark::DoNotOptimize(pg.dgamma.data());
  }
}
BENCHMARK(BM_project_vjp)->Arg(2)->Arg(4)->Arg(6);

SceneSequence bench_scene(long n_max, long t_max) {
  std::vector<AgentTrack> tracks;
  Rng rng(5);
  for (long a = 0; a < n_max; ++a) {
    AgentTrack tr;
    tr.agent_id = a;
    tr.steps.resize(t_max);
    tr.present.assign(t_max, 1);
    for (long t = 0; t < t_max; ++t) {
      tr.steps[t].position = {rng.normal(0.0, 10.0), rng.normal(0.0, 10.0)};
      tr.steps[t].velocity = {rng.normal(0.0, 3.0), rng.normal(0.0, 3.0)};
      tr.steps[t].heading = rng.uniform(-3.0, 3.0);
    }
    tracks.push_back(tr);
  }
  return flatten_scene(tracks, n_max);
}

void BM_encode_context(benchmark::State& state) {
  EncoderConfig ec;
  ec.n_max = 6;
  ec.t_max = 10;
  ParamStore store;
  register_encoder(store, "enc", ec);
  Rng rng(3);
  store.init_params(rng);
  const SceneSequence seq = bench_scene(ec.n_max, ec.t_max);
  for (auto _ : state) {
    ad::Tape tape;
    ParamStore snapshot = store;
    ParamBinding bind(tape, snapshot);
    ContextFeatures ctx = encode_context(bind, "enc", ec, seq);
    benchmark::DoNotOptimize(ctx.features.value().data());
  }
}
BENCHMARK(BM_encode_context);

void BM_elbo_step(benchmark::State& state) {
  CVAEConfig mc;
  mc.encoder.kind = "mlp";
  mc.encoder.n_max = 2;
  mc.encoder.t_max = 1;
  CVAEModel model = make_cvae(mc);
  Rng rng(9);
  init_cvae(model, rng);

  CorridorConfig cc;
  FilterConfig fc;
  Dataset ds = gen_corridor_dataset(cc, 8, fc, rng);
  ElboOptions opts;
  for (auto _ : state) {
    Eigen::VectorXd grad;
    ElboResult res = elbo_loss(model, ds.data, opts, fc, rng, &grad);
    benchmark::DoNotOptimize(res.loss);
    benchmark::DoNotOptimize(grad.data());
  }
}
BENCHMARK(BM_elbo_step);

}  // namespace

BENCHMARK_MAIN();
