#include <cmath>
#include <vector>

#include <doctest.h>

#include "respalloc/barrier.hpp"
#include "respalloc/errors.hpp"
#include "respalloc/dynamics.hpp"
#include "respalloc/rng.hpp"

using namespace resp;

namespace {

AgentPhysState random_state(Rng& rng, double pos_range = 8.0, double vel_range = 3.0) {
  AgentPhysState s;
  s.position = {rng.uniform(-pos_range, pos_range), rng.uniform(-pos_range, pos_range)};
  s.velocity = {rng.uniform(-vel_range, vel_range), rng.uniform(-vel_range, vel_range)};
  return s;
}

// Constant-acceleration propagation valid for negative t as well, which
// resp::step (forward-only) is not.
AgentPhysState propagate(const AgentPhysState& s, const Control& u, double t) {
  AgentPhysState out;
  out.position = s.position + s.velocity * t + 0.5 * u.acceleration * t * t;
  out.velocity = s.velocity + u.acceleration * t;
  return out;
}

double barrier_of_pair(const AgentPhysState& a, const AgentPhysState& b,
                       const BarrierConfig& cfg) {
  return barrier_value(relative_state(a, b), cfg);
}

}  // namespace

TEST_SUITE("barrier") {

TEST_CASE("barrier value matches its closed form") {
  BarrierConfig cfg;
  cfg.d_min = 2.0;
  cfg.sigma = 1.5;

  RelativeState rel;
  rel.dp = {3.0, -1.0};
  rel.dv = {0.5, 2.0};
  const double expected =
      rel.dp.squaredNorm() - cfg.d_min * cfg.d_min + cfg.sigma * rel.dp.dot(rel.dv);
  CHECK(barrier_value(rel, cfg) == doctest::Approx(expected).epsilon(1e-14));

  // Touching, at rest: exactly zero.
  RelativeState touch;
  touch.dp = {2.0, 0.0};
  CHECK(barrier_value(touch, cfg) == doctest::Approx(0.0).scale(1.0));

  // Approaching head-on shrinks the margin relative to static separation.
  RelativeState closing = touch;
  closing.dp = {3.0, 0.0};
  closing.dv = {-1.0, 0.0};
  RelativeState frozen = closing;
  frozen.dv.setZero();
  CHECK(barrier_value(closing, cfg) < barrier_value(frozen, cfg));
}

TEST_CASE("pair row reproduces the barrier time derivative") {
  // Independent oracle: integrate both double integrators under constant
  // controls and difference the barrier. The row promises
  //   g_i.u_i + g_j.u_j + h = db/dt + alpha0 * b
  // along the controlled flow.
  BarrierConfig cfg;
  cfg.d_min = 2.0;
  cfg.sigma = 0.8;
  cfg.alpha0 = 1.7;

  Rng rng(51);
  for (int trial = 0; trial < 30; ++trial) {
    AgentPhysState si = random_state(rng);
    AgentPhysState sj = random_state(rng);
    if ((si.position - sj.position).norm() < 0.5) continue;
    Control ui{{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)}};
    Control uj{{rng.uniform(-2.0, 2.0), rng.uniform(-2.0, 2.0)}};

    const RelativeState rel = relative_state(si, sj);
    const PairRow row = pairwise_row(rel, cfg);
    const double lhs = row.g_i.dot(ui.acceleration) + row.g_j.dot(uj.acceleration) + row.h;

    const double eps = 1e-6;
    const double b_plus = barrier_of_pair(propagate(si, ui, eps), propagate(sj, uj, eps), cfg);
    const double b_minus = barrier_of_pair(propagate(si, ui, -eps), propagate(sj, uj, -eps), cfg);
    const double db_dt = (b_plus - b_minus) / (2.0 * eps);
    const double rhs = db_dt + cfg.alpha0 * barrier_value(rel, cfg);

    CAPTURE(trial);
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-6).scale(1.0));
  }
}

TEST_CASE("pair row control gains are antisymmetric in sigma dp") {
  BarrierConfig cfg;
  cfg.sigma = 1.3;
  RelativeState rel;
  rel.dp = {1.0, -2.0};
  rel.dv = {0.4, 0.1};
  const PairRow row = pairwise_row(rel, cfg);
  CHECK((row.g_i + row.g_j).norm() == doctest::Approx(0.0).scale(1.0));
  CHECK((row.g_j - cfg.sigma * rel.dp).norm() == doctest::Approx(0.0).scale(1.0).epsilon(1e-14));
}

TEST_CASE("assemble builds lexicographic pair rows over control blocks") {
  BarrierConfig cfg;
  Rng rng(52);
  const int N = 4;
  std::vector<AgentPhysState> states;
  for (int i = 0; i < N; ++i) states.push_back(random_state(rng));

  const JointConstraint jc = assemble(states, cfg);
  REQUIRE(jc.G.rows() == 6);  // C(4,2)
  REQUIRE(jc.G.cols() == 2 * N);
  REQUIRE(jc.h.size() == 6);
  REQUIRE(jc.pair_index.size() == 6);

  const std::vector<std::pair<int, int>> expect = {{0, 1}, {0, 2}, {0, 3},
                                                   {1, 2}, {1, 3}, {2, 3}};
  CHECK(jc.pair_index == expect);

  for (int r = 0; r < 6; ++r) {
    const auto [i, j] = jc.pair_index[r];
    const PairRow row = pairwise_row(relative_state(states[i], states[j]), cfg);
    CHECK((jc.G.row(r).segment(2 * i, 2) - row.g_i.transpose()).norm() ==
          doctest::Approx(0.0).scale(1.0));
    CHECK((jc.G.row(r).segment(2 * j, 2) - row.g_j.transpose()).norm() ==
          doctest::Approx(0.0).scale(1.0));
    CHECK(jc.h(r) == doctest::Approx(row.h).epsilon(1e-14));
    // Every other block is untouched.
    for (int a = 0; a < N; ++a) {
      if (a == i || a == j) continue;
      CHECK(jc.G.row(r).segment(2 * a, 2).norm() == 0.0);
    }
  }
}

TEST_CASE("assemble needs a pair; two agents give one row") {
  BarrierConfig cfg;
  Rng rng(53);
  CHECK_THROWS_AS(assemble({random_state(rng)}, cfg), InvalidInputError);

  std::vector<AgentPhysState> pair{random_state(rng), random_state(rng)};
  const JointConstraint jc = assemble(pair, cfg);
  CHECK(jc.G.rows() == 1);
  CHECK(jc.G.cols() == 4);
  CHECK(jc.pair_index == std::vector<std::pair<int, int>>{{0, 1}});
}

}  // TEST_SUITE
