#pragma once

#include <utility>
#include <vector>

#include <Eigen/Core>

#include "respalloc/dynamics.hpp"

namespace resp {

// Pairwise collision barrier b = |dp|^2 - d_min^2 + sigma * (dp . dv)
// with a linear class-K gain alpha(b) = alpha0 * b. The sigma term makes the
// barrier relative-degree one under double-integrator relative dynamics.
struct BarrierConfig {
  double d_min = 2.0;   // m, minimum separation
  double sigma = 1.0;   // s, velocity coupling gain
  double alpha0 = 1.0;  // 1/s, class-K gain

  bool valid() const { return d_min > 0.0 && sigma > 0.0 && alpha0 > 0.0; }
};

// One row of the joint constraint per unordered agent pair, in lexicographic
// order (0,1),(0,2),...,(N-2,N-1). Row r reads
//   G.row(r) * u + h(r) >= 0
// and touches only the control blocks of pair_index[r].
struct JointConstraint {
  Eigen::MatrixXd G;  // C(N,2) x 2N
  Eigen::VectorXd h;  // C(N,2)
  std::vector<std::pair<int, int>> pair_index;
};

// Per-pair pieces of the CBF inequality g_i.u_i + g_j.u_j + h >= 0.
struct PairRow {
  Eigen::Vector2d g_i;
  Eigen::Vector2d g_j;
  double h;
};

double barrier_value(const RelativeState& rel, const BarrierConfig& cfg);

PairRow pairwise_row(const RelativeState& rel, const BarrierConfig& cfg);

JointConstraint assemble(const std::vector<AgentPhysState>& states, const BarrierConfig& cfg);

}  // namespace resp
