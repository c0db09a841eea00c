#include "respalloc/barrier.hpp"

#include "respalloc/errors.hpp"

namespace resp {

double barrier_value(const RelativeState& rel, const BarrierConfig& cfg) {
  return rel.dp.squaredNorm() - cfg.d_min * cfg.d_min + cfg.sigma * rel.dp.dot(rel.dv);
}

PairRow pairwise_row(const RelativeState& rel, const BarrierConfig& cfg) {
  // bdot = 2 dp.dv + sigma * (|dv|^2 + dp.(u_j - u_i)); the control-affine part
  // goes into g_i, g_j and the rest plus alpha0*b into h.
  PairRow row;
  row.g_i = -cfg.sigma * rel.dp;
  row.g_j = cfg.sigma * rel.dp;
  row.h = 2.0 * rel.dp.dot(rel.dv) + cfg.sigma * rel.dv.squaredNorm() +
          cfg.alpha0 * barrier_value(rel, cfg);
  return row;
}

JointConstraint assemble(const std::vector<AgentPhysState>& states, const BarrierConfig& cfg) {
  const int n = static_cast<int>(states.size());
  if (n < 2) {
    throw InvalidInputError("barrier::assemble: need at least two agents");
  }
  const int rows = n * (n - 1) / 2;
  JointConstraint joint;
  joint.G = Eigen::MatrixXd::Zero(rows, kControlDim * n);
  joint.h = Eigen::VectorXd::Zero(rows);
  joint.pair_index.reserve(rows);

  int r = 0;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      const PairRow row = pairwise_row(relative_state(states[i], states[j]), cfg);
      joint.G.block<1, 2>(r, kControlDim * i) = row.g_i.transpose();
      joint.G.block<1, 2>(r, kControlDim * j) = row.g_j.transpose();
      joint.h(r) = row.h;
      joint.pair_index.emplace_back(i, j);
      ++r;
    }
  }
  return joint;
}

}  // namespace resp
