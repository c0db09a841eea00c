#include "respalloc/filter.hpp"

#include <cmath>

#include "respalloc/errors.hpp"

namespace resp {

Activation activation_from_string(const std::string& name) {
  if (name == "none") return Activation::none;
  if (name == "softmax") return Activation::softmax;
  if (name == "clip_zero") return Activation::clip_zero;
  if (name == "clip_neg_beta") return Activation::clip_neg_beta;
  if (name == "tanh") return Activation::tanh;
  throw InvalidInputError("unknown activation: " + name);
}

std::string to_string(Activation a) {
  switch (a) {
    case Activation::none: return "none";
    case Activation::softmax: return "softmax";
    case Activation::clip_zero: return "clip_zero";
    case Activation::clip_neg_beta: return "clip_neg_beta";
    case Activation::tanh: return "tanh";
  }
  return "?";
}

ResponsibilityVector apply_activation(const Eigen::VectorXd& raw, Activation mode, double beta1) {
  if (!raw.allFinite()) {
    throw InvalidInputError("apply_activation: non-finite raw responsibilities");
  }
  ResponsibilityVector out;
  switch (mode) {
    case Activation::none:
      out.gamma = raw;
      break;
    case Activation::softmax: {
      const Eigen::ArrayXd e = (raw.array() - raw.maxCoeff()).exp();
      out.gamma = (e / e.sum()).matrix();
      break;
    }
    case Activation::clip_zero:
      out.gamma = raw.cwiseMax(0.0);
      break;
    case Activation::clip_neg_beta:
      out.gamma = raw.cwiseMax(-beta1 + kConvexityFloor);
      break;
    case Activation::tanh:
      // clamp keeps the guard when beta1 <= 1
      out.gamma = raw.array().tanh().max(-beta1 + kConvexityFloor).matrix();
      break;
  }
  for (int i = 0; i < out.gamma.size(); ++i) {
    if (out.gamma(i) + beta1 < kConvexityFloor) {
      throw ConvexityError("responsibility gamma[" + std::to_string(i) +
                               "] = " + std::to_string(out.gamma(i)) +
                               " breaks convexity (needs gamma + beta1 >= " +
                               std::to_string(kConvexityFloor) + ")",
                           i);
    }
  }
  return out;
}

QPProblem build_filter_qp(const Eigen::VectorXd& u_des,
                          const std::vector<AgentPhysState>& states,
                          const Eigen::VectorXd& gamma, const FilterConfig& cfg,
                          JointConstraint* joint_out) {
  const int n_agents = static_cast<int>(states.size());
  const int nu = kControlDim * n_agents;
  const int nx = nu + 1;

  JointConstraint joint;
  if (n_agents >= 2) {
    joint = assemble(states, cfg.barrier);
  } else {
    joint.G = Eigen::MatrixXd::Zero(0, nu);
    joint.h = Eigen::VectorXd::Zero(0);
  }
  const int n_cbf = static_cast<int>(joint.h.size());
  const int k = n_cbf + 2 * nu + 1;

  QPProblem p;
  p.Q = Eigen::MatrixXd::Zero(nx, nx);
  p.q = Eigen::VectorXd::Zero(nx);
  for (int i = 0; i < n_agents; ++i) {
    const double w = 2.0 * (gamma(i) + cfg.beta1);
    p.Q.block<2, 2>(2 * i, 2 * i) = w * Eigen::Matrix2d::Identity();
    p.q.segment<2>(2 * i) = -2.0 * gamma(i) * u_des.segment<2>(2 * i);
  }
  p.Q(nu, nu) = 2.0 * cfg.beta2;

  p.A = Eigen::MatrixXd::Zero(k, nx);
  p.b = Eigen::VectorXd::Zero(k);
  p.A.block(0, 0, n_cbf, nu) = -joint.G;
  p.A.block(0, nu, n_cbf, 1).setConstant(-1.0);
  p.b.head(n_cbf) = joint.h;
  for (int c = 0; c < nu; ++c) {
    p.A(n_cbf + 2 * c, c) = 1.0;
    p.b(n_cbf + 2 * c) = cfg.u_bound;
    p.A(n_cbf + 2 * c + 1, c) = -1.0;
    p.b(n_cbf + 2 * c + 1) = cfg.u_bound;
  }
  p.A(k - 1, nu) = -1.0;
  p.b(k - 1) = 0.0;

  if (joint_out) *joint_out = std::move(joint);
  return p;
}

namespace {

void check_gamma_guard(const Eigen::VectorXd& gamma, double beta1) {
  for (int i = 0; i < gamma.size(); ++i) {
    if (!(gamma(i) + beta1 >= kConvexityFloor)) {
      throw ConvexityError("project: gamma[" + std::to_string(i) + "] violates convexity guard",
                           i);
    }
  }
}

}  // namespace

FilterResult project(const Eigen::VectorXd& u_des, const std::vector<AgentPhysState>& states,
                     const ResponsibilityVector& gamma, const FilterConfig& cfg) {
  const int n_agents = static_cast<int>(states.size());
  if (n_agents < 1) {
    throw InvalidInputError("project: need at least one agent");
  }
  if (u_des.size() != kControlDim * n_agents || gamma.gamma.size() != n_agents) {
    throw InvalidInputError("project: u_des/gamma size mismatch");
  }
  if (!u_des.allFinite() || !gamma.gamma.allFinite()) {
    throw InvalidInputError("project: non-finite inputs");
  }
  check_gamma_guard(gamma.gamma, cfg.beta1);

  FilterResult res;
  JointConstraint joint;
  res.problem = build_filter_qp(u_des, states, gamma.gamma, cfg, &joint);
  res.solution = qp_solve(res.problem, cfg.qp);

  const int nu = kControlDim * n_agents;
  res.u = res.solution.x.head(nu);
  res.epsilon = res.solution.x(nu);
  res.qp_status = res.solution.status;
  for (int r = 0; r < static_cast<int>(joint.pair_index.size()); ++r) {
    if (res.solution.lambda(r) > cfg.act_tol) {
      res.active_pairs.push_back(joint.pair_index[r]);
    }
  }
  return res;
}

FilterResult project_pair(const Eigen::VectorXd& u_des, const AgentPhysState& a,
                          const AgentPhysState& b, const Eigen::Vector2d& gamma,
                          const FilterConfig& cfg) {
  ResponsibilityVector g;
  g.gamma = gamma;
  return project(u_des, {a, b}, g, cfg);
}

ProjectGrads project_vjp(const FilterResult& result, const Eigen::VectorXd& u_des,
                         const ResponsibilityVector& gamma, const FilterConfig& cfg,
                         const Eigen::VectorXd& upstream_du) {
  const int nu = static_cast<int>(result.u.size());
  const int n_agents = nu / kControlDim;
  if (upstream_du.size() != nu) {
    throw InvalidInputError("project_vjp: upstream gradient size mismatch");
  }

  Eigen::VectorXd upstream = Eigen::VectorXd::Zero(nu + 1);
  upstream.head(nu) = upstream_du;

  QPDiffOptions dopts;
  dopts.act_tol = cfg.act_tol;
  const QPGrads g = qp_solution_vjp(result.problem, result.solution, upstream, dopts);

  ProjectGrads out;
  out.degenerate = g.degenerate;
  out.dgamma = Eigen::VectorXd::Zero(n_agents);
  out.du_des = Eigen::VectorXd::Zero(nu);
  for (int i = 0; i < n_agents; ++i) {
    // dQ/dgamma_i = 2I on agent i's block, dq/dgamma_i = -2 u_des_i
    out.dgamma(i) = 2.0 * (g.dQ(2 * i, 2 * i) + g.dQ(2 * i + 1, 2 * i + 1)) -
                    2.0 * u_des.segment<2>(2 * i).dot(g.dq.segment<2>(2 * i));
    out.du_des.segment<2>(2 * i) = -2.0 * gamma.gamma(i) * g.dq.segment<2>(2 * i);
  }
  return out;
}

}  // namespace resp
