#pragma once

#include <string>
#include <vector>

#include <Eigen/Core>

#include "respalloc/barrier.hpp"
#include "respalloc/dynamics.hpp"
#include "respalloc/qp.hpp"

namespace resp {

// Per-agent responsibility weights. Larger gamma_i makes deviation from the
// desired control costlier for agent i.
struct ResponsibilityVector {
  Eigen::VectorXd gamma;
};

enum class Activation { none, softmax, clip_zero, clip_neg_beta, tanh };

Activation activation_from_string(const std::string& name);
std::string to_string(Activation a);

// Keeps gamma_i + beta1 bounded away from zero so the filter QP stays convex.
inline constexpr double kConvexityFloor = 1e-3;

struct FilterConfig {
  double beta1 = 0.1;    // control regularization weight
  double beta2 = 100.0;  // slack weight
  double u_bound = 4.0;  // per-axis control bound, m/s^2
  Activation activation = Activation::none;
  BarrierConfig barrier;
  QPSolveOptions qp;
  double act_tol = 1e-6;  // active-set threshold for derivatives / reporting

  bool valid() const { return beta1 > 0.0 && beta2 > 0.0 && u_bound > 0.0 && barrier.valid(); }
};

struct FilterResult {
  Eigen::VectorXd u;  // concatenated controls, 2N
  double epsilon = 0.0;
  QPStatus qp_status = QPStatus::max_iter;
  std::vector<std::pair<int, int>> active_pairs;  // CBF rows with active duals

  // Retained for derivative propagation and diagnostics.
  QPProblem problem;
  QPSolution solution;
};

ResponsibilityVector apply_activation(const Eigen::VectorXd& raw, Activation mode, double beta1);

// The filter QP over x = [u_1, ..., u_N, eps]: CBF rows as -G u - eps <= h,
// then per-axis box constraints, then -eps <= 0. joint_out (optional)
// receives the assembled pairwise constraint.
QPProblem build_filter_qp(const Eigen::VectorXd& u_des, const std::vector<AgentPhysState>& states,
                          const Eigen::VectorXd& gamma, const FilterConfig& cfg,
                          JointConstraint* joint_out = nullptr);

// Problem 2: responsibility-weighted projection of desired controls onto the
// set where every pairwise CBF row holds up to a single shared slack.
FilterResult project(const Eigen::VectorXd& u_des, const std::vector<AgentPhysState>& states,
                     const ResponsibilityVector& gamma, const FilterConfig& cfg);

// Problem 1: the two-agent specialization. Equals project() on the same pair.
FilterResult project_pair(const Eigen::VectorXd& u_des, const AgentPhysState& a,
                          const AgentPhysState& b, const Eigen::Vector2d& gamma,
                          const FilterConfig& cfg);

struct ProjectGrads {
  Eigen::VectorXd dgamma;
  Eigen::VectorXd du_des;
  bool degenerate = false;
};

// Pulls an upstream gradient w.r.t. the filtered controls back onto gamma and
// the desired controls, through the QP's KKT system.
ProjectGrads project_vjp(const FilterResult& result, const Eigen::VectorXd& u_des,
                         const ResponsibilityVector& gamma, const FilterConfig& cfg,
                         const Eigen::VectorXd& upstream_du);

}  // namespace resp
