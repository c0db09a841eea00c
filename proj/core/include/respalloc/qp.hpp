#pragma once

#include <Eigen/Core>

namespace resp {

// Canonical convex QP
//   minimize   0.5 x'Qx + q'x
//   subject to A x <= b
// with Q symmetric positive definite. Problems here are tiny (n, k a few
// dozen at most), so everything is dense.
struct QPProblem {
  Eigen::MatrixXd Q;
  Eigen::VectorXd q;
  Eigen::MatrixXd A;  // k x n; k may be zero
  Eigen::VectorXd b;

  int n() const { return static_cast<int>(q.size()); }
  int k() const { return static_cast<int>(b.size()); }
};

enum class QPStatus { optimal, max_iter, infeasible };

struct QPSolution {
  Eigen::VectorXd x;
  Eigen::VectorXd lambda;  // dual of Ax <= b, nonnegative
  QPStatus status = QPStatus::max_iter;
  double kkt_residual = 0.0;
  int iterations = 0;
};

struct QPSolveOptions {
  double tol = 1e-8;
  int max_iter = 50;
  // Q is regularized by pd_floor * I before factorization.
  double pd_floor = 1e-8;
};

QPSolution qp_solve(const QPProblem& p, const QPSolveOptions& opts = {});

// Gradients of a scalar loss with respect to the problem data, given the
// upstream gradient w.r.t. the primal solution. Obtained from the
// active-set-reduced KKT system; rows with lambda_i <= act_tol are treated
// as inactive and receive zero gradient.
struct QPGrads {
  Eigen::MatrixXd dQ;
  Eigen::VectorXd dq;
  Eigen::MatrixXd dA;
  Eigen::VectorXd db;
  // Set when the reduced KKT matrix was singular and a least-squares
  // fallback produced the result.
  bool degenerate = false;
};

struct QPDiffOptions {
  double act_tol = 1e-6;
};

QPGrads qp_solution_vjp(const QPProblem& p, const QPSolution& sol,
                        const Eigen::VectorXd& upstream, const QPDiffOptions& opts = {});

}  // namespace resp
