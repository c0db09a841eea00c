#include "respalloc/qp.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Cholesky>
#include <Eigen/LU>
#include <Eigen/QR>

#include "respalloc/errors.hpp"

namespace resp {

namespace {

// Largest alpha in (0, 1] with v + alpha * dv >= (1 - eta) * v, elementwise.
double step_to_boundary(const Eigen::VectorXd& v, const Eigen::VectorXd& dv, double eta) {
  double alpha = 1.0;
  for (int i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -eta * v(i) / dv(i));
  }
  return alpha;
}

double kkt_residual_inf(const QPProblem& p, const Eigen::VectorXd& x,
                        const Eigen::VectorXd& lambda) {
  double r = (p.Q * x + p.q + (p.k() > 0 ? (p.A.transpose() * lambda).eval()
                                         : Eigen::VectorXd::Zero(p.n()).eval()))
                 .lpNorm<Eigen::Infinity>();
  if (p.k() > 0) {
    const Eigen::VectorXd slack = p.b - p.A * x;
    r = std::max(r, (-slack).cwiseMax(0.0).lpNorm<Eigen::Infinity>());   // primal feasibility
    r = std::max(r, (-lambda).cwiseMax(0.0).lpNorm<Eigen::Infinity>());  // dual feasibility
    r = std::max(r, lambda.cwiseProduct(slack).lpNorm<Eigen::Infinity>());
  }
  return r;
}

void validate(const QPProblem& p) {
  const int n = p.n();
  const int k = p.k();
  if (n <= 0 || p.Q.rows() != n || p.Q.cols() != n) {
    throw InvalidInputError("qp_solve: inconsistent Q/q dimensions");
  }
  if (k > 0 && (p.A.rows() != k || p.A.cols() != n)) {
    throw InvalidInputError("qp_solve: inconsistent A/b dimensions");
  }
  if (!p.Q.allFinite() || !p.q.allFinite() || (k > 0 && (!p.A.allFinite() || !p.b.allFinite()))) {
    throw InvalidInputError("qp_solve: non-finite problem data");
  }
}

}  // namespace

QPSolution qp_solve(const QPProblem& p, const QPSolveOptions& opts) {
  validate(p);
  const int n = p.n();
  const int k = p.k();

  Eigen::MatrixXd Qr = p.Q;
  Qr.diagonal().array() += opts.pd_floor;

  QPSolution sol;

  if (k == 0) {
    // unconstrained minimum
    Eigen::LDLT<Eigen::MatrixXd> ldlt(Qr);
    sol.x = ldlt.solve(-p.q);
    sol.lambda.resize(0);
    sol.status = QPStatus::optimal;
    sol.kkt_residual = (p.Q * sol.x + p.q).lpNorm<Eigen::Infinity>();
    return sol;
  }

  // Mehrotra predictor-corrector on
  //   Qx + q + A'lambda = 0,  Ax + s = b,  s,lambda > 0,  S lambda -> 0.
  Eigen::VectorXd x = Eigen::LDLT<Eigen::MatrixXd>(Qr).solve(-p.q);
  Eigen::VectorXd s = (p.b - p.A * x).cwiseMax(1.0);
  Eigen::VectorXd lambda = Eigen::VectorXd::Ones(k);

  const double eta = 0.995;  // fraction-to-boundary
  bool infeasible = false;

  // The last few digits are fragile: once mu reaches rounding level the
  // scaling matrix is numerically singular and iterates can regress, so keep
  // the best iterate instead of trusting the final one.
  Eigen::VectorXd best_x = x, best_lambda = lambda;
  double best_kkt = kkt_residual_inf(p, x, lambda);

  for (int it = 0; it < opts.max_iter; ++it) {
    const Eigen::VectorXd r_d = p.Q * x + p.q + p.A.transpose() * lambda;
    const Eigen::VectorXd r_p = p.A * x + s - p.b;
    const double mu = s.dot(lambda) / k;

    const double kkt = kkt_residual_inf(p, x, lambda);
    sol.iterations = it;
    if (kkt < best_kkt) {
      best_kkt = kkt;
      best_x = x;
      best_lambda = lambda;
    }
    if (kkt <= opts.tol) break;

    // Infeasibility heuristic: duals blowing up while primal residual stays.
    if (lambda.lpNorm<Eigen::Infinity>() > 1e8) {
      const Eigen::VectorXd y = lambda / lambda.lpNorm<Eigen::Infinity>();
      if ((p.A.transpose() * y).lpNorm<Eigen::Infinity>() < 1e-6 && p.b.dot(y) < -1e-8) {
        infeasible = true;
        break;
      }
    }

    // Augmented (quasidefinite) KKT system. Much better conditioned than the
    // normal equations Q + A'(Lambda/S)A when the slack/dual spread is large.
    Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + k, n + k);
    K.topLeftCorner(n, n) = Qr;
    K.topRightCorner(n, k) = p.A.transpose();
    K.bottomLeftCorner(k, n) = p.A;
    K.bottomRightCorner(k, k).diagonal() = -s.cwiseQuotient(lambda);
    const Eigen::PartialPivLU<Eigen::MatrixXd> lu(K);

    auto solve_dir = [&](const Eigen::VectorXd& rc, Eigen::VectorXd& dx, Eigen::VectorXd& ds,
                         Eigen::VectorXd& dl) {
      Eigen::VectorXd rhs(n + k);
      rhs.head(n) = -r_d;
      rhs.tail(k) = -r_p + rc.cwiseQuotient(lambda);
      Eigen::VectorXd z = lu.solve(rhs);
      z += lu.solve(rhs - K * z);  // one refinement pass recovers ~3 digits
      dx = z.head(n);
      dl = z.tail(k);
      ds = -r_p - p.A * dx;
    };

    Eigen::VectorXd r_c = s.cwiseProduct(lambda);  // affine scaling direction
    Eigen::VectorXd dx_a, ds_a, dl_a;
    solve_dir(r_c, dx_a, ds_a, dl_a);

    const double alpha_p_a = step_to_boundary(s, ds_a, 1.0);
    const double alpha_d_a = step_to_boundary(lambda, dl_a, 1.0);
    const double mu_aff =
        (s + alpha_p_a * ds_a).dot(lambda + alpha_d_a * dl_a) / k;
    const double sigma = std::pow(std::max(mu_aff, 0.0) / std::max(mu, 1e-300), 3);

    // corrector with centering
    r_c = s.cwiseProduct(lambda) + ds_a.cwiseProduct(dl_a) -
          Eigen::VectorXd::Constant(k, sigma * mu);
    Eigen::VectorXd dx, ds, dl;
    solve_dir(r_c, dx, ds, dl);

    const double alpha = std::min(step_to_boundary(s, ds, eta), step_to_boundary(lambda, dl, eta));
    x += alpha * dx;
    s += alpha * ds;
    lambda += alpha * dl;
  }

  {
    const double kkt = kkt_residual_inf(p, x, lambda);
    if (kkt < best_kkt) {
      best_kkt = kkt;
      best_x = x;
      best_lambda = lambda;
    }
  }
  sol.x = best_x;
  sol.lambda = best_lambda.cwiseMax(0.0);
  sol.kkt_residual = best_kkt;
  if (best_kkt <= opts.tol) {
    sol.status = QPStatus::optimal;
  } else if (infeasible) {
    sol.status = QPStatus::infeasible;
  } else {
    sol.status = QPStatus::max_iter;
  }
  return sol;
}

QPGrads qp_solution_vjp(const QPProblem& p, const QPSolution& sol,
                        const Eigen::VectorXd& upstream, const QPDiffOptions& opts) {
  if (sol.status != QPStatus::optimal) {
    throw InvalidInputError("qp_solution_vjp: solution is not optimal");
  }
  if (upstream.size() != p.n()) {
    throw InvalidInputError("qp_solution_vjp: upstream gradient has wrong size");
  }
  const int n = p.n();
  const int k = p.k();

  QPGrads g;
  g.dQ = Eigen::MatrixXd::Zero(n, n);
  g.dq = Eigen::VectorXd::Zero(n);
  g.dA = Eigen::MatrixXd::Zero(k, n);
  g.db = Eigen::VectorXd::Zero(k);

  std::vector<int> active;
  for (int i = 0; i < k; ++i) {
    if (sol.lambda(i) > opts.act_tol) active.push_back(i);
  }
  const int na = static_cast<int>(active.size());

  // Reduced KKT matrix [[Q, A_act'], [A_act, 0]]; solving it transposed
  // against [upstream; 0] gives the adjoint variables.
  Eigen::MatrixXd K = Eigen::MatrixXd::Zero(n + na, n + na);
  K.topLeftCorner(n, n) = p.Q;
  for (int r = 0; r < na; ++r) {
    K.block(n + r, 0, 1, n) = p.A.row(active[r]);
    K.block(0, n + r, n, 1) = p.A.row(active[r]).transpose();
  }

  Eigen::VectorXd rhs = Eigen::VectorXd::Zero(n + na);
  rhs.head(n) = upstream;

  Eigen::VectorXd v;
  Eigen::FullPivLU<Eigen::MatrixXd> lu(K);
  if (lu.isInvertible()) {
    v = lu.solve(rhs);
  } else {
    v = Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd>(K).solve(rhs);
    g.degenerate = true;
  }

  const Eigen::VectorXd vx = v.head(n);
  const Eigen::VectorXd vnu = v.tail(na);

  g.dq = -vx;
  g.dQ = -0.5 * (vx * sol.x.transpose() + sol.x * vx.transpose());
  for (int r = 0; r < na; ++r) {
    const int row = active[r];
    g.dA.row(row) = -(sol.lambda(row) * vx + vnu(r) * sol.x).transpose();
    g.db(row) = vnu(r);
  }
  return g;
}

}  // namespace resp
