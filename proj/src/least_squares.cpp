#include "spincav/least_squares.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "spincav/error.hpp"

namespace spincav {

std::string to_string(LeastSquaresStatus s) {
  switch (s) {
    case LeastSquaresStatus::gradient: return "converged_gradient";
    case LeastSquaresStatus::step: return "converged_step";
    case LeastSquaresStatus::cost: return "converged_cost";
    case LeastSquaresStatus::max_iterations: return "max_iterations";
  }
  return "unknown";
}

namespace {

struct Evaluator {
  const LeastSquaresProblem& problem;
  int count = 0;

  double operator()(const Eigen::VectorXd& x, Eigen::VectorXd& r) {
    ++count;
    problem.residuals(x, r);
    if (!r.allFinite()) return std::numeric_limits<double>::infinity();
    return r.squaredNorm();
  }
};

Eigen::VectorXd project(const Eigen::VectorXd& x, const LeastSquaresProblem& p) {
  return x.cwiseMax(p.lower).cwiseMin(p.upper);
}

}  // namespace

LeastSquaresResult levenberg_marquardt(const LeastSquaresProblem& problem, const Eigen::VectorXd& x0,
                                       const LeastSquaresOptions& options) {
  const Eigen::Index n = x0.size();
  if (problem.lower.size() != n || problem.upper.size() != n || problem.scale.size() != n)
    throw PreconditionError("levenberg_marquardt: bounds/scale size mismatch");
  if ((problem.scale.array() <= 0).any()) throw PreconditionError("levenberg_marquardt: scale must be > 0");
  std::vector<int> free;
  for (int k = 0; k < n; ++k)
    if (problem.frozen.empty() || !problem.frozen[k]) free.push_back(k);

  Evaluator eval{problem};
  LeastSquaresResult out;
  Eigen::VectorXd x = project(x0, problem);
  Eigen::VectorXd r;
  double cost = eval(x, r);
  if (!std::isfinite(cost)) throw PreconditionError("levenberg_marquardt: non-finite residuals at start");
  out.initial_cost = cost;
  const Eigen::Index m = r.size();

  Eigen::MatrixXd J = Eigen::MatrixXd::Zero(m, n);  // d r / d z, z = x / scale
  auto jacobian = [&] {
    Eigen::VectorXd rp, rm;
    for (int k : free) {
      const double s = problem.scale[k];
      const double h = options.fd_step * s;
      Eigen::VectorXd xp = x, xm = x;
      xp[k] = std::min(x[k] + h, problem.upper[k]);
      xm[k] = std::max(x[k] - h, problem.lower[k]);
      if (xp[k] == xm[k]) {
        J.col(k).setZero();
        continue;
      }
      const double cp = (xp[k] == x[k]) ? cost : eval(xp, rp);
      const double cm = (xm[k] == x[k]) ? cost : eval(xm, rm);
      const Eigen::VectorXd& up = (xp[k] == x[k]) ? r : rp;
      const Eigen::VectorXd& dn = (xm[k] == x[k]) ? r : rm;
      if (!std::isfinite(cp) || !std::isfinite(cm)) {
        J.col(k).setZero();
        continue;
      }
      J.col(k) = (up - dn) * (s / (xp[k] - xm[k]));
    }
  };

  double lambda = options.initial_lambda;
  out.status = LeastSquaresStatus::max_iterations;
  int it = 0;
  bool need_jacobian = true;
  Eigen::MatrixXd Ja;
  Eigen::VectorXd col_norms;
  Eigen::VectorXd g;
  std::vector<int> active;
  for (; it < options.max_iterations; ++it) {
    if (need_jacobian) {
      jacobian();
      // Columns that carry no information are frozen for this step.
      double max_norm = 0.0;
      for (int k : free) max_norm = std::max(max_norm, J.col(k).norm());
      active.clear();
      for (int k : free) {
        if (J.col(k).norm() > 1e-13 * max_norm && max_norm > 0) {
          active.push_back(k);
        } else if (std::find(out.degenerate.begin(), out.degenerate.end(), k) == out.degenerate.end()) {
          out.degenerate.push_back(k);
        }
      }
      const auto na = static_cast<Eigen::Index>(active.size());
      Ja.resize(m, na);
      for (Eigen::Index c = 0; c < na; ++c) Ja.col(c) = J.col(active[c]);
      col_norms = Ja.colwise().norm().transpose();
      g = Ja.transpose() * r;
      need_jacobian = false;
      if (na == 0 || g.lpNorm<Eigen::Infinity>() <= options.gradient_tol * std::max(1.0, cost)) {
        out.status = LeastSquaresStatus::gradient;
        break;
      }
    }
    const auto na = static_cast<Eigen::Index>(active.size());
    // Damped step from the augmented system [J; sqrt(lambda) D] dz = [-r; 0]
    // with Marquardt scaling D = diag(|J_c|); QR avoids squaring the
    // condition number.
    const Eigen::VectorXd d = col_norms.cwiseMax(1e-12 * col_norms.maxCoeff());
    Eigen::MatrixXd aug(m + na, na);
    aug.topRows(m) = Ja;
    aug.bottomRows(na) = (std::sqrt(lambda) * d).asDiagonal();
    Eigen::VectorXd rhs = Eigen::VectorXd::Zero(m + na);
    rhs.head(m) = -r;
    const Eigen::VectorXd dz = aug.colPivHouseholderQr().solve(rhs);
    Eigen::VectorXd xt = x;
    for (Eigen::Index c = 0; c < na; ++c) xt[active[c]] += dz[c] * problem.scale[active[c]];
    xt = project(xt, problem);
    Eigen::VectorXd rt;
    const double ct = dz.allFinite() ? eval(xt, rt) : std::numeric_limits<double>::infinity();
    // Small step: every parameter moves by less than step_tol relative to
    // its own magnitude (or scale, near zero).
    bool small_step = true;
    for (int k : active)
      small_step = small_step &&
                   std::abs(xt[k] - x[k]) <= options.step_tol * (std::abs(x[k]) + problem.scale[k]);
    if (ct < cost) {
      const double reduction = (cost - ct) / cost;
      x = xt;
      r = rt;
      cost = ct;
      lambda = std::max(lambda / 3.0, 1e-15);
      need_jacobian = true;
      if (cost == 0.0) {
        out.status = LeastSquaresStatus::cost;
        ++it;
        break;
      }
      if (small_step) {
        out.status = LeastSquaresStatus::step;
        ++it;
        break;
      }
      if (reduction < options.cost_tol) {
        out.status = LeastSquaresStatus::cost;
        ++it;
        break;
      }
    } else {
      lambda *= 4.0;
      if (lambda > 1e16 || small_step) {
        out.status = LeastSquaresStatus::step;
        break;
      }
    }
  }
  out.iterations = it;
  out.x = x;
  out.residuals = r;
  out.cost = cost;
  if (need_jacobian) jacobian();
  out.jacobian = Eigen::MatrixXd::Zero(m, n);
  for (int k : free) out.jacobian.col(k) = J.col(k) / problem.scale[k];
  out.evaluations = eval.count;
  return out;
}

Eigen::MatrixXd covariance(const LeastSquaresResult& result, const std::vector<bool>& frozen) {
  const Eigen::Index n = result.x.size();
  std::vector<int> free;
  for (int k = 0; k < n; ++k)
    if (frozen.empty() || !frozen[k]) free.push_back(k);
  const auto nf = static_cast<Eigen::Index>(free.size());
  const Eigen::Index m = result.residuals.size();
  Eigen::MatrixXd cov = Eigen::MatrixXd::Zero(n, n);
  if (nf == 0 || m <= nf) return cov;
  Eigen::MatrixXd Jf(m, nf);
  for (Eigen::Index c = 0; c < nf; ++c) Jf.col(c) = result.jacobian.col(free[c]);
  // Column equilibration keeps the pseudo-inverse well scaled.
  Eigen::VectorXd norms = Jf.colwise().norm().transpose();
  for (Eigen::Index c = 0; c < nf; ++c)
    if (norms[c] == 0) norms[c] = 1;
  const Eigen::MatrixXd Js = Jf * norms.cwiseInverse().asDiagonal();
  const Eigen::MatrixXd info = Js.transpose() * Js;
  Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod(info);
  const Eigen::MatrixXd inv = cod.pseudoInverse();
  const double s2 = result.cost / static_cast<double>(m - nf);
  const Eigen::MatrixXd covf = s2 * norms.cwiseInverse().asDiagonal() * inv * norms.cwiseInverse().asDiagonal();
  for (Eigen::Index a = 0; a < nf; ++a)
    for (Eigen::Index b = 0; b < nf; ++b) cov(free[a], free[b]) = covf(a, b);
  return cov;
}

}  // namespace spincav
