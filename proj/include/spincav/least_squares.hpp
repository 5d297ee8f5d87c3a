#pragma once

#include <Eigen/Dense>
#include <functional>
#include <string>
#include <vector>

namespace spincav {

/// Bounded nonlinear least squares: minimize sum r(x)^2.
struct LeastSquaresProblem {
  std::function<void(const Eigen::VectorXd& x, Eigen::VectorXd& r)> residuals;
  Eigen::VectorXd lower;  // may hold -inf
  Eigen::VectorXd upper;  // may hold +inf
  /// Typical magnitude of a change in each parameter; steps and finite
  /// differences are taken in units of this scale.
  Eigen::VectorXd scale;
  std::vector<bool> frozen;  // empty means all free
};

struct LeastSquaresOptions {
  double gradient_tol = 1e-12;
  double step_tol = 1e-12;
  double cost_tol = 1e-15;  // relative reduction of an accepted step
  int max_iterations = 200;
  double fd_step = 1e-6;    // absolute, in units of `scale`
  double initial_lambda = 1e-3;
};

enum class LeastSquaresStatus { gradient, step, cost, max_iterations };

std::string to_string(LeastSquaresStatus s);

struct LeastSquaresResult {
  Eigen::VectorXd x;
  Eigen::VectorXd residuals;
  Eigen::MatrixXd jacobian;  // d r / d x at x (free columns only, others zero)
  double cost = 0.0;         // sum of squared residuals
  double initial_cost = 0.0;
  int iterations = 0;
  int evaluations = 0;
  LeastSquaresStatus status = LeastSquaresStatus::max_iterations;
  /// Free parameters whose Jacobian column vanished at some iteration.
  std::vector<int> degenerate;

  bool converged() const { return status != LeastSquaresStatus::max_iterations; }
};

/// Levenberg-Marquardt with central finite-difference Jacobians. Steps that
/// do not lower the cost are never accepted; bounds are enforced by
/// projection.
LeastSquaresResult levenberg_marquardt(const LeastSquaresProblem& problem, const Eigen::VectorXd& x0,
                                       const LeastSquaresOptions& options = {});

/// Linearized covariance s^2 (J^T J)^+ over the free parameters, with
/// s^2 = cost / (n - p). Frozen parameters get zero rows/columns.
Eigen::MatrixXd covariance(const LeastSquaresResult& result, const std::vector<bool>& frozen);

}  // namespace spincav
