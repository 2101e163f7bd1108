#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "eventcap/common.hpp"

namespace eventcap {

/// A group of residuals that depends on a subset of the parameter vector.
///
/// `evaluate` receives the full parameter vector, writes `residual_count` residuals
/// and, when `jacobian` is non-null, the dense residual_count x parameters.size()
/// Jacobian with columns ordered like `parameters`. The Jacobian arrives zeroed.
/// The solver scales both by sqrt(weight), so a block contributes weight * |r|^2
/// to the cost.
struct ResidualBlock {
  std::vector<int> parameters;
  int residual_count = 0;
  double weight = 1.0;
  std::function<void(const Eigen::VectorXd& x, Eigen::Ref<Eigen::VectorXd> residual,
                     Eigen::MatrixXd* jacobian)>
      evaluate;
};

struct BoundsSpec {
  Eigen::VectorXd lower;
  Eigen::VectorXd upper;

  static BoundsSpec unbounded(Eigen::Index n);
  void validate(Eigen::Index n) const;
  Eigen::VectorXd clamp(const Eigen::VectorXd& x) const;
};

struct SolverOptions {
  double initial_damping = 1e-3;
  double f_tol = 1e-8;
  double g_tol = 1e-10;
  int max_iterations = 100;
};

enum class Termination { kGradient, kCostChange, kStepSize, kMaxIterations, kNoProgress };
std::string to_string(Termination t);

struct SolverReport {
  int iterations = 0;         // linear solves attempted (accepted + rejected)
  int accepted_steps = 0;
  int rejected_steps = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<double> costs;  // initial cost, then the cost after every accepted step
  bool x0_clamped = false;
  Termination termination = Termination::kMaxIterations;

  bool monotone() const;
};

struct SolveResult {
  Eigen::VectorXd x;
  SolverReport report;
};

/// sum_b weight_b * |r_b(x)|^2
double evaluate_cost(std::span<const ResidualBlock> blocks, const Eigen::VectorXd& x);

/// Box-bounded Levenberg-Marquardt with Marquardt diagonal damping and projected
/// steps. Variables sitting on a bound whose gradient pushes outward are held fixed
/// for that step. Throws DomainError if residuals or Jacobians are non-finite at x0.
SolveResult minimize(std::span<const ResidualBlock> blocks, const Eigen::VectorXd& x0,
                     const BoundsSpec& bounds, const SolverOptions& options = {});

}  // namespace eventcap
