#include "eventcap/solver.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include <Eigen/Cholesky>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>
#include <vector>

namespace eventcap {

BoundsSpec BoundsSpec::unbounded(Eigen::Index n) {
  const double inf = std::numeric_limits<double>::infinity();
  return {Eigen::VectorXd::Constant(n, -inf), Eigen::VectorXd::Constant(n, inf)};
}

void BoundsSpec::validate(Eigen::Index n) const {
  if (lower.size() != n || upper.size() != n) throw DomainError("bounds size mismatch");
  if ((lower.array() > upper.array()).any()) throw DomainError("bounds: lower > upper");
}

Eigen::VectorXd BoundsSpec::clamp(const Eigen::VectorXd& x) const {
  return x.cwiseMax(lower).cwiseMin(upper);
}

std::string to_string(Termination t) {
  switch (t) {
    case Termination::kGradient: return "gradient";
    case Termination::kCostChange: return "cost_change";
    case Termination::kStepSize: return "step_size";
    case Termination::kMaxIterations: return "max_iterations";
    case Termination::kNoProgress: return "no_progress";
  }
  return "unknown";
}

bool SolverReport::monotone() const {
  for (std::size_t i = 1; i < costs.size(); ++i) {
    if (costs[i] > costs[i - 1]) return false;
  }
  return true;
}

namespace {

struct Linearization {
  double cost = 0.0;
  bool finite = true;
  Eigen::MatrixXd hessian;   // J^T J
  Eigen::VectorXd gradient;  // J^T r
};

double block_costs(std::span<const ResidualBlock> blocks, const Eigen::VectorXd& x, bool& finite) {
  double cost = 0.0;
  Eigen::VectorXd r;
  finite = true;
  for (const ResidualBlock& b : blocks) {
    r.resize(b.residual_count);
    b.evaluate(x, r, nullptr);
    if (!r.allFinite()) {
      finite = false;
      return std::numeric_limits<double>::infinity();
    }
    cost += b.weight * r.squaredNorm();
  }
  return cost;
}

Linearization linearize(std::span<const ResidualBlock> blocks, const Eigen::VectorXd& x) {
  const Eigen::Index n = x.size();
  Linearization lin;
  lin.hessian = Eigen::MatrixXd::Zero(n, n);
  lin.gradient = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd r;
  Eigen::MatrixXd jac;
  Eigen::MatrixXd jtj;
  Eigen::VectorXd jtr;
  for (const ResidualBlock& b : blocks) {
    const auto k = static_cast<Eigen::Index>(b.parameters.size());
    r.resize(b.residual_count);
    jac.setZero(b.residual_count, k);
    b.evaluate(x, r, &jac);
    if (!r.allFinite() || !jac.allFinite()) {
      lin.finite = false;
      return lin;
    }
    lin.cost += b.weight * r.squaredNorm();
    jtj.noalias() = b.weight * (jac.transpose() * jac);
    jtr.noalias() = b.weight * (jac.transpose() * r);
    for (Eigen::Index c = 0; c < k; ++c) {
      const int gc = b.parameters[static_cast<std::size_t>(c)];
      lin.gradient[gc] += jtr[c];
      for (Eigen::Index rr = 0; rr < k; ++rr) {
        lin.hessian(b.parameters[static_cast<std::size_t>(rr)], gc) += jtj(rr, c);
      }
    }
  }
  return lin;
}

// Solves (A + mu*diag(d)) s = -g. Batch problems are block-banded, so large systems
// go through a sparse factorization.
bool solve_damped(const Eigen::MatrixXd& a, const Eigen::VectorXd& diag, double mu,
                  const Eigen::VectorXd& g, Eigen::VectorXd& step) {
  const Eigen::Index m = a.rows();
  if (m <= 96) {
    Eigen::MatrixXd damped = a;
    damped.diagonal() += mu * diag;
    Eigen::LLT<Eigen::MatrixXd> llt(damped);
    if (llt.info() != Eigen::Success) return false;
    step = -llt.solve(g);
    return step.allFinite();
  }
  std::vector<Eigen::Triplet<double>> triplets;
  for (Eigen::Index c = 0; c < m; ++c) {
    for (Eigen::Index r = c; r < m; ++r) {
      double v = a(r, c);
      if (r == c) v += mu * diag[c];
      if (v != 0.0) triplets.emplace_back(r, c, v);
    }
  }
  Eigen::SparseMatrix<double> sparse(m, m);
  sparse.setFromTriplets(triplets.begin(), triplets.end());
  Eigen::SimplicialLLT<Eigen::SparseMatrix<double>, Eigen::Lower> llt(sparse);
  if (llt.info() != Eigen::Success) return false;
  step = -llt.solve(g);
  return llt.info() == Eigen::Success && step.allFinite();
}

}  // namespace

double evaluate_cost(std::span<const ResidualBlock> blocks, const Eigen::VectorXd& x) {
  bool finite = true;
  return block_costs(blocks, x, finite);
}

SolveResult minimize(std::span<const ResidualBlock> blocks, const Eigen::VectorXd& x0,
                     const BoundsSpec& bounds, const SolverOptions& options) {
  const Eigen::Index n = x0.size();
  bounds.validate(n);
  for (const ResidualBlock& b : blocks) {
    for (int p : b.parameters) {
      if (p < 0 || p >= n) throw DomainError("residual block references a missing parameter");
    }
  }

  SolveResult result;
  SolverReport& report = result.report;
  Eigen::VectorXd x = bounds.clamp(x0);
  report.x0_clamped = (x.array() != x0.array()).any();

  Linearization lin = linearize(blocks, x);
  if (!lin.finite) throw DomainError("minimize: non-finite residual or Jacobian at the initial point");
  report.initial_cost = lin.cost;
  report.costs.push_back(lin.cost);

  double mu = options.initial_damping;
  double nu = 2.0;
  report.termination = Termination::kMaxIterations;
  std::vector<Eigen::Index> free_idx;
  free_idx.reserve(static_cast<std::size_t>(n));

  while (report.iterations < options.max_iterations) {
    free_idx.clear();
    double gmax = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double g = lin.gradient[i];
      const bool pinned = (x[i] <= bounds.lower[i] && g > 0.0) || (x[i] >= bounds.upper[i] && g < 0.0);
      if (!pinned) {
        free_idx.push_back(i);
        gmax = std::max(gmax, std::abs(g));
      }
    }
    if (gmax < options.g_tol) {
      report.termination = Termination::kGradient;
      break;
    }

    const auto m = static_cast<Eigen::Index>(free_idx.size());
    Eigen::MatrixXd a(m, m);
    Eigen::VectorXd g(m);
    double diag_max = 0.0;
    for (Eigen::Index c = 0; c < m; ++c) {
      g[c] = lin.gradient[free_idx[static_cast<std::size_t>(c)]];
      for (Eigen::Index r = 0; r < m; ++r) {
        a(r, c) = lin.hessian(free_idx[static_cast<std::size_t>(r)], free_idx[static_cast<std::size_t>(c)]);
      }
      diag_max = std::max(diag_max, a(c, c));
    }
    const double diag_floor = std::max(1e-12 * diag_max, 1e-300);
    const Eigen::VectorXd diag = a.diagonal().cwiseMax(diag_floor);

    ++report.iterations;
    Eigen::VectorXd step_free;
    if (!solve_damped(a, diag, mu, g, step_free)) {
      mu *= nu;
      nu *= 2.0;
      ++report.rejected_steps;
      continue;
    }
    Eigen::VectorXd candidate = x;
    for (Eigen::Index c = 0; c < m; ++c) candidate[free_idx[static_cast<std::size_t>(c)]] += step_free[c];
    candidate = bounds.clamp(candidate);
    const Eigen::VectorXd step = candidate - x;
    if (step.norm() <= 1e-14 * (x.norm() + 1e-14)) {
      report.termination = Termination::kStepSize;
      break;
    }

    bool finite = true;
    const double new_cost = block_costs(blocks, candidate, finite);
    const double predicted = -(2.0 * lin.gradient.dot(step) + step.dot(lin.hessian * step));
    if (finite && new_cost < lin.cost) {
      const double rho = predicted > 0.0 ? (lin.cost - new_cost) / predicted : 1.0;
      mu *= std::max(1.0 / 3.0, 1.0 - std::pow(2.0 * rho - 1.0, 3));
      nu = 2.0;
      const double old_cost = lin.cost;
      x = candidate;
      ++report.accepted_steps;
      Linearization next = linearize(blocks, x);
      if (!next.finite) {
        // Residuals were finite but the Jacobian was not; keep the point, stop here.
        report.costs.push_back(new_cost);
        lin.cost = new_cost;
        report.termination = Termination::kNoProgress;
        break;
      }
      lin = std::move(next);
      report.costs.push_back(lin.cost);
      if (old_cost - lin.cost <= options.f_tol * old_cost) {
        report.termination = Termination::kCostChange;
        break;
      }
    } else {
      ++report.rejected_steps;
      mu *= nu;
      nu *= 2.0;
      if (mu > 1e20) {
        report.termination = Termination::kNoProgress;
        break;
      }
    }
  }

  report.final_cost = lin.cost;
  result.x = std::move(x);
  return result;
}

}  // namespace eventcap
