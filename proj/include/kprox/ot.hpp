#pragma once

#include "kprox/io.hpp"
#include "kprox/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <span>
#include <vector>

namespace kprox {

/// C_ij = |a_i - b_j|^2 for point sets stored one point per row.
inline Matrix cost_matrix(const Matrix& A, const Matrix& B)
{
  detail::require(A.rows() == B.rows(), "cost_matrix: point sets differ in cardinality");
  detail::require(A.cols() == B.cols(), "cost_matrix: point sets differ in dimension");
  const Vector a2 = A.rowwise().squaredNorm();
  const Vector b2 = B.rowwise().squaredNorm();
  Matrix C = -2.0 * A * B.transpose();
  C.colwise() += a2;
  C.rowwise() += b2.transpose();
  // Cancellation can leave tiny negatives; exact zeros where points coincide.
  return C.cwiseMax(0.0);
}

struct SinkhornConfig
{
  double entropic_eps = 0.05;
  std::size_t max_iters = 1000;
  double marginal_tol = 1e-8;
  // Skip the plain-domain attempt and iterate on log-scalings directly.
  bool stabilized = false;

  void validate() const
  {
    detail::require(entropic_eps > 0.0, "sinkhorn: entropic eps must be positive");
    detail::require(marginal_tol > 0.0, "sinkhorn: marginal tolerance must be positive");
    detail::require(max_iters >= 1, "sinkhorn: max_iters must be >= 1");
  }
};

/// pi = diag(mu) K diag(nu) with K = exp(-C / eps). Scalings are kept as logs so
/// they stay representable when the log-domain path was needed.
struct TransportPlan
{
  Matrix pi;
  Vector log_mu;
  Vector log_nu;
  bool converged = false;
  std::size_t iterations_used = 0;
  bool log_domain = false;
  double marginal_error = std::numeric_limits<double>::infinity();

  std::size_t size() const { return static_cast<std::size_t>(pi.rows()); }
};

/// Largest deviation of any row or column sum from 1/n.
inline double marginal_violation(const Matrix& pi)
{
  const double target = 1.0 / static_cast<double>(pi.rows());
  const double r = (pi.rowwise().sum().array() - target).abs().maxCoeff();
  const double c = (pi.colwise().sum().array() - target).abs().maxCoeff();
  return std::max(r, c);
}

namespace detail {

// exp(-x) stays a normal double for x below about 708.
inline constexpr double kPlainExponentLimit = 700.0;

// Plain scaling iterations. Returns false when some kernel entry would
// underflow or the scalings degenerate. Balancing a kernel with flushed
// zeros converges to the plan of a different problem, so any underflow
// sends the solver to the log domain.
inline bool sinkhorn_plain(const Matrix& C, const SinkhornConfig& cfg, TransportPlan& plan)
{
  const Eigen::Index n = C.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  if (C.maxCoeff() / cfg.entropic_eps > kPlainExponentLimit)
    return false;
  const Matrix K = (-C / cfg.entropic_eps).array().exp().matrix();

  Vector mu = Vector::Constant(n, inv_n);
  Vector nu = Vector::Constant(n, inv_n);
  double err = std::numeric_limits<double>::infinity();
  std::size_t it = 0;
  while (it < cfg.max_iters) {
    ++it;
    const Vector Knu = K * nu;
    mu = (inv_n / Knu.array()).matrix();
    const Vector Ktmu = K.transpose() * mu;
    nu = (inv_n / Ktmu.array()).matrix();
    if (!mu.allFinite() || !nu.allFinite() || (mu.array() <= 0.0).any() ||
        (nu.array() <= 0.0).any())
      return false;
    // Columns are exact after the nu update; rows measure convergence.
    const Vector rows = (mu.array() * (K * nu).array()).matrix();
    err = (rows.array() - inv_n).abs().maxCoeff();
    if (!std::isfinite(err))
      return false;
    if (err <= cfg.marginal_tol)
      break;
  }
  plan.pi = mu.asDiagonal() * K * nu.asDiagonal();
  if (!plan.pi.allFinite())
    return false;
  plan.log_mu = mu.array().log().matrix();
  plan.log_nu = nu.array().log().matrix();
  plan.iterations_used = it;
  plan.marginal_error = marginal_violation(plan.pi);
  plan.converged = plan.marginal_error <= cfg.marginal_tol;
  plan.log_domain = false;
  return true;
}

// Row-wise log-sum-exp of (M + shift broadcast along rows).
inline Vector row_lse(const Matrix& M, const Vector& shift)
{
  Matrix S = M.rowwise() + shift.transpose();
  const Vector mx = S.rowwise().maxCoeff();
  S.colwise() -= mx;
  return mx + S.array().exp().rowwise().sum().log().matrix();
}

inline void sinkhorn_log(const Matrix& C, const SinkhornConfig& cfg, TransportPlan& plan,
                         const Vector* start_log_nu = nullptr)
{
  const Eigen::Index n = C.rows();
  const double inv_n = 1.0 / static_cast<double>(n);
  const double log_inv_n = std::log(inv_n);
  const Matrix LK = -C / cfg.entropic_eps;
  const Matrix LKt = LK.transpose();
  Vector lmu = Vector::Constant(n, log_inv_n);
  Vector lnu = start_log_nu ? *start_log_nu : Vector::Constant(n, log_inv_n);
  std::size_t it = 0;
  for (;;) {
    // Row log-masses under the current scalings drive both the convergence
    // check and the next mu update.
    const Vector rl = row_lse(LK, lnu);
    if (it > 0) {
      const double err = ((lmu + rl).array().exp() - inv_n).abs().maxCoeff();
      if (!std::isfinite(err))
        throw NumericalError("sinkhorn: log-domain iterations produced non-finite scalings");
      if (err <= cfg.marginal_tol || it >= cfg.max_iters)
        break;
    }
    lmu = (log_inv_n - rl.array()).matrix();
    lnu = (log_inv_n - row_lse(LKt, lmu).array()).matrix();
    ++it;
  }
  plan.pi = ((LK.colwise() + lmu).rowwise() + lnu.transpose()).array().exp().matrix();
  plan.log_mu = lmu;
  plan.log_nu = lnu;
  plan.iterations_used = it;
  plan.marginal_error = marginal_violation(plan.pi);
  plan.converged = plan.marginal_error <= cfg.marginal_tol;
  plan.log_domain = true;
}

} // namespace detail

inline void check_plan_support(const TransportPlan& plan)
{
  if ((plan.pi.rowwise().sum().array() <= 0.0).any() ||
      (plan.pi.colwise().sum().array() <= 0.0).any())
    throw NumericalError("sinkhorn: plan has an empty row or column even in the log domain");
}

/// Sinkhorn-Knopp with uniform marginals 1/n on both sides:
///   mu_i <- 1 / (n sum_j nu_j K_ij),  nu_j <- 1 / (n sum_i mu_i K_ij).
/// Plain scalings are tried first; on underflow or overflow the solver
/// restarts in the log domain.
inline TransportPlan sinkhorn(const Matrix& C, const SinkhornConfig& cfg)
{
  cfg.validate();
  detail::require(C.rows() > 0 && C.rows() == C.cols(), "sinkhorn: cost matrix must be square");
  detail::require(C.allFinite(), "sinkhorn: cost matrix has non-finite entries");
  TransportPlan plan;
  if (!cfg.stabilized && detail::sinkhorn_plain(C, cfg, plan))
    return plan;
  detail::sinkhorn_log(C, cfg, plan);
  check_plan_support(plan);
  return plan;
}

/// Log-domain iterations resumed from the column scalings of an earlier,
/// unconverged attempt on the same cost matrix. Iteration count is cumulative.
inline TransportPlan sinkhorn_resume(const Matrix& C, const SinkhornConfig& cfg,
                                     const TransportPlan& from)
{
  cfg.validate();
  detail::require(from.log_nu.size() == C.cols() && from.log_nu.allFinite(),
                  "sinkhorn_resume: previous scalings do not fit the cost matrix");
  TransportPlan plan;
  detail::sinkhorn_log(C, cfg, plan, &from.log_nu);
  plan.iterations_used += from.iterations_used;
  check_plan_support(plan);
  return plan;
}

/// <pi, C>.
inline double ot_cost(const TransportPlan& plan, const Matrix& C)
{
  detail::require(plan.pi.rows() == C.rows() && plan.pi.cols() == C.cols(),
                  "ot_cost: plan and cost shapes differ");
  return (plan.pi.array() * C.array()).sum();
}

/// <pi, C> + eps * sum pi (log pi - 1), the entropic objective at `plan`.
inline double entropic_value(const TransportPlan& plan, const Matrix& C, double eps)
{
  double ent = 0.0;
  for (Eigen::Index i = 0; i < plan.pi.size(); ++i) {
    const double p = plan.pi.data()[i];
    if (p > 0.0)
      ent += p * (std::log(p) - 1.0);
  }
  return ot_cost(plan, C) + eps * ent;
}

/// Row j: -2 sum_i pi_ij (z_i - zhat_j), the derivative of the optimal
/// transport value with respect to prediction zhat_j at fixed plan.
inline Matrix envelope_grad_predictions(const TransportPlan& plan, const Matrix& Z,
                                        const Matrix& Zhat)
{
  detail::require(Z.rows() == Zhat.rows() && Z.cols() == Zhat.cols(),
                  "envelope_grad: target and prediction sets differ in shape");
  detail::require(plan.pi.rows() == Z.rows() && plan.pi.cols() == Zhat.rows(),
                  "envelope_grad: plan shape does not match point sets");
  const Vector col_mass = plan.pi.colwise().sum().transpose();
  Matrix G = plan.pi.transpose() * Z;
  G -= col_mass.asDiagonal() * Zhat;
  return -2.0 * G;
}

/// Exact W2 between two 1-D empirical distributions: the L2 distance between
/// their quantile functions. Unequal sizes are handled by merging the
/// breakpoints of both step quantile functions.
inline double wasserstein2_1d_exact(std::span<const double> a, std::span<const double> b)
{
  detail::require(!a.empty() && !b.empty(), "wasserstein2_1d_exact: empty sample");
  std::vector<double> sa(a.begin(), a.end());
  std::vector<double> sb(b.begin(), b.end());
  std::sort(sa.begin(), sa.end());
  std::sort(sb.begin(), sb.end());
  const std::size_t n = sa.size();
  const std::size_t m = sb.size();
  double acc = 0.0;
  if (n == m) {
    for (std::size_t i = 0; i < n; ++i)
      acc += (sa[i] - sb[i]) * (sa[i] - sb[i]);
    return std::sqrt(acc / static_cast<double>(n));
  }
  // Walk the merged grid {i/n} U {j/m} with integer arithmetic on a common
  // denominator n*m.
  std::size_t i = 0;
  std::size_t j = 0;
  std::size_t pos = 0;
  while (i < n && j < m) {
    const std::size_t next_a = (i + 1) * m;
    const std::size_t next_b = (j + 1) * n;
    const std::size_t next = std::min(next_a, next_b);
    const double d = sa[i] - sb[j];
    acc += d * d * static_cast<double>(next - pos);
    pos = next;
    if (next_a == next)
      ++i;
    if (next_b == next)
      ++j;
  }
  return std::sqrt(acc / (static_cast<double>(n) * static_cast<double>(m)));
}

/// i,j,pi_ij
inline void write_plan_csv(std::ostream& out, const TransportPlan& plan)
{
  out << "i,j,pi_ij\n";
  for (Eigen::Index i = 0; i < plan.pi.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.pi.cols(); ++j)
      out << i << ',' << j << ',' << format_double(plan.pi(i, j)) << '\n';
}

} // namespace kprox
