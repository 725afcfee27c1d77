#pragma once

#include "kprox/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace kprox {

/// Empirical distribution over latent particles; row i is particle i.
struct ParticleEnsemble
{
  Matrix particles;
  std::size_t step_index = 0;

  std::size_t size() const { return static_cast<std::size_t>(particles.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(particles.cols()); }
  Vector particle(std::size_t i) const
  {
    return particles.row(static_cast<Eigen::Index>(i)).transpose();
  }
  Vector mean() const { return particles.colwise().mean().transpose(); }
};

/// K(z, z') = exp(-|z - z'|^2 / (2 h^2)). h = 1 reproduces the plain RBF kernel.
struct KernelConfig
{
  double bandwidth = 1.0;
  // Re-estimate the bandwidth from the current ensemble at every sampler step.
  bool median_heuristic = false;

  void validate() const
  {
    detail::require(bandwidth > 0.0 && std::isfinite(bandwidth),
                    "kernel bandwidth must be positive");
  }
};

inline double rbf_kernel(const Vector& z, const Vector& zp, const KernelConfig& cfg)
{
  detail::require(z.size() == zp.size(), "rbf_kernel: dimension mismatch");
  cfg.validate();
  const double h2 = cfg.bandwidth * cfg.bandwidth;
  return std::exp(-(z - zp).squaredNorm() / (2.0 * h2));
}

/// Gradient of K(z', z) with respect to its first argument z'.
inline Vector rbf_grad_first(const Vector& zp, const Vector& z, const KernelConfig& cfg)
{
  detail::require(z.size() == zp.size(), "rbf_grad_first: dimension mismatch");
  cfg.validate();
  const double h2 = cfg.bandwidth * cfg.bandwidth;
  const Vector diff = zp - z;
  return -(diff / h2) * std::exp(-diff.squaredNorm() / (2.0 * h2));
}

/// (1/l) sum_i grad_{z'} K(z', z) at z' = z_i. Points away from the particles,
/// so adding it to a particle's velocity spreads the ensemble.
inline Vector ensemble_repulsion(const Matrix& particles, const Vector& z,
                                 const KernelConfig& cfg)
{
  detail::require(particles.rows() > 0, "ensemble_repulsion: empty ensemble");
  detail::require(particles.cols() == z.size(), "ensemble_repulsion: dimension mismatch");
  const double h2 = cfg.bandwidth * cfg.bandwidth;
  Vector acc = Vector::Zero(z.size());
  for (Eigen::Index i = 0; i < particles.rows(); ++i) {
    const Vector diff = z - particles.row(i).transpose();
    acc += diff * std::exp(-diff.squaredNorm() / (2.0 * h2));
  }
  return acc / (h2 * static_cast<double>(particles.rows()));
}

inline Vector ensemble_repulsion(const ParticleEnsemble& ens, const Vector& z,
                                 const KernelConfig& cfg)
{
  return ensemble_repulsion(ens.particles, z, cfg);
}

/// Repulsion evaluated at every particle of the ensemble itself (row i is the
/// term for particle i). Uses the kernel's symmetry to halve the work.
inline Matrix ensemble_repulsion_all(const Matrix& particles, const KernelConfig& cfg)
{
  detail::require(particles.rows() > 0, "ensemble_repulsion: empty ensemble");
  const Eigen::Index n = particles.rows();
  const Eigen::Index d = particles.cols();
  const double inv_2h2 = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
  Matrix out = Matrix::Zero(n, d);
  if (d == 1) {
    const double* z = particles.data();
    double* o = out.data();
    for (Eigen::Index i = 0; i < n; ++i) {
      double acc = 0.0;
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const double diff = z[i] - z[j];
        const double t = diff * std::exp(-diff * diff * inv_2h2);
        acc += t;
        o[j] -= t;
      }
      o[i] += acc;
    }
  } else {
    for (Eigen::Index i = 0; i < n; ++i) {
      for (Eigen::Index j = i + 1; j < n; ++j) {
        const auto diff = (particles.row(i) - particles.row(j)).eval();
        const double k = std::exp(-diff.squaredNorm() * inv_2h2);
        out.row(i) += k * diff;
        out.row(j) -= k * diff;
      }
    }
  }
  return out * (2.0 * inv_2h2 / static_cast<double>(n));
}

/// bandwidth^2 = median pairwise squared distance / (2 log(l + 1)).
inline double median_heuristic_bandwidth(const Matrix& particles)
{
  const Eigen::Index n = particles.rows();
  if (n < 2)
    return 1.0;
  std::vector<double> d2;
  d2.reserve(static_cast<std::size_t>(n * (n - 1) / 2));
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = i + 1; j < n; ++j)
      d2.push_back((particles.row(i) - particles.row(j)).squaredNorm());
  auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
  std::nth_element(d2.begin(), mid, d2.end());
  const double med = *mid;
  const double h2 = med / (2.0 * std::log(static_cast<double>(n) + 1.0));
  return h2 > 0.0 ? std::sqrt(h2) : 1.0;
}

} // namespace kprox
