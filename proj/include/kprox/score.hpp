#pragma once

#include "kprox/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <numbers>
#include <vector>

namespace kprox {

/// Anything exposing grad_z log p(z) for an (unnormalised) target density p.
/// log_density is only required to agree with score up to an additive constant.
template <class S>
concept ScoreModel = requires(const S& s, const Vector& z) {
  { s.dim() } -> std::convertible_to<std::size_t>;
  { s.score(z) } -> std::convertible_to<Vector>;
  { s.log_density(z) } -> std::convertible_to<double>;
};

/// Scores of every row of Z. Uses the model's batched path when it has one.
template <ScoreModel S>
Matrix score_rows(const S& model, const Matrix& Z)
{
  if constexpr (requires { { model.score_batch(Z) } -> std::convertible_to<Matrix>; }) {
    return model.score_batch(Z);
  } else {
    Matrix out(Z.rows(), Z.cols());
    for (Eigen::Index i = 0; i < Z.rows(); ++i)
      out.row(i) = model.score(Z.row(i).transpose()).transpose();
    return out;
  }
}

// ---------------------------------------------------------------------------
// Gaussian with diagonal covariance
// ---------------------------------------------------------------------------

inline Vector gaussian_score(const Vector& z, const Vector& mean, const Vector& var)
{
  detail::require(z.size() == mean.size() && z.size() == var.size(),
                  "gaussian_score: dimension mismatch");
  return ((mean - z).array() / var.array()).matrix();
}

struct GaussianScore
{
  Vector mean;
  Vector var;

  GaussianScore(Vector m, Vector v) : mean(std::move(m)), var(std::move(v))
  {
    detail::require(mean.size() == var.size(), "GaussianScore: mean/var size mismatch");
    detail::require((var.array() > 0.0).all(), "GaussianScore: variances must be positive");
  }

  std::size_t dim() const { return static_cast<std::size_t>(mean.size()); }
  Vector score(const Vector& z) const { return gaussian_score(z, mean, var); }
  double log_density(const Vector& z) const
  {
    detail::require(z.size() == mean.size(), "GaussianScore: dimension mismatch");
    return -0.5 * ((z - mean).array().square() / var.array()).sum();
  }
};

struct StandardNormalPrior
{
  std::size_t d = 1;

  std::size_t dim() const { return d; }
  Vector score(const Vector& z) const
  {
    detail::require(static_cast<std::size_t>(z.size()) == d,
                    "StandardNormalPrior: dimension mismatch");
    return -z;
  }
  Matrix score_batch(const Matrix& Z) const { return -Z; }
  double log_density(const Vector& z) const { return -0.5 * z.squaredNorm(); }
};

// ---------------------------------------------------------------------------
// One-dimensional Gaussian mixture
// ---------------------------------------------------------------------------

namespace detail {

// log of each weighted component density (shared normaliser dropped).
inline void gmm1d_log_components(double z, const std::vector<double>& weights,
                                 const std::vector<double>& means,
                                 const std::vector<double>& stds, std::vector<double>& out)
{
  out.resize(weights.size());
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const double u = (z - means[k]) / stds[k];
    out[k] = std::log(weights[k]) - std::log(stds[k]) - 0.5 * u * u;
  }
}

} // namespace detail

/// d/dz log sum_k w_k N(z; m_k, s_k^2), with log-sum-exp stabilised weights.
inline double gmm1d_score(double z, const std::vector<double>& weights,
                          const std::vector<double>& means, const std::vector<double>& stds)
{
  thread_local std::vector<double> lc;
  detail::gmm1d_log_components(z, weights, means, stds, lc);
  const double mx = *std::max_element(lc.begin(), lc.end());
  double norm = 0.0;
  double acc = 0.0;
  for (std::size_t k = 0; k < lc.size(); ++k) {
    const double r = std::exp(lc[k] - mx);
    norm += r;
    acc += r * (means[k] - z) / (stds[k] * stds[k]);
  }
  return acc / norm;
}

struct GaussianMixture1D
{
  std::vector<double> weights;
  std::vector<double> means;
  std::vector<double> stds;

  GaussianMixture1D(std::vector<double> w, std::vector<double> m, std::vector<double> s)
    : weights(std::move(w)), means(std::move(m)), stds(std::move(s))
  {
    detail::require(!weights.empty() && weights.size() == means.size() &&
                      weights.size() == stds.size(),
                    "GaussianMixture1D: component lists must be non-empty and equal length");
    double total = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      detail::require(weights[k] > 0.0, "GaussianMixture1D: weights must be positive");
      detail::require(stds[k] > 0.0, "GaussianMixture1D: std-devs must be positive");
      total += weights[k];
    }
    detail::require(std::abs(total - 1.0) < 1e-9, "GaussianMixture1D: weights must sum to 1");
  }

  /// 1/2 N(-2, 0.5^2) + 1/2 N(2, 0.5^2): the bimodal toy posterior.
  static GaussianMixture1D bimodal_toy() { return {{0.5, 0.5}, {-2.0, 2.0}, {0.5, 0.5}}; }

  std::size_t dim() const { return 1; }
  Vector score(const Vector& z) const
  {
    detail::require(z.size() == 1, "GaussianMixture1D: expects 1-D input");
    return Vector::Constant(1, gmm1d_score(z[0], weights, means, stds));
  }
  Matrix score_batch(const Matrix& Z) const
  {
    detail::require(Z.cols() == 1, "GaussianMixture1D: expects 1-D input");
    Matrix out(Z.rows(), 1);
    for (Eigen::Index i = 0; i < Z.rows(); ++i)
      out(i, 0) = gmm1d_score(Z(i, 0), weights, means, stds);
    return out;
  }
  double log_density(const Vector& z) const
  {
    std::vector<double> lc;
    detail::gmm1d_log_components(z[0], weights, means, stds, lc);
    const double mx = *std::max_element(lc.begin(), lc.end());
    double s = 0.0;
    for (double v : lc)
      s += std::exp(v - mx);
    return mx + std::log(s);
  }

  /// Normalised density, for plots and KDE comparisons.
  double pdf(double z) const
  {
    double p = 0.0;
    for (std::size_t k = 0; k < weights.size(); ++k) {
      const double u = (z - means[k]) / stds[k];
      p += weights[k] * std::exp(-0.5 * u * u) / (stds[k] * std::sqrt(2.0 * std::numbers::pi));
    }
    return p;
  }

  template <class R>
  double sample(R& rng) const
  {
    std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
    const std::size_t k = pick(rng);
    std::normal_distribution<double> n(means[k], stds[k]);
    return n(rng);
  }
};

// ---------------------------------------------------------------------------
// Posterior of a decoder p(t | z) = N(t; g(z), s2 I) under a N(0, I) prior
// ---------------------------------------------------------------------------

/// Holds a reference to the decoder; the decoder must outlive this object and
/// must not change while scores are being evaluated.
class DecoderPosterior
{
public:
  DecoderPosterior(const MlpParams& decoder, Vector target, double noise_var = 1.0)
    : decoder_(&decoder), target_(std::move(target)), noise_var_(noise_var)
  {
    detail::require(static_cast<std::size_t>(target_.size()) == decoder.output_dim(),
                    "DecoderPosterior: observation length " + std::to_string(target_.size()) +
                      " != decoder output dim " + std::to_string(decoder.output_dim()));
    detail::require(noise_var > 0.0, "DecoderPosterior: noise variance must be positive");
  }

  std::size_t dim() const { return decoder_->input_dim(); }
  const Vector& target() const { return target_; }
  double noise_var() const { return noise_var_; }
  const MlpParams& decoder() const { return *decoder_; }

  /// J^T (t - g(z)) / s2 - z, one row per particle.
  Matrix score_batch(const Matrix& Z) const
  {
    const MlpCache cache = mlp_forward_batch(*decoder_, Z);
    Matrix resid = (-cache.output()).rowwise() + target_.transpose();
    resid /= noise_var_;
    Matrix grad_in;
    mlp_backward_batch(*decoder_, cache, resid, nullptr, &grad_in);
    return grad_in - Z;
  }

  Vector score(const Vector& z) const
  {
    detail::require(static_cast<std::size_t>(z.size()) == dim(),
                    "DecoderPosterior: latent dimension mismatch");
    return score_batch(z.transpose()).row(0).transpose();
  }

  /// log N(t; g(z), s2 I) + log N(z; 0, I), constants dropped.
  double log_density(const Vector& z) const
  {
    const Vector out = mlp_forward(*decoder_, z).output;
    return -0.5 * (target_ - out).squaredNorm() / noise_var_ - 0.5 * z.squaredNorm();
  }

private:
  const MlpParams* decoder_;
  Vector target_;
  double noise_var_;
};

inline Vector decoder_posterior_score(const DecoderPosterior& model, const Vector& z)
{
  return model.score(z);
}

} // namespace kprox
