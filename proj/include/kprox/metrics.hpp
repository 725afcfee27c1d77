#pragma once

#include "kprox/io.hpp"
#include "kprox/numcore.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace kprox {

enum class LabelSpace { standardized, original };

inline std::string to_string(LabelSpace s)
{
  return s == LabelSpace::standardized ? "standardized" : "original";
}

struct MetricReport
{
  double r2 = 0.0;
  double rmse = 0.0;
  double mae = 0.0;
  std::optional<double> mape; // percent; empty when some target is zero
  std::size_t n = 0;
  LabelSpace label_space = LabelSpace::standardized;
};

inline MetricReport regression_metrics(std::span<const double> y, std::span<const double> yhat,
                                       LabelSpace space = LabelSpace::standardized)
{
  detail::require(!y.empty(), "regression_metrics: empty input");
  detail::require(y.size() == yhat.size(), "regression_metrics: length mismatch");
  const double n = static_cast<double>(y.size());
  double mean = 0.0;
  for (double v : y)
    mean += v;
  mean /= n;

  double ss_res = 0.0;
  double ss_tot = 0.0;
  double abs_err = 0.0;
  double ape = 0.0;
  bool mape_defined = true;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double e = y[i] - yhat[i];
    ss_res += e * e;
    ss_tot += (y[i] - mean) * (y[i] - mean);
    abs_err += std::abs(e);
    if (y[i] == 0.0)
      mape_defined = false;
    else
      ape += std::abs(e / y[i]);
  }
  MetricReport r;
  r.n = y.size();
  r.label_space = space;
  r.rmse = std::sqrt(ss_res / n);
  r.mae = abs_err / n;
  r.r2 = ss_tot > 0.0 ? 1.0 - ss_res / ss_tot : (ss_res == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity());
  if (mape_defined)
    r.mape = 100.0 * ape / n;
  return r;
}

inline MetricReport regression_metrics(const Vector& y, const Vector& yhat,
                                       LabelSpace space = LabelSpace::standardized)
{
  return regression_metrics(std::span<const double>(y.data(), static_cast<std::size_t>(y.size())),
                            std::span<const double>(yhat.data(), static_cast<std::size_t>(yhat.size())),
                            space);
}

inline nlohmann::json to_json(const MetricReport& r)
{
  nlohmann::json j;
  j["r2"] = r.r2;
  j["rmse"] = r.rmse;
  j["mae"] = r.mae;
  if (r.mape)
    j["mape"] = *r.mape;
  else
    j["mape"] = "undefined";
  j["n"] = r.n;
  j["label_space"] = to_string(r.label_space);
  return j;
}

// ---------------------------------------------------------------------------
// Kernel density estimation
// ---------------------------------------------------------------------------

/// Silverman's rule of thumb, 1.06 * std * n^(-1/5).
inline double silverman_bandwidth(std::span<const double> samples)
{
  const double n = static_cast<double>(samples.size());
  double mean = 0.0;
  for (double v : samples)
    mean += v;
  mean /= n;
  double var = 0.0;
  for (double v : samples)
    var += (v - mean) * (v - mean);
  var /= std::max(1.0, n - 1.0);
  return 1.06 * std::sqrt(var) * std::pow(n, -0.2);
}

/// Gaussian-kernel density of `samples` evaluated at each grid point.
inline std::vector<double> kde_1d(std::span<const double> samples, std::span<const double> grid,
                                  std::optional<double> bandwidth = std::nullopt)
{
  detail::require(samples.size() >= 2 || bandwidth.has_value(),
                  "kde_1d: need at least two samples (or an explicit bandwidth)");
  const double h = bandwidth ? *bandwidth : silverman_bandwidth(samples);
  if (!(h > 0.0))
    throw InputError("kde_1d: samples are degenerate (all equal); pass an explicit bandwidth");

  std::vector<double> sorted(samples.begin(), samples.end());
  std::sort(sorted.begin(), sorted.end());
  const double norm = 1.0 / (static_cast<double>(sorted.size()) * h * std::sqrt(2.0 * std::numbers::pi));
  // Contributions beyond 10 bandwidths are below 1e-21 and skipped.
  const double reach = 10.0 * h;
  std::vector<double> out(grid.size());
  for (std::size_t g = 0; g < grid.size(); ++g) {
    const double x = grid[g];
    auto lo = std::lower_bound(sorted.begin(), sorted.end(), x - reach);
    auto hi = std::upper_bound(lo, sorted.end(), x + reach);
    double acc = 0.0;
    for (auto it = lo; it != hi; ++it) {
      const double u = (x - *it) / h;
      acc += std::exp(-0.5 * u * u);
    }
    out[g] = acc * norm;
  }
  return out;
}

inline std::vector<double> linspace(double lo, double hi, std::size_t n)
{
  std::vector<double> g(n);
  for (std::size_t i = 0; i < n; ++i)
    g[i] = n == 1 ? lo : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n - 1);
  return g;
}

inline double trapezoid(std::span<const double> x, std::span<const double> y)
{
  double acc = 0.0;
  for (std::size_t i = 1; i < x.size(); ++i)
    acc += 0.5 * (y[i] + y[i - 1]) * (x[i] - x[i - 1]);
  return acc;
}

/// Fractions of samples left and right of `boundary`; ties count half to each side.
inline std::pair<double, double> mode_masses(std::span<const double> samples, double boundary)
{
  detail::require(!samples.empty(), "mode_masses: empty input");
  double left = 0.0;
  for (double v : samples) {
    if (v < boundary)
      left += 1.0;
    else if (v == boundary)
      left += 0.5;
  }
  left /= static_cast<double>(samples.size());
  return {left, 1.0 - left};
}

// ---------------------------------------------------------------------------
// Exponential-family KL gap for 1-D Gaussians
// ---------------------------------------------------------------------------
//
// Natural parameters eta = (mu / s^2, -1 / (2 s^2)) with sufficient statistic
// (z, z^2). The Fisher information in eta is the covariance of (z, z^2):
//   [[s^2, 2 mu s^2], [2 mu s^2, 2 s^4 + 4 mu^2 s^2]].

struct NaturalParams
{
  double eta1;
  double eta2;
};

inline NaturalParams gaussian_natural(double mu, double sigma)
{
  const double s2 = sigma * sigma;
  return {mu / s2, -0.5 / s2};
}

inline std::pair<double, double> gaussian_from_natural(NaturalParams e)
{
  const double s2 = -0.5 / e.eta2;
  return {e.eta1 * s2, std::sqrt(s2)};
}

/// d^T I(eta) d for direction d.
inline double fisher_quadratic(NaturalParams at, double d1, double d2)
{
  const auto [mu, sigma] = gaussian_from_natural(at);
  const double s2 = sigma * sigma;
  const double i11 = s2;
  const double i12 = 2.0 * mu * s2;
  const double i22 = 2.0 * s2 * s2 + 4.0 * mu * mu * s2;
  return i11 * d1 * d1 + 2.0 * i12 * d1 * d2 + i22 * d2 * d2;
}

/// KL[N(mu1, s1^2) || N(mu2, s2^2)].
inline double gaussian_kl(double mu1, double s1, double mu2, double s2)
{
  return std::log(s2 / s1) + (s1 * s1 + (mu1 - mu2) * (mu1 - mu2)) / (2.0 * s2 * s2) - 0.5;
}

struct KlGap
{
  double kl;
  double quadratic_form;
};

/// Quadratic form 1/2 d^T I(eta*) d with d = eta(Q) - eta(P), where eta* is the
/// point on the segment between the two parameter vectors at which the
/// curvature along d is smallest. Because
///   KL = integral_0^1 (1 - t) d^T I(eta_Q + t d) d dt,
/// this form is a guaranteed lower bound on KL; `at_q` is the form with the
/// Fisher information taken at Q instead.
struct KlGapDetail
{
  double kl;
  double quadratic_form;
  double quadratic_form_at_q;
  double quadratic_form_at_p;
};

inline KlGapDetail kl_quadratic_gap(double mu1, double sigma1, double mu2, double sigma2)
{
  detail::require(sigma1 > 0.0 && sigma2 > 0.0, "kl_quadratic_gap: sigma must be positive");
  const NaturalParams q = gaussian_natural(mu1, sigma1);
  const NaturalParams p = gaussian_natural(mu2, sigma2);
  const double d1 = p.eta1 - q.eta1;
  const double d2 = p.eta2 - q.eta2;
  KlGapDetail out;
  out.kl = gaussian_kl(mu1, sigma1, mu2, sigma2);
  out.quadratic_form_at_q = 0.5 * fisher_quadratic(q, d1, d2);
  out.quadratic_form_at_p = 0.5 * fisher_quadratic(p, d1, d2);
  constexpr int kGrid = 2048;
  double best = std::min(out.quadratic_form_at_q, out.quadratic_form_at_p);
  for (int k = 1; k < kGrid; ++k) {
    const double t = static_cast<double>(k) / kGrid;
    best = std::min(best, 0.5 * fisher_quadratic({q.eta1 + t * d1, q.eta2 + t * d2}, d1, d2));
  }
  out.quadratic_form = best;
  return out;
}

/// Equal-variance case: the gap direction is pure mean shift and the form
/// equals the KL exactly.
inline KlGap kl_quadratic_gap(double mu1, double mu2, double sigma)
{
  const auto d = kl_quadratic_gap(mu1, sigma, mu2, sigma);
  return {d.kl, d.quadratic_form};
}

} // namespace kprox
