#pragma once

#include "kprox/kernel.hpp"
#include "kprox/ot.hpp"
#include "kprox/score.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

namespace kprox {

/// Outcome of one family of finite-difference checks.
struct GradCheckResult
{
  std::string name;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct GradCheckOptions
{
  std::uint64_t seed = 0;
  std::size_t instances = 24;
  // Name of a check whose analytic gradient is deliberately perturbed, to
  // demonstrate that failures are detected.
  std::string corrupt;
};

/// Norm-wise relative error |a - f| / max(|a|, |f|); zero when both vanish.
inline double relative_error(const Vector& analytic, const Vector& numeric)
{
  const double scale = std::max(analytic.norm(), numeric.norm());
  if (scale == 0.0)
    return 0.0;
  return (analytic - numeric).norm() / scale;
}

/// Central differences of a scalar function at x.
inline Vector central_difference(const std::function<double(const Vector&)>& f, const Vector& x,
                                 double h)
{
  Vector g(x.size());
  Vector xp = x;
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double orig = xp[i];
    xp[i] = orig + h;
    const double fp = f(xp);
    xp[i] = orig - h;
    const double fm = f(xp);
    xp[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

namespace detail {

inline Vector uniform_vector(Eigen::Index n, double lo, double hi, Rng& rng)
{
  std::uniform_real_distribution<double> u(lo, hi);
  Vector v(n);
  for (auto& x : v)
    x = u(rng);
  return v;
}

inline Vector flat_vector(const MlpParams& p)
{
  const auto f = flatten(p);
  return Eigen::Map<const Vector>(f.data(), static_cast<Eigen::Index>(f.size()));
}

inline Vector flat_vector(const MlpGradients& g)
{
  const auto f = flatten(g);
  return Eigen::Map<const Vector>(f.data(), static_cast<Eigen::Index>(f.size()));
}

inline void unflatten_into(MlpParams& p, const Vector& v)
{
  Eigen::Index k = 0;
  for_each_block(p, [&](std::span<double> block) {
    for (double& x : block)
      x = v[k++];
  });
}

inline MlpParams random_mlp(Rng& rng, Activation act)
{
  std::uniform_int_distribution<std::size_t> width(2, 6);
  std::vector<std::size_t> dims{width(rng), width(rng), width(rng), width(rng)};
  return MlpParams::random(dims, act, rng);
}

inline Activation smooth_activation(std::size_t i)
{
  // relu is included; a kink inside the difference stencil is improbable at
  // the step sizes used.
  static constexpr Activation acts[] = {Activation::tanh, Activation::identity, Activation::relu};
  return acts[i % 3];
}

inline GradCheckResult finish(std::string name, std::size_t n, double worst, double tol)
{
  return {std::move(name), n, worst, tol, worst <= tol};
}

} // namespace detail

/// d/dtheta of w . mlp(x) against central differences.
inline GradCheckResult check_mlp_params(const GradCheckOptions& opt)
{
  Rng rng = make_rng(opt.seed, "gradcheck-mlp-params");
  double worst = 0.0;
  for (std::size_t n = 0; n < opt.instances; ++n) {
    MlpParams p = detail::random_mlp(rng, detail::smooth_activation(n));
    const Vector x = detail::uniform_vector(static_cast<Eigen::Index>(p.input_dim()), -1.5, 1.5, rng);
    const Vector w = detail::uniform_vector(static_cast<Eigen::Index>(p.output_dim()), -1, 1, rng);
    const auto fwd = mlp_forward(p, x);
    Vector analytic = detail::flat_vector(mlp_backward_params(p, fwd.cache, w));
    if (opt.corrupt == "mlp_params")
      analytic *= 1.01;
    const Vector theta = detail::flat_vector(p);
    MlpParams q = p;
    auto f = [&](const Vector& t) {
      detail::unflatten_into(q, t);
      return w.dot(mlp_forward(q, x).output);
    };
    worst = std::max(worst, relative_error(analytic, central_difference(f, theta, 1e-6)));
  }
  return detail::finish("mlp_params", opt.instances, worst, 1e-4);
}

/// d/dx of w . mlp(x).
inline GradCheckResult check_mlp_input(const GradCheckOptions& opt)
{
  Rng rng = make_rng(opt.seed, "gradcheck-mlp-input");
  double worst = 0.0;
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const MlpParams p = detail::random_mlp(rng, detail::smooth_activation(n));
    const Vector x = detail::uniform_vector(static_cast<Eigen::Index>(p.input_dim()), -1.5, 1.5, rng);
    const Vector w = detail::uniform_vector(static_cast<Eigen::Index>(p.output_dim()), -1, 1, rng);
    const auto fwd = mlp_forward(p, x);
    Vector analytic = mlp_backward_input(p, fwd.cache, w);
    if (opt.corrupt == "mlp_input")
      analytic *= 1.01;
    auto f = [&](const Vector& v) { return w.dot(mlp_forward(p, v).output); };
    worst = std::max(worst, relative_error(analytic, central_difference(f, x, 1e-6)));
  }
  return detail::finish("mlp_input", opt.instances, worst, 1e-4);
}

/// Gradient of K(z', z) in its first argument.
inline GradCheckResult check_kernel(const GradCheckOptions& opt)
{
  Rng rng = make_rng(opt.seed, "gradcheck-kernel");
  std::uniform_int_distribution<int> dim(1, 5);
  std::uniform_real_distribution<double> bw(0.5, 2.0);
  double worst = 0.0;
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const Eigen::Index d = dim(rng);
    KernelConfig cfg;
    cfg.bandwidth = bw(rng);
    const Vector z = detail::uniform_vector(d, -1, 1, rng);
    const Vector zp = detail::uniform_vector(d, -1, 1, rng);
    Vector analytic = rbf_grad_first(zp, z, cfg);
    if (opt.corrupt == "kernel")
      analytic *= 1.01;
    auto f = [&](const Vector& v) { return rbf_kernel(v, z, cfg); };
    worst = std::max(worst, relative_error(analytic, central_difference(f, zp, 1e-6)));
  }
  return detail::finish("kernel", opt.instances, worst, 1e-4);
}

/// Every score model against differences of its own log density.
inline GradCheckResult check_scores(const GradCheckOptions& opt)
{
  Rng rng = make_rng(opt.seed, "gradcheck-scores");
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  std::size_t count = 0;
  auto run = [&](const auto& model, const Vector& z) {
    Vector analytic = model.score(z);
    if (opt.corrupt == "scores")
      analytic *= 1.01;
    auto f = [&](const Vector& v) { return model.log_density(v); };
    worst = std::max(worst, relative_error(analytic, central_difference(f, z, 1e-5)));
    ++count;
  };
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const Eigen::Index d = 1 + static_cast<Eigen::Index>(n % 4);
    const Vector z = detail::uniform_vector(d, -2, 2, rng);

    const Vector mean = detail::uniform_vector(d, -1, 1, rng);
    const Vector var = detail::uniform_vector(d, 0.3, 2.0, rng);
    run(GaussianScore(mean, var), z);
    run(StandardNormalPrior{static_cast<std::size_t>(d)}, z);

    const Vector z1 = detail::uniform_vector(1, -3, 3, rng);
    run(GaussianMixture1D::bimodal_toy(), z1);
    const double w = 0.2 + 0.6 * u(rng);
    run(GaussianMixture1D({w, 1.0 - w}, {-1.0 - u(rng), 1.0 + u(rng)}, {0.5 + u(rng), 0.5 + u(rng)}),
        z1);

    MlpParams dec = detail::random_mlp(rng, detail::smooth_activation(n));
    const Vector t = detail::uniform_vector(static_cast<Eigen::Index>(dec.output_dim()), -1, 1, rng);
    const Vector zl = detail::uniform_vector(static_cast<Eigen::Index>(dec.input_dim()), -1, 1, rng);
    run(DecoderPosterior(dec, t, 0.5 + u(rng)), zl);
  }
  return detail::finish("scores", count, worst, 1e-4);
}

/// Envelope gradient against differences of the converged entropic optimal
/// value <pi, C> + eps sum pi (log pi - 1) with respect to the predictions.
inline GradCheckResult check_envelope(const GradCheckOptions& opt)
{
  Rng rng = make_rng(opt.seed, "gradcheck-envelope");
  std::uniform_int_distribution<int> size(3, 6);
  std::uniform_int_distribution<int> dim(1, 3);
  SinkhornConfig cfg;
  cfg.entropic_eps = 0.5;
  cfg.marginal_tol = 1e-14;
  cfg.max_iters = 100000;
  double worst = 0.0;
  for (std::size_t n = 0; n < opt.instances; ++n) {
    const Eigen::Index l = size(rng);
    const Eigen::Index d = dim(rng);
    Matrix Z(l, d), Zhat(l, d);
    for (Eigen::Index i = 0; i < l; ++i) {
      Z.row(i) = detail::uniform_vector(d, -1, 1, rng).transpose();
      Zhat.row(i) = detail::uniform_vector(d, -1, 1, rng).transpose();
    }
    const TransportPlan plan = sinkhorn(cost_matrix(Z, Zhat), cfg);
    const Matrix G = envelope_grad_predictions(plan, Z, Zhat);
    Vector analytic = Eigen::Map<const Vector>(G.data(), G.size());
    if (opt.corrupt == "envelope")
      analytic *= 1.01;
    auto f = [&](const Vector& v) {
      const Matrix P = Eigen::Map<const Matrix>(v.data(), l, d);
      const Matrix C = cost_matrix(Z, P);
      return entropic_value(sinkhorn(C, cfg), C, cfg.entropic_eps);
    };
    const Vector flat = Eigen::Map<const Vector>(Zhat.data(), Zhat.size());
    worst = std::max(worst, relative_error(analytic, central_difference(f, flat, 1e-5)));
  }
  return detail::finish("envelope", opt.instances, worst, 1e-3);
}

inline std::vector<GradCheckResult> run_gradcheck(const GradCheckOptions& opt = {})
{
  return {check_mlp_params(opt), check_mlp_input(opt), check_kernel(opt), check_scores(opt),
          check_envelope(opt)};
}

} // namespace kprox
