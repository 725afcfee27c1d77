#pragma once

#include "kprox/kernel.hpp"
#include "kprox/score.hpp"

#include <cmath>
#include <ostream>
#include <string>
#include <vector>

namespace kprox {

enum class StepSchedule { constant, inverse_sqrt_T };

struct KproxConfig
{
  double epsilon = 0.1;
  std::size_t steps = 200;
  StepSchedule schedule = StepSchedule::constant;
  KernelConfig kernel;
  std::uint64_t seed = 0;

  /// Step size actually used: epsilon, or 1/sqrt(T) under inverse_sqrt_T.
  double step_size() const
  {
    return schedule == StepSchedule::inverse_sqrt_T
             ? 1.0 / std::sqrt(static_cast<double>(steps))
             : epsilon;
  }

  void validate() const
  {
    detail::require(epsilon >= 0.0 && std::isfinite(epsilon), "kprox epsilon must be >= 0");
    detail::require(steps >= 1, "kprox needs at least one step");
    kernel.validate();
  }
};

struct InitSpec
{
  enum class Kind { gaussian, uniform };
  Kind kind = Kind::gaussian;
  double a = 0.0; // mean or lower bound
  double b = 1.0; // std or upper bound
  std::size_t dim = 1;
  std::size_t count = 1;

  static InitSpec gaussian(double mean, double std, std::size_t dim, std::size_t count)
  {
    return {Kind::gaussian, mean, std, dim, count};
  }
  static InitSpec uniform(double lo, double hi, std::size_t dim, std::size_t count)
  {
    return {Kind::uniform, lo, hi, dim, count};
  }

  void validate() const
  {
    detail::require(dim >= 1 && count >= 1, "init spec needs dim >= 1 and count >= 1");
    if (kind == Kind::gaussian)
      detail::require(b > 0.0, "gaussian init needs std > 0");
    else
      detail::require(a < b, "uniform init needs lo < hi");
  }
};

inline ParticleEnsemble init_ensemble(const InitSpec& spec, std::uint64_t seed)
{
  spec.validate();
  Rng rng(seed);
  ParticleEnsemble ens;
  ens.particles.resize(static_cast<Eigen::Index>(spec.count), static_cast<Eigen::Index>(spec.dim));
  if (spec.kind == InitSpec::Kind::gaussian) {
    std::normal_distribution<double> d(spec.a, spec.b);
    for (Eigen::Index i = 0; i < ens.particles.size(); ++i)
      ens.particles.data()[i] = d(rng);
  } else {
    std::uniform_real_distribution<double> d(spec.a, spec.b);
    for (Eigen::Index i = 0; i < ens.particles.size(); ++i)
      ens.particles.data()[i] = d(rng);
  }
  return ens;
}

inline constexpr double kDivergenceBound = 1e6;

/// One synchronous step with an explicit step size: every particle moves by
/// step * (score + repulsion), both evaluated on the pre-step ensemble.
/// Returns the mean squared displacement.
template <ScoreModel S>
double kprox_step_with(ParticleEnsemble& ens, const S& target, const KernelConfig& kernel,
                       double step)
{
  detail::require(ens.size() > 0, "kprox_step: empty ensemble");
  detail::require(ens.dim() == target.dim(), "kprox_step: ensemble/target dimension mismatch");
  KernelConfig k = kernel;
  if (k.median_heuristic)
    k.bandwidth = median_heuristic_bandwidth(ens.particles);

  Matrix velocity = score_rows(target, ens.particles);
  velocity += ensemble_repulsion_all(ens.particles, k);
  Matrix update = step * velocity;
  Matrix next = ens.particles + update;

  for (Eigen::Index i = 0; i < next.rows(); ++i) {
    const auto row = next.row(i);
    if (!row.allFinite() || row.cwiseAbs().maxCoeff() > kDivergenceBound)
      throw NumericalError("kprox diverged at step " + std::to_string(ens.step_index + 1) +
                           ": particle " + std::to_string(i) +
                           " is non-finite or exceeds 1e6 in magnitude");
  }
  ens.particles = std::move(next);
  ++ens.step_index;
  return update.rowwise().squaredNorm().mean();
}

template <ScoreModel S>
double kprox_step(ParticleEnsemble& ens, const S& target, const KproxConfig& cfg)
{
  return kprox_step_with(ens, target, cfg.kernel, cfg.step_size());
}

struct KproxRun
{
  ParticleEnsemble final;
  std::vector<ParticleEnsemble> trajectory;
  std::vector<double> update_norms;
};

/// T synchronous steps. With record_every > 0, snapshots are taken at step 0
/// and every record_every steps thereafter (the last step is always kept).
template <ScoreModel S>
KproxRun kprox_run(ParticleEnsemble init, const S& target, const KproxConfig& cfg,
                   std::size_t record_every = 0)
{
  cfg.validate();
  KproxRun run;
  run.final = std::move(init);
  run.final.step_index = 0;
  run.update_norms.reserve(cfg.steps);
  const double step = cfg.step_size();
  if (record_every > 0)
    run.trajectory.push_back(run.final);
  for (std::size_t t = 1; t <= cfg.steps; ++t) {
    run.update_norms.push_back(kprox_step_with(run.final, target, cfg.kernel, step));
    if (record_every > 0 && (t % record_every == 0 || t == cfg.steps))
      run.trajectory.push_back(run.final);
  }
  return run;
}

} // namespace kprox
