#include "kprox/kprox.hpp"
#include "kprox/metrics.hpp"
#include "kprox/ot.hpp"

#include <gtest/gtest.h>

#include <cmath>

using namespace kprox;

namespace {

ParticleEnsemble ensemble_1d(std::initializer_list<double> xs)
{
  ParticleEnsemble e;
  e.particles.resize(static_cast<Eigen::Index>(xs.size()), 1);
  Eigen::Index i = 0;
  for (double x : xs)
    e.particles(i++, 0) = x;
  return e;
}

// Target with a zero score everywhere: only repulsion acts.
struct FlatTarget
{
  std::size_t d = 1;
  std::size_t dim() const { return d; }
  Vector score(const Vector& z) const { return Vector::Zero(z.size()); }
  double log_density(const Vector&) const { return 0.0; }
};

// Score that blows up, for the divergence guard.
struct ExplodingTarget
{
  std::size_t dim() const { return 1; }
  Vector score(const Vector& z) const { return Vector::Constant(z.size(), 1e9); }
  double log_density(const Vector& z) const { return 1e9 * z.sum(); }
};

std::vector<double> column(const ParticleEnsemble& e)
{
  return {e.particles.data(), e.particles.data() + e.particles.size()};
}

} // namespace

TEST(InitEnsemble, ShapeAndSeedDeterminism)
{
  const auto a = init_ensemble(InitSpec::gaussian(0, 1, 3, 17), 42);
  const auto b = init_ensemble(InitSpec::gaussian(0, 1, 3, 17), 42);
  const auto c = init_ensemble(InitSpec::gaussian(0, 1, 3, 17), 43);
  EXPECT_EQ(a.size(), 17u);
  EXPECT_EQ(a.dim(), 3u);
  EXPECT_EQ(a.particles, b.particles);
  EXPECT_NE(a.particles, c.particles);
}

TEST(InitEnsemble, GaussianMomentsAtLargeCount)
{
  const auto e = init_ensemble(InitSpec::gaussian(0, 1, 1, 10000), 7);
  const double mean = e.particles.mean();
  const double sd = std::sqrt((e.particles.array() - mean).square().mean());
  EXPECT_NEAR(mean, 0.0, 0.05);
  EXPECT_NEAR(sd, 1.0, 0.05);
}

TEST(InitEnsemble, UniformStaysInRange)
{
  const auto e = init_ensemble(InitSpec::uniform(-3, 3, 2, 500), 1);
  EXPECT_GE(e.particles.minCoeff(), -3.0);
  EXPECT_LT(e.particles.maxCoeff(), 3.0);
}

TEST(InitEnsemble, InvalidSpecRejected)
{
  EXPECT_THROW(init_ensemble(InitSpec::gaussian(0, 0, 1, 5), 0), InputError);
  EXPECT_THROW(init_ensemble(InitSpec::uniform(1, 1, 1, 5), 0), InputError);
  EXPECT_THROW(init_ensemble(InitSpec::gaussian(0, 1, 1, 0), 0), InputError);
}

TEST(KproxStep, SingleParticleFollowsScore)
{
  // One particle: the repulsion term is zero, so z1 = z0 + eps (3 - z0).
  auto e = ensemble_1d({0.0});
  const GaussianScore target(Vector::Constant(1, 3.0), Vector::Ones(1));
  KproxConfig cfg;
  cfg.epsilon = 0.1;
  kprox_step(e, target, cfg);
  EXPECT_DOUBLE_EQ(e.particles(0, 0), 0.3);
  EXPECT_EQ(e.step_index, 1u);
}

TEST(KproxStep, SingleParticleConvergesToMode)
{
  const GaussianScore target(Vector::Constant(1, 3.0), Vector::Ones(1));
  KproxConfig cfg;
  cfg.epsilon = 0.1;
  cfg.steps = 200;
  const auto run = kprox_run(ensemble_1d({0.0}), target, cfg);
  EXPECT_LT(std::abs(run.final.particles(0, 0) - 3.0), 1e-6);
}

TEST(KproxStep, FlatTargetPairMovesApartSymmetrically)
{
  auto e = ensemble_1d({-0.1, 0.1});
  KproxConfig cfg;
  cfg.epsilon = 0.1;
  kprox_step(e, FlatTarget{}, cfg);
  // Each particle moves by eps * (1/2) * (+-0.2) * exp(-0.02).
  const double push = 0.1 * 0.5 * 0.2 * std::exp(-0.02);
  EXPECT_NEAR(e.particles(0, 0), -0.1 - push, 1e-15);
  EXPECT_NEAR(e.particles(1, 0), 0.1 + push, 1e-15);
  EXPECT_NEAR(e.particles(0, 0) + e.particles(1, 0), 0.0, 1e-16);
}

TEST(KproxStep, ZeroStepSizeIsIdentity)
{
  auto e = init_ensemble(InitSpec::gaussian(0, 1, 2, 9), 3);
  const Matrix before = e.particles;
  KproxConfig cfg;
  cfg.epsilon = 0.0;
  kprox_step(e, StandardNormalPrior{2}, cfg);
  EXPECT_EQ(e.particles, before);
}

TEST(KproxStep, HalvingStepHalvesDisplacement)
{
  const auto target = GaussianMixture1D::bimodal_toy();
  const auto init = init_ensemble(InitSpec::gaussian(0, 1, 1, 50), 5);
  KproxConfig a, b;
  a.epsilon = 0.05;
  b.epsilon = 0.025;
  auto ea = init, eb = init;
  kprox_step(ea, target, a);
  kprox_step(eb, target, b);
  const double da = (ea.particles - init.particles).norm();
  const double db = (eb.particles - init.particles).norm();
  EXPECT_NEAR(db / da, 0.5, 0.025);
}

TEST(KproxStep, SynchronousUpdateIsPermutationInvariant)
{
  const auto target = GaussianMixture1D::bimodal_toy();
  auto e = init_ensemble(InitSpec::gaussian(0, 1, 1, 12), 9);
  auto p = e;
  // Reverse the particle order.
  p.particles = e.particles.colwise().reverse().eval();
  KproxConfig cfg;
  kprox_step(e, target, cfg);
  kprox_step(p, target, cfg);
  const Matrix back = p.particles.colwise().reverse();
  EXPECT_LT((back - e.particles).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(KproxStep, DivergenceRaisesAndLeavesEnsembleUnchanged)
{
  auto e = ensemble_1d({0.0, 1.0});
  const Matrix before = e.particles;
  KproxConfig cfg;
  cfg.epsilon = 1.0;
  EXPECT_THROW(kprox_step(e, ExplodingTarget{}, cfg), NumericalError);
  EXPECT_EQ(e.particles, before);
  EXPECT_EQ(e.step_index, 0u);
}

TEST(KproxStep, DimensionMismatchIsInputError)
{
  auto e = init_ensemble(InitSpec::gaussian(0, 1, 2, 3), 0);
  EXPECT_THROW(kprox_step(e, StandardNormalPrior{3}, KproxConfig{}), InputError);
}

TEST(KproxConfig, InverseSqrtSchedule)
{
  KproxConfig cfg;
  cfg.schedule = StepSchedule::inverse_sqrt_T;
  cfg.steps = 400;
  EXPECT_DOUBLE_EQ(cfg.step_size(), 0.05);
  cfg.schedule = StepSchedule::constant;
  EXPECT_DOUBLE_EQ(cfg.step_size(), cfg.epsilon);
}

TEST(KproxRun, RecordsSnapshotsAndUpdateNorms)
{
  KproxConfig cfg;
  cfg.steps = 25;
  const auto run = kprox_run(init_ensemble(InitSpec::gaussian(0, 1, 1, 20), 1),
                             GaussianMixture1D::bimodal_toy(), cfg, 10);
  EXPECT_EQ(run.update_norms.size(), 25u);
  ASSERT_EQ(run.trajectory.size(), 4u); // steps 0, 10, 20, 25
  EXPECT_EQ(run.trajectory.front().step_index, 0u);
  EXPECT_EQ(run.trajectory.back().step_index, 25u);
  EXPECT_EQ(run.trajectory.back().particles, run.final.particles);
}

TEST(KproxRun, BitIdenticalAcrossRepeats)
{
  const auto init = init_ensemble(InitSpec::uniform(-3, 3, 1, 200), 11);
  KproxConfig cfg;
  const auto a = kprox_run(init, GaussianMixture1D::bimodal_toy(), cfg);
  const auto b = kprox_run(init, GaussianMixture1D::bimodal_toy(), cfg);
  EXPECT_EQ(std::memcmp(a.final.particles.data(), b.final.particles.data(),
                        sizeof(double) * static_cast<std::size_t>(a.final.particles.size())),
            0);
}

// On a Gaussian target the ensemble mean obeys the exact recursion
// m <- m + eps (mu - m) because the pairwise repulsion sums to zero.
TEST(KproxRun, EnsembleMeanContractsTowardGaussianMean)
{
  const GaussianScore target(Vector::Constant(1, 1.5), Vector::Ones(1));
  auto e = init_ensemble(InitSpec::gaussian(-2, 1, 1, 100), 4);
  double m = e.particles.mean();
  KproxConfig cfg;
  for (int t = 0; t < 30; ++t) {
    kprox_step(e, target, cfg);
    m += cfg.epsilon * (1.5 - m);
    EXPECT_NEAR(e.particles.mean(), m, 1e-12);
  }
}

TEST(KproxRun, BimodalTargetReachesBothModes)
{
  KproxConfig cfg;
  const auto run = kprox_run(init_ensemble(InitSpec::uniform(-3, 3, 1, 500), 2),
                             GaussianMixture1D::bimodal_toy(), cfg);
  const auto [left, right] = mode_masses(column(run.final), 0.0);
  EXPECT_GT(left, 0.3);
  EXPECT_GT(right, 0.3);
}

TEST(KproxRun, W2ToTargetDecreases)
{
  const auto target = GaussianMixture1D::bimodal_toy();
  Rng rng = make_rng(0, "ref");
  std::vector<double> ref(20000);
  for (auto& x : ref)
    x = target.sample(rng);
  // Starts collapsed near the saddle between the modes.
  const auto init = init_ensemble(InitSpec::uniform(-0.5, 0.5, 1, 500), 3);
  const auto run = kprox_run(init, target, KproxConfig{});
  EXPECT_LT(wasserstein2_1d_exact(column(run.final), ref), 0.5 * wasserstein2_1d_exact(column(init), ref));
}
