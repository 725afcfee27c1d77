#include "kprox/train.hpp"

#include <gtest/gtest.h>

#include <cstdlib>
#include <sstream>

using namespace kprox;

namespace {

TrainConfig tiny()
{
  TrainConfig c;
  c.batch_size = 32;
  c.epochs_generative = 3;
  c.epochs_inference = 5;
  c.particles = 5;
  c.kprox_steps = 20;
  c.seed = 3;
  return c;
}

struct Prepared
{
  TabularDataset train;
  TabularDataset valid;
  Standardizer st;
};

Prepared prepared(std::size_t n = 150, std::uint64_t seed = 0)
{
  const auto s = split_chronological(make_toy_regression(seed, n));
  Prepared p;
  p.st = fit_standardizer(s.train);
  p.train = p.st.apply(s.train);
  p.valid = p.st.apply(s.valid);
  return p;
}

std::vector<double> flat(const MlpParams& p) { return flatten(p); }

double param_distance(const MlpParams& a, const MlpParams& b)
{
  const auto x = flatten(a), y = flatten(b);
  double s = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i)
    s += (x[i] - y[i]) * (x[i] - y[i]);
  return std::sqrt(s);
}

} // namespace

// --- configuration ----------------------------------------------------------

TEST(TrainConfig, DefaultsMatchReferenceSettings)
{
  const TrainConfig c;
  EXPECT_EQ(c.batch_size, 128u);
  EXPECT_EQ(c.encoder_lr, 0.01);
  EXPECT_EQ(c.decoder_lr, 0.01);
  EXPECT_EQ(c.epochs_generative, 200u);
  EXPECT_EQ(c.epochs_inference, 200u);
  EXPECT_EQ(c.particles, 10u);
  EXPECT_EQ(c.kprox_epsilon, 0.1);
  EXPECT_EQ(c.sinkhorn_eps, 0.05);
  EXPECT_EQ(c.kprox_steps, 200u);
  EXPECT_EQ(c.latent_dim, 5u);
  EXPECT_EQ(c.matching_mode, MatchingMode::batch_mean);
  EXPECT_EQ(c.ablation, AblationMode::full);
}

TEST(TrainConfig, Presets)
{
  const auto desk = preset_config(Preset::desk);
  EXPECT_EQ(desk.epochs_generative, 50u);
  EXPECT_EQ(desk.epochs_inference, 50u);
  EXPECT_EQ(desk.kprox_steps, 100u);
  const auto paper = preset_config(Preset::paper);
  EXPECT_EQ(paper.epochs_generative, 200u);
  EXPECT_EQ(paper.kprox_steps, 200u);
  EXPECT_THROW(preset_from_string("huge"), InputError);
}

TEST(TrainConfig, JsonRoundTrip)
{
  TrainConfig c = tiny();
  c.matching_mode = MatchingMode::per_sample_set;
  c.ablation = AblationMode::no_wass;
  c.hidden_dims = {4, 3};
  const auto back = train_config_from_json(nlohmann::json::parse(to_json(c).dump()));
  EXPECT_EQ(to_json(back), to_json(c));
  EXPECT_EQ(config_hash(back), config_hash(c));
}

TEST(TrainConfig, UnknownKeyRejected)
{
  EXPECT_THROW(train_config_from_json({{"batchsize", 4}}), InputError);
}

TEST(TrainConfig, OverridesParseValues)
{
  TrainConfig c;
  c = apply_override(c, "batch_size=16");
  c = apply_override(c, "matching_mode=per_sample_set");
  c = apply_override(c, "kprox_epsilon=0.25");
  EXPECT_EQ(c.batch_size, 16u);
  EXPECT_EQ(c.matching_mode, MatchingMode::per_sample_set);
  EXPECT_EQ(c.kprox_epsilon, 0.25);
  EXPECT_THROW(apply_override(c, "nonsense"), InputError);
  EXPECT_THROW(apply_override(c, "ablation=partial"), InputError);
}

TEST(TrainConfig, InvalidValuesRejected)
{
  TrainConfig c;
  c.particles = 0;
  EXPECT_THROW(c.validate(), InputError);
  c = {};
  c.sinkhorn_eps = 0.0;
  EXPECT_THROW(c.validate(), InputError);
}

TEST(TrainConfig, HashTracksContent)
{
  TrainConfig a, b;
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  b.seed = 1;
  EXPECT_NE(config_hash(a), config_hash(b));
}

// --- bundle -----------------------------------------------------------------

TEST(ModelBundle, ArchitectureFollowsConfig)
{
  const auto b = make_bundle(4, TrainConfig{});
  EXPECT_EQ(b.encoder.layer_dims, (std::vector<std::size_t>{4, 10, 7, 5, 5}));
  EXPECT_EQ(b.decoder.layer_dims, (std::vector<std::size_t>{5, 5, 7, 10, 5}));
  EXPECT_EQ(b.head, EncoderHead::deterministic);
  EXPECT_NO_THROW(b.validate());

  TrainConfig g;
  g.matching_mode = MatchingMode::per_sample_set;
  const auto bg = make_bundle(4, g);
  EXPECT_EQ(bg.head, EncoderHead::gaussian);
  EXPECT_EQ(bg.encoder.output_dim(), 10u);
}

TEST(ModelBundle, CheckpointRoundTripPredictsIdentically)
{
  const auto p = prepared();
  const auto b = make_bundle(4, tiny(), p.st);
  const auto back = bundle_from_json(nlohmann::json::parse(to_json(b).dump()));
  EXPECT_EQ(flat(back.encoder), flat(b.encoder));
  EXPECT_EQ(flat(back.decoder), flat(b.decoder));
  EXPECT_EQ(back.config_hash, b.config_hash);
  EXPECT_EQ(predict_labels(back, p.valid.X), predict_labels(b, p.valid.X));
}

TEST(ModelBundle, MalformedCheckpointRejected)
{
  auto j = to_json(make_bundle(4, tiny()));
  j["latent_dim"] = 3;
  EXPECT_THROW(bundle_from_json(j), InputError);
  j.erase("decoder");
  EXPECT_THROW(bundle_from_json(j), InputError);
}

TEST(Predict, ZeroWeightsGiveDecoderBias)
{
  auto b = make_bundle(3, tiny());
  b.encoder = MlpParams::zeros(b.encoder.layer_dims);
  b.decoder = MlpParams::zeros(b.decoder.layer_dims);
  b.encoder.biases.back().setConstant(0.4);
  b.decoder.biases.back().setLinSpaced(4, -1.0, 2.5);
  for (double v : {-3.0, 0.0, 7.0}) {
    const auto p = predict(b, Vector::Constant(3, v));
    EXPECT_EQ(p.yhat, 2.5);
    EXPECT_EQ(p.xhat.size(), 3);
  }
}

TEST(Predict, ShapeMismatchRejected)
{
  const auto b = make_bundle(3, tiny());
  EXPECT_THROW(predict(b, Vector::Zero(4)), InputError);
}

TEST(Predict, BatchMatchesSingle)
{
  const auto p = prepared();
  const auto b = make_bundle(4, tiny(), p.st);
  const Vector all = predict_labels(b, p.valid.X);
  for (Eigen::Index r = 0; r < 5; ++r)
    EXPECT_NEAR(all[r], predict(b, p.valid.X.row(r).transpose()).yhat, 1e-15);
}

// --- stage 1 ----------------------------------------------------------------

TEST(DecoderStage, ZeroLearningRateLeavesDecoderBitIdentical)
{
  const auto p = prepared();
  auto cfg = tiny();
  cfg.decoder_lr = 0.0;
  cfg.epochs_generative = 1;
  auto b = make_bundle(4, cfg, p.st);
  const auto before = flat(b.decoder);
  LatentCache cache;
  train_decoder_stage(b, p.train, cfg, cache);
  EXPECT_EQ(flat(b.decoder), before);
}

TEST(DecoderStage, NllDecreasesOnToyData)
{
  const auto p = prepared(1000);
  auto cfg = preset_config(Preset::toy);
  cfg.epochs_generative = 5;
  cfg.kprox_steps = 50;
  cfg.particles = 5;
  auto b = make_bundle(4, cfg, p.st);
  LatentCache cache;
  const auto logs = train_decoder_stage(b, p.train, cfg, cache);
  ASSERT_EQ(logs.size(), 5u);
  EXPECT_LT(logs.back().loss, logs.front().loss);
  for (const auto& l : logs)
    EXPECT_EQ(l.stage, "generative");
}

TEST(DecoderStage, SameSeedSameCurve)
{
  const auto p = prepared();
  auto cfg = tiny();
  auto run = [&] {
    auto b = make_bundle(4, cfg, p.st);
    LatentCache cache;
    return train_decoder_stage(b, p.train, cfg, cache);
  };
  const auto a = run(), c = run();
  ASSERT_EQ(a.size(), c.size());
  for (std::size_t i = 0; i < a.size(); ++i)
    EXPECT_EQ(a[i].loss, c[i].loss);
}

TEST(DecoderStage, ResultIndependentOfThreadCount)
{
  const auto p = prepared();
  const auto cfg = tiny();
  auto run = [&](const char* threads) {
    ::setenv("KPROX_THREADS", threads, 1);
    auto b = make_bundle(4, cfg, p.st);
    LatentCache cache;
    train_decoder_stage(b, p.train, cfg, cache);
    ::unsetenv("KPROX_THREADS");
    return flat(b.decoder);
  };
  EXPECT_EQ(run("1"), run("4"));
}

TEST(DecoderStage, WarmStartReusesParticles)
{
  const auto p = prepared();
  auto cfg = tiny();
  cfg.epochs_generative = 1;
  auto b = make_bundle(4, cfg, p.st);
  LatentCache cache;
  train_decoder_stage(b, p.train, cfg, cache);
  ASSERT_EQ(cache.particles.size(), p.train.size());
  for (const auto& m : cache.particles) {
    EXPECT_EQ(m.rows(), 5);
    EXPECT_EQ(m.cols(), 5);
  }
}

// A one-dimensional latent with a small noise variance: the posterior is
// sharply peaked, so the particle mean should sit on the mode found by a
// brute-force grid search of the log joint.
TEST(FitSample, NearDeterministicPosteriorMeanAtGridMode)
{
  Rng rng = make_rng(4, "peaked");
  const auto dec = MlpParams::random({1, 3, 2}, Activation::tanh, rng);
  Vector obs = mlp_forward(dec, Vector::Constant(1, 0.8)).output;
  obs[0] += 0.01;

  TrainConfig cfg;
  cfg.latent_dim = 1;
  cfg.particles = 10;
  cfg.noise_var = 1e-3;
  cfg.kprox_epsilon = 2e-4;
  cfg.kprox_steps = 5000;
  const auto fit = fit_sample(dec, obs, prior_particles(cfg, "peaked-init", 0), cfg,
                                      false);

  double best_z = 0.0, best = -std::numeric_limits<double>::infinity();
  for (double z = -4.0; z <= 4.0; z += 1e-4) {
    const Vector zz = Vector::Constant(1, z);
    const double lj = -0.5 * (obs - mlp_forward(dec, zz).output).squaredNorm() / cfg.noise_var -
                      0.5 * z * z;
    if (lj > best) {
      best = lj;
      best_z = z;
    }
  }
  EXPECT_NEAR(fit.particles.mean(), best_z, 0.05);
}

TEST(FitSample, GradientMatchesFiniteDifferenceOfNll)
{
  Rng rng = make_rng(5, "fitgrad");
  auto dec = MlpParams::random({2, 4, 3}, Activation::tanh, rng);
  const Vector obs = Vector::LinSpaced(3, -0.5, 0.7);
  TrainConfig cfg;
  cfg.latent_dim = 2;
  cfg.particles = 4;
  cfg.kprox_steps = 5;
  const auto init = prior_particles(cfg, "fitgrad", 0);
  const auto fit = fit_sample(dec, obs, init, cfg, true);
  // With the particles held fixed, the NLL is a function of the decoder only.
  const Matrix Z = fit.particles;
  auto nll = [&](const MlpParams& d) {
    const Matrix out = mlp_forward_batch(d, Z).output();
    return 0.5 * ((-out).rowwise() + obs.transpose()).rowwise().squaredNorm().mean() / cfg.noise_var;
  };
  const auto analytic = flatten(fit.grads);
  std::size_t k = 0;
  for_each_block(dec, [&](std::span<double> block) {
    for (double& w : block) {
      const double orig = w;
      w = orig + 1e-6;
      const double fp = nll(dec);
      w = orig - 1e-6;
      const double fm = nll(dec);
      w = orig;
      EXPECT_NEAR(analytic[k], (fp - fm) / 2e-6, 1e-6) << k;
      ++k;
    }
  });
  EXPECT_EQ(k, analytic.size());
}

TEST(InferencePairs, CardinalityAndSingleParticleSummary)
{
  const auto p = prepared();
  auto cfg = tiny();
  cfg.particles = 1;
  const auto b = make_bundle(4, cfg, p.st);
  const auto pairs = build_inference_pairs(b, p.train, cfg);
  ASSERT_EQ(pairs.size(), p.train.size());
  EXPECT_EQ(pairs.summaries.rows(), static_cast<Eigen::Index>(p.train.size()));
  EXPECT_EQ(pairs.summaries.cols(), 5);
  for (std::size_t m = 0; m < pairs.size(); ++m)
    EXPECT_EQ(Vector(pairs.summaries.row(static_cast<Eigen::Index>(m)).transpose()),
              Vector(pairs.particles[m].row(0).transpose()));
}

// --- stage 2 ----------------------------------------------------------------

struct StageTwo : ::testing::Test
{
  Prepared p = prepared(300);
  TrainConfig cfg = tiny();
  ModelBundle bundle;
  InferencePairSet pairs;

  void SetUp() override
  {
    bundle = make_bundle(4, cfg, p.st);
    LatentCache cache;
    train_decoder_stage(bundle, p.train, cfg, cache);
    pairs = build_inference_pairs(bundle, p.train, cfg, &cache);
  }
};

TEST_F(StageTwo, DecoderNeverMutated)
{
  const auto before = flat(bundle.decoder);
  const auto res = train_encoder_stage(bundle, pairs, p.valid, cfg);
  EXPECT_EQ(flat(bundle.decoder), before);
  EXPECT_EQ(flat(res.best.decoder), before);
}

TEST_F(StageTwo, SelectedBundleHasLowestValidationSse)
{
  const auto res = train_encoder_stage(bundle, pairs, p.valid, cfg);
  ASSERT_EQ(res.logs.size(), cfg.epochs_inference + 1);
  for (const auto& l : res.logs) {
    ASSERT_TRUE(l.valid_sse.has_value());
    EXPECT_LE(res.best_valid_sse, *l.valid_sse);
  }
  EXPECT_EQ(validation_sse(res.best, p.valid), res.best_valid_sse);
  EXPECT_EQ(*res.logs[res.best_epoch].valid_sse, res.best_valid_sse);
}

TEST_F(StageTwo, ZeroLearningRateKeepsInitialBundle)
{
  cfg.encoder_lr = 0.0;
  const auto before = flat(bundle.encoder);
  const auto res = train_encoder_stage(bundle, pairs, p.valid, cfg);
  EXPECT_EQ(flat(bundle.encoder), before);
  EXPECT_EQ(flat(res.best.encoder), before);
  EXPECT_EQ(res.best_epoch, 0u);
}

TEST_F(StageTwo, FirstStepDisplacementScalesWithLearningRate)
{
  cfg.epochs_inference = 1;
  cfg.batch_size = pairs.size();
  auto displacement = [&](double lr) {
    ModelBundle b = bundle;
    TrainConfig c = cfg;
    c.encoder_lr = lr;
    train_encoder_stage(b, pairs, p.valid, c);
    return param_distance(b.encoder, bundle.encoder);
  };
  const double full = displacement(1e-4);
  const double half = displacement(5e-5);
  ASSERT_GT(full, 0.0);
  EXPECT_NEAR(half / full, 0.5, 0.025);
}

TEST_F(StageTwo, PerSampleSetModeRuns)
{
  cfg.matching_mode = MatchingMode::per_sample_set;
  ModelBundle b = make_bundle(4, cfg, p.st);
  b.decoder = bundle.decoder;
  const auto before = flat(b.decoder);
  const auto res = train_encoder_stage(b, pairs, p.valid, cfg);
  EXPECT_EQ(flat(b.decoder), before);
  for (const auto& l : res.logs)
    EXPECT_TRUE(std::isfinite(l.loss));
  EXPECT_EQ(res.best.head, EncoderHead::gaussian);
}

TEST_F(StageTwo, HeadModeMismatchRejected)
{
  cfg.matching_mode = MatchingMode::per_sample_set;
  EXPECT_THROW(train_encoder_stage(bundle, pairs, p.valid, cfg), InputError);
}

// If the encoder already reproduces the targets, the matched batch has a
// near-zero cost and gradient.
TEST(EncoderMatching, ExactEncoderIsStationary)
{
  Rng rng = make_rng(9, "stationary");
  std::normal_distribution<double> g;
  Matrix Z(16, 3);
  for (Eigen::Index i = 0; i < Z.size(); ++i)
    Z.data()[i] = 3.0 * g(rng);
  SinkhornConfig sk;
  sk.entropic_eps = 1e-3;
  sk.max_iters = 100000;
  const Matrix C = cost_matrix(Z, Z);
  const auto plan = sinkhorn(C, sk);
  EXPECT_LT(ot_cost(plan, C), 1e-8);
  EXPECT_LT(envelope_grad_predictions(plan, Z, Z).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(EncoderStage, ToyBatchCostHalves)
{
  const auto s = split_chronological(make_toy_regression(0, 1000));
  const auto r = run_pipeline(s, preset_config(Preset::toy));
  std::vector<double> inference;
  for (const auto& l : r.logs)
    if (l.stage == "inference")
      inference.push_back(l.loss);
  ASSERT_GE(inference.size(), 2u);
  EXPECT_LT(inference.back(), 0.5 * inference.front());
  EXPECT_GT(r.test_standardized.r2, 0.8);
}

// --- pipeline ---------------------------------------------------------------

TEST(Pipeline, MetricsReproduceBitIdentically)
{
  const auto s = split_chronological(make_toy_regression(1, 200));
  const auto a = run_pipeline(s, tiny());
  const auto b = run_pipeline(s, tiny());
  EXPECT_EQ(to_json(a.test_standardized).dump(), to_json(b.test_standardized).dump());
  EXPECT_EQ(flatten(a.bundle.encoder), flatten(b.bundle.encoder));
}

TEST(Pipeline, ThreadCountDoesNotChangeResults)
{
  const auto s = split_chronological(make_toy_regression(1, 200));
  auto cfg = tiny();
  cfg.matching_mode = MatchingMode::per_sample_set;
  ::setenv("KPROX_THREADS", "1", 1);
  const auto a = run_pipeline(s, cfg);
  ::setenv("KPROX_THREADS", "4", 1);
  const auto b = run_pipeline(s, cfg);
  ::unsetenv("KPROX_THREADS");
  EXPECT_EQ(to_json(a.test_standardized).dump(), to_json(b.test_standardized).dump());
}

TEST(Pipeline, ZeroInferenceEpochsKeepsUntrainedEncoder)
{
  const auto s = split_chronological(make_toy_regression(1, 200));
  auto cfg = tiny();
  cfg.epochs_inference = 0;
  const auto r = run_pipeline(s, cfg);
  const auto fresh = make_bundle(4, cfg);
  EXPECT_EQ(flatten(r.bundle.encoder), flatten(fresh.encoder));
  EXPECT_TRUE(std::isfinite(r.test_standardized.rmse));
}

TEST(Pipeline, OriginalUnitsScaleByLabelStd)
{
  const auto s = split_chronological(make_toy_regression(1, 200));
  const auto r = run_pipeline(s, tiny());
  EXPECT_NEAR(r.test_original.rmse, r.test_standardized.rmse * r.bundle.standardizer.y_std, 1e-12);
  EXPECT_NEAR(r.test_original.r2, r.test_standardized.r2, 1e-12);
}

TEST(Ablation, NoWassReportsFiniteMetrics)
{
  const auto s = split_chronological(make_toy_regression(1, 200));
  const auto r = train_ablation(AblationMode::no_wass, s, tiny());
  EXPECT_TRUE(std::isfinite(r.test_standardized.r2));
  EXPECT_EQ(r.bundle.head, EncoderHead::gaussian);
}

TEST(Ablation, NoKproxZeroLearningRateLeavesParameters)
{
  const auto p = prepared();
  auto cfg = tiny();
  cfg.ablation = AblationMode::no_kprox;
  cfg.encoder_lr = 0.0;
  cfg.decoder_lr = 0.0;
  auto b = make_bundle(4, cfg, p.st);
  const auto enc = flat(b.encoder), dec = flat(b.decoder);
  const auto res = train_vae(b, p.train, p.valid, cfg);
  EXPECT_EQ(flat(b.encoder), enc);
  EXPECT_EQ(flat(b.decoder), dec);
  EXPECT_EQ(flat(res.best.encoder), enc);
}

TEST(Logs, CsvLayout)
{
  std::ostringstream os;
  write_log_csv(os, {{1, "generative", 2.5, std::nullopt}, {0, "inference", 0.5, 3.0}});
  EXPECT_EQ(os.str(), "epoch,stage,loss,valid_sse\n1,generative,2.5,\n0,inference,0.5,3\n");
}
