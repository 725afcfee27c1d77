#pragma once

#include "kprox/data.hpp"
#include "kprox/kprox.hpp"
#include "kprox/metrics.hpp"
#include "kprox/ot.hpp"
#include "kprox/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace kprox {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

enum class MatchingMode { batch_mean, per_sample_set };
enum class AblationMode { full, no_kprox, no_wass };
enum class EncoderHead { deterministic, gaussian };

inline std::string to_string(MatchingMode m)
{
  return m == MatchingMode::batch_mean ? "batch_mean" : "per_sample_set";
}
inline std::string to_string(AblationMode m)
{
  switch (m) {
  case AblationMode::full: return "full";
  case AblationMode::no_kprox: return "no_kprox";
  case AblationMode::no_wass: return "no_wass";
  }
  return "unknown";
}
inline std::string to_string(EncoderHead h)
{
  return h == EncoderHead::deterministic ? "deterministic" : "gaussian";
}

inline MatchingMode matching_mode_from_string(const std::string& s)
{
  if (s == "batch_mean") return MatchingMode::batch_mean;
  if (s == "per_sample_set") return MatchingMode::per_sample_set;
  throw InputError("unknown matching_mode '" + s + "'");
}
inline AblationMode ablation_from_string(const std::string& s)
{
  if (s == "full") return AblationMode::full;
  if (s == "no_kprox") return AblationMode::no_kprox;
  if (s == "no_wass") return AblationMode::no_wass;
  throw InputError("unknown ablation mode '" + s + "'");
}
inline EncoderHead encoder_head_from_string(const std::string& s)
{
  if (s == "deterministic") return EncoderHead::deterministic;
  if (s == "gaussian") return EncoderHead::gaussian;
  throw InputError("unknown encoder head '" + s + "'");
}

struct TrainConfig
{
  std::size_t batch_size = 128;
  double encoder_lr = 0.01;
  double decoder_lr = 0.01;
  std::size_t epochs_generative = 200;
  std::size_t epochs_inference = 200;
  std::size_t particles = 10;
  double kprox_epsilon = 0.1;
  double sinkhorn_eps = 0.05;
  std::size_t kprox_steps = 200;
  std::size_t latent_dim = 5;
  MatchingMode matching_mode = MatchingMode::batch_mean;
  AblationMode ablation = AblationMode::full;
  std::uint64_t seed = 0;

  // Encoder hidden widths; the decoder mirrors them in reverse.
  std::vector<std::size_t> hidden_dims = {10, 7, 5};
  Activation activation = Activation::tanh;
  // Observation noise variance of the decoder likelihood.
  double noise_var = 1.0;
  double kernel_bandwidth = 1.0;
  // Most training batches converge in under 200 iterations; a rare batch with
  // near-tied points needs tens of thousands at 1e-8.
  std::size_t sinkhorn_max_iters = 50000;
  double sinkhorn_tol = 1e-8;
  // Reuse each sample's particles from the previous epoch as the next start.
  bool warm_start = true;

  void validate() const
  {
    detail::require(batch_size >= 1, "batch_size must be >= 1");
    detail::require(encoder_lr >= 0.0 && decoder_lr >= 0.0, "learning rates must be >= 0");
    detail::require(particles >= 1, "particles must be >= 1");
    detail::require(kprox_epsilon >= 0.0, "kprox_epsilon must be >= 0");
    detail::require(sinkhorn_eps > 0.0, "sinkhorn_eps must be > 0");
    detail::require(kprox_steps >= 1, "kprox_steps must be >= 1");
    detail::require(latent_dim >= 1, "latent_dim must be >= 1");
    detail::require(noise_var > 0.0, "noise_var must be > 0");
    detail::require(kernel_bandwidth > 0.0, "kernel_bandwidth must be > 0");
    detail::require(sinkhorn_tol > 0.0 && sinkhorn_max_iters >= 1, "invalid sinkhorn settings");
    for (auto h : hidden_dims)
      detail::require(h >= 1, "hidden widths must be >= 1");
  }

  KproxConfig kprox() const
  {
    KproxConfig k;
    k.epsilon = kprox_epsilon;
    k.steps = kprox_steps;
    k.kernel.bandwidth = kernel_bandwidth;
    k.seed = seed;
    return k;
  }

  SinkhornConfig sinkhorn() const
  {
    SinkhornConfig s;
    s.entropic_eps = sinkhorn_eps;
    s.max_iters = sinkhorn_max_iters;
    s.marginal_tol = sinkhorn_tol;
    return s;
  }
};

inline nlohmann::json to_json(const TrainConfig& c)
{
  return {{"batch_size", c.batch_size},
          {"encoder_lr", c.encoder_lr},
          {"decoder_lr", c.decoder_lr},
          {"epochs_generative", c.epochs_generative},
          {"epochs_inference", c.epochs_inference},
          {"particles", c.particles},
          {"kprox_epsilon", c.kprox_epsilon},
          {"sinkhorn_eps", c.sinkhorn_eps},
          {"kprox_steps", c.kprox_steps},
          {"latent_dim", c.latent_dim},
          {"matching_mode", to_string(c.matching_mode)},
          {"ablation", to_string(c.ablation)},
          {"seed", c.seed},
          {"hidden_dims", c.hidden_dims},
          {"activation", to_string(c.activation)},
          {"noise_var", c.noise_var},
          {"kernel_bandwidth", c.kernel_bandwidth},
          {"sinkhorn_max_iters", c.sinkhorn_max_iters},
          {"sinkhorn_tol", c.sinkhorn_tol},
          {"warm_start", c.warm_start}};
}

/// Fields missing from `j` keep their values from `base`; unknown keys are an error.
inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig base = {})
{
  const nlohmann::json known = to_json(base);
  for (const auto& [k, v] : j.items())
    if (!known.contains(k))
      throw InputError("unknown config field '" + k + "'");
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key))
        field = j.at(key).get<std::remove_reference_t<decltype(field)>>();
    };
    get("batch_size", base.batch_size);
    get("encoder_lr", base.encoder_lr);
    get("decoder_lr", base.decoder_lr);
    get("epochs_generative", base.epochs_generative);
    get("epochs_inference", base.epochs_inference);
    get("particles", base.particles);
    get("kprox_epsilon", base.kprox_epsilon);
    get("sinkhorn_eps", base.sinkhorn_eps);
    get("kprox_steps", base.kprox_steps);
    get("latent_dim", base.latent_dim);
    get("seed", base.seed);
    get("hidden_dims", base.hidden_dims);
    get("noise_var", base.noise_var);
    get("kernel_bandwidth", base.kernel_bandwidth);
    get("sinkhorn_max_iters", base.sinkhorn_max_iters);
    get("sinkhorn_tol", base.sinkhorn_tol);
    get("warm_start", base.warm_start);
    if (j.contains("matching_mode"))
      base.matching_mode = matching_mode_from_string(j.at("matching_mode").get<std::string>());
    if (j.contains("ablation"))
      base.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    if (j.contains("activation"))
      base.activation = activation_from_string(j.at("activation").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed training config: ") + e.what());
  }
  base.validate();
  return base;
}

/// Applies one `key=value` override. The value is read as JSON when it parses,
/// otherwise as a bare string (so `ablation=no_wass` works unquoted).
inline TrainConfig apply_override(const TrainConfig& cfg, const std::string& assignment)
{
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw InputError("override '" + assignment + "' is not of the form key=value");
  const std::string key = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, false);
  if (value.is_discarded())
    value = raw;
  return train_config_from_json(nlohmann::json{{key, value}}, cfg);
}

inline std::string config_hash(const TrainConfig& cfg)
{
  const std::uint64_t h = fnv1a(to_json(cfg).dump());
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

enum class Preset { paper, desk, toy };

inline Preset preset_from_string(const std::string& s)
{
  if (s == "paper") return Preset::paper;
  if (s == "desk") return Preset::desk;
  if (s == "toy") return Preset::toy;
  throw InputError("unknown preset '" + s + "' (expected paper, desk or toy)");
}

/// paper: 200/200 epochs, T = 200. desk: 50/50 epochs, T = 100, other values
/// unchanged. toy: a small budget for the synthetic regression set.
inline TrainConfig preset_config(Preset p)
{
  TrainConfig c;
  switch (p) {
  case Preset::paper: break;
  case Preset::desk:
    c.epochs_generative = 50;
    c.epochs_inference = 50;
    c.kprox_steps = 100;
    break;
  case Preset::toy:
    c.epochs_generative = 15;
    c.kprox_steps = 50;
    break;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

struct ModelBundle
{
  MlpParams encoder; // x -> z (deterministic) or x -> [mean; log std] (gaussian)
  MlpParams decoder; // z -> [xhat; yhat]
  std::size_t latent_dim = 0;
  EncoderHead head = EncoderHead::deterministic;
  Standardizer standardizer;
  std::string config_hash;

  std::size_t input_dim() const { return encoder.input_dim(); }

  void validate() const
  {
    encoder.validate();
    decoder.validate();
    const std::size_t enc_out = head == EncoderHead::gaussian ? 2 * latent_dim : latent_dim;
    detail::require(encoder.output_dim() == enc_out,
                    "bundle: encoder output dim does not match latent dim");
    detail::require(decoder.input_dim() == latent_dim,
                    "bundle: decoder input dim does not match latent dim");
    detail::require(decoder.output_dim() == encoder.input_dim() + 1,
                    "bundle: decoder must emit the features plus one label");
  }
};

inline EncoderHead head_for(const TrainConfig& cfg)
{
  if (cfg.ablation == AblationMode::full && cfg.matching_mode == MatchingMode::batch_mean)
    return EncoderHead::deterministic;
  return EncoderHead::gaussian;
}

/// Encoder [D_x, hidden..., D_LV] and decoder [D_LV, reversed hidden..., D_x + 1].
inline ModelBundle make_bundle(std::size_t x_dim, const TrainConfig& cfg,
                               const Standardizer& standardizer = {})
{
  cfg.validate();
  detail::require(x_dim >= 1, "make_bundle: need at least one feature");
  ModelBundle b;
  b.latent_dim = cfg.latent_dim;
  b.head = head_for(cfg);
  std::vector<std::size_t> enc{x_dim};
  enc.insert(enc.end(), cfg.hidden_dims.begin(), cfg.hidden_dims.end());
  enc.push_back(b.head == EncoderHead::gaussian ? 2 * cfg.latent_dim : cfg.latent_dim);
  std::vector<std::size_t> dec{cfg.latent_dim};
  dec.insert(dec.end(), cfg.hidden_dims.rbegin(), cfg.hidden_dims.rend());
  dec.push_back(x_dim + 1);
  Rng enc_rng = make_rng(cfg.seed, "init-encoder");
  Rng dec_rng = make_rng(cfg.seed, "init-decoder");
  b.encoder = MlpParams::random(enc, cfg.activation, enc_rng);
  b.decoder = MlpParams::random(dec, cfg.activation, dec_rng);
  if (b.head == EncoderHead::gaussian) {
    // Start the log-std head near a small spread.
    const auto L = static_cast<Eigen::Index>(cfg.latent_dim);
    auto& W = b.encoder.weights.back();
    auto& bias = b.encoder.biases.back();
    W.bottomRows(L) *= 0.1;
    bias.tail(L).setConstant(std::log(0.1));
  }
  b.standardizer = standardizer;
  b.config_hash = config_hash(cfg);
  return b;
}

inline nlohmann::json to_json(const ModelBundle& b)
{
  return {{"encoder", to_json(b.encoder)},
          {"decoder", to_json(b.decoder)},
          {"latent_dim", b.latent_dim},
          {"encoder_head", to_string(b.head)},
          {"standardizer", to_json(b.standardizer)},
          {"config_hash", b.config_hash}};
}

inline ModelBundle bundle_from_json(const nlohmann::json& j)
{
  try {
    ModelBundle b;
    b.encoder = mlp_from_json(j.at("encoder"));
    b.decoder = mlp_from_json(j.at("decoder"));
    b.latent_dim = j.at("latent_dim").get<std::size_t>();
    b.head = encoder_head_from_string(j.at("encoder_head").get<std::string>());
    b.standardizer = standardizer_from_json(j.at("standardizer"));
    b.config_hash = j.at("config_hash").get<std::string>();
    b.validate();
    return b;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed model checkpoint: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Latent point estimate for each row of X (the mean for a gaussian head).
inline Matrix encode(const ModelBundle& b, const Matrix& X)
{
  const MlpCache c = mlp_forward_batch(b.encoder, X);
  return c.output().leftCols(static_cast<Eigen::Index>(b.latent_dim));
}

struct Prediction
{
  double yhat = 0.0;
  Vector xhat;
  Vector z;
};

/// Encoder then decoder in series; the label is the decoder's last output.
/// Works in standardised units.
inline Prediction predict(const ModelBundle& b, const Vector& x)
{
  detail::require(static_cast<std::size_t>(x.size()) == b.input_dim(),
                  "predict: input has " + std::to_string(x.size()) + " features, model expects " +
                    std::to_string(b.input_dim()));
  Prediction p;
  p.z = encode(b, x.transpose()).row(0).transpose();
  const Vector out = mlp_forward(b.decoder, p.z).output;
  p.xhat = out.head(out.size() - 1);
  p.yhat = out[out.size() - 1];
  return p;
}

inline Vector predict_labels(const ModelBundle& b, const Matrix& X)
{
  const Matrix Z = encode(b, X);
  const MlpCache c = mlp_forward_batch(b.decoder, Z);
  return c.output().col(c.output().cols() - 1);
}

inline double validation_sse(const ModelBundle& b, const TabularDataset& valid)
{
  return (predict_labels(b, valid.X) - valid.y).squaredNorm();
}

// ---------------------------------------------------------------------------
// Training logs
// ---------------------------------------------------------------------------

struct EpochLog
{
  std::size_t epoch = 0;
  std::string stage;
  double loss = 0.0;
  std::optional<double> valid_sse;
};

inline void write_log_csv(std::ostream& out, const std::vector<EpochLog>& logs)
{
  out << "epoch,stage,loss,valid_sse\n";
  for (const auto& l : logs)
    out << l.epoch << ',' << l.stage << ',' << format_double(l.loss) << ','
        << (l.valid_sse ? format_double(*l.valid_sse) : std::string()) << '\n';
}

namespace detail {

inline Vector observation(const TabularDataset& ds, std::size_t m)
{
  const auto r = static_cast<Eigen::Index>(m);
  Vector t(ds.X.cols() + 1);
  t.head(ds.X.cols()) = ds.X.row(r).transpose();
  t[ds.X.cols()] = ds.y[r];
  return t;
}

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, std::string_view stream,
                                         std::uint64_t index)
{
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng = make_rng(seed, stream, index);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline Matrix gather_rows(const Matrix& M, std::span<const std::size_t> idx)
{
  Matrix out(static_cast<Eigen::Index>(idx.size()), M.cols());
  for (std::size_t k = 0; k < idx.size(); ++k)
    out.row(static_cast<Eigen::Index>(k)) = M.row(static_cast<Eigen::Index>(idx[k]));
  return out;
}

inline Matrix standard_normal(Eigen::Index rows, Eigen::Index cols, Rng& rng)
{
  std::normal_distribution<double> g(0.0, 1.0);
  Matrix out(rows, cols);
  for (Eigen::Index i = 0; i < out.size(); ++i)
    out.data()[i] = g(rng);
  return out;
}

// Solves the batch transport problem. A plain-domain run that stalls is
// continued in the log domain from where it stopped, with a fresh budget.
inline TransportPlan solve_plan(const Matrix& C, const SinkhornConfig& cfg)
{
  TransportPlan plan = sinkhorn(C, cfg);
  if (!plan.converged && !plan.log_domain)
    plan = sinkhorn_resume(C, cfg, plan);
  if (!plan.converged)
    throw NumericalError("sinkhorn did not reach marginal tolerance " +
                         format_double(cfg.marginal_tol) + " after " +
                         std::to_string(plan.iterations_used) + " iterations (error " +
                         format_double(plan.marginal_error) + ")");
  return plan;
}

} // namespace detail

// ---------------------------------------------------------------------------
// Stage 1: decoder training with sampler-inferred latents
// ---------------------------------------------------------------------------

/// Per-sample particle sets carried between epochs.
struct LatentCache
{
  std::vector<Matrix> particles;
};

inline ParticleEnsemble prior_particles(const TrainConfig& cfg, std::string_view stream,
                                        std::size_t sample)
{
  return init_ensemble(InitSpec::gaussian(0.0, 1.0, cfg.latent_dim, cfg.particles),
                       derive_seed(cfg.seed, stream, sample));
}

struct SampleFit
{
  Matrix particles;
  double log_likelihood = 0.0; // mean over particles, constants dropped
  MlpGradients grads;          // of the mean negative log-likelihood
};

/// Runs the sampler for one observation against the current decoder and
/// returns the particles plus the decoder gradient of
/// -(1/l) sum_i log p([x; y] | z_i).
inline SampleFit fit_sample(const MlpParams& decoder, const Vector& obs, ParticleEnsemble init,
                            const TrainConfig& cfg, bool want_grads)
{
  const DecoderPosterior post(decoder, obs, cfg.noise_var);
  KproxRun run = kprox_run(std::move(init), post, cfg.kprox());
  SampleFit fit;
  fit.particles = std::move(run.final.particles);
  const MlpCache cache = mlp_forward_batch(decoder, fit.particles);
  const Matrix resid = (-cache.output()).rowwise() + obs.transpose();
  const double l = static_cast<double>(fit.particles.rows());
  fit.log_likelihood = -0.5 * resid.rowwise().squaredNorm().mean() / cfg.noise_var;
  if (want_grads) {
    const Matrix out_grad = -resid / (cfg.noise_var * l);
    mlp_backward_batch(decoder, cache, out_grad, &fit.grads, nullptr);
  }
  return fit;
}

/// Each epoch walks the shuffled training set in minibatches; every sample's
/// posterior is approximated by the sampler under the current decoder, and one
/// Adam step is taken per minibatch on the mean negative log-likelihood.
/// Logged loss is the epoch's mean negative log-likelihood.
inline std::vector<EpochLog> train_decoder_stage(ModelBundle& bundle, const TabularDataset& train,
                                                 const TrainConfig& cfg, LatentCache& cache)
{
  cfg.validate();
  detail::require(train.size() > 0, "train_decoder_stage: empty training set");
  detail::require(train.num_features() + 1 == bundle.decoder.output_dim(),
                  "train_decoder_stage: dataset does not match decoder output");
  const std::size_t n = train.size();
  if (cache.particles.size() != n)
    cache.particles.assign(n, Matrix());

  AdamState adam = AdamState::for_params(bundle.decoder, cfg.decoder_lr);
  std::vector<EpochLog> logs;
  for (std::size_t epoch = 1; epoch <= cfg.epochs_generative; ++epoch) {
    const auto order = detail::shuffled(n, cfg.seed, "stage1-shuffle", epoch);
    double ll_sum = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      const std::size_t bsz = stop - start;
      std::vector<SampleFit> fits(bsz);
      parallel_for(bsz, [&](std::size_t k) {
        const std::size_t m = order[start + k];
        ParticleEnsemble init;
        if (cfg.warm_start && cache.particles[m].size() > 0)
          init.particles = cache.particles[m];
        else
          init = prior_particles(cfg, "stage1-init", m);
        fits[k] = fit_sample(bundle.decoder, detail::observation(train, m), std::move(init), cfg,
                             true);
      });
      MlpGradients g = MlpGradients::zeros_like(bundle.decoder);
      for (std::size_t k = 0; k < bsz; ++k) {
        g += fits[k].grads;
        ll_sum += fits[k].log_likelihood;
        cache.particles[order[start + k]] = std::move(fits[k].particles);
      }
      g *= 1.0 / static_cast<double>(bsz);
      adam_step(bundle.decoder, g, adam);
    }
    logs.push_back({epoch, "generative", -ll_sum / static_cast<double>(n), std::nullopt});
  }
  return logs;
}

// ---------------------------------------------------------------------------
// Inference pairs
// ---------------------------------------------------------------------------

struct InferencePairSet
{
  Matrix summaries;             // N x D_LV particle means
  std::vector<Matrix> particles; // per sample, l x D_LV
  Matrix X;
  Vector y;

  std::size_t size() const { return static_cast<std::size_t>(X.rows()); }
};

/// One sampler run per training sample under the trained decoder. Starts from
/// the cached stage-1 particles when available, otherwise from the prior.
inline InferencePairSet build_inference_pairs(const ModelBundle& bundle,
                                              const TabularDataset& train, const TrainConfig& cfg,
                                              const LatentCache* warm = nullptr)
{
  cfg.validate();
  const std::size_t n = train.size();
  InferencePairSet pairs;
  pairs.X = train.X;
  pairs.y = train.y;
  pairs.particles.resize(n);
  pairs.summaries.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(cfg.latent_dim));
  parallel_for(n, [&](std::size_t m) {
    ParticleEnsemble init;
    if (warm && warm->particles.size() == n && warm->particles[m].size() > 0)
      init.particles = warm->particles[m];
    else
      init = prior_particles(cfg, "pairs-init", m);
    SampleFit fit = fit_sample(bundle.decoder, detail::observation(train, m), std::move(init),
                               cfg, false);
    pairs.particles[m] = std::move(fit.particles);
  });
  for (std::size_t m = 0; m < n; ++m)
    pairs.summaries.row(static_cast<Eigen::Index>(m)) = pairs.particles[m].colwise().mean();
  return pairs;
}

// ---------------------------------------------------------------------------
// Stage 2: encoder training against the inferred latents
// ---------------------------------------------------------------------------

struct EncoderStageResult
{
  ModelBundle best;
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;
  double best_valid_sse = 0.0;
};

namespace detail {

// Gradient wrt the encoder output for a gaussian head, given the gradient wrt
// reparameterised samples z = mean + exp(log_std) * xi.
inline void gaussian_head_grad(const Matrix& dz_sum, const Matrix& dz_xi_sum, const Matrix& log_std,
                               Matrix& out, Eigen::Index latent)
{
  out.leftCols(latent) = dz_sum;
  out.rightCols(latent) = (dz_xi_sum.array() * log_std.array().exp()).matrix();
}

// Runs `step` over shuffled minibatches each epoch. Epoch 0 evaluates the
// starting point only: `step` receives a null Adam state and must not update.
template <class StepFn>
EncoderStageResult run_encoder_epochs(ModelBundle& bundle, std::size_t n,
                                      const TabularDataset& valid, const TrainConfig& cfg,
                                      StepFn&& step)
{
  EncoderStageResult res;
  AdamState adam = AdamState::for_params(bundle.encoder, cfg.encoder_lr);
  for (std::size_t epoch = 0; epoch <= cfg.epochs_inference; ++epoch) {
    const auto order = shuffled(n, cfg.seed, "stage2-shuffle", epoch);
    double loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      const std::size_t stop = std::min(n, start + cfg.batch_size);
      std::span<const std::size_t> idx(order.data() + start, stop - start);
      loss += step(idx, epoch, start, epoch == 0 ? nullptr : &adam);
      ++batches;
    }
    const double sse = validation_sse(bundle, valid);
    res.logs.push_back({epoch, "inference", loss / static_cast<double>(batches), sse});
    if (epoch == 0 || sse < res.best_valid_sse) {
      res.best_valid_sse = sse;
      res.best = bundle;
      res.best_epoch = epoch;
    }
  }
  return res;
}

} // namespace detail

/// Minibatch entropic W2^2 between encoder outputs and the inferred latents;
/// the encoder gradient comes from the envelope formula at the Sinkhorn plan.
/// The decoder is never touched. Returns the bundle with the lowest validation
/// SSE seen (epoch 0, the starting point, included).
inline EncoderStageResult train_encoder_stage(ModelBundle& bundle, const InferencePairSet& pairs,
                                              const TabularDataset& valid, const TrainConfig& cfg)
{
  cfg.validate();
  detail::require(pairs.size() > 0, "train_encoder_stage: no inference pairs");
  const auto L = static_cast<Eigen::Index>(bundle.latent_dim);
  const SinkhornConfig sk = cfg.sinkhorn();

  if (cfg.matching_mode == MatchingMode::batch_mean) {
    detail::require(bundle.head == EncoderHead::deterministic,
                    "batch_mean matching needs a deterministic encoder head");
    return detail::run_encoder_epochs(
      bundle, pairs.size(), valid, cfg,
      [&](std::span<const std::size_t> idx, std::size_t, std::size_t, AdamState* adam) {
        const Matrix Xb = detail::gather_rows(pairs.X, idx);
        const Matrix Zt = detail::gather_rows(pairs.summaries, idx);
        const MlpCache cache = mlp_forward_batch(bundle.encoder, Xb);
        const Matrix& Zhat = cache.output();
        const Matrix C = cost_matrix(Zt, Zhat);
        const TransportPlan plan = detail::solve_plan(C, sk);
        const Matrix G = envelope_grad_predictions(plan, Zt, Zhat);
        MlpGradients g;
        mlp_backward_batch(bundle.encoder, cache, G, &g, nullptr);
        if (adam)
          adam_step(bundle.encoder, g, *adam);
        return ot_cost(plan, C);
      });
  }

  detail::require(bundle.head == EncoderHead::gaussian,
                  "per_sample_set matching needs a gaussian encoder head");
  const std::size_t n = pairs.size();
  return detail::run_encoder_epochs(
    bundle, n, valid, cfg,
    [&](std::span<const std::size_t> idx, std::size_t epoch, std::size_t start, AdamState* adam) {
      const auto B = static_cast<Eigen::Index>(idx.size());
      const Matrix Xb = detail::gather_rows(pairs.X, idx);
      const MlpCache cache = mlp_forward_batch(bundle.encoder, Xb);
      const Matrix& out = cache.output();
      Matrix dz_sum(B, L), dz_xi_sum(B, L);
      std::vector<double> costs(static_cast<std::size_t>(B));
      parallel_for(static_cast<std::size_t>(B), [&](std::size_t k) {
        const auto r = static_cast<Eigen::Index>(k);
        const Matrix& target = pairs.particles[idx[k]];
        Rng rng = make_rng(cfg.seed, "stage2-noise", epoch * n + start + k);
        const Matrix xi = detail::standard_normal(target.rows(), L, rng);
        const Vector mean = out.row(r).head(L).transpose();
        const Vector sd = out.row(r).tail(L).array().exp().matrix().transpose();
        Matrix Zhat = (xi.array().rowwise() * sd.transpose().array()).matrix();
        Zhat.rowwise() += mean.transpose();
        const Matrix C = cost_matrix(target, Zhat);
        const TransportPlan plan = detail::solve_plan(C, sk);
        const Matrix G = envelope_grad_predictions(plan, target, Zhat);
        dz_sum.row(r) = G.colwise().sum();
        dz_xi_sum.row(r) = (G.array() * xi.array()).colwise().sum();
        costs[k] = ot_cost(plan, C);
      });
      Matrix head_grad(B, 2 * L);
      detail::gaussian_head_grad(dz_sum, dz_xi_sum, out.rightCols(L), head_grad, L);
      head_grad /= static_cast<double>(B);
      MlpGradients g;
      mlp_backward_batch(bundle.encoder, cache, head_grad, &g, nullptr);
      if (adam)
        adam_step(bundle.encoder, g, *adam);
      return std::accumulate(costs.begin(), costs.end(), 0.0) / static_cast<double>(B);
    });
}

// ---------------------------------------------------------------------------
// Ablations
// ---------------------------------------------------------------------------

/// Stage 2 replacement: gaussian encoder trained on
///   -E_q[log p(y | z)] + KL[q(z | x) || N(m, diag s^2)]
/// with (m, s^2) the moments of each sample's stored particles and the decoder
/// frozen.
inline EncoderStageResult train_encoder_kl_stage(ModelBundle& bundle,
                                                 const InferencePairSet& pairs,
                                                 const TabularDataset& valid,
                                                 const TrainConfig& cfg)
{
  detail::require(bundle.head == EncoderHead::gaussian, "KL stage needs a gaussian encoder head");
  const auto L = static_cast<Eigen::Index>(bundle.latent_dim);
  const std::size_t n = pairs.size();
  constexpr double kVarFloor = 1e-4;
  Matrix q_mean(static_cast<Eigen::Index>(n), L), q_var(static_cast<Eigen::Index>(n), L);
  for (std::size_t m = 0; m < n; ++m) {
    const Matrix& P = pairs.particles[m];
    const auto r = static_cast<Eigen::Index>(m);
    q_mean.row(r) = P.colwise().mean();
    q_var.row(r) = ((P.rowwise() - q_mean.row(r)).array().square().colwise().mean())
                     .max(kVarFloor)
                     .matrix();
  }
  const auto y_col = static_cast<Eigen::Index>(bundle.decoder.output_dim() - 1);
  return detail::run_encoder_epochs(
    bundle, n, valid, cfg,
    [&](std::span<const std::size_t> idx, std::size_t epoch, std::size_t, AdamState* adam) {
      const auto B = static_cast<Eigen::Index>(idx.size());
      const double inv_b = 1.0 / static_cast<double>(B);
      const Matrix Xb = detail::gather_rows(pairs.X, idx);
      const Matrix M = detail::gather_rows(q_mean, idx);
      const Matrix V = detail::gather_rows(q_var, idx);
      Vector yb(B);
      for (Eigen::Index k = 0; k < B; ++k)
        yb[k] = pairs.y[static_cast<Eigen::Index>(idx[static_cast<std::size_t>(k)])];
      const MlpCache ec = mlp_forward_batch(bundle.encoder, Xb);
      const Matrix mean = ec.output().leftCols(L);
      const Matrix log_sd = ec.output().rightCols(L);
      const Matrix sd = log_sd.array().exp().matrix();
      Rng rng = make_rng(cfg.seed, "nowass-noise", epoch * n + idx.front());
      const Matrix xi = detail::standard_normal(B, L, rng);
      const Matrix Z = (mean.array() + sd.array() * xi.array()).matrix();
      const MlpCache dc = mlp_forward_batch(bundle.decoder, Z);
      const Vector ry = yb - dc.output().col(y_col);
      Matrix dout = Matrix::Zero(B, dc.output().cols());
      dout.col(y_col) = -ry / cfg.noise_var * inv_b;
      Matrix dz;
      mlp_backward_batch(bundle.decoder, dc, dout, nullptr, &dz);

      const double nll = 0.5 * ry.squaredNorm() / cfg.noise_var * inv_b;
      const double kl =
        ((0.5 * V.array().log() - log_sd.array()) +
         (sd.array().square() + (mean - M).array().square()) / (2.0 * V.array()) - 0.5)
          .sum() *
        inv_b;
      Matrix head(B, 2 * L);
      head.leftCols(L) = dz + ((mean - M).array() / V.array()).matrix() * inv_b;
      head.rightCols(L) = (dz.array() * xi.array() * sd.array()).matrix() +
                          ((sd.array().square() / V.array()) - 1.0).matrix() * inv_b;
      MlpGradients g;
      mlp_backward_batch(bundle.encoder, ec, head, &g, nullptr);
      if (adam)
        adam_step(bundle.encoder, g, *adam);
      return nll + kl;
    });
}

/// Joint amortised training of encoder and decoder on the negative ELBO with a
/// N(0, I) prior and a single reparameterised sample per observation. The
/// budget is epochs_generative + epochs_inference joint epochs.
inline EncoderStageResult train_vae(ModelBundle& bundle, const TabularDataset& train,
                                    const TabularDataset& valid, const TrainConfig& cfg)
{
  detail::require(bundle.head == EncoderHead::gaussian, "VAE training needs a gaussian encoder head");
  const auto L = static_cast<Eigen::Index>(bundle.latent_dim);
  const std::size_t n = train.size();
  Matrix T(train.X.rows(), train.X.cols() + 1);
  T.leftCols(train.X.cols()) = train.X;
  T.col(train.X.cols()) = train.y;
  AdamState dec_adam = AdamState::for_params(bundle.decoder, cfg.decoder_lr);
  TrainConfig joint = cfg;
  joint.epochs_inference = cfg.epochs_generative + cfg.epochs_inference;
  auto res = detail::run_encoder_epochs(
    bundle, n, valid, joint,
    [&](std::span<const std::size_t> idx, std::size_t epoch, std::size_t, AdamState* enc_adam) {
      const auto B = static_cast<Eigen::Index>(idx.size());
      const double inv_b = 1.0 / static_cast<double>(B);
      const Matrix Xb = detail::gather_rows(train.X, idx);
      const Matrix Tb = detail::gather_rows(T, idx);
      const MlpCache ec = mlp_forward_batch(bundle.encoder, Xb);
      const Matrix mean = ec.output().leftCols(L);
      const Matrix log_sd = ec.output().rightCols(L);
      const Matrix sd = log_sd.array().exp().matrix();
      Rng rng = make_rng(cfg.seed, "vae-noise", epoch * n + idx.front());
      const Matrix xi = detail::standard_normal(B, L, rng);
      const Matrix Z = (mean.array() + sd.array() * xi.array()).matrix();
      const MlpCache dc = mlp_forward_batch(bundle.decoder, Z);
      const Matrix R = Tb - dc.output();
      const Matrix dout = -R / cfg.noise_var * inv_b;
      MlpGradients dec_g;
      Matrix dz;
      mlp_backward_batch(bundle.decoder, dc, dout, &dec_g, &dz);
      const double rec = 0.5 * R.squaredNorm() / cfg.noise_var * inv_b;
      const double kl =
        0.5 * (sd.array().square() + mean.array().square() - 1.0 - 2.0 * log_sd.array()).sum() *
        inv_b;
      Matrix head(B, 2 * L);
      head.leftCols(L) = dz + mean * inv_b;
      head.rightCols(L) = (dz.array() * xi.array() * sd.array()).matrix() +
                          (sd.array().square() - 1.0).matrix() * inv_b;
      MlpGradients enc_g;
      mlp_backward_batch(bundle.encoder, ec, head, &enc_g, nullptr);
      if (enc_adam) {
        adam_step(bundle.decoder, dec_g, dec_adam);
        adam_step(bundle.encoder, enc_g, *enc_adam);
      }
      return rec + kl;
    });
  for (auto& l : res.logs)
    l.stage = "vae";
  return res;
}

// ---------------------------------------------------------------------------
// End-to-end pipeline
// ---------------------------------------------------------------------------

struct PipelineResult
{
  ModelBundle bundle;
  std::vector<EpochLog> logs;
  std::size_t best_epoch = 0;
  double best_valid_sse = 0.0;
  MetricReport test_standardized;
  MetricReport test_original;
  MetricReport valid_standardized;
};

inline MetricReport evaluate(const ModelBundle& b, const TabularDataset& standardized,
                             LabelSpace space)
{
  Vector yhat = predict_labels(b, standardized.X);
  Vector y = standardized.y;
  if (space == LabelSpace::original) {
    yhat = (yhat.array() * b.standardizer.y_std + b.standardizer.y_mean).matrix();
    y = (y.array() * b.standardizer.y_std + b.standardizer.y_mean).matrix();
  }
  return regression_metrics(y, yhat, space);
}

/// Fits the standardiser on the training split, trains according to
/// cfg.ablation, and scores the selected bundle on the test split.
inline PipelineResult run_pipeline(const DataSplits& raw, const TrainConfig& cfg)
{
  cfg.validate();
  const Standardizer st = fit_standardizer(raw.train);
  const TabularDataset train = st.apply(raw.train);
  const TabularDataset valid = st.apply(raw.valid);
  const TabularDataset test = st.apply(raw.test);

  ModelBundle bundle = make_bundle(train.num_features(), cfg, st);
  PipelineResult out;
  EncoderStageResult enc;
  if (cfg.ablation == AblationMode::no_kprox) {
    enc = train_vae(bundle, train, valid, cfg);
  } else {
    LatentCache cache;
    out.logs = train_decoder_stage(bundle, train, cfg, cache);
    if (cfg.epochs_inference == 0) {
      enc.best = bundle;
      enc.best_valid_sse = validation_sse(bundle, valid);
    } else {
      const InferencePairSet pairs =
        build_inference_pairs(bundle, train, cfg, cfg.warm_start ? &cache : nullptr);
      enc = cfg.ablation == AblationMode::full ? train_encoder_stage(bundle, pairs, valid, cfg)
                                               : train_encoder_kl_stage(bundle, pairs, valid, cfg);
    }
  }
  out.logs.insert(out.logs.end(), enc.logs.begin(), enc.logs.end());
  out.bundle = std::move(enc.best);
  out.best_epoch = enc.best_epoch;
  out.best_valid_sse = enc.best_valid_sse;
  out.test_standardized = evaluate(out.bundle, test, LabelSpace::standardized);
  out.test_original = evaluate(out.bundle, test, LabelSpace::original);
  out.valid_standardized = evaluate(out.bundle, valid, LabelSpace::standardized);
  return out;
}

/// Trains the requested ablation (no_kprox or no_wass, or full) on the given
/// splits; a thin alias over run_pipeline that pins cfg.ablation.
inline PipelineResult train_ablation(AblationMode mode, const DataSplits& raw, TrainConfig cfg)
{
  cfg.ablation = mode;
  return run_pipeline(raw, cfg);
}

} // namespace kprox
