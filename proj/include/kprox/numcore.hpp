#pragma once

#include "kprox/errors.hpp"
#include "kprox/rng.hpp"

#include <Eigen/Dense>
#include <json.hpp>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace kprox {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

inline bool all_finite(const Matrix& m) { return m.allFinite(); }
inline bool all_finite(const Vector& v) { return v.allFinite(); }

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

enum class Activation { tanh, relu, identity };

inline std::string to_string(Activation a)
{
  switch (a) {
  case Activation::tanh: return "tanh";
  case Activation::relu: return "relu";
  case Activation::identity: return "identity";
  }
  return "unknown";
}

inline Activation activation_from_string(const std::string& s)
{
  if (s == "tanh") return Activation::tanh;
  if (s == "relu") return Activation::relu;
  if (s == "identity") return Activation::identity;
  throw InputError("unknown activation '" + s + "'");
}

namespace detail {

inline void apply_activation(Activation a, Matrix& m)
{
  switch (a) {
  case Activation::tanh: m = m.array().tanh().matrix(); break;
  case Activation::relu: m = m.cwiseMax(0.0); break;
  case Activation::identity: break;
  }
}

// Multiplies `grad` in place by the activation derivative, given pre and post
// activation values of the same layer.
inline void scale_by_derivative(Activation a, const Matrix& pre, const Matrix& post,
                                Matrix& grad)
{
  switch (a) {
  case Activation::tanh:
    grad.array() *= (1.0 - post.array().square());
    break;
  case Activation::relu:
    grad.array() *= (pre.array() > 0.0).cast<double>();
    break;
  case Activation::identity: break;
  }
}

} // namespace detail

// ---------------------------------------------------------------------------
// MLP parameters
// ---------------------------------------------------------------------------

/// Fully connected network. Hidden layers use `hidden_activation`, the output
/// layer is affine. weights[l] is dims[l+1] x dims[l].
struct MlpParams
{
  std::vector<std::size_t> layer_dims;
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  Activation hidden_activation = Activation::tanh;

  std::size_t num_layers() const { return weights.size(); }
  std::size_t input_dim() const { return layer_dims.front(); }
  std::size_t output_dim() const { return layer_dims.back(); }

  std::size_t num_parameters() const
  {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l)
      n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
  }

  void validate() const
  {
    detail::require(layer_dims.size() >= 2, "MLP needs at least input and output dims");
    detail::require(weights.size() == layer_dims.size() - 1 &&
                      biases.size() == layer_dims.size() - 1,
                    "MLP layer count does not match layer_dims");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      detail::require(static_cast<std::size_t>(weights[l].rows()) == layer_dims[l + 1] &&
                        static_cast<std::size_t>(weights[l].cols()) == layer_dims[l],
                      "MLP weight " + std::to_string(l) + " has wrong shape");
      detail::require(static_cast<std::size_t>(biases[l].size()) == layer_dims[l + 1],
                      "MLP bias " + std::to_string(l) + " has wrong length");
    }
  }

  static MlpParams zeros(std::vector<std::size_t> dims,
                         Activation act = Activation::tanh)
  {
    detail::require(dims.size() >= 2, "MLP needs at least input and output dims");
    MlpParams p;
    p.layer_dims = std::move(dims);
    p.hidden_activation = act;
    for (std::size_t l = 0; l + 1 < p.layer_dims.size(); ++l) {
      detail::require(p.layer_dims[l] > 0 && p.layer_dims[l + 1] > 0,
                      "MLP layer widths must be positive");
      p.weights.push_back(Matrix::Zero(static_cast<Eigen::Index>(p.layer_dims[l + 1]),
                                       static_cast<Eigen::Index>(p.layer_dims[l])));
      p.biases.push_back(Vector::Zero(static_cast<Eigen::Index>(p.layer_dims[l + 1])));
    }
    return p;
  }

  /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weights and biases.
  static MlpParams random(std::vector<std::size_t> dims, Activation act, Rng& rng)
  {
    MlpParams p = zeros(std::move(dims), act);
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(p.layer_dims[l]));
      std::uniform_real_distribution<double> u(-bound, bound);
      for (Eigen::Index i = 0; i < p.weights[l].size(); ++i)
        p.weights[l].data()[i] = u(rng);
      for (Eigen::Index i = 0; i < p.biases[l].size(); ++i)
        p.biases[l][i] = u(rng);
    }
    return p;
  }
};

/// Shape-congruent to MlpParams.
struct MlpGradients
{
  std::vector<Matrix> weights;
  std::vector<Vector> biases;

  static MlpGradients zeros_like(const MlpParams& p)
  {
    MlpGradients g;
    for (std::size_t l = 0; l < p.weights.size(); ++l) {
      g.weights.push_back(Matrix::Zero(p.weights[l].rows(), p.weights[l].cols()));
      g.biases.push_back(Vector::Zero(p.biases[l].size()));
    }
    return g;
  }

  MlpGradients& operator+=(const MlpGradients& o)
  {
    detail::require(o.weights.size() == weights.size(), "gradient shapes differ");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] += o.weights[l];
      biases[l] += o.biases[l];
    }
    return *this;
  }

  MlpGradients& operator*=(double s)
  {
    for (std::size_t l = 0; l < weights.size(); ++l) {
      weights[l] *= s;
      biases[l] *= s;
    }
    return *this;
  }

  bool finite() const
  {
    for (std::size_t l = 0; l < weights.size(); ++l)
      if (!weights[l].allFinite() || !biases[l].allFinite())
        return false;
    return true;
  }
};

// Flat views over parameters, in layer order: W0, b0, W1, b1, ...
template <class Fn>
void for_each_block(MlpParams& p, Fn&& fn)
{
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    fn(std::span<double>(p.weights[l].data(), static_cast<std::size_t>(p.weights[l].size())));
    fn(std::span<double>(p.biases[l].data(), static_cast<std::size_t>(p.biases[l].size())));
  }
}

template <class Fn>
void for_each_block(MlpGradients& g, Fn&& fn)
{
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    fn(std::span<double>(g.weights[l].data(), static_cast<std::size_t>(g.weights[l].size())));
    fn(std::span<double>(g.biases[l].data(), static_cast<std::size_t>(g.biases[l].size())));
  }
}

inline std::vector<double> flatten(const MlpParams& p)
{
  std::vector<double> out;
  out.reserve(p.num_parameters());
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    out.insert(out.end(), p.weights[l].data(), p.weights[l].data() + p.weights[l].size());
    out.insert(out.end(), p.biases[l].data(), p.biases[l].data() + p.biases[l].size());
  }
  return out;
}

inline std::vector<double> flatten(const MlpGradients& g)
{
  std::vector<double> out;
  for (std::size_t l = 0; l < g.weights.size(); ++l) {
    out.insert(out.end(), g.weights[l].data(), g.weights[l].data() + g.weights[l].size());
    out.insert(out.end(), g.biases[l].data(), g.biases[l].data() + g.biases[l].size());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Per-layer activations of a batched forward pass; row r belongs to sample r.
/// post[0] is the input, pre[l] = post[l] W_l^T + b_l, post[l+1] = act(pre[l]).
struct MlpCache
{
  std::vector<Matrix> pre;
  std::vector<Matrix> post;

  const Matrix& output() const { return post.back(); }
};

inline MlpCache mlp_forward_batch(const MlpParams& params, const Matrix& inputs)
{
  detail::require(static_cast<std::size_t>(inputs.cols()) == params.input_dim(),
                  "mlp_forward: input has " + std::to_string(inputs.cols()) +
                    " columns, network expects " + std::to_string(params.input_dim()));
  const std::size_t n_layers = params.num_layers();
  MlpCache cache;
  cache.pre.resize(n_layers);
  cache.post.resize(n_layers + 1);
  cache.post[0] = inputs;
  for (std::size_t l = 0; l < n_layers; ++l) {
    cache.pre[l] = cache.post[l] * params.weights[l].transpose();
    cache.pre[l].rowwise() += params.biases[l].transpose();
    cache.post[l + 1] = cache.pre[l];
    if (l + 1 < n_layers)
      detail::apply_activation(params.hidden_activation, cache.post[l + 1]);
  }
  return cache;
}

/// Backpropagates `output_grads` (one row per sample). Parameter gradients are
/// summed over rows; input gradients are returned per row. Either output may
/// be skipped by passing nullptr.
inline void mlp_backward_batch(const MlpParams& params, const MlpCache& cache,
                               const Matrix& output_grads, MlpGradients* param_grads,
                               Matrix* input_grads)
{
  const std::size_t n_layers = params.num_layers();
  detail::require(cache.post.size() == n_layers + 1, "mlp_backward: cache/network mismatch");
  detail::require(output_grads.rows() == cache.output().rows() &&
                    static_cast<std::size_t>(output_grads.cols()) == params.output_dim(),
                  "mlp_backward: output gradient has wrong shape");
  if (param_grads)
    *param_grads = MlpGradients::zeros_like(params);

  Matrix delta = output_grads;
  for (std::size_t l = n_layers; l-- > 0;) {
    if (l + 1 < n_layers)
      detail::scale_by_derivative(params.hidden_activation, cache.pre[l], cache.post[l + 1],
                                  delta);
    if (param_grads) {
      param_grads->weights[l].noalias() = delta.transpose() * cache.post[l];
      param_grads->biases[l] = delta.colwise().sum().transpose();
    }
    if (l > 0 || input_grads) {
      Matrix next = delta * params.weights[l];
      delta = std::move(next);
    }
  }
  if (input_grads)
    *input_grads = std::move(delta);
}

struct MlpForward
{
  Vector output;
  MlpCache cache;
};

inline MlpForward mlp_forward(const MlpParams& params, const Vector& input)
{
  detail::require(static_cast<std::size_t>(input.size()) == params.input_dim(),
                  "mlp_forward: input length " + std::to_string(input.size()) +
                    " != network input dim " + std::to_string(params.input_dim()));
  MlpForward f;
  f.cache = mlp_forward_batch(params, input.transpose());
  f.output = f.cache.output().row(0).transpose();
  return f;
}

/// Gradient of output_grad . output with respect to the parameters.
inline MlpGradients mlp_backward_params(const MlpParams& params, const MlpCache& cache,
                                        const Vector& output_grad)
{
  detail::require(static_cast<std::size_t>(output_grad.size()) == params.output_dim(),
                  "mlp_backward_params: output gradient has wrong length");
  MlpGradients g;
  mlp_backward_batch(params, cache, output_grad.transpose(), &g, nullptr);
  return g;
}

/// Gradient of output_grad . output with respect to the input.
inline Vector mlp_backward_input(const MlpParams& params, const MlpCache& cache,
                                 const Vector& output_grad)
{
  detail::require(static_cast<std::size_t>(output_grad.size()) == params.output_dim(),
                  "mlp_backward_input: output gradient has wrong length");
  Matrix in;
  mlp_backward_batch(params, cache, output_grad.transpose(), nullptr, &in);
  return in.row(0).transpose();
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamState
{
  MlpGradients m;
  MlpGradients v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double lr = 1e-3;
  double eps = 1e-8;

  static AdamState for_params(const MlpParams& p, double lr, double beta1 = 0.9,
                              double beta2 = 0.999, double eps = 1e-8)
  {
    detail::require(lr >= 0.0, "Adam learning rate must be non-negative");
    detail::require(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0,
                    "Adam betas must lie in [0, 1)");
    AdamState s;
    s.m = MlpGradients::zeros_like(p);
    s.v = MlpGradients::zeros_like(p);
    s.lr = lr;
    s.beta1 = beta1;
    s.beta2 = beta2;
    s.eps = eps;
    return s;
  }
};

/// One bias-corrected Adam update on flat buffers. `step` is the 1-based step
/// number after incrementing.
inline void adam_update(std::span<double> params, std::span<const double> grads,
                        std::span<double> m, std::span<double> v, std::uint64_t step,
                        double lr, double beta1, double beta2, double eps)
{
  const double c1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double c2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

/// Descent step: params <- params - lr * mhat / (sqrt(vhat) + eps).
/// Non-finite gradients are rejected before anything is mutated.
inline void adam_step(MlpParams& params, const MlpGradients& grads, AdamState& state)
{
  detail::require(grads.weights.size() == params.weights.size() &&
                    state.m.weights.size() == params.weights.size(),
                  "adam_step: shapes are not congruent");
  for (std::size_t l = 0; l < params.weights.size(); ++l)
    detail::require(grads.weights[l].rows() == params.weights[l].rows() &&
                      grads.weights[l].cols() == params.weights[l].cols() &&
                      grads.biases[l].size() == params.biases[l].size(),
                    "adam_step: gradient layer " + std::to_string(l) + " has wrong shape");
  if (!grads.finite())
    throw NumericalError("adam_step: non-finite gradient, step rejected");

  ++state.step;
  for (std::size_t l = 0; l < params.weights.size(); ++l) {
    auto upd = [&](auto& p, const auto& g, auto& m, auto& v) {
      adam_update(std::span<double>(p.data(), static_cast<std::size_t>(p.size())),
                  std::span<const double>(g.data(), static_cast<std::size_t>(g.size())),
                  std::span<double>(m.data(), static_cast<std::size_t>(m.size())),
                  std::span<double>(v.data(), static_cast<std::size_t>(v.size())), state.step,
                  state.lr, state.beta1, state.beta2, state.eps);
    };
    upd(params.weights[l], grads.weights[l], state.m.weights[l], state.v.weights[l]);
    upd(params.biases[l], grads.biases[l], state.m.biases[l], state.v.biases[l]);
  }
}

// ---------------------------------------------------------------------------
// JSON checkpoints: {layer_dims, activation, weights (row-major), biases}
// ---------------------------------------------------------------------------

inline nlohmann::json to_json(const MlpParams& p)
{
  nlohmann::json j;
  j["layer_dims"] = p.layer_dims;
  j["activation"] = to_string(p.hidden_activation);
  j["weights"] = nlohmann::json::array();
  j["biases"] = nlohmann::json::array();
  for (std::size_t l = 0; l < p.weights.size(); ++l) {
    j["weights"].push_back(std::vector<double>(p.weights[l].data(),
                                               p.weights[l].data() + p.weights[l].size()));
    j["biases"].push_back(
      std::vector<double>(p.biases[l].data(), p.biases[l].data() + p.biases[l].size()));
  }
  return j;
}

inline MlpParams mlp_from_json(const nlohmann::json& j)
{
  try {
    MlpParams p = MlpParams::zeros(j.at("layer_dims").get<std::vector<std::size_t>>(),
                                   activation_from_string(j.at("activation").get<std::string>()));
    const auto& w = j.at("weights");
    const auto& b = j.at("biases");
    detail::require(w.size() == p.num_layers() && b.size() == p.num_layers(),
                    "checkpoint layer count does not match layer_dims");
    for (std::size_t l = 0; l < p.num_layers(); ++l) {
      auto wv = w[l].get<std::vector<double>>();
      auto bv = b[l].get<std::vector<double>>();
      detail::require(wv.size() == static_cast<std::size_t>(p.weights[l].size()) &&
                        bv.size() == static_cast<std::size_t>(p.biases[l].size()),
                      "checkpoint layer " + std::to_string(l) + " has wrong size");
      std::copy(wv.begin(), wv.end(), p.weights[l].data());
      std::copy(bv.begin(), bv.end(), p.biases[l].data());
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("malformed MLP checkpoint: ") + e.what());
  }
}

} // namespace kprox
