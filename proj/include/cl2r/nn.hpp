// SPDX-License-Identifier: Apache-2.0
#pragma once

// A small fully connected feature extractor with hand-written backprop and a
// momentum SGD optimizer. Everything is float64 and processed one sample at a
// time so a sample's features never depend on the rest of its batch.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "cl2r/container.hpp"
#include "cl2r/error.hpp"
#include "cl2r/random.hpp"

namespace cl2r {

using Vector = Eigen::VectorXd;

enum class Nonlinearity { Relu, Tanh };

inline const char* to_string(Nonlinearity n) { return n == Nonlinearity::Relu ? "relu" : "tanh"; }

inline Nonlinearity parse_nonlinearity(const std::string& name) {
  if (name == "relu") return Nonlinearity::Relu;
  if (name == "tanh") return Nonlinearity::Tanh;
  fail(ErrorCode::Config, "unknown nonlinearity '" + name + "' (expected relu or tanh)");
}

struct ModelConfig {
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden_layers;
  std::size_t feature_dim = 0;
  Nonlinearity nonlinearity = Nonlinearity::Relu;
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;

  /// Layer widths from input to feature output.
  std::vector<std::size_t> widths() const {
    std::vector<std::size_t> w{input_dim};
    w.insert(w.end(), hidden_layers.begin(), hidden_layers.end());
    w.push_back(feature_dim);
    return w;
  }

  /// `class_capacity`, when nonzero, is the simplex capacity N the features
  /// must match (feature_dim == N - 1).
  void validate(std::size_t class_capacity = 0) const {
    require(input_dim > 0, ErrorCode::Config, "model.input_dim must be positive");
    require(feature_dim > 0, ErrorCode::Config, "model.feature_dim must be positive");
    for (std::size_t h : hidden_layers) require(h >= 1, ErrorCode::Config, "hidden layer sizes must be >= 1");
    if (class_capacity != 0 && feature_dim + 1 != class_capacity)
      fail(ErrorCode::Config, "feature_dim " + std::to_string(feature_dim) + " does not match class capacity " +
                                  std::to_string(class_capacity) + " (expected " +
                                  std::to_string(class_capacity - 1) + ")");
  }
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Vector bias;             // out

  bool operator==(const DenseLayer& o) const {
    return weight.rows() == o.weight.rows() && weight.cols() == o.weight.cols() && weight == o.weight &&
           bias.size() == o.bias.size() && bias == o.bias;
  }
};

/// Parameter-shaped gradient (or velocity) buffers.
using LayerBuffers = std::vector<DenseLayer>;

inline LayerBuffers zeros_like(const LayerBuffers& layers) {
  LayerBuffers out;
  out.reserve(layers.size());
  for (const auto& l : layers)
    out.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Vector::Zero(l.bias.size())});
  return out;
}

struct FeatureExtractorState {
  ModelConfig config;
  LayerBuffers layers;
  LayerBuffers velocity;
  std::uint64_t step = 0;

  bool operator==(const FeatureExtractorState&) const = default;

  std::size_t input_dim() const { return config.input_dim; }
  std::size_t feature_dim() const { return config.feature_dim; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }

  /// Flat parameter view: layer by layer, weights (column-major) then bias.
  double& parameter(std::size_t index) {
    for (auto& l : layers) {
      const auto nw = static_cast<std::size_t>(l.weight.size());
      if (index < nw) return l.weight.data()[index];
      index -= nw;
      const auto nb = static_cast<std::size_t>(l.bias.size());
      if (index < nb) return l.bias.data()[index];
      index -= nb;
    }
    fail(ErrorCode::InvalidArgument, "parameter index out of range");
  }

  double parameter(std::size_t index) const { return const_cast<FeatureExtractorState*>(this)->parameter(index); }

  /// Checksum over parameters only (not optimizer state).
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& l : layers) {
      h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(l.weight.data()),
                            static_cast<std::size_t>(l.weight.size()) * sizeof(double)),
                  h);
      h = fnv1a64(std::span(reinterpret_cast<const std::uint8_t*>(l.bias.data()),
                            static_cast<std::size_t>(l.bias.size()) * sizeof(double)),
                  h);
    }
    return h;
  }
};

/// Weights ~ N(0, gain / fan_in) drawn in layer order, row by row, from one
/// mt19937_64 stream seeded with `config.seed`; gain is 2 for relu and 1 for
/// tanh. Biases start at zero; velocity buffers at zero.
inline FeatureExtractorState init_model(const ModelConfig& config, std::size_t class_capacity = 0) {
  config.validate(class_capacity);
  FeatureExtractorState state;
  state.config = config;
  Rng rng(config.seed);
  const double gain = config.nonlinearity == Nonlinearity::Relu ? 2.0 : 1.0;
  const auto widths = config.widths();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(widths[l]);
    const auto out = static_cast<Eigen::Index>(widths[l + 1]);
    const double scale = std::sqrt(gain / static_cast<double>(in));
    DenseLayer layer{Eigen::MatrixXd(out, in), Vector::Zero(out)};
    for (Eigen::Index r = 0; r < out; ++r)
      for (Eigen::Index c = 0; c < in; ++c) layer.weight(r, c) = scale * rng.normal();
    state.layers.push_back(std::move(layer));
  }
  state.velocity = zeros_like(state.layers);
  return state;
}

/// Intermediate values of one forward pass, kept for backprop.
struct ForwardTrace {
  std::vector<Vector> layer_inputs;  // input to each layer
  std::vector<Vector> pre;           // pre-activation of each layer; last is the feature

  const Vector& feature() const { return pre.back(); }
};

namespace detail {

inline void check_input(const FeatureExtractorState& state, const Vector& x, std::size_t index) {
  if (static_cast<std::size_t>(x.size()) != state.input_dim())
    fail(ErrorCode::Data, "input " + std::to_string(index) + " has dimension " + std::to_string(x.size()) +
                              ", model expects " + std::to_string(state.input_dim()));
  if (!x.allFinite()) fail(ErrorCode::Data, "input " + std::to_string(index) + " contains a non-finite value");
}

inline Vector activate(const Vector& z, Nonlinearity n) {
  if (n == Nonlinearity::Relu) return z.cwiseMax(0.0);
  return z.array().tanh().matrix();
}

}  // namespace detail

inline ForwardTrace forward_trace(const FeatureExtractorState& state, const Vector& x) {
  ForwardTrace trace;
  trace.layer_inputs.reserve(state.layers.size());
  trace.pre.reserve(state.layers.size());
  Vector h = x;
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    const auto& layer = state.layers[l];
    Vector z = layer.weight * h + layer.bias;
    trace.layer_inputs.push_back(std::move(h));
    if (l + 1 < state.layers.size()) h = detail::activate(z, state.config.nonlinearity);
    trace.pre.push_back(std::move(z));
  }
  return trace;
}

inline Vector extract_feature(const FeatureExtractorState& state, const Vector& x) {
  detail::check_input(state, x, 0);
  Vector h = x;
  for (std::size_t l = 0; l < state.layers.size(); ++l) {
    Vector z = state.layers[l].weight * h + state.layers[l].bias;
    h = (l + 1 < state.layers.size()) ? detail::activate(z, state.config.nonlinearity) : std::move(z);
  }
  return h;
}

inline std::vector<Vector> extract_features(const FeatureExtractorState& state, std::span<const Vector> batch) {
  std::vector<Vector> out;
  out.reserve(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    detail::check_input(state, batch[i], i);
    out.push_back(extract_feature(state, batch[i]));
  }
  return out;
}

/// Accumulates d(loss)/d(params) for one sample into `grads`, given
/// d(loss)/d(feature).
inline void backward_accumulate(const FeatureExtractorState& state, const ForwardTrace& trace,
                                const Vector& feature_grad, LayerBuffers& grads) {
  Vector delta = feature_grad;
  for (std::size_t l = state.layers.size(); l-- > 0;) {
    grads[l].weight.noalias() += delta * trace.layer_inputs[l].transpose();
    grads[l].bias += delta;
    if (l == 0) break;
    Vector upstream = state.layers[l].weight.transpose() * delta;
    const Vector& z = trace.pre[l - 1];
    if (state.config.nonlinearity == Nonlinearity::Relu) {
      for (Eigen::Index i = 0; i < upstream.size(); ++i)
        if (z[i] <= 0.0) upstream[i] = 0.0;
    } else {
      upstream.array() *= 1.0 - z.array().tanh().square();
    }
    delta = std::move(upstream);
  }
}

struct TrainingHyperparams {
  double learning_rate = 0.1;
  std::vector<std::size_t> lr_milestones;
  double lr_decay_factor = 0.1;
  double weight_decay = 2e-4;
  double momentum = 0.9;
  std::size_t epochs_per_task = 70;
  std::size_t batch_size = 128;
  double lambda_base = 5.0;

  bool operator==(const TrainingHyperparams&) const = default;

  void validate() const {
    require(learning_rate > 0 && std::isfinite(learning_rate), ErrorCode::Config, "learning_rate must be positive");
    require(lr_decay_factor > 0, ErrorCode::Config, "lr_decay_factor must be positive");
    require(weight_decay >= 0, ErrorCode::Config, "weight_decay must be non-negative");
    require(momentum >= 0 && momentum < 1, ErrorCode::Config, "momentum must lie in [0, 1)");
    require(epochs_per_task >= 1, ErrorCode::Config, "epochs_per_task must be positive");
    require(batch_size >= 1, ErrorCode::Config, "batch_size must be positive");
    require(lambda_base >= 0, ErrorCode::Config, "lambda_base must be non-negative");
    for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
      require(lr_milestones[i] < epochs_per_task, ErrorCode::Config, "lr milestone beyond epochs_per_task");
      require(i == 0 || lr_milestones[i] > lr_milestones[i - 1], ErrorCode::Config,
              "lr milestones must be strictly increasing");
    }
  }
};

/// Base rate times decay^(milestones already reached); `epoch` is 0-based
/// within the task, and a milestone m is reached once epoch >= m.
inline double learning_rate_at(const TrainingHyperparams& hp, std::size_t epoch) {
  double lr = hp.learning_rate;
  for (std::size_t m : hp.lr_milestones)
    if (epoch >= m) lr *= hp.lr_decay_factor;
  return lr;
}

/// v <- momentum * v + (g + wd * p);  p <- p - lr * v
inline void sgd_step(std::span<double> params, std::span<const double> grads, std::span<double> velocity, double lr,
                     double weight_decay, double momentum) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    velocity[i] = momentum * velocity[i] + (grads[i] + weight_decay * params[i]);
    params[i] -= lr * velocity[i];
  }
}

namespace detail {

template <typename Derived>
std::span<double> as_span(Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

template <typename Derived>
std::span<const double> as_span(const Eigen::PlainObjectBase<Derived>& m) {
  return {m.data(), static_cast<std::size_t>(m.size())};
}

}  // namespace detail

inline void apply_gradients(FeatureExtractorState& state, const LayerBuffers& grads, const TrainingHyperparams& hp,
                            std::size_t epoch) {
  require(grads.size() == state.layers.size(), ErrorCode::InvalidArgument, "gradient layer count mismatch");
  for (std::size_t l = 0; l < grads.size(); ++l) {
    require(grads[l].weight.rows() == state.layers[l].weight.rows() &&
                grads[l].weight.cols() == state.layers[l].weight.cols() &&
                grads[l].bias.size() == state.layers[l].bias.size(),
            ErrorCode::InvalidArgument, "gradient shape mismatch at layer " + std::to_string(l));
    if (!grads[l].weight.allFinite() || !grads[l].bias.allFinite())
      fail(ErrorCode::Divergence, "non-finite gradient in layer " + std::to_string(l));
  }
  const double lr = learning_rate_at(hp, epoch);
  for (std::size_t l = 0; l < grads.size(); ++l) {
    auto& layer = state.layers[l];
    auto& vel = state.velocity[l];
    sgd_step(detail::as_span(layer.weight), detail::as_span(grads[l].weight), detail::as_span(vel.weight), lr,
             hp.weight_decay, hp.momentum);
    sgd_step(detail::as_span(layer.bias), detail::as_span(grads[l].bias), detail::as_span(vel.bias), lr,
             hp.weight_decay, hp.momentum);
  }
  ++state.step;
}

inline bool all_finite(const FeatureExtractorState& state) {
  for (const auto& l : state.layers)
    if (!l.weight.allFinite() || !l.bias.allFinite()) return false;
  return true;
}

// Serialization -------------------------------------------------------------

inline void write_config(ByteWriter& w, const ModelConfig& c) {
  w.u64(c.input_dim);
  w.u64(c.hidden_layers.size());
  for (std::size_t h : c.hidden_layers) w.u64(h);
  w.u64(c.feature_dim);
  w.u8(c.nonlinearity == Nonlinearity::Relu ? 0 : 1);
  w.u64(c.seed);
}

inline ModelConfig read_config(ByteReader& r) {
  ModelConfig c;
  c.input_dim = r.u64();
  const std::uint64_t hidden = r.u64();
  if (hidden > 1024) fail(ErrorCode::Corruption, "model config: implausible depth");
  for (std::uint64_t i = 0; i < hidden; ++i) c.hidden_layers.push_back(r.u64());
  c.feature_dim = r.u64();
  const std::uint8_t nl = r.u8();
  if (nl > 1) fail(ErrorCode::Corruption, "model config: unknown nonlinearity tag");
  c.nonlinearity = nl == 0 ? Nonlinearity::Relu : Nonlinearity::Tanh;
  c.seed = r.u64();
  return c;
}

inline void write_layers(ByteWriter& w, const LayerBuffers& layers) {
  for (const auto& l : layers) {
    for (double v : detail::as_span(l.weight)) w.f64(v);
    for (double v : detail::as_span(l.bias)) w.f64(v);
  }
}

inline LayerBuffers read_layers(ByteReader& r, const ModelConfig& c) {
  LayerBuffers layers;
  const auto widths = c.widths();
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const auto in = static_cast<Eigen::Index>(widths[l]);
    const auto out = static_cast<Eigen::Index>(widths[l + 1]);
    if (static_cast<std::size_t>(in * out + out) * 8 > r.remaining()) fail(ErrorCode::Corruption, "layers: truncated");
    DenseLayer layer{Eigen::MatrixXd(out, in), Vector(out)};
    for (double& v : detail::as_span(layer.weight)) v = r.f64();
    for (double& v : detail::as_span(layer.bias)) v = r.f64();
    layers.push_back(std::move(layer));
  }
  return layers;
}

/// Sections written into a checkpoint container for one model.
inline void add_model_sections(Container& c, const FeatureExtractorState& state) {
  ByteWriter cfg;
  write_config(cfg, state.config);
  c.add("model_config", std::move(cfg).bytes());
  ByteWriter params;
  write_layers(params, state.layers);
  c.add("parameters", std::move(params).bytes());
  ByteWriter opt;
  opt.u64(state.step);
  write_layers(opt, state.velocity);
  c.add("optimizer", std::move(opt).bytes());
}

inline FeatureExtractorState read_model_sections(const Container& c) {
  FeatureExtractorState state;
  {
    ByteReader r(c.section("model_config"), "model_config");
    state.config = read_config(r);
    r.expect_done();
  }
  try {
    state.config.validate();
  } catch (const Error& e) {
    fail(ErrorCode::Corruption, std::string("model_config: ") + e.what());
  }
  {
    ByteReader r(c.section("parameters"), "parameters");
    state.layers = read_layers(r, state.config);
    r.expect_done();
  }
  {
    ByteReader r(c.section("optimizer"), "optimizer");
    state.step = r.u64();
    state.velocity = read_layers(r, state.config);
    r.expect_done();
  }
  return state;
}

}  // namespace cl2r
