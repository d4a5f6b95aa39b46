#pragma once

// Residual 1D convolutional classifier:
//   per block: out = relu(conv2(relu(conv1(x))) + shortcut(x)), shortcut = identity or 1x1 conv
//   head:      logits = W * mean_t(out_last) + b
// The designated activation layer is the pooled vector fed to the head.

#include <algorithm>
#include <cmath>
#include <utility>
#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfw/autodiff.hpp"
#include "cfw/common.hpp"
#include "cfw/tensor.hpp"

namespace cfw {

struct ModelConfig {
  std::size_t input_length = 140;
  std::size_t num_classes = 5;
  std::size_t blocks = 3;
  std::vector<std::size_t> channels{32, 64, 64};
  std::vector<std::size_t> kernel_sizes{7, 5, 3};
  std::uint64_t seed = 0;

  bool operator==(const ModelConfig&) const = default;
};

inline void validate(const ModelConfig& c) {
  if (c.blocks < 1) fail(ErrorKind::InvalidConfig, "blocks must be >= 1");
  if (c.channels.size() != c.blocks || c.kernel_sizes.size() != c.blocks)
    fail(ErrorKind::InvalidConfig, "channels and kernel_sizes must have one entry per block");
  for (auto k : c.kernel_sizes)
    if (k == 0 || k % 2 == 0) fail(ErrorKind::InvalidConfig, "kernel sizes must be odd");
  for (auto ch : c.channels)
    if (ch == 0) fail(ErrorKind::InvalidConfig, "channel counts must be positive");
  if (c.input_length == 0) fail(ErrorKind::InvalidConfig, "input_length must be positive");
  if (c.num_classes == 0) fail(ErrorKind::InvalidConfig, "num_classes must be positive");
}

template <class S>
struct NamedTensor {
  std::string name;
  Tensor<S> value;
};

inline constexpr const char* kPooledLayer = "global_average_pool";

template <class S = float>
struct ClassifierModel {
  ModelConfig config;
  std::vector<NamedTensor<S>> parameters;
  std::string activation_layer = kPooledLayer;

  std::size_t activation_dim() const { return config.channels.back(); }

  const Tensor<S>& param(std::string_view name) const {
    for (const auto& p : parameters)
      if (p.name == name) return p.value;
    fail(ErrorKind::InvalidConfig, "no parameter named " + std::string(name));
  }
  Tensor<S>& param(std::string_view name) {
    return const_cast<Tensor<S>&>(std::as_const(*this).param(name));
  }

  bool has_shortcut_projection(std::size_t block) const {
    const std::size_t in = block == 0 ? 1 : config.channels[block - 1];
    return in != config.channels[block];
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : parameters) n += p.value.size();
    return n;
  }

  template <class U>
  ClassifierModel<U> cast() const {
    ClassifierModel<U> m;
    m.config = config;
    m.activation_layer = activation_layer;
    for (const auto& p : parameters) m.parameters.push_back({p.name, p.value.template cast<U>()});
    return m;
  }
};

inline std::string block_param(std::size_t b, const char* leaf) { return "block" + std::to_string(b) + "." + leaf; }

/// He-uniform weights (bound sqrt(6 / fan_in)) drawn from config.seed; zero biases.
template <class S = float>
ClassifierModel<S> build_model(const ModelConfig& config) {
  validate(config);
  ClassifierModel<S> m;
  m.config = config;
  std::mt19937_64 rng(config.seed);
  auto he = [&](std::vector<std::size_t> shape, std::size_t fan_in) {
    Tensor<S> t(std::move(shape));
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    for (auto& v : t.data) v = static_cast<S>(dist(rng));
    return t;
  };
  std::size_t in = 1;
  for (std::size_t b = 0; b < config.blocks; ++b) {
    const std::size_t out = config.channels[b], k = config.kernel_sizes[b];
    m.parameters.push_back({block_param(b, "conv1.weight"), he({out, in, k}, in * k)});
    m.parameters.push_back({block_param(b, "conv1.bias"), Tensor<S>({out})});
    m.parameters.push_back({block_param(b, "conv2.weight"), he({out, out, k}, out * k)});
    m.parameters.push_back({block_param(b, "conv2.bias"), Tensor<S>({out})});
    if (in != out) m.parameters.push_back({block_param(b, "shortcut.weight"), he({out, in, 1}, in)});
    in = out;
  }
  m.parameters.push_back({"head.weight", he({config.num_classes, in}, in)});
  m.parameters.push_back({"head.bias", Tensor<S>({config.num_classes})});
  return m;
}

// ---------------------------------------------------------------------------------------------
// graph construction

/// Model parameters placed on a tape, in the model's parameter order.
template <class S>
struct BoundParams {
  const ClassifierModel<S>* model = nullptr;
  std::vector<ad::Var<S>> vars;

  ad::Var<S> operator[](std::string_view name) const {
    for (std::size_t i = 0; i < model->parameters.size(); ++i)
      if (model->parameters[i].name == name) return vars[i];
    fail(ErrorKind::InvalidConfig, "no parameter named " + std::string(name));
  }
};

template <class S>
BoundParams<S> bind(ad::Tape<S>& tape, const ClassifierModel<S>& model, bool trainable) {
  BoundParams<S> bp{&model, {}};
  bp.vars.reserve(model.parameters.size());
  for (const auto& p : model.parameters) bp.vars.push_back(trainable ? tape.variable(p.value) : tape.constant(p.value));
  return bp;
}

template <class S>
struct ForwardTrace {
  struct Block {
    ad::Var<S> z1;      // conv1 pre-activation
    ad::Var<S> z3;      // conv2 + shortcut, pre-activation
    ad::Var<S> out;     // relu(z3)
  };
  ad::Var<S> input;     // [N, T]
  std::vector<Block> blocks;
  ad::Var<S> pooled;    // [N, A]
  ad::Var<S> logits;    // [N, C]
};

template <class S>
ForwardTrace<S> trace_forward(const BoundParams<S>& p, ad::Var<S> input) {
  const auto& cfg = p.model->config;
  const auto& sh = input.shape();
  if (sh.size() != 2 || sh[1] != cfg.input_length)
    fail(ErrorKind::ShapeMismatch, "input " + shape_string(sh) + ", expected [N x " + std::to_string(cfg.input_length) + "]");
  ForwardTrace<S> tr;
  tr.input = input;
  auto x = ad::reshape(input, {sh[0], 1, sh[1]});
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    auto b1 = p[block_param(b, "conv1.bias")];
    auto b2 = p[block_param(b, "conv2.bias")];
    auto z1 = ad::conv1d(x, p[block_param(b, "conv1.weight")], &b1);
    auto a1 = ad::relu(z1);
    auto z2 = ad::conv1d(a1, p[block_param(b, "conv2.weight")], &b2);
    auto sc = p.model->has_shortcut_projection(b) ? ad::conv1d(x, p[block_param(b, "shortcut.weight")]) : x;
    auto z3 = ad::add(z2, sc);
    auto out = ad::relu(z3);
    tr.blocks.push_back({z1, z3, out});
    x = out;
  }
  tr.pooled = ad::mean_time(x);
  auto hb = p["head.bias"];
  tr.logits = ad::linear(tr.pooled, p["head.weight"], &hb);
  return tr;
}

// ---------------------------------------------------------------------------------------------
// inference API

struct PredictionRecord {
  std::vector<double> logits;
  std::vector<double> probabilities;
  std::size_t predicted_class = 0;
  std::optional<std::size_t> ground_truth;
};

template <class S>
PredictionRecord make_prediction(std::span<const S> logits, std::optional<std::size_t> ground_truth = {}) {
  PredictionRecord r;
  r.logits.assign(logits.begin(), logits.end());
  r.probabilities = ad::softmax_row<S>(logits);
  r.predicted_class = argmax<double>(r.probabilities);
  r.ground_truth = ground_truth;
  return r;
}

inline constexpr std::size_t kInferenceChunk = 256;

template <class S>
Tensor<S> rows_to_tensor(std::span<const std::vector<S>> rows, std::size_t width) {
  Tensor<S> t({rows.size(), width});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != width)
      fail(ErrorKind::ShapeMismatch, "row " + std::to_string(i) + " has length " + std::to_string(rows[i].size()) +
                                         ", expected " + std::to_string(width));
    std::copy(rows[i].begin(), rows[i].end(), t.ptr() + i * width);
  }
  return t;
}

namespace detail {

// Runs fn(trace, row_offset) over chunks of the batch so memory stays bounded.
template <class S, class Fn>
void for_each_chunk(const ClassifierModel<S>& model, const Tensor<S>& batch, Fn&& fn) {
  const std::size_t T = model.config.input_length;
  if (batch.rank() != 2 || batch.dim(1) != T)
    fail(ErrorKind::ShapeMismatch, "batch " + shape_string(batch.shape) + ", expected [N x " + std::to_string(T) + "]");
  const std::size_t N = batch.dim(0);
  for (std::size_t off = 0; off < N; off += kInferenceChunk) {
    const std::size_t n = std::min(kInferenceChunk, N - off);
    ad::Tape<S> tape;
    auto p = bind(tape, model, false);
    Tensor<S> chunk({n, T}, std::vector<S>(batch.ptr() + off * T, batch.ptr() + (off + n) * T));
    auto tr = trace_forward(p, tape.constant(std::move(chunk)));
    fn(tr, off);
  }
}

}  // namespace detail

/// Logits for a [N x T] batch.
template <class S>
Tensor<S> forward(const ClassifierModel<S>& model, const Tensor<S>& batch) {
  const std::size_t C = model.config.num_classes;
  Tensor<S> out({batch.rank() == 2 ? batch.dim(0) : 0, C});
  detail::for_each_chunk(model, batch, [&](const ForwardTrace<S>& tr, std::size_t off) {
    const auto& l = tr.logits.value().data;
    std::copy(l.begin(), l.end(), out.ptr() + off * C);
  });
  return out;
}

/// Pooled activations for a [N x T] batch -> [N x A].
template <class S>
Tensor<S> activations_batch(const ClassifierModel<S>& model, const Tensor<S>& batch) {
  const std::size_t A = model.activation_dim();
  Tensor<S> out({batch.rank() == 2 ? batch.dim(0) : 0, A});
  detail::for_each_chunk(model, batch, [&](const ForwardTrace<S>& tr, std::size_t off) {
    const auto& a = tr.pooled.value().data;
    std::copy(a.begin(), a.end(), out.ptr() + off * A);
  });
  return out;
}

template <class S>
std::vector<PredictionRecord> predict_batch(const ClassifierModel<S>& model, const Tensor<S>& batch) {
  auto logits = forward(model, batch);
  const std::size_t C = model.config.num_classes;
  std::vector<PredictionRecord> out;
  out.reserve(logits.dim(0));
  for (std::size_t i = 0; i < logits.dim(0); ++i)
    out.push_back(make_prediction<S>(std::span<const S>(logits.ptr() + i * C, C)));
  return out;
}

template <class S>
PredictionRecord predict(const ClassifierModel<S>& model, std::span<const S> series,
                         std::optional<std::size_t> ground_truth = {}) {
  if (series.size() != model.config.input_length)
    fail(ErrorKind::ShapeMismatch, "series length " + std::to_string(series.size()) + ", expected " +
                                       std::to_string(model.config.input_length));
  auto logits = forward(model, Tensor<S>({1, series.size()}, std::vector<S>(series.begin(), series.end())));
  return make_prediction<S>(logits.span(), ground_truth);
}

template <class S>
std::vector<S> activations(const ClassifierModel<S>& model, std::span<const S> series) {
  if (series.size() != model.config.input_length)
    fail(ErrorKind::ShapeMismatch, "series length " + std::to_string(series.size()) + ", expected " +
                                       std::to_string(model.config.input_length));
  auto a = activations_batch(model, Tensor<S>({1, series.size()}, std::vector<S>(series.begin(), series.end())));
  return a.data;
}

/// Head logits for a [N x A] batch of activation vectors.
template <class S>
Tensor<S> head_logits(const ClassifierModel<S>& model, const Tensor<S>& acts) {
  const std::size_t A = model.activation_dim(), C = model.config.num_classes;
  if (acts.rank() != 2 || acts.dim(1) != A)
    fail(ErrorKind::ShapeMismatch, "activations " + shape_string(acts.shape) + ", expected [N x " + std::to_string(A) + "]");
  Tensor<S> out({acts.dim(0), C});
  kernels::linear_forward(acts.dim(0), A, C, acts.ptr(), model.param("head.weight").ptr(), model.param("head.bias").ptr(),
                          out.ptr());
  return out;
}

/// Prediction from an activation vector, evaluating only the layers after the activation layer.
template <class S>
PredictionRecord head_predict(const ClassifierModel<S>& model, std::span<const S> activation,
                              std::optional<std::size_t> ground_truth = {}) {
  auto l = head_logits(model, Tensor<S>({1, activation.size()}, std::vector<S>(activation.begin(), activation.end())));
  return make_prediction<S>(l.span(), ground_truth);
}

struct Objective {
  enum class Kind { Logit, Loss };
  Kind kind = Kind::Logit;
  std::size_t target = 0;

  static Objective logit(std::size_t c) { return {Kind::Logit, c}; }
  static Objective loss_vs(std::size_t c) { return {Kind::Loss, c}; }
};

/// d(objective)/d(series) by reverse mode.
template <class S>
std::vector<S> input_gradient(const ClassifierModel<S>& model, std::span<const S> series, Objective obj) {
  if (series.size() != model.config.input_length)
    fail(ErrorKind::ShapeMismatch, "series length " + std::to_string(series.size()) + ", expected " +
                                       std::to_string(model.config.input_length));
  if (obj.target >= model.config.num_classes) fail(ErrorKind::ShapeMismatch, "objective class out of range");
  ad::Tape<S> tape;
  auto p = bind(tape, model, false);
  auto x = tape.variable(Tensor<S>({1, series.size()}, std::vector<S>(series.begin(), series.end())));
  auto tr = trace_forward(p, x);
  auto scalar = obj.kind == Objective::Kind::Logit ? ad::sum(ad::pick(tr.logits, {obj.target}))
                                                   : ad::softmax_cross_entropy(tr.logits, {obj.target});
  tape.backward(scalar);
  return tape.grad(x).data;
}

/// Content checksum over config and parameter bytes.
template <class S>
std::uint64_t model_checksum(const ClassifierModel<S>& m) {
  Fnv1a h;
  auto put = [&](std::uint64_t v) { h.update(&v, sizeof v); };
  put(m.config.input_length);
  put(m.config.num_classes);
  put(m.config.blocks);
  for (auto c : m.config.channels) put(c);
  for (auto k : m.config.kernel_sizes) put(k);
  put(m.config.seed);
  h.update(m.activation_layer);
  for (const auto& p : m.parameters) {
    h.update(p.name);
    h.update(p.value.ptr(), p.value.size() * sizeof(S));
  }
  return h.digest();
}

}  // namespace cfw
