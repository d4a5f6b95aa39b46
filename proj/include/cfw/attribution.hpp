#pragma once

// Per-time-point attributions toward a class logit.
//
// Both methods share one multiplier-propagation graph that mirrors the network backwards:
// affine layers pass multipliers through their transposes, and each ReLU scales them by a
// rule-specific factor. With the local-gradient rule this is plain backprop (Gradient x Input);
// with the Rescale rule, factor = (relu(z) - relu(z0)) / (z - z0) against the baseline's z0
// (DeepLIFT). The graph is recorded on a tape so callers can differentiate through it.

#include <algorithm>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cfw/dataset.hpp"
#include "cfw/model.hpp"

namespace cfw {

enum class AttributionMethod { DeepLiftRescale, GradientXInput };
enum class BaselineKind { Zeros, Custom };
enum class TargetRule { PredictedClass, GroundTruth };

inline std::string_view to_string(AttributionMethod m) {
  return m == AttributionMethod::DeepLiftRescale ? "deeplift_rescale" : "gradient_x_input";
}
inline AttributionMethod parse_attribution_method(std::string_view s) {
  if (s == "deeplift_rescale" || s == "deeplift") return AttributionMethod::DeepLiftRescale;
  if (s == "gradient_x_input") return AttributionMethod::GradientXInput;
  fail(ErrorKind::InvalidConfig, "unknown attribution method '" + std::string(s) + "'");
}
inline std::string_view to_string(TargetRule r) { return r == TargetRule::PredictedClass ? "predicted_class" : "ground_truth"; }
inline TargetRule parse_target_rule(std::string_view s) {
  if (s == "predicted_class") return TargetRule::PredictedClass;
  if (s == "ground_truth") return TargetRule::GroundTruth;
  fail(ErrorKind::InvalidConfig, "unknown attribution target '" + std::string(s) + "'");
}

struct AttributionVector {
  std::vector<float> values;
  std::size_t target_class = 0;
  AttributionMethod method = AttributionMethod::DeepLiftRescale;
  BaselineKind baseline = BaselineKind::Zeros;
};

/// Records attributions of `input` [N x T] toward `classes` on the input's tape. `baseline` is
/// [N x T]; Gradient x Input ignores it (zero reference).
template <class S>
ad::Var<S> trace_attribution(const BoundParams<S>& p, ad::Var<S> input, const Tensor<S>& baseline,
                             const std::vector<std::size_t>& classes, AttributionMethod method) {
  auto& tape = *input.tape;
  const auto& cfg = p.model->config;
  const std::size_t N = input.shape().at(0), T = cfg.input_length, C = cfg.num_classes;
  if (classes.size() != N) fail(ErrorKind::ShapeMismatch, "one target class per row required");
  auto fwd = trace_forward(p, input);

  std::vector<Tensor<S>> ref_z1, ref_z3;
  if (method == AttributionMethod::DeepLiftRescale) {
    expect_shape(baseline, input.shape(), "baseline");
    bool shared = true;
    for (std::size_t i = 1; i < N && shared; ++i)
      shared = std::equal(baseline.ptr(), baseline.ptr() + T, baseline.ptr() + i * T);
    ad::Tape<S> ref_tape;
    auto rp = bind(ref_tape, *p.model, false);
    auto rt = trace_forward(rp, ref_tape.constant(shared ? Tensor<S>({1, T}, std::vector<S>(baseline.ptr(), baseline.ptr() + T))
                                                         : baseline));
    auto tile = [&](const Tensor<S>& z) {
      if (!shared || N == 1) return z;
      Tensor<S> out({N, z.dim(1), z.dim(2)});
      for (std::size_t i = 0; i < N; ++i) std::copy(z.data.begin(), z.data.end(), out.ptr() + i * z.size());
      return out;
    };
    for (const auto& b : rt.blocks) {
      ref_z1.push_back(tile(b.z1.value()));
      ref_z3.push_back(tile(b.z3.value()));
    }
  }
  auto factor = [&](ad::Var<S> z, const std::vector<Tensor<S>>& ref, std::size_t b) {
    return method == AttributionMethod::DeepLiftRescale ? ad::rescale_multiplier(z, ref[b]) : ad::relu_mask(z);
  };

  Tensor<S> onehot({N, C});
  for (std::size_t i = 0; i < N; ++i) {
    if (classes[i] >= C) fail(ErrorKind::ShapeMismatch, "target class out of range");
    onehot[i * C + classes[i]] = S(1);
  }
  auto g = ad::linear_transpose(tape.constant(std::move(onehot)), p["head.weight"]);
  const std::size_t last_len = fwd.blocks.back().out.shape().at(2);
  g = ad::expand_time(g, last_len, S(1) / static_cast<S>(last_len));
  for (std::size_t b = cfg.blocks; b-- > 0;) {
    const auto& blk = fwd.blocks[b];
    auto g_z3 = ad::mul(g, factor(blk.z3, ref_z3, b));
    auto g_a1 = ad::conv1d_transpose(g_z3, p[block_param(b, "conv2.weight")]);
    auto g_z1 = ad::mul(g_a1, factor(blk.z1, ref_z1, b));
    auto g_main = ad::conv1d_transpose(g_z1, p[block_param(b, "conv1.weight")]);
    auto g_skip = p.model->has_shortcut_projection(b) ? ad::conv1d_transpose(g_z3, p[block_param(b, "shortcut.weight")]) : g_z3;
    g = ad::add(g_main, g_skip);
  }
  auto g_in = ad::reshape(g, {N, T});
  if (method == AttributionMethod::GradientXInput) return ad::mul(g_in, input);
  return ad::mul(g_in, ad::sub(input, tape.constant(baseline)));
}

/// Attributions for a [N x T] batch; evaluated in chunks.
template <class S>
Tensor<S> attribute_batch(const ClassifierModel<S>& model, const Tensor<S>& batch, const std::vector<std::size_t>& classes,
                          AttributionMethod method, const Tensor<S>* baseline = nullptr) {
  const std::size_t T = model.config.input_length;
  if (batch.rank() != 2 || batch.dim(1) != T)
    fail(ErrorKind::ShapeMismatch, "batch " + shape_string(batch.shape) + ", expected [N x " + std::to_string(T) + "]");
  const std::size_t N = batch.dim(0);
  if (classes.size() != N) fail(ErrorKind::ShapeMismatch, "one target class per row required");
  if (baseline) expect_shape(*baseline, batch.shape, "baseline");
  Tensor<S> out({N, T});
  for (std::size_t off = 0; off < N; off += kInferenceChunk) {
    const std::size_t n = std::min(kInferenceChunk, N - off);
    auto slice = [&](const Tensor<S>& src) {
      return Tensor<S>({n, T}, std::vector<S>(src.ptr() + off * T, src.ptr() + (off + n) * T));
    };
    ad::Tape<S> tape;
    auto p = bind(tape, model, false);
    auto x = tape.constant(slice(batch));
    Tensor<S> base = baseline ? slice(*baseline) : Tensor<S>({n, T});
    std::vector<std::size_t> cls(classes.begin() + static_cast<std::ptrdiff_t>(off),
                                 classes.begin() + static_cast<std::ptrdiff_t>(off + n));
    auto attr = trace_attribution(p, x, base, cls, method);
    std::copy(attr.value().data.begin(), attr.value().data.end(), out.ptr() + off * T);
  }
  return out;
}

namespace detail {
template <class S>
void check_series(const ClassifierModel<S>& model, std::span<const S> s, const char* what) {
  if (s.size() != model.config.input_length)
    fail(ErrorKind::ShapeMismatch, std::string(what) + " length " + std::to_string(s.size()) + ", expected " +
                                       std::to_string(model.config.input_length));
}
}  // namespace detail

/// DeepLIFT with the Rescale rule. An empty `baseline` means the all-zeros series.
template <class S>
AttributionVector deeplift_rescale(const ClassifierModel<S>& model, std::span<const S> series, std::span<const S> baseline,
                                   std::size_t target_class) {
  detail::check_series(model, series, "series");
  const std::size_t T = series.size();
  Tensor<S> base({1, T});
  BaselineKind kind = BaselineKind::Zeros;
  if (!baseline.empty()) {
    detail::check_series(model, baseline, "baseline");
    std::copy(baseline.begin(), baseline.end(), base.ptr());
    kind = BaselineKind::Custom;
  }
  auto out = attribute_batch(model, Tensor<S>({1, T}, std::vector<S>(series.begin(), series.end())), {target_class},
                             AttributionMethod::DeepLiftRescale, &base);
  AttributionVector av{std::vector<float>(out.data.begin(), out.data.end()), target_class,
                       AttributionMethod::DeepLiftRescale, kind};
  return av;
}

template <class S>
AttributionVector gradient_x_input(const ClassifierModel<S>& model, std::span<const S> series, std::size_t target_class) {
  detail::check_series(model, series, "series");
  const std::size_t T = series.size();
  auto out = attribute_batch(model, Tensor<S>({1, T}, std::vector<S>(series.begin(), series.end())), {target_class},
                             AttributionMethod::GradientXInput);
  return AttributionVector{std::vector<float>(out.data.begin(), out.data.end()), target_class,
                           AttributionMethod::GradientXInput, BaselineKind::Zeros};
}

template <class S>
AttributionVector attribute(const ClassifierModel<S>& model, std::span<const S> series, std::size_t target_class,
                            AttributionMethod method) {
  return method == AttributionMethod::DeepLiftRescale ? deeplift_rescale<S>(model, series, {}, target_class)
                                                      : gradient_x_input<S>(model, series, target_class);
}

struct AttributionMatrix {
  Tensor<float> values;  // [N x T], row i = sample i
  std::vector<std::size_t> target_classes;
  AttributionMethod method = AttributionMethod::DeepLiftRescale;
  TargetRule target = TargetRule::PredictedClass;
};

/// Attributes every row toward its predicted or ground-truth class, rows in id order.
inline AttributionMatrix attribute_dataset(const ClassifierModel<float>& model, const std::vector<LabeledSeries>& rows,
                                           AttributionMethod method, TargetRule target) {
  const std::size_t T = model.config.input_length;
  std::vector<std::vector<float>> xs;
  xs.reserve(rows.size());
  for (const auto& r : rows) xs.push_back(r.values);
  auto batch = rows_to_tensor<float>(xs, T);
  AttributionMatrix m;
  m.method = method;
  m.target = target;
  if (target == TargetRule::GroundTruth) {
    for (const auto& r : rows) m.target_classes.push_back(r.label);
  } else {
    for (const auto& p : predict_batch(model, batch)) m.target_classes.push_back(p.predicted_class);
  }
  m.values = attribute_batch(model, batch, m.target_classes, method);
  return m;
}

}  // namespace cfw
