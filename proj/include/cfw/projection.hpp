#pragma once

// Parametric 2D projection with an exact inverse: a tanh MLP autoencoder fit on standardized
// rows. The encoder places points on the scatter plot; the decoder maps any 2D location back.

#include <algorithm>
#include <array>
#include <optional>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfw/autodiff.hpp"
#include "cfw/container.hpp"
#include "cfw/optim.hpp"

namespace cfw {

enum class Space { Series, Activations, Attributions };

inline std::string_view to_string(Space s) {
  switch (s) {
    case Space::Series: return "series";
    case Space::Activations: return "activations";
    case Space::Attributions: return "attributions";
  }
  return "series";
}

inline std::optional<Space> parse_space(std::string_view s) {
  if (s == "series") return Space::Series;
  if (s == "activations") return Space::Activations;
  if (s == "attributions") return Space::Attributions;
  return std::nullopt;
}

inline constexpr std::array<Space, 3> kAllSpaces{Space::Series, Space::Activations, Space::Attributions};

struct Extent {
  double x_min = 0, x_max = 1, y_min = 0, y_max = 1;

  bool valid() const {
    return std::isfinite(x_min) && std::isfinite(x_max) && std::isfinite(y_min) && std::isfinite(y_max) &&
           x_max > x_min && y_max > y_min;
  }
  bool contains(double x, double y) const { return x >= x_min && x <= x_max && y >= y_min && y <= y_max; }
  bool operator==(const Extent&) const = default;
};

inline nlohmann::json to_json(const Extent& e) {
  return {{"x_min", e.x_min}, {"x_max", e.x_max}, {"y_min", e.y_min}, {"y_max", e.y_max}};
}
inline Extent extent_from_json(const nlohmann::json& j) {
  return {j.at("x_min").get<double>(), j.at("x_max").get<double>(), j.at("y_min").get<double>(), j.at("y_max").get<double>()};
}

enum class Scaling { PerDimension, Global };

struct ProjectionConfig {
  std::vector<std::size_t> hidden{64, 32};
  // Global: one shared scale (RMS of the per-dimension stds) so the loss weighs dimensions as
  // the data does; per-dimension z-scoring amplifies near-constant dimensions.
  Scaling scaling = Scaling::PerDimension;
  std::size_t epochs = 600;
  std::size_t batch_size = 64;
  double learning_rate = 2e-3;
  double neighborhood_weight = 0.0;
  std::size_t pairs_per_batch = 64;
  double extent_padding = 0.05;
};

struct ProjectionModel {
  Space space = Space::Series;
  std::size_t input_dim = 0;
  std::vector<std::size_t> hidden;
  std::vector<NamedTensor<float>> encoder;  // alternating weight, bias
  std::vector<NamedTensor<float>> decoder;
  std::vector<float> mean, scale;           // per-dimension standardization
  Extent extent;
  std::uint64_t fit_seed = 0;
  Tensor<float> train_embedding;            // [N x 2]
  std::vector<double> loss_curve;
};

struct ProjectedPoint {
  std::size_t sample_id = 0;
  double x = 0, y = 0;
};

struct InverseResult {
  std::vector<float> values;
  bool extrapolated = false;
};

namespace detail {

inline std::vector<NamedTensor<float>> init_mlp(const std::string& prefix, const std::vector<std::size_t>& dims,
                                                std::mt19937_64& rng) {
  std::vector<NamedTensor<float>> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const double bound = std::sqrt(6.0 / static_cast<double>(dims[i] + dims[i + 1]));
    std::uniform_real_distribution<double> dist(-bound, bound);
    Tensor<float> w({dims[i + 1], dims[i]});
    for (auto& v : w.data) v = static_cast<float>(dist(rng));
    layers.push_back({prefix + std::to_string(i) + ".weight", std::move(w)});
    layers.push_back({prefix + std::to_string(i) + ".bias", Tensor<float>({dims[i + 1]})});
  }
  return layers;
}

// tanh on every hidden layer, identity on the output layer.
inline ad::Var<float> trace_mlp(ad::Var<float> x, const std::vector<ad::Var<float>>& layers) {
  const std::size_t n = layers.size() / 2;
  for (std::size_t i = 0; i < n; ++i) {
    x = ad::linear(x, layers[2 * i], &layers[2 * i + 1]);
    if (i + 1 < n) x = ad::tanh(x);
  }
  return x;
}

inline std::vector<ad::Var<float>> bind_layers(ad::Tape<float>& tape, const std::vector<NamedTensor<float>>& layers,
                                               bool trainable) {
  std::vector<ad::Var<float>> out;
  for (const auto& l : layers) out.push_back(trainable ? tape.variable(l.value) : tape.constant(l.value));
  return out;
}

inline Tensor<float> run_mlp(const std::vector<NamedTensor<float>>& layers, Tensor<float> x) {
  ad::Tape<float> tape;
  auto vars = bind_layers(tape, layers, false);
  return trace_mlp(tape.constant(std::move(x)), vars).value();
}

inline Tensor<float> standardize(const ProjectionModel& pm, std::span<const float> rows, std::size_t n) {
  const std::size_t D = pm.input_dim;
  Tensor<float> out({n, D});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t d = 0; d < D; ++d) out[i * D + d] = (rows[i * D + d] - pm.mean[d]) / pm.scale[d];
  return out;
}

}  // namespace detail

inline constexpr double kMinScale = 1e-9;

/// Fits the autoencoder on a [N x D] matrix (N >= 10, D >= 2). Deterministic given seed.
inline ProjectionModel fit_projection(const Tensor<float>& matrix, Space space, const ProjectionConfig& cfg,
                                      std::uint64_t seed) {
  if (matrix.rank() != 2) fail(ErrorKind::ShapeMismatch, "projection input must be a matrix");
  const std::size_t N = matrix.dim(0), D = matrix.dim(1);
  if (N < 10 || D < 2) fail(ErrorKind::InvalidConfig, "projection needs N >= 10 rows and D >= 2 dims");
  if (cfg.batch_size == 0 || cfg.hidden.empty()) fail(ErrorKind::InvalidConfig, "invalid projection config");

  ProjectionModel pm;
  pm.space = space;
  pm.input_dim = D;
  pm.hidden = cfg.hidden;
  pm.fit_seed = seed;
  pm.mean.assign(D, 0.f);
  pm.scale.assign(D, 1.f);
  bool any_variance = false;
  for (std::size_t d = 0; d < D; ++d) {
    double m = 0, v = 0;
    for (std::size_t i = 0; i < N; ++i) m += matrix[i * D + d];
    m /= static_cast<double>(N);
    for (std::size_t i = 0; i < N; ++i) v += (matrix[i * D + d] - m) * (matrix[i * D + d] - m);
    const double sd = std::sqrt(v / static_cast<double>(N));
    pm.mean[d] = static_cast<float>(m);
    if (sd >= kMinScale) {
      pm.scale[d] = static_cast<float>(sd);
      any_variance = true;
    }
  }
  if (!any_variance) fail(ErrorKind::DegenerateData, "all input dimensions have zero variance");
  if (cfg.scaling == Scaling::Global) {
    double ss = 0;
    for (std::size_t d = 0; d < D; ++d) {
      double v = 0;
      for (std::size_t i = 0; i < N; ++i) v += (matrix[i * D + d] - pm.mean[d]) * (matrix[i * D + d] - pm.mean[d]);
      ss += v / static_cast<double>(N);
    }
    std::fill(pm.scale.begin(), pm.scale.end(), static_cast<float>(std::sqrt(ss / static_cast<double>(D))));
  }

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> enc_dims{D}, dec_dims{2};
  enc_dims.insert(enc_dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  enc_dims.push_back(2);
  dec_dims.insert(dec_dims.end(), cfg.hidden.rbegin(), cfg.hidden.rend());
  dec_dims.push_back(D);
  pm.encoder = detail::init_mlp("encoder.", enc_dims, rng);
  pm.decoder = detail::init_mlp("decoder.", dec_dims, rng);

  const auto X = detail::standardize(pm, matrix.span(), N);
  Adam<float> opt(AdamConfig{cfg.learning_rate});
  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0;
    for (std::size_t off = 0; off < N; off += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, N - off);
      Tensor<float> xb({n, D});
      for (std::size_t i = 0; i < n; ++i) std::copy_n(X.ptr() + order[off + i] * D, D, xb.ptr() + i * D);
      ad::Tape<float> tape;
      auto enc = detail::bind_layers(tape, pm.encoder, true);
      auto dec = detail::bind_layers(tape, pm.decoder, true);
      auto x = tape.constant(xb);
      auto code = detail::trace_mlp(x, enc);
      auto loss = ad::mse(detail::trace_mlp(code, dec), xb);
      if (cfg.neighborhood_weight > 0 && n >= 2) {
        // Squared 2D distances of random pairs should track squared input distances / D.
        std::uniform_int_distribution<std::size_t> pick(0, n - 1);
        std::vector<std::size_t> ia(cfg.pairs_per_batch), ib(cfg.pairs_per_batch);
        Tensor<float> target({cfg.pairs_per_batch});
        for (std::size_t k = 0; k < cfg.pairs_per_batch; ++k) {
          ia[k] = pick(rng);
          ib[k] = pick(rng);
          double d2 = 0;
          for (std::size_t d = 0; d < D; ++d) {
            const double diff = xb[ia[k] * D + d] - xb[ib[k] * D + d];
            d2 += diff * diff;
          }
          target[k] = static_cast<float>(d2 / static_cast<double>(D));
        }
        auto diff = ad::sub(ad::gather_rows(code, ia), ad::gather_rows(code, ib));
        auto pen = ad::mse(ad::row_sum(ad::mul(diff, diff)), target);
        loss = ad::add(loss, ad::scale(pen, static_cast<float>(cfg.neighborhood_weight)));
      }
      const double lv = loss.value()[0];
      if (!std::isfinite(lv)) fail(ErrorKind::DivergedLoss, "projection loss diverged at epoch " + std::to_string(epoch));
      tape.backward(loss);
      std::vector<Tensor<float>*> params;
      std::vector<const Tensor<float>*> grads;
      for (std::size_t i = 0; i < pm.encoder.size(); ++i) {
        params.push_back(&pm.encoder[i].value);
        grads.push_back(&tape.grad(enc[i]));
      }
      for (std::size_t i = 0; i < pm.decoder.size(); ++i) {
        params.push_back(&pm.decoder[i].value);
        grads.push_back(&tape.grad(dec[i]));
      }
      opt.step(params, grads);
      loss_sum += lv * static_cast<double>(n);
    }
    pm.loss_curve.push_back(loss_sum / static_cast<double>(N));
  }

  pm.train_embedding = detail::run_mlp(pm.encoder, X);
  double x0 = INFINITY, x1 = -INFINITY, y0 = INFINITY, y1 = -INFINITY;
  for (std::size_t i = 0; i < N; ++i) {
    x0 = std::min<double>(x0, pm.train_embedding[2 * i]);
    x1 = std::max<double>(x1, pm.train_embedding[2 * i]);
    y0 = std::min<double>(y0, pm.train_embedding[2 * i + 1]);
    y1 = std::max<double>(y1, pm.train_embedding[2 * i + 1]);
  }
  const double px = std::max(x1 - x0, 1e-6) * cfg.extent_padding, py = std::max(y1 - y0, 1e-6) * cfg.extent_padding;
  pm.extent = {x0 - px, x1 + px, y0 - py, y1 + py};
  if (!pm.extent.valid()) fail(ErrorKind::DivergedLoss, "projection produced a degenerate or non-finite extent");
  return pm;
}

/// Encodes a [N x D] matrix to [N x 2].
inline Tensor<float> encode(const ProjectionModel& pm, const Tensor<float>& matrix) {
  if (matrix.rank() != 2 || matrix.dim(1) != pm.input_dim)
    fail(ErrorKind::ShapeMismatch, "projection expects [N x " + std::to_string(pm.input_dim) + "], got " +
                                       shape_string(matrix.shape));
  if (matrix.dim(0) == 0) return Tensor<float>({0, 2});
  return detail::run_mlp(pm.encoder, detail::standardize(pm, matrix.span(), matrix.dim(0)));
}

/// Decodes a [N x 2] matrix of coordinates to data units, [N x D].
inline Tensor<float> decode(const ProjectionModel& pm, const Tensor<float>& coords) {
  if (coords.rank() != 2 || coords.dim(1) != 2) fail(ErrorKind::ShapeMismatch, "decode expects [N x 2]");
  const std::size_t N = coords.dim(0), D = pm.input_dim;
  if (N == 0) return Tensor<float>({0, D});
  auto z = detail::run_mlp(pm.decoder, coords);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) z[i * D + d] = z[i * D + d] * pm.scale[d] + pm.mean[d];
  return z;
}

inline std::pair<double, double> project(const ProjectionModel& pm, std::span<const float> v) {
  auto e = encode(pm, Tensor<float>({1, v.size()}, std::vector<float>(v.begin(), v.end())));
  return {e[0], e[1]};
}

/// Decoder output for one location; points outside the fitted extent are flagged.
inline InverseResult inverse_project(const ProjectionModel& pm, double x, double y) {
  auto d = decode(pm, Tensor<float>({1, 2}, {static_cast<float>(x), static_cast<float>(y)}));
  return {std::move(d.data), !pm.extent.contains(x, y)};
}

inline std::vector<ProjectedPoint> embed_all(const ProjectionModel& pm, const Tensor<float>& matrix) {
  auto e = encode(pm, matrix);
  std::vector<ProjectedPoint> pts(e.dim(0));
  for (std::size_t i = 0; i < pts.size(); ++i) pts[i] = {i, e[2 * i], e[2 * i + 1]};
  return pts;
}

/// Mean squared reconstruction error over rows divided by the mean squared deviation from the
/// column means, both in data units.
inline double reconstruction_ratio(const ProjectionModel& pm, const Tensor<float>& matrix) {
  const std::size_t N = matrix.dim(0), D = matrix.dim(1);
  auto rec = decode(pm, encode(pm, matrix));
  std::vector<double> mean(D, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) mean[d] += matrix[i * D + d];
  for (auto& m : mean) m /= static_cast<double>(N);
  double err = 0, var = 0;
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) {
      const double e = static_cast<double>(rec[i * D + d]) - matrix[i * D + d];
      const double v = static_cast<double>(matrix[i * D + d]) - mean[d];
      err += e * e;
      var += v * v;
    }
  return var > 0 ? err / var : 0.0;
}

inline std::uint64_t projection_checksum(const ProjectionModel& pm) {
  Fnv1a h;
  h.update(to_string(pm.space));
  for (const auto* layers : {&pm.encoder, &pm.decoder})
    for (const auto& l : *layers) h.update(l.value.ptr(), l.value.size() * sizeof(float));
  h.update(pm.mean.data(), pm.mean.size() * sizeof(float));
  h.update(pm.scale.data(), pm.scale.size() * sizeof(float));
  const double e[4] = {pm.extent.x_min, pm.extent.x_max, pm.extent.y_min, pm.extent.y_max};
  h.update(e, sizeof e);
  return h.digest();
}

inline void save_projection(const ProjectionModel& pm, const std::filesystem::path& manifest,
                            nlohmann::json extra = nlohmann::json::object()) {
  extra["space"] = to_string(pm.space);
  extra["input_dim"] = pm.input_dim;
  extra["hidden"] = pm.hidden;
  extra["extent"] = to_json(pm.extent);
  extra["fit_seed"] = pm.fit_seed;
  extra["loss_curve"] = pm.loss_curve;
  extra["projection_checksum"] = hex64(projection_checksum(pm));
  std::vector<NamedTensor<float>> tensors = pm.encoder;
  tensors.insert(tensors.end(), pm.decoder.begin(), pm.decoder.end());
  tensors.push_back({"scaler.mean", Tensor<float>({pm.input_dim}, pm.mean)});
  tensors.push_back({"scaler.scale", Tensor<float>({pm.input_dim}, pm.scale)});
  tensors.push_back({"train_embedding", pm.train_embedding});
  write_artifact(manifest, "projection", extra, tensors);
}

inline ProjectionModel load_projection(const std::filesystem::path& manifest) {
  auto a = read_artifact(manifest, "projection");
  ProjectionModel pm;
  try {
    auto space = parse_space(a.meta.at("space").get<std::string>());
    if (!space) fail(ErrorKind::CorruptFile, manifest.string() + ": unknown space");
    pm.space = *space;
    pm.input_dim = a.meta.at("input_dim").get<std::size_t>();
    pm.hidden = a.meta.at("hidden").get<std::vector<std::size_t>>();
    pm.extent = extent_from_json(a.meta.at("extent"));
    pm.fit_seed = a.meta.at("fit_seed").get<std::uint64_t>();
    pm.loss_curve = a.meta.value("loss_curve", std::vector<double>{});
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptFile, manifest.string() + ": " + e.what());
  }
  for (auto& t : a.tensors) {
    if (t.name.starts_with("encoder.")) pm.encoder.push_back(std::move(t));
    else if (t.name.starts_with("decoder.")) pm.decoder.push_back(std::move(t));
    else if (t.name == "scaler.mean") pm.mean = t.value.data;
    else if (t.name == "scaler.scale") pm.scale = t.value.data;
    else if (t.name == "train_embedding") pm.train_embedding = std::move(t.value);
  }
  const std::size_t layers = pm.hidden.size() + 1;
  if (pm.encoder.size() != 2 * layers || pm.decoder.size() != 2 * layers || pm.mean.size() != pm.input_dim ||
      pm.scale.size() != pm.input_dim)
    fail(ErrorKind::CorruptFile, manifest.string() + ": projection tensors inconsistent with manifest");
  return pm;
}

}  // namespace cfw
