#pragma once

// Series synthesis by matching a target vector in activation or attribution space.
//
// Descent on L(x) = |f(x) - target|^2 / dim. A step is kept only if it does not increase L;
// otherwise the step is halved (up to max_halvings times) and the search stops when no halving
// helps. Loss curves are therefore non-increasing.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cfw/attribution.hpp"
#include "cfw/model.hpp"

namespace cfw {

enum class InitKind { NearestNeighbor, RandomNormal, Provided };
enum class GradientMode { ReverseMode, FiniteDifference, Spsa };
enum class StepDirection { Gradient, Adam };

inline std::string_view to_string(InitKind k) {
  switch (k) {
    case InitKind::NearestNeighbor: return "nearest_neighbor";
    case InitKind::RandomNormal: return "random_normal";
    case InitKind::Provided: return "provided";
  }
  return "nearest_neighbor";
}
inline InitKind parse_init_kind(std::string_view s) {
  if (s == "nearest_neighbor") return InitKind::NearestNeighbor;
  if (s == "random_normal") return InitKind::RandomNormal;
  if (s == "provided") return InitKind::Provided;
  fail(ErrorKind::InvalidConfig, "unknown init '" + std::string(s) + "'");
}
inline std::string_view to_string(GradientMode g) {
  switch (g) {
    case GradientMode::ReverseMode: return "reverse_mode";
    case GradientMode::FiniteDifference: return "finite_difference";
    case GradientMode::Spsa: return "spsa";
  }
  return "reverse_mode";
}
inline GradientMode parse_gradient_mode(std::string_view s) {
  if (s == "reverse_mode") return GradientMode::ReverseMode;
  if (s == "finite_difference") return GradientMode::FiniteDifference;
  if (s == "spsa") return GradientMode::Spsa;
  fail(ErrorKind::InvalidConfig, "unknown gradient mode '" + std::string(s) + "'");
}

struct SynthesisConfig {
  std::size_t max_steps = 200;
  double learning_rate = 0.05;
  InitKind init = InitKind::NearestNeighbor;
  std::vector<float> init_series;  // used when init == Provided
  double noise_std = 0.0;
  double convergence_tol = 1e-8;
  double min_relative_improvement = 1e-4;
  std::size_t patience = 10;
  GradientMode gradient_mode = GradientMode::ReverseMode;
  double fd_step = 1e-3;
  std::size_t spsa_samples = 8;
  std::size_t spsa_redraws = 3;  // fresh estimates tried before a failed SPSA step ends the run
  bool backtracking = true;
  std::size_t max_halvings = 8;
  // Step along g / rms(g), so learning_rate is a per-point step in series units.
  bool normalize_gradient = true;
  StepDirection direction = StepDirection::Adam;
  double budget_seconds = 0.0;  // 0 = unlimited
  std::uint64_t seed = 0;
  // Class the attributions are taken toward; defaults to the class recorded for the
  // nearest bank row, else the initial series' predicted class.
  std::optional<std::size_t> attribution_class;
};

inline void validate(const SynthesisConfig& c) {
  if (c.max_steps < 1) fail(ErrorKind::InvalidConfig, "max_steps must be >= 1");
  if (!(c.learning_rate > 0)) fail(ErrorKind::InvalidConfig, "learning_rate must be > 0");
  if (!(c.fd_step > 0)) fail(ErrorKind::InvalidConfig, "fd_step must be > 0");
  if (c.gradient_mode == GradientMode::Spsa && c.spsa_samples == 0) fail(ErrorKind::InvalidConfig, "spsa_samples must be > 0");
}

struct SynthesisResult {
  std::vector<float> series;
  std::vector<double> loss_curve;  // loss_curve[0] is the initial loss
  double initial_loss = 0;
  double final_loss = 0;
  std::string init_source;         // bank id, "random" or "provided"
  std::optional<std::size_t> init_id;
  bool converged = false;
  bool budget_exhausted = false;
  std::size_t steps = 0;
  std::size_t evaluations = 0;     // forward or attribution evaluations spent
  std::vector<std::size_t> step_evaluations;  // per accepted step, including line search
  PredictionRecord prediction;
};

/// Thrown when a wall-clock budget runs out; carries the best series found so far.
class BudgetExceededError : public Error {
 public:
  BudgetExceededError(const std::string& what, SynthesisResult partial)
      : Error(ErrorKind::BudgetExceeded, what), partial_(std::move(partial)) {}
  const SynthesisResult& partial() const noexcept { return partial_; }

 private:
  SynthesisResult partial_;
};

/// A bank of reference vectors with the series they were derived from.
struct SynthesisBank {
  const Tensor<float>* vectors = nullptr;  // [N x D]
  const Tensor<float>* series = nullptr;   // [N x T]
  const std::vector<std::size_t>* classes = nullptr;  // optional per-row class (attribution targets)
};

struct NearestNeighbor {
  std::vector<float> series;
  std::size_t id = 0;
};

/// Series whose bank vector is Euclidean-nearest to `target` (ties: smallest id), plus optional
/// Gaussian jitter.
inline NearestNeighbor nearest_neighbor_init(std::span<const float> target, const Tensor<float>& bank,
                                             const Tensor<float>& bank_series, double noise_std = 0.0,
                                             std::uint64_t seed = 0) {
  if (bank.rank() != 2 || bank.dim(0) == 0) fail(ErrorKind::EmptyBank, "nearest-neighbor bank is empty");
  const std::size_t N = bank.dim(0), D = bank.dim(1);
  if (D != target.size()) fail(ErrorKind::ShapeMismatch, "bank dimension " + std::to_string(D) + " != target length " +
                                                             std::to_string(target.size()));
  if (bank_series.rank() != 2 || bank_series.dim(0) != N) fail(ErrorKind::ShapeMismatch, "bank series rows != bank rows");
  std::size_t best = 0;
  double best_d = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < N; ++i) {
    double d = 0;
    for (std::size_t j = 0; j < D; ++j) {
      const double diff = static_cast<double>(bank[i * D + j]) - target[j];
      d += diff * diff;
    }
    if (d < best_d) {
      best_d = d;
      best = i;
    }
  }
  const std::size_t T = bank_series.dim(1);
  NearestNeighbor nn{std::vector<float>(bank_series.ptr() + best * T, bank_series.ptr() + (best + 1) * T), best};
  if (noise_std > 0) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, noise_std);
    for (auto& v : nn.series) v = static_cast<float>(v + noise(rng));
  }
  return nn;
}

namespace detail {

struct InitChoice {
  std::vector<float> series;
  std::string source;
  std::optional<std::size_t> id;
};

inline InitChoice choose_init(std::span<const float> target, const SynthesisBank& bank, const SynthesisConfig& cfg,
                              std::size_t T) {
  switch (cfg.init) {
    case InitKind::Provided:
      if (cfg.init_series.size() != T) fail(ErrorKind::ShapeMismatch, "provided init series has wrong length");
      return {cfg.init_series, "provided", std::nullopt};
    case InitKind::RandomNormal: {
      std::mt19937_64 rng(cfg.seed);
      std::normal_distribution<double> g(0.0, 1.0);
      std::vector<float> s(T);
      for (auto& v : s) v = static_cast<float>(g(rng));
      return {std::move(s), "random", std::nullopt};
    }
    case InitKind::NearestNeighbor: {
      if (!bank.vectors || !bank.series) fail(ErrorKind::EmptyBank, "nearest-neighbor init needs a bank");
      auto nn = nearest_neighbor_init(target, *bank.vectors, *bank.series, cfg.noise_std, cfg.seed);
      return {std::move(nn.series), std::to_string(nn.id), nn.id};
    }
  }
  fail(ErrorKind::InvalidConfig, "unknown init kind");
}

using Clock = std::chrono::steady_clock;

// Descent loop shared by both matching problems. `loss(x)` evaluates L; `grad(x, Lx)` returns dL/dx,
// possibly a fresh random estimate per call, in which case `redraws` extra draws are allowed per step.
template <class LossFn, class GradFn>
void descend(SynthesisResult& r, const SynthesisConfig& cfg, LossFn&& loss, GradFn&& grad, std::size_t redraws = 0) {
  const auto start = Clock::now();
  auto out_of_budget = [&] {
    return cfg.budget_seconds > 0 && std::chrono::duration<double>(Clock::now() - start).count() >= cfg.budget_seconds;
  };
  std::vector<float> x = r.series;
  const std::size_t D = x.size();
  double lx = loss(x);
  r.initial_loss = lx;
  r.loss_curve.push_back(lx);
  if (!std::isfinite(lx)) fail(ErrorKind::DivergedLoss, "non-finite initial synthesis loss");
  if (lx < cfg.convergence_tol) {
    r.converged = true;
    r.final_loss = lx;
    return;
  }
  std::vector<double> m(D, 0.0), v(D, 0.0), dir(D);
  std::size_t t = 0;
  double base = cfg.learning_rate;  // grows back by 2x per accepted step, capped at learning_rate
  std::vector<float> cand(D);

  // Tries x - eta * dir with halving; true when a non-increasing candidate was taken.
  auto line_search = [&](double eta) {
    const std::size_t tries = cfg.backtracking ? cfg.max_halvings + 1 : 1;
    for (std::size_t h = 0; h < tries; ++h, eta *= 0.5) {
      for (std::size_t i = 0; i < D; ++i) cand[i] = static_cast<float>(x[i] - eta * dir[i]);
      const double lc = loss(cand);
      if (!std::isfinite(lc)) return false;
      if (!cfg.backtracking || lc <= lx) {
        x.swap(cand);
        lx = lc;
        base = std::min(cfg.learning_rate, 2.0 * eta);
        return true;
      }
      if (out_of_budget()) return false;
    }
    return false;
  };
  auto gradient_direction = [&](const std::vector<float>& g) {
    double ss = 0;
    for (float gi : g) ss += static_cast<double>(gi) * gi;
    const double rms = std::sqrt(ss / static_cast<double>(D));
    if (!(rms > 0) || !std::isfinite(rms)) return false;
    const double s = cfg.normalize_gradient ? 1.0 / rms : 1.0;
    for (std::size_t i = 0; i < D; ++i) dir[i] = s * g[i];
    return true;
  };

  for (std::size_t step = 0; step < cfg.max_steps; ++step) {
    if (out_of_budget()) {
      r.budget_exhausted = true;
      break;
    }
    const std::size_t evals_before = r.evaluations;
    bool accepted = false;
    // A stochastic estimate that fails the line search may just be an unlucky draw.
    for (std::size_t draw = 0; draw <= redraws && !accepted && !out_of_budget(); ++draw) {
    const auto g = grad(x, lx);
    if (cfg.direction == StepDirection::Adam) {
      ++t;
      const double b1 = 0.9, b2 = 0.999;
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(t)), c2 = 1.0 - std::pow(b2, static_cast<double>(t));
      for (std::size_t i = 0; i < D; ++i) {
        m[i] = b1 * m[i] + (1 - b1) * g[i];
        v[i] = b2 * v[i] + (1 - b2) * static_cast<double>(g[i]) * g[i];
        dir[i] = (m[i] / c1) / (std::sqrt(v[i] / c2) + 1e-12);
      }
      accepted = line_search(cfg.backtracking ? base : cfg.learning_rate);
      if (!accepted && cfg.backtracking && !out_of_budget()) {
        // Stale moments can point uphill; restart them and fall back to the plain gradient.
        std::fill(m.begin(), m.end(), 0.0);
        std::fill(v.begin(), v.end(), 0.0);
        t = 0;
        if (gradient_direction(g)) accepted = line_search(base);
      }
    } else if (gradient_direction(g)) {
      accepted = line_search(cfg.backtracking ? base : cfg.learning_rate);
    }
    }
    if (!accepted) {
      if (out_of_budget()) r.budget_exhausted = true;
      else r.converged = true;
      break;
    }
    ++r.steps;
    r.loss_curve.push_back(lx);
    r.step_evaluations.push_back(r.evaluations - evals_before);
    if (lx < cfg.convergence_tol) {
      r.converged = true;
      break;
    }
    const std::size_t n = r.loss_curve.size();
    if (n > cfg.patience) {
      const double before = r.loss_curve[n - 1 - cfg.patience];
      if (before - lx < cfg.min_relative_improvement * before) {
        r.converged = true;
        break;
      }
    }
  }
  r.series = std::move(x);
  r.final_loss = lx;
}

inline double vector_mse(std::span<const float> a, std::span<const float> b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    acc += d * d;
  }
  return acc / static_cast<double>(a.size());
}

}  // namespace detail

/// Gradient descent on |activations(x) - target|^2 / A, differentiating through the network.
inline SynthesisResult match_activations(const ClassifierModel<float>& model, std::span<const float> target,
                                         const SynthesisConfig& cfg, const SynthesisBank& bank = {}) {
  validate(cfg);
  const std::size_t A = model.activation_dim(), T = model.config.input_length;
  if (target.size() != A) fail(ErrorKind::ShapeMismatch, "target activation length " + std::to_string(target.size()) +
                                                             ", expected " + std::to_string(A));
  for (float v : target)
    if (!std::isfinite(v)) fail(ErrorKind::ShapeMismatch, "target activation is not finite");
  const Tensor<float> tgt({1, A}, std::vector<float>(target.begin(), target.end()));

  auto init = detail::choose_init(target, bank, cfg, T);
  SynthesisResult r;
  r.series = std::move(init.series);
  r.init_source = init.source;
  r.init_id = init.id;

  auto loss = [&](const std::vector<float>& x) {
    ++r.evaluations;
    return detail::vector_mse(activations<float>(model, x), target);
  };
  auto grad = [&](const std::vector<float>& x, double) {
    ++r.evaluations;
    ad::Tape<float> tape;
    auto p = bind(tape, model, false);
    auto xv = tape.variable(Tensor<float>({1, T}, x));
    auto tr = trace_forward(p, xv);
    tape.backward(ad::mse(tr.pooled, tgt));
    return tape.grad(xv).data;
  };
  detail::descend(r, cfg, loss, grad);
  r.prediction = predict<float>(model, r.series);
  return r;
}

/// Descent on |Attr(x) - target|^2 / T with attributions recomputed at every evaluation.
inline SynthesisResult match_attributions(const ClassifierModel<float>& model, AttributionMethod method,
                                          std::span<const float> target, const SynthesisConfig& cfg,
                                          const SynthesisBank& bank = {}) {
  validate(cfg);
  const std::size_t T = model.config.input_length;
  if (target.size() != T) fail(ErrorKind::ShapeMismatch, "target attribution length " + std::to_string(target.size()) +
                                                             ", expected " + std::to_string(T));
  for (float v : target)
    if (!std::isfinite(v)) fail(ErrorKind::ShapeMismatch, "target attribution is not finite");
  const Tensor<float> tgt({1, T}, std::vector<float>(target.begin(), target.end()));

  auto init = detail::choose_init(target, bank, cfg, T);
  SynthesisResult r;
  r.series = std::move(init.series);
  r.init_source = init.source;
  r.init_id = init.id;

  std::size_t cls = 0;
  if (cfg.attribution_class) cls = *cfg.attribution_class;
  else if (init.id && bank.classes) cls = bank.classes->at(*init.id);
  else cls = predict<float>(model, r.series).predicted_class;
  if (cls >= model.config.num_classes) fail(ErrorKind::ShapeMismatch, "attribution class out of range");

  // Loss for each row of a [M x T] batch.
  auto batch_loss = [&](const Tensor<float>& xs) {
    const std::size_t M = xs.dim(0);
    r.evaluations += M;
    auto attr = attribute_batch(model, xs, std::vector<std::size_t>(M, cls), method);
    std::vector<double> out(M);
    for (std::size_t i = 0; i < M; ++i)
      out[i] = detail::vector_mse(std::span<const float>(attr.ptr() + i * T, T), target);
    return out;
  };
  auto loss = [&](const std::vector<float>& x) { return batch_loss(Tensor<float>({1, T}, x))[0]; };

  std::mt19937_64 spsa_rng(derive_seed(cfg.seed, 0x5b5a));
  auto grad = [&](const std::vector<float>& x, double) -> std::vector<float> {
    switch (cfg.gradient_mode) {
      case GradientMode::ReverseMode: {
        r.evaluations += 1;
        ad::Tape<float> tape;
        auto p = bind(tape, model, false);
        auto xv = tape.variable(Tensor<float>({1, T}, x));
        auto attr = trace_attribution(p, xv, Tensor<float>({1, T}), {cls}, method);
        tape.backward(ad::mse(attr, tgt));
        return tape.grad(xv).data;
      }
      case GradientMode::FiniteDifference: {
        const float h = static_cast<float>(cfg.fd_step);
        Tensor<float> xs({2 * T, T});
        for (std::size_t j = 0; j < T; ++j) {
          std::copy(x.begin(), x.end(), xs.ptr() + (2 * j) * T);
          std::copy(x.begin(), x.end(), xs.ptr() + (2 * j + 1) * T);
          xs[(2 * j) * T + j] += h;
          xs[(2 * j + 1) * T + j] -= h;
        }
        auto l = batch_loss(xs);
        std::vector<float> g(T);
        for (std::size_t j = 0; j < T; ++j) {
          const double denom = static_cast<double>(xs[(2 * j) * T + j]) - xs[(2 * j + 1) * T + j];
          g[j] = static_cast<float>((l[2 * j] - l[2 * j + 1]) / denom);
        }
        return g;
      }
      case GradientMode::Spsa: {
        const std::size_t K = cfg.spsa_samples;
        const float c = static_cast<float>(cfg.fd_step);
        std::bernoulli_distribution coin(0.5);
        std::vector<std::vector<float>> deltas(K, std::vector<float>(T));
        Tensor<float> xs({2 * K, T});
        for (std::size_t k = 0; k < K; ++k)
          for (std::size_t j = 0; j < T; ++j) {
            deltas[k][j] = coin(spsa_rng) ? 1.f : -1.f;
            xs[(2 * k) * T + j] = x[j] + c * deltas[k][j];
            xs[(2 * k + 1) * T + j] = x[j] - c * deltas[k][j];
          }
        auto l = batch_loss(xs);
        std::vector<float> g(T, 0.f);
        for (std::size_t k = 0; k < K; ++k) {
          const double slope = (l[2 * k] - l[2 * k + 1]) / (2.0 * c);
          for (std::size_t j = 0; j < T; ++j) g[j] += static_cast<float>(slope * deltas[k][j] / static_cast<double>(K));
        }
        return g;
      }
    }
    return std::vector<float>(T, 0.f);
  };
  detail::descend(r, cfg, loss, grad, cfg.gradient_mode == GradientMode::Spsa ? cfg.spsa_redraws : 0);
  r.prediction = predict<float>(model, r.series);
  if (r.budget_exhausted)
    throw BudgetExceededError("attribution matching exceeded " + std::to_string(cfg.budget_seconds) + " s", r);
  return r;
}

}  // namespace cfw
