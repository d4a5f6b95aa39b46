#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "cfw/dataset.hpp"
#include "cfw/model.hpp"
#include "cfw/optim.hpp"

namespace cfw {

enum class ClassWeighting { None, InverseFrequency };

struct TrainHyper {
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  ClassWeighting class_weighting = ClassWeighting::None;
  // A batch loss above this multiple of the first batch loss counts as divergence. With dying
  // ReLUs a blown-up network can settle on a large but finite loss.
  double divergence_factor = 100.0;
};

struct TrainReport {
  std::size_t epochs = 0;
  double train_accuracy = 0.0;
  double test_accuracy = 0.0;
  std::vector<double> loss_curve;
  std::uint64_t seed = 0;
  double seconds = 0.0;
};

/// Fraction of rows whose argmax prediction equals the label; 0 for an empty split.
template <class S>
double accuracy(const ClassifierModel<S>& model, const std::vector<LabeledSeries>& rows) {
  if (rows.empty()) return 0.0;
  std::vector<std::vector<S>> xs;
  xs.reserve(rows.size());
  for (const auto& r : rows) xs.emplace_back(r.values.begin(), r.values.end());
  auto preds = predict_batch(model, rows_to_tensor<S>(xs, model.config.input_length));
  std::size_t hit = 0;
  for (std::size_t i = 0; i < rows.size(); ++i) hit += preds[i].predicted_class == rows[i].label;
  return static_cast<double>(hit) / static_cast<double>(rows.size());
}

inline std::vector<double> class_weights(const Dataset& ds, ClassWeighting w) {
  if (w == ClassWeighting::None) return {};
  auto counts = class_distribution(ds, Split::Train);
  std::vector<double> out(counts.size(), 0.0);
  const double n = static_cast<double>(ds.train.size()), c = static_cast<double>(counts.size());
  for (std::size_t i = 0; i < counts.size(); ++i) out[i] = counts[i] ? n / (c * static_cast<double>(counts[i])) : 0.0;
  return out;
}

using EpochCallback = std::function<void(std::size_t epoch, double loss)>;

/// Minibatch Adam on weighted softmax cross-entropy. Sequential and deterministic given
/// (seed, hyper, dataset); the seed drives shuffling only.
template <class S>
TrainReport train(ClassifierModel<S>& model, const Dataset& ds, const TrainHyper& hyper, std::uint64_t seed,
                  const EpochCallback& on_epoch = {}) {
  if (ds.train.empty()) fail(ErrorKind::InvalidConfig, "train split is empty");
  if (ds.series_length != model.config.input_length)
    fail(ErrorKind::ShapeMismatch, "dataset length does not match model input length");
  if (hyper.batch_size == 0) fail(ErrorKind::InvalidConfig, "batch_size must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const std::size_t T = model.config.input_length;
  const auto weights = class_weights(ds, hyper.class_weighting);

  TrainReport rep;
  rep.seed = seed;
  Adam<S> opt(AdamConfig{hyper.learning_rate});
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(ds.train.size());
  std::iota(order.begin(), order.end(), 0);
  double first_loss = -1.0;

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t seen = 0;
    for (std::size_t off = 0; off < order.size(); off += hyper.batch_size) {
      const std::size_t n = std::min(hyper.batch_size, order.size() - off);
      Tensor<S> xb({n, T});
      std::vector<std::size_t> yb(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto& row = ds.train[order[off + i]];
        std::copy(row.values.begin(), row.values.end(), xb.ptr() + i * T);
        yb[i] = row.label;
      }
      ad::Tape<S> tape;
      auto p = bind(tape, model, true);
      auto tr = trace_forward(p, tape.constant(std::move(xb)));
      auto loss = ad::softmax_cross_entropy(tr.logits, std::move(yb), weights);
      const double lv = loss.value()[0];
      if (!std::isfinite(lv))
        fail(ErrorKind::DivergedLoss, "non-finite loss at epoch " + std::to_string(epoch) + " after " +
                                          std::to_string(rep.loss_curve.size()) + " completed epochs");
      if (first_loss < 0) first_loss = lv;
      if (hyper.divergence_factor > 0 && lv > hyper.divergence_factor * std::max(first_loss, 1e-3))
        fail(ErrorKind::DivergedLoss, "loss " + std::to_string(lv) + " at epoch " + std::to_string(epoch) +
                                          " exceeds " + std::to_string(hyper.divergence_factor) + "x the initial loss");
      tape.backward(loss);
      std::vector<Tensor<S>*> params;
      std::vector<const Tensor<S>*> grads;
      for (std::size_t i = 0; i < model.parameters.size(); ++i) {
        params.push_back(&model.parameters[i].value);
        grads.push_back(&tape.grad(p.vars[i]));
      }
      opt.step(params, grads);
      loss_sum += lv * static_cast<double>(n);
      seen += n;
    }
    const double epoch_loss = loss_sum / static_cast<double>(seen);
    rep.loss_curve.push_back(epoch_loss);
    if (on_epoch) on_epoch(epoch, epoch_loss);
  }
  for (const auto& p : model.parameters)
    for (S v : p.value.data)
      if (!std::isfinite(static_cast<double>(v))) fail(ErrorKind::DivergedLoss, "non-finite parameter in " + p.name);

  rep.epochs = hyper.epochs;
  rep.train_accuracy = accuracy(model, ds.train);
  rep.test_accuracy = accuracy(model, ds.test);
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return rep;
}

}  // namespace cfw
