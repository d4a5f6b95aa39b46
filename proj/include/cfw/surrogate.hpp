#pragma once

// Synthetic heartbeat corpus shaped like ECG5000 (length 140, five imbalanced classes,
// 500/4500 split). Used for tests and demos when the real archive is not on disk.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <vector>

#include "cfw/dataset.hpp"

namespace cfw::surrogate {

struct Bump {
  double center;
  double width;
  double amplitude;
};

struct CorpusSpec {
  std::size_t length = 140;
  std::vector<std::size_t> train_counts{292, 177, 19, 10, 2};
  std::vector<std::size_t> test_counts{2627, 1590, 77, 184, 22};
  double noise_std = 0.08;
  double mix_probability = 0.06;
  std::uint64_t seed = 5000;
};

inline const std::array<std::vector<Bump>, 5>& class_templates() {
  static const std::array<std::vector<Bump>, 5> t{{
      // normal beat
      {{0.06, 0.035, -3.0}, {0.16, 0.05, 0.6}, {0.55, 0.09, 1.0}, {0.86, 0.05, 0.45}},
      // R-on-T premature ventricular contraction
      {{0.07, 0.05, -3.2}, {0.36, 0.09, -0.8}, {0.70, 0.14, 1.3}},
      // premature ventricular contraction
      {{0.10, 0.07, -2.4}, {0.30, 0.05, 0.9}, {0.62, 0.11, 1.6}},
      // supraventricular premature beat
      {{0.05, 0.035, -2.7}, {0.30, 0.05, 0.9}, {0.62, 0.08, 0.7}, {0.90, 0.04, -0.6}},
      // unclassified beat
      {{0.08, 0.06, -2.0}, {0.45, 0.20, 0.9}, {0.80, 0.06, -1.0}},
  }};
  return t;
}

inline std::vector<float> render_beat(std::size_t cls, std::size_t other, double mix, double shift, double scale,
                                      double drift, double noise_std, std::size_t T, std::mt19937_64& rng) {
  std::normal_distribution<double> noise(0.0, noise_std);
  const auto& tpl = class_templates();
  std::vector<double> v(T);
  for (std::size_t i = 0; i < T; ++i) {
    double t = static_cast<double>(i) / static_cast<double>(T - 1);
    auto eval = [&](const std::vector<Bump>& bumps) {
      double s = 0.0;
      for (const auto& b : bumps) {
        double d = (t - b.center - shift) / b.width;
        s += b.amplitude * std::exp(-0.5 * d * d);
      }
      return s;
    };
    double clean = (1.0 - mix) * eval(tpl[cls]) + mix * eval(tpl[other]);
    v[i] = scale * clean + drift * (t - 0.5) + noise(rng);
  }
  double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(T);
  double var = 0.0;
  for (double x : v) var += (x - mean) * (x - mean);
  double sd = std::sqrt(var / static_cast<double>(T));
  std::vector<float> out(T);
  for (std::size_t i = 0; i < T; ++i) out[i] = static_cast<float>((v[i] - mean) / sd);
  return out;
}

/// Builds the corpus. Each series is z-normalized, matching the UCR distribution convention.
inline Dataset make_corpus(const CorpusSpec& spec = {}) {
  const std::size_t C = spec.train_counts.size();
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  auto make_split = [&](const std::vector<std::size_t>& counts, Split split) {
    std::vector<std::size_t> labels;
    for (std::size_t c = 0; c < C; ++c) labels.insert(labels.end(), counts[c], c);
    std::shuffle(labels.begin(), labels.end(), rng);
    std::vector<LabeledSeries> rows;
    rows.reserve(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
      std::size_t cls = labels[i];
      std::size_t other = cls;
      double mix = 0.0;
      if (unit(rng) < spec.mix_probability || cls == 4) {
        other = static_cast<std::size_t>(unit(rng) * static_cast<double>(C)) % C;
        mix = 0.2 + 0.35 * unit(rng);
      }
      double shift = (unit(rng) - 0.5) * 0.05;
      double scale = 0.85 + 0.3 * unit(rng);
      double drift = (unit(rng) - 0.5) * 0.8;
      rows.push_back(LabeledSeries{i, render_beat(cls, other, mix, shift, scale, drift, spec.noise_std, spec.length, rng),
                                   cls, split, false});
    }
    return rows;
  };

  Dataset ds;
  ds.name = "ECG5000-surrogate";
  ds.series_length = spec.length;
  ds.num_classes = C;
  for (std::size_t c = 0; c < C; ++c) {
    ds.label_values.push_back(static_cast<long long>(c + 1));
    ds.class_names.push_back(std::to_string(c + 1));
  }
  ds.train = make_split(spec.train_counts, Split::Train);
  ds.test = make_split(spec.test_counts, Split::Test);
  return ds;
}

}  // namespace cfw::surrogate
