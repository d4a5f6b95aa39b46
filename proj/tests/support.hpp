#pragma once

#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "cfw/model.hpp"
#include "cfw/surrogate.hpp"
#include "cfw/train.hpp"

namespace testsupport {

namespace fs = std::filesystem;

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = fs::temp_directory_path() / ("cfw-" + tag + "-" + std::to_string(rng()));
    fs::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    fs::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }
  fs::path operator/(const std::string& leaf) const { return path_ / leaf; }

 private:
  fs::path path_;
};

inline void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s;
}

inline std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline cfw::ModelConfig tiny_config(std::uint64_t seed = 3) {
  cfw::ModelConfig c;
  c.input_length = 24;
  c.num_classes = 3;
  c.blocks = 2;
  c.channels = {4, 6};
  c.kernel_sizes = {5, 3};
  c.seed = seed;
  return c;
}

inline std::vector<float> random_series(std::size_t T, std::uint64_t seed, double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> g(0.0, scale);
  std::vector<float> v(T);
  for (auto& x : v) x = static_cast<float>(g(rng));
  return v;
}

// Small surrogate corpus (T=48, 3 classes) for fast training tests.
inline cfw::Dataset small_corpus(std::uint64_t seed = 17) {
  cfw::surrogate::CorpusSpec s;
  s.length = 48;
  s.train_counts = {40, 30, 20};
  s.test_counts = {40, 30, 20};
  s.seed = seed;
  return cfw::surrogate::make_corpus(s);
}

inline cfw::ModelConfig small_config(std::uint64_t seed = 5) {
  cfw::ModelConfig c;
  c.input_length = 48;
  c.num_classes = 3;
  c.blocks = 2;
  c.channels = {8, 8};
  c.kernel_sizes = {5, 3};
  c.seed = seed;
  return c;
}

// A small model trained on small_corpus(); cached per process.
inline const cfw::ClassifierModel<float>& small_trained_model() {
  static const cfw::ClassifierModel<float> m = [] {
    auto model = cfw::build_model<float>(small_config());
    cfw::TrainHyper h;
    h.epochs = 20;
    h.batch_size = 16;
    h.learning_rate = 3e-3;
    cfw::train(model, small_corpus(), h, 9);
    return model;
  }();
  return m;
}

inline std::vector<std::vector<float>> values_of(const std::vector<cfw::LabeledSeries>& rows) {
  std::vector<std::vector<float>> xs;
  for (const auto& r : rows) xs.push_back(r.values);
  return xs;
}

}  // namespace testsupport
