#include <catch2/catch_amalgamated.hpp>

#include "cfw/attribution.hpp"
#include "support.hpp"

using namespace cfw;
using namespace testsupport;

namespace {

// One block, one channel, kernel 1, large positive biases: every ReLU stays active on inputs in
// [-1, 1], so the network is affine with per-step weight W_c * (w2 * w1 + 1) / T.
ClassifierModel<float> affine_model(std::size_t T) {
  ModelConfig c;
  c.input_length = T;
  c.num_classes = 2;
  c.blocks = 1;
  c.channels = {1};
  c.kernel_sizes = {1};
  auto m = build_model<float>(c);
  m.parameters[0].value.data = {0.75f};   // conv1.weight
  m.parameters[1].value.data = {20.f};    // conv1.bias
  m.parameters[2].value.data = {-0.5f};   // conv2.weight
  m.parameters[3].value.data = {30.f};    // conv2.bias
  m.parameters[4].value.data = {1.25f, -2.f};  // head.weight
  m.parameters[5].value.data = {0.1f, 0.2f};   // head.bias
  return m;
}

double logit(const ClassifierModel<float>& m, std::span<const float> x, std::size_t c) {
  return predict<float>(m, x).logits[c];
}

}  // namespace

TEST_CASE("attribution: affine model gives w * x for both methods", "[attribution]") {
  const std::size_t T = 12;
  auto m = affine_model(T);
  REQUIRE(m.parameters[4].name == "head.weight");
  auto x = random_series(T, 5, 0.5);
  for (auto& v : x) v = std::clamp(v, -1.f, 1.f);
  for (std::size_t c = 0; c < 2; ++c) {
    const double w = m.parameters[4].value[c] * (-0.5 * 0.75 + 1.0) / static_cast<double>(T);
    auto dl = deeplift_rescale<float>(m, x, {}, c);
    auto gi = gradient_x_input<float>(m, x, c);
    for (std::size_t t = 0; t < T; ++t) {
      CHECK(std::abs(dl.values[t] - w * x[t]) <= 1e-6);
      CHECK(std::abs(gi.values[t] - w * x[t]) <= 1e-6);
      CHECK(std::abs(dl.values[t] - gi.values[t]) <= 1e-6);
    }
  }
}

TEST_CASE("attribution: degenerate inputs", "[attribution]") {
  const auto& m = small_trained_model();
  const std::size_t T = m.config.input_length;
  auto x = random_series(T, 9);
  auto same = deeplift_rescale<float>(m, x, x, 1);
  for (float v : same.values) CHECK(v == 0.f);
  CHECK(same.baseline == BaselineKind::Custom);
  std::vector<float> zero(T, 0.f);
  for (float v : gradient_x_input<float>(m, zero, 0).values) CHECK(v == 0.f);
  CHECK_THROWS_AS(deeplift_rescale<float>(m, std::vector<float>(T - 1), {}, 0), Error);
  CHECK_THROWS_AS(gradient_x_input<float>(m, x, 7), Error);
}

TEST_CASE("attribution: DeepLIFT completeness on a trained model", "[attribution][property]") {
  const auto& m = small_trained_model();
  auto ds = small_corpus();
  std::vector<float> zero(m.config.input_length, 0.f);
  for (const auto& row : ds.test) {
    const std::size_t c = predict<float>(m, row.values).predicted_class;
    auto a = deeplift_rescale<float>(m, row.values, {}, c);
    double s = 0;
    for (float v : a.values) s += v;
    const double delta = logit(m, row.values, c) - logit(m, zero, c);
    CHECK(std::abs(s - delta) <= 1e-3 * std::max(1.0, std::abs(delta)));
  }
}

TEST_CASE("attribution: completeness holds with a custom baseline", "[attribution][property]") {
  const auto& m = small_trained_model();
  for (std::uint64_t s = 0; s < 20; ++s) {
    auto x = random_series(m.config.input_length, 100 + s);
    auto b = random_series(m.config.input_length, 200 + s, 0.3);
    auto a = deeplift_rescale<float>(m, x, b, s % 3);
    double sum = 0;
    for (float v : a.values) sum += v;
    const double delta = logit(m, x, s % 3) - logit(m, b, s % 3);
    CHECK(std::abs(sum - delta) <= 1e-3 * std::max(1.0, std::abs(delta)));
  }
}

TEST_CASE("attribution: gradient x input equals series times input gradient", "[attribution]") {
  const auto& m = small_trained_model();
  auto x = random_series(m.config.input_length, 31);
  auto g = input_gradient<float>(m, x, Objective::logit(2));
  auto a = gradient_x_input<float>(m, x, 2);
  for (std::size_t t = 0; t < x.size(); ++t) CHECK(a.values[t] == Catch::Approx(x[t] * g[t]).margin(1e-6));
}

TEST_CASE("attribution: dataset batches", "[attribution]") {
  const auto& m = small_trained_model();
  auto ds = small_corpus();
  auto mat = attribute_dataset(m, ds.train, AttributionMethod::DeepLiftRescale, TargetRule::PredictedClass);
  CHECK(mat.values.shape == std::vector<std::size_t>{ds.train.size(), m.config.input_length});
  for (std::size_t i : {0u, 17u, 89u}) {
    auto single = deeplift_rescale<float>(m, ds.train[i].values, {}, mat.target_classes[i]);
    for (std::size_t t = 0; t < m.config.input_length; ++t)
      CHECK(mat.values[i * m.config.input_length + t] == Catch::Approx(single.values[t]).margin(1e-6));
  }
  auto gt = attribute_dataset(m, ds.train, AttributionMethod::GradientXInput, TargetRule::GroundTruth);
  for (std::size_t i = 0; i < ds.train.size(); ++i) CHECK(gt.target_classes[i] == ds.train[i].label);
  auto again = attribute_dataset(m, ds.train, AttributionMethod::GradientXInput, TargetRule::GroundTruth);
  CHECK(again.values.data == gt.values.data);

  auto empty = attribute_dataset(m, {}, AttributionMethod::DeepLiftRescale, TargetRule::PredictedClass);
  CHECK(empty.values.shape == std::vector<std::size_t>{0, m.config.input_length});
}

TEST_CASE("attribution: names parse", "[attribution]") {
  CHECK(parse_attribution_method("deeplift_rescale") == AttributionMethod::DeepLiftRescale);
  CHECK(parse_attribution_method("gradient_x_input") == AttributionMethod::GradientXInput);
  CHECK(parse_target_rule("ground_truth") == TargetRule::GroundTruth);
  CHECK_THROWS_AS(parse_attribution_method("shap"), Error);
}
