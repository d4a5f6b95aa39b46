#include <catch2/catch_amalgamated.hpp>

#include "cfw/projection.hpp"
#include "support.hpp"

using namespace cfw;
using namespace testsupport;

namespace {

Tensor<float> series_matrix(const Dataset& ds) { return rows_to_tensor<float>(values_of(ds.train), ds.series_length); }

ProjectionConfig quick_config() {
  ProjectionConfig c;
  c.epochs = 150;
  return c;
}

}  // namespace

TEST_CASE("projection: rejects degenerate input", "[projection]") {
  Tensor<float> same({100, 4});
  for (std::size_t i = 0; i < 100; ++i)
    for (std::size_t d = 0; d < 4; ++d) same[i * 4 + d] = static_cast<float>(d);
  try {
    fit_projection(same, Space::Series, quick_config(), 1);
    FAIL("expected DegenerateData");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::DegenerateData);
  }
  CHECK_THROWS_AS(fit_projection(Tensor<float>({9, 4}), Space::Series, quick_config(), 1), Error);
  CHECK_THROWS_AS(fit_projection(Tensor<float>({20, 1}), Space::Series, quick_config(), 1), Error);
}

TEST_CASE("projection: 2D data is reconstructed almost exactly", "[projection]") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-1, 1);
  Tensor<float> pts({200, 2});
  for (auto& v : pts.data) v = static_cast<float>(u(rng));
  ProjectionConfig c;
  c.epochs = 800;
  auto pm = fit_projection(pts, Space::Series, c, 3);
  auto rec = decode(pm, encode(pm, pts));
  double mse = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) mse += (rec[i] - pts[i]) * (rec[i] - pts[i]);
  mse /= static_cast<double>(pts.dim(0));
  CHECK(mse <= 1e-3);
}

TEST_CASE("projection: series space of the small corpus", "[projection]") {
  auto ds = small_corpus();
  auto X = series_matrix(ds);
  auto pm = fit_projection(X, Space::Series, quick_config(), 7);
  CHECK(pm.extent.valid());
  CHECK(reconstruction_ratio(pm, X) <= 0.35);

  auto pts = embed_all(pm, X);
  REQUIRE(pts.size() == X.dim(0));
  for (std::size_t i = 0; i < pts.size(); ++i) {
    CHECK(pts[i].sample_id == i);
    CHECK(pm.extent.contains(pts[i].x, pts[i].y));
    CHECK(pts[i].x == pm.train_embedding[2 * i]);
    auto xy = project(pm, std::span<const float>(X.ptr() + i * X.dim(1), X.dim(1)));
    CHECK(xy.first == pts[i].x);
    CHECK(xy.second == pts[i].y);
  }
  CHECK(embed_all(pm, Tensor<float>({0, X.dim(1)})).empty());
  CHECK_THROWS_AS(project(pm, std::vector<float>(3)), Error);

  auto inv = inverse_project(pm, pts[0].x, pts[0].y);
  CHECK_FALSE(inv.extrapolated);
  CHECK(inv.values == inverse_project(pm, pts[0].x, pts[0].y).values);
  auto far = inverse_project(pm, pm.extent.x_max + 100, pm.extent.y_min - 100);
  CHECK(far.extrapolated);
  for (float v : far.values) CHECK(std::isfinite(v));
}

TEST_CASE("projection: extent pads the embedding by 5 percent", "[projection]") {
  auto ds = small_corpus();
  auto X = series_matrix(ds);
  auto pm = fit_projection(X, Space::Series, quick_config(), 7);
  float lo = 1e30f, hi = -1e30f;
  for (std::size_t i = 0; i < X.dim(0); ++i) {
    lo = std::min(lo, pm.train_embedding[2 * i]);
    hi = std::max(hi, pm.train_embedding[2 * i]);
  }
  const double pad = 0.05 * (hi - lo);
  CHECK(pm.extent.x_min == Catch::Approx(lo - pad));
  CHECK(pm.extent.x_max == Catch::Approx(hi + pad));
}

TEST_CASE("projection: fixed seed is byte-exact, save/load is exact", "[projection]") {
  auto ds = small_corpus();
  auto X = series_matrix(ds);
  auto a = fit_projection(X, Space::Series, quick_config(), 99);
  auto b = fit_projection(X, Space::Series, quick_config(), 99);
  CHECK(projection_checksum(a) == projection_checksum(b));
  CHECK(a.train_embedding.data == b.train_embedding.data);
  auto c = fit_projection(X, Space::Series, quick_config(), 100);
  CHECK(projection_checksum(a) != projection_checksum(c));

  TempDir dir("pj");
  save_projection(a, dir / "p.json");
  auto back = load_projection(dir / "p.json");
  CHECK(projection_checksum(back) == projection_checksum(a));
  CHECK(encode(back, X).data == encode(a, X).data);
  CHECK(back.extent.x_min == a.extent.x_min);
  CHECK(back.space == Space::Series);
}

TEST_CASE("projection: scaler round trip", "[projection][property]") {
  auto ds = small_corpus();
  auto X = series_matrix(ds);
  auto pm = fit_projection(X, Space::Series, quick_config(), 1);
  auto Z = detail::standardize(pm, X.span(), X.dim(0));
  const std::size_t D = X.dim(1);
  for (std::size_t i = 0; i < X.dim(0); ++i)
    for (std::size_t d = 0; d < D; ++d)
      CHECK(std::abs(Z[i * D + d] * pm.scale[d] + pm.mean[d] - X[i * D + d]) <= 1e-6 * std::max(1.f, std::abs(X[i * D + d])) + 1e-6);
}

TEST_CASE("projection: global scaling and neighborhood penalty", "[projection]") {
  auto ds = small_corpus();
  auto X = series_matrix(ds);
  ProjectionConfig c = quick_config();
  c.scaling = Scaling::Global;
  c.neighborhood_weight = 0.1;
  auto pm = fit_projection(X, Space::Attributions, c, 2);
  for (std::size_t d = 1; d < pm.scale.size(); ++d) CHECK(pm.scale[d] == pm.scale[0]);
  CHECK(reconstruction_ratio(pm, X) <= 0.5);
  CHECK(pm.space == Space::Attributions);
}

TEST_CASE("projection: space names", "[projection]") {
  CHECK(parse_space("series") == Space::Series);
  CHECK(parse_space("activations") == Space::Activations);
  CHECK(parse_space("attributions") == Space::Attributions);
  CHECK_FALSE(parse_space("pixels").has_value());
}
