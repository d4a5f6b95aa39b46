#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <numeric>

#include "cfw/dbm.hpp"
#include "cfw/raster.hpp"
#include "support.hpp"

using namespace cfw;
using namespace testsupport;

namespace {

// Integer oracle for the uniform blend: round-half-up of the channel mean.
Rgb uniform_oracle(const Palette& p) {
  std::array<int, 3> s{};
  for (auto c : p.colors)
    for (std::size_t ch = 0; ch < 3; ++ch) s[ch] += c[ch];
  const int n = static_cast<int>(p.colors.size());
  auto r = [n](int sum) { return static_cast<std::uint8_t>((2 * sum + n) / (2 * n)); };
  return {r(s[0]), r(s[1]), r(s[2])};
}

std::vector<double> random_distribution(std::mt19937_64& rng, std::size_t C) {
  std::exponential_distribution<double> e(1.0);
  std::vector<double> p(C);
  for (auto& v : p) v = e(rng);
  const double s = std::accumulate(p.begin(), p.end(), 0.0);
  for (auto& v : p) v /= s;
  return p;
}

struct Fixture {
  Dataset ds;
  Tensor<float> series, acts;
  ProjectionModel series_pm, acts_pm;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.ds = small_corpus();
    const auto& m = small_trained_model();
    x.series = rows_to_tensor<float>(values_of(x.ds.train), x.ds.series_length);
    x.acts = activations_batch(m, x.series);
    ProjectionConfig c;
    c.epochs = 200;
    x.series_pm = fit_projection(x.series, Space::Series, c, 11);
    x.acts_pm = fit_projection(x.acts, Space::Activations, c, 12);
    return x;
  }();
  return f;
}

void check_invariants(const DecisionBoundaryMap& d) {
  REQUIRE(d.cells.size() == d.resolution * d.resolution);
  for (const auto& c : d.cells) {
    double s = 0;
    for (float p : c.probabilities) s += p;
    CHECK(std::abs(s - 1.0) <= 1e-6);
    CHECK(c.argmax_class == argmax<float>(c.probabilities));
    CHECK(c.color == blend_color(c.probabilities, d.palette));
  }
}

DecisionBoundaryMap two_by_two() {
  DecisionBoundaryMap d;
  d.resolution = 2;
  d.num_classes = 3;
  d.extent = {0, 1, 0, 1};
  d.palette = palette_for(3);
  d.cells = {make_cell({1, 0, 0}, d.palette), make_cell({0, 1, 0}, d.palette), make_cell({0, 0, 1}, d.palette),
             make_cell({0.5f, 0.5f, 0}, d.palette)};
  d.model_checksum = 0xabc;
  d.projection_checksum = 0xdef;
  return d;
}

}  // namespace

TEST_CASE("dbm: grid points", "[dbm]") {
  auto g = grid_points({0, 1, 0, 1}, 2);
  REQUIRE(g.size() == 4);
  const std::array<std::array<double, 2>, 4> want{{{0.25, 0.25}, {0.75, 0.25}, {0.25, 0.75}, {0.75, 0.75}}};
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(g[i][0] == want[i][0]);
    CHECK(g[i][1] == want[i][1]);
  }
  CHECK(grid_points({-3, 5, 2, 4}, 64).size() == 4096);
  for (std::size_t G : {0u, 1u}) {
    try {
      grid_points({0, 1, 0, 1}, G);
      FAIL("expected InvalidExtent");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::InvalidExtent);
    }
  }
  CHECK_THROWS_AS(grid_points({1, 1, 0, 1}, 4), Error);

  // cell_of inverts grid_points.
  const Extent e{-2, 3, 10, 11};
  auto pts = grid_points(e, 7);
  for (std::size_t i = 0; i < pts.size(); ++i) CHECK(cell_of(e, 7, pts[i][0], pts[i][1]) == i);
  CHECK(cell_of(e, 7, e.x_max, e.y_max) == 48u);
  CHECK_FALSE(cell_of(e, 7, 4, 10.5).has_value());
}

TEST_CASE("dbm: blend endpoints and fixed examples", "[dbm]") {
  auto p = palette_for(5);
  CHECK(p.name == "dark2-5");
  CHECK(to_hex(blend_color(std::vector<double>{0, 1, 0, 0, 0}, p)) == "#d95f02");
  for (std::size_t c = 0; c < 5; ++c) {
    std::vector<double> one(5, 0.0);
    one[c] = 1;
    CHECK(blend_color(one, p) == p.colors[c]);
  }
  // Linear rule, hand computed: R 114.7, G 130.4, B 91.8.
  CHECK(to_hex(blend_color(std::vector<double>{0.5, 0.2, 0.1, 0.1, 0.1}, p)) == "#73825c");
  CHECK(blend_color(std::vector<double>(5, 0.2), p) == uniform_oracle(p));
  CHECK(to_hex(uniform_oracle(p)) == "#a47358");
}

TEST_CASE("dbm: half-up rounding", "[dbm]") {
  Palette p{"bw", {Rgb{0, 0, 0}, Rgb{255, 1, 3}}};
  // 0.5 * 1 = 0.5 rounds up to 1; 0.5 * 3 = 1.5 rounds up to 2.
  auto c = blend_color(std::vector<double>{0.5, 0.5}, p);
  CHECK(c.g == 1);
  CHECK(c.b == 2);
  CHECK(c.r == 128);
}

TEST_CASE("dbm: blend rejects invalid distributions", "[dbm]") {
  auto p = palette_for(5);
  auto kind = [&](std::vector<double> d) {
    try {
      blend_color(d, p);
    } catch (const Error& e) {
      return e.kind();
    }
    return ErrorKind::IoError;
  };
  CHECK(kind({0.5, 0.5}) == ErrorKind::InvalidDistribution);
  CHECK(kind({0.5, 0.5, 0.1, 0, 0}) == ErrorKind::InvalidDistribution);
  CHECK(kind({1.5, -0.5, 0, 0, 0}) == ErrorKind::InvalidDistribution);
  CHECK(kind({std::nan(""), 1, 0, 0, 0}) == ErrorKind::InvalidDistribution);
  CHECK_NOTHROW(blend_color(std::vector<double>{0.2 + 5e-7, 0.2, 0.2, 0.2, 0.2}, p));
}

TEST_CASE("dbm: blend is permutation-equivariant and stays in the hull", "[dbm][property]") {
  std::mt19937_64 rng(21);
  auto base = palette_for(5);
  for (int trial = 0; trial < 1000; ++trial) {
    auto prob = random_distribution(rng, 5);
    std::array<std::size_t, 5> perm{0, 1, 2, 3, 4};
    std::shuffle(perm.begin(), perm.end(), rng);
    Palette pp{"perm", {}};
    std::vector<double> q;
    for (auto i : perm) {
      pp.colors.push_back(base.colors[i]);
      q.push_back(prob[i]);
    }
    const auto a = blend_color(prob, base);
    CHECK(a == blend_color(q, pp));
    for (std::size_t ch = 0; ch < 3; ++ch) {
      int lo = 255, hi = 0;
      for (auto c : base.colors) lo = std::min<int>(lo, c[ch]), hi = std::max<int>(hi, c[ch]);
      CHECK(a[ch] >= lo);
      CHECK(a[ch] <= hi);
    }
  }
}

TEST_CASE("dbm: argmax is stable under rescaling before renormalization", "[dbm][property]") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> k(0.01, 100);
  for (int trial = 0; trial < 500; ++trial) {
    auto prob = random_distribution(rng, 5);
    const double s = k(rng);
    std::vector<double> scaled = prob;
    double sum = 0;
    for (auto& v : scaled) sum += (v *= s);
    for (auto& v : scaled) v /= sum;
    CHECK(argmax<double>(scaled) == argmax<double>(prob));
  }
}

TEST_CASE("dbm: palette beyond five classes cycles a fixed list", "[dbm]") {
  auto p = palette_for(19);
  CHECK(p.colors.size() == 19);
  CHECK(p.colors[5] == parse_hex(kExtraCycle[0]));
  CHECK(p.colors[17] == parse_hex(kExtraCycle[0]));
  CHECK(to_hex(parse_hex("#A6CEE3")) == "#a6cee3");
  CHECK_THROWS_AS(parse_hex("a6cee3"), Error);
}

TEST_CASE("dbm: series map, direct mode", "[dbm]") {
  const auto& f = fixture();
  const auto& m = small_trained_model();
  DbmInputs in{&m, &f.series_pm};
  DbmOptions opt;
  opt.resolution = 24;
  auto d = compute_dbm(Space::Series, in, opt);
  check_invariants(d);
  CHECK(d.model_checksum == model_checksum(m));
  CHECK(d.projection_checksum == projection_checksum(f.series_pm));

  opt.workers = 3;
  auto again = compute_dbm(Space::Series, in, opt);
  for (std::size_t i = 0; i < d.cells.size(); ++i) CHECK(again.cells[i].probabilities == d.cells[i].probabilities);

  // Cells holding a projected train point mostly agree with the model on that point.
  std::size_t agree = 0, total = 0;
  std::vector<std::vector<std::size_t>> members(d.cells.size());
  auto pts = embed_all(f.series_pm, f.series);
  for (const auto& p : pts) members[*cell_of(d.extent, d.resolution, p.x, p.y)].push_back(p.sample_id);
  for (std::size_t c = 0; c < members.size(); ++c) {
    for (auto id : members[c]) {
      ++total;
      agree += d.cells[c].argmax_class == predict<float>(m, f.ds.train[id].values).predicted_class;
    }
  }
  INFO(agree << "/" << total);
  CHECK(static_cast<double>(agree) >= 0.7 * static_cast<double>(total));
}

TEST_CASE("dbm: mode support", "[dbm]") {
  const auto& f = fixture();
  const auto& m = small_trained_model();
  DbmOptions opt;
  opt.resolution = 4;
  opt.mode = DbmMode::Head;
  try {
    compute_dbm(Space::Series, {&m, &f.series_pm}, opt);
    FAIL("expected ModeUnsupported");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::ModeUnsupported);
  }
  opt.mode = DbmMode::Direct;
  CHECK_THROWS_AS(compute_dbm(Space::Attributions, {&m, &f.series_pm}, opt), Error);
  CHECK(default_mode(Space::Activations) == DbmMode::Head);
  CHECK(default_resolution(Space::Attributions) == 32);
  CHECK_FALSE(parse_dbm_mode("fast").has_value());
}

TEST_CASE("dbm: activation map head vs synthesis", "[dbm]") {
  const auto& f = fixture();
  const auto& m = small_trained_model();
  DbmInputs in{&m, &f.acts_pm, &f.series, &f.acts};
  DbmOptions opt;
  opt.resolution = 6;
  opt.mode = DbmMode::Head;
  auto head = compute_dbm(Space::Activations, in, opt);
  check_invariants(head);
  opt.mode = DbmMode::Synthesis;
  opt.synthesis.max_steps = 60;
  auto syn = compute_dbm(Space::Activations, in, opt);
  check_invariants(syn);
  CHECK(syn.stats.synthesized_cells == 36);
  std::size_t agree = 0;
  for (std::size_t i = 0; i < 36; ++i) agree += head.cells[i].argmax_class == syn.cells[i].argmax_class;
  INFO(agree << "/36");
  CHECK(agree >= 25);

  auto syn2 = compute_dbm(Space::Activations, in, opt);
  for (std::size_t i = 0; i < 36; ++i) CHECK(syn2.cells[i].probabilities == syn.cells[i].probabilities);

  opt.budget_seconds = 1e-9;
  try {
    compute_dbm(Space::Activations, in, opt);
    FAIL("expected BudgetExceeded");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::BudgetExceeded);
  }
}

TEST_CASE("dbm: cache round trip", "[dbm]") {
  const auto& f = fixture();
  const auto& m = small_trained_model();
  DbmOptions opt;
  opt.resolution = 8;
  opt.seed = 42;
  auto d = compute_dbm(Space::Series, {&m, &f.series_pm}, opt);
  TempDir dir("dbm");
  const auto path = dbm_cache_path(dir.path(), Space::Series, 8, DbmMode::Direct);
  CHECK(path.filename() == "dbm_series_8_direct.json");
  save_dbm(d, path);
  auto back = load_dbm(path);
  CHECK(key_of(back) == key_of(d));
  for (std::size_t i = 0; i < d.cells.size(); ++i) {
    CHECK(back.cells[i].probabilities == d.cells[i].probabilities);
    CHECK(back.cells[i].color == d.cells[i].color);
  }
  CHECK(export_raster(back, RasterFormat::Png) == export_raster(d, RasterFormat::Png));
  CHECK(find_cached_dbm(dir.path(), key_of(d)).has_value());
  auto other = key_of(d);
  other.seed = 43;
  CHECK_FALSE(find_cached_dbm(dir.path(), other).has_value());
  other = key_of(d);
  other.resolution = 16;
  CHECK_FALSE(find_cached_dbm(dir.path(), other).has_value());
}

TEST_CASE("raster: PPM framing and orientation", "[raster]") {
  auto d = two_by_two();
  auto ppm = export_raster(d, "ppm");
  const std::string header = "P6\n2 2\n255\n";
  REQUIRE(ppm.size() == header.size() + 12);
  CHECK(ppm.substr(0, header.size()) == header);
  // First pixel is the top-left cell: row 1 (high y), column 0.
  const auto top_left = d.cells[2].color;
  CHECK(static_cast<std::uint8_t>(ppm[header.size()]) == top_left.r);
  CHECK(static_cast<std::uint8_t>(ppm[header.size() + 2]) == top_left.b);
  const auto bottom_right = d.cells[1].color;
  CHECK(static_cast<std::uint8_t>(ppm[header.size() + 9]) == bottom_right.r);
  CHECK(export_raster(d, "ppm") == ppm);
}

TEST_CASE("raster: PNG container", "[raster]") {
  auto d = two_by_two();
  auto png = export_raster(d, RasterFormat::Png);
  CHECK(png.substr(0, 8) == std::string("\x89PNG\r\n\x1a\n", 8));
  CHECK(png.substr(12, 4) == "IHDR");
  CHECK(png.substr(png.size() - 8, 4) == "IEND");
  CHECK(static_cast<unsigned char>(png[19]) == 2);  // width, low byte
}

TEST_CASE("raster: json grid round trip", "[raster]") {
  auto d = two_by_two();
  auto j = nlohmann::json::parse(export_raster(d, RasterFormat::JsonGrid));
  CHECK(j["resolution"] == 2);
  CHECK(j["provenance"]["model_checksum"] == hex64(0xabc));
  REQUIRE(j["cells"].size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(j["cells"][i]["probabilities"].get<std::vector<float>>() == d.cells[i].probabilities);
    CHECK(j["cells"][i]["color"] == to_hex(d.cells[i].color));
    CHECK(j["cells"][i]["argmax"] == d.cells[i].argmax_class);
  }
  CHECK(j["cells"][3]["argmax"] == 0);  // tie goes to the smaller index
  try {
    export_raster(d, "bmp");
    FAIL("expected UnsupportedFormat");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::UnsupportedFormat);
  }
  CHECK(content_type(RasterFormat::Png) == "image/png");
}

TEST_CASE("parallel: every index once, result independent of workers", "[parallel]") {
  for (std::size_t w : {1u, 2u, 5u, 64u}) {
    std::vector<int> hits(1000, 0);
    std::vector<double> out(1000);
    parallel_for(1000, [&](std::size_t i) {
      ++hits[i];
      out[i] = std::sin(static_cast<double>(i));
    }, w);
    CHECK(std::all_of(hits.begin(), hits.end(), [](int h) { return h == 1; }));
    CHECK(out[999] == std::sin(999.0));
  }
  parallel_for(0, [](std::size_t) { FAIL("no work expected"); }, 4);
  CHECK_THROWS_AS(parallel_for(100, [](std::size_t i) {
    if (i == 37) throw std::runtime_error("boom");
  }, 4), std::runtime_error);
}
