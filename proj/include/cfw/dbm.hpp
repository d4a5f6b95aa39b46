#pragma once

// Decision boundary maps: a G x G grid over a projection extent, each cell inverse-projected,
// classified, and colored by blending class colors with the predicted probabilities.

#include <array>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "cfw/attribution.hpp"
#include "cfw/container.hpp"
#include "cfw/parallel.hpp"
#include "cfw/projection.hpp"
#include "cfw/synthesis.hpp"

namespace cfw {

struct Rgb {
  std::uint8_t r = 0, g = 0, b = 0;
  bool operator==(const Rgb&) const = default;
  std::uint8_t operator[](std::size_t c) const { return c == 0 ? r : c == 1 ? g : b; }
};

inline std::string to_hex(Rgb c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c.r, c.g, c.b);
  return buf;
}

inline Rgb parse_hex(std::string_view s) {
  if (s.size() != 7 || s[0] != '#') fail(ErrorKind::InvalidConfig, "bad color '" + std::string(s) + "'");
  auto nib = [&](char ch) -> int {
    if (ch >= '0' && ch <= '9') return ch - '0';
    if (ch >= 'a' && ch <= 'f') return ch - 'a' + 10;
    if (ch >= 'A' && ch <= 'F') return ch - 'A' + 10;
    fail(ErrorKind::InvalidConfig, "bad color '" + std::string(s) + "'");
  };
  auto byte = [&](std::size_t i) { return static_cast<std::uint8_t>(nib(s[i]) * 16 + nib(s[i + 1])); };
  return {byte(1), byte(3), byte(5)};
}

struct Palette {
  std::string name;
  std::vector<Rgb> colors;
};

inline constexpr std::array<const char*, 5> kDark2_5{"#1b9e77", "#d95f02", "#7570b3", "#e7298a", "#e6ab02"};
// Classes beyond the fifth cycle through ColorBrewer "Paired".
inline constexpr std::array<const char*, 12> kExtraCycle{"#a6cee3", "#1f78b4", "#b2df8a", "#33a02c", "#fb9a99", "#e31a1c",
                                                         "#fdbf6f", "#ff7f00", "#cab2d6", "#6a3d9a", "#ffff99", "#b15928"};

inline Palette palette_for(std::size_t num_classes) {
  Palette p;
  p.name = num_classes <= kDark2_5.size() ? "dark2-5" : "dark2-5+paired12";
  for (std::size_t c = 0; c < num_classes; ++c)
    p.colors.push_back(parse_hex(c < kDark2_5.size() ? kDark2_5[c] : kExtraCycle[(c - kDark2_5.size()) % kExtraCycle.size()]));
  return p;
}

inline constexpr double kDistributionTol = 1e-6;

/// round(sum_i p_i * color_i) per channel, half up, clamped to the palette's channel range.
template <class P>
Rgb blend_color(std::span<const P> probabilities, const Palette& palette) {
  if (probabilities.size() != palette.colors.size())
    fail(ErrorKind::InvalidDistribution, std::to_string(probabilities.size()) + " probabilities for " +
                                             std::to_string(palette.colors.size()) + " palette colors");
  double sum = 0;
  for (P p : probabilities) {
    if (!std::isfinite(static_cast<double>(p)) || p < 0) fail(ErrorKind::InvalidDistribution, "negative or non-finite probability");
    sum += static_cast<double>(p);
  }
  if (std::abs(sum - 1.0) > kDistributionTol) fail(ErrorKind::InvalidDistribution, "probabilities sum to " + std::to_string(sum));
  std::array<std::uint8_t, 3> out{};
  for (std::size_t ch = 0; ch < 3; ++ch) {
    double acc = 0;
    int lo = 255, hi = 0;
    for (std::size_t i = 0; i < probabilities.size(); ++i) {
      const int v = palette.colors[i][ch];
      acc += static_cast<double>(probabilities[i]) * v;
      lo = std::min(lo, v);
      hi = std::max(hi, v);
    }
    out[ch] = static_cast<std::uint8_t>(std::clamp(static_cast<int>(std::floor(acc + 0.5)), lo, hi));
  }
  return {out[0], out[1], out[2]};
}

inline Rgb blend_color(std::span<const double> p, const Palette& palette) { return blend_color<double>(p, palette); }
inline Rgb blend_color(const std::vector<double>& p, const Palette& palette) { return blend_color<double>(p, palette); }
inline Rgb blend_color(const std::vector<float>& p, const Palette& palette) { return blend_color<float>(p, palette); }

enum class DbmMode { Direct, Head, Synthesis };

inline std::string_view to_string(DbmMode m) {
  switch (m) {
    case DbmMode::Direct: return "direct";
    case DbmMode::Head: return "head";
    case DbmMode::Synthesis: return "synthesis";
  }
  return "direct";
}
inline std::optional<DbmMode> parse_dbm_mode(std::string_view s) {
  if (s == "direct") return DbmMode::Direct;
  if (s == "head") return DbmMode::Head;
  if (s == "synthesis") return DbmMode::Synthesis;
  return std::nullopt;
}

inline DbmMode default_mode(Space s) {
  switch (s) {
    case Space::Series: return DbmMode::Direct;
    case Space::Activations: return DbmMode::Head;
    case Space::Attributions: return DbmMode::Synthesis;
  }
  return DbmMode::Direct;
}
inline std::size_t default_resolution(Space s) { return s == Space::Attributions ? 32 : 64; }

inline bool mode_supported(Space s, DbmMode m) {
  switch (s) {
    case Space::Series: return m == DbmMode::Direct;
    case Space::Activations: return m == DbmMode::Head || m == DbmMode::Synthesis;
    case Space::Attributions: return m == DbmMode::Synthesis;
  }
  return false;
}

/// Row-major cell centers: index = row * G + col, x increasing along a row, rows from y_min up.
inline std::vector<std::array<double, 2>> grid_points(const Extent& e, std::size_t G) {
  if (!e.valid()) fail(ErrorKind::InvalidExtent, "extent is empty or non-finite");
  if (G < 2) fail(ErrorKind::InvalidExtent, "grid resolution must be >= 2, got " + std::to_string(G));
  const double dx = (e.x_max - e.x_min) / static_cast<double>(G), dy = (e.y_max - e.y_min) / static_cast<double>(G);
  std::vector<std::array<double, 2>> pts;
  pts.reserve(G * G);
  for (std::size_t row = 0; row < G; ++row)
    for (std::size_t col = 0; col < G; ++col)
      pts.push_back({e.x_min + (static_cast<double>(col) + 0.5) * dx, e.y_min + (static_cast<double>(row) + 0.5) * dy});
  return pts;
}

/// Cell index containing (x, y), or nullopt outside the extent.
inline std::optional<std::size_t> cell_of(const Extent& e, std::size_t G, double x, double y) {
  if (!e.contains(x, y)) return std::nullopt;
  auto bin = [G](double v, double lo, double hi) {
    auto i = static_cast<std::size_t>(std::floor((v - lo) / (hi - lo) * static_cast<double>(G)));
    return std::min(i, G - 1);
  };
  return bin(y, e.y_min, e.y_max) * G + bin(x, e.x_min, e.x_max);
}

struct DbmCell {
  std::vector<float> probabilities;
  Rgb color;
  std::size_t argmax_class = 0;
};

struct DbmStats {
  std::size_t synthesized_cells = 0;
  std::size_t budget_overruns = 0;     // cells that kept a partial synthesis result
  std::size_t reduced_cells = 0;       // synthesis cells with final_loss <= initial_loss / 2
  double seconds = 0;  // not persisted
};

struct DecisionBoundaryMap {
  Space space = Space::Series;
  DbmMode mode = DbmMode::Direct;
  std::size_t resolution = 0;
  std::size_t num_classes = 0;
  Extent extent;
  std::vector<DbmCell> cells;  // row-major, see grid_points
  Palette palette;
  std::uint64_t model_checksum = 0;
  std::uint64_t projection_checksum = 0;
  std::uint64_t seed = 0;
  std::uint64_t settings = 0;  // digest of mode-specific settings (synthesis config)
  DbmStats stats;
};

/// Populates color and argmax from probabilities.
inline DbmCell make_cell(std::vector<float> probabilities, const Palette& palette) {
  DbmCell c;
  c.color = blend_color(probabilities, palette);
  c.argmax_class = argmax<float>(probabilities);
  c.probabilities = std::move(probabilities);
  return c;
}

struct DbmInputs {
  const ClassifierModel<float>* model = nullptr;
  const ProjectionModel* projection = nullptr;
  // Nearest-neighbor banks for synthesis modes (train split, rows in id order).
  const Tensor<float>* bank_series = nullptr;
  const Tensor<float>* bank_activations = nullptr;
  const Tensor<float>* bank_attributions = nullptr;
  const std::vector<std::size_t>* attribution_classes = nullptr;
  AttributionMethod method = AttributionMethod::DeepLiftRescale;
};

struct DbmOptions {
  std::size_t resolution = 64;
  DbmMode mode = DbmMode::Direct;
  SynthesisConfig synthesis;
  std::uint64_t seed = 0;
  std::size_t workers = 0;
  double budget_seconds = 0;  // whole map; 0 = unlimited
  std::uint64_t settings = 0;  // recorded in the cache key only
};

inline DecisionBoundaryMap compute_dbm(Space space, const DbmInputs& in, const DbmOptions& opt) {
  if (!in.model || !in.projection) fail(ErrorKind::InvalidConfig, "compute_dbm needs a model and a projection");
  if (!mode_supported(space, opt.mode))
    fail(ErrorKind::ModeUnsupported, "mode " + std::string(to_string(opt.mode)) + " is not available for space " +
                                         std::string(to_string(space)));
  const auto& model = *in.model;
  const auto& pm = *in.projection;
  if (pm.space != space) fail(ErrorKind::InvalidConfig, "projection was fitted on a different space");
  const auto start = std::chrono::steady_clock::now();

  DecisionBoundaryMap dbm;
  dbm.space = space;
  dbm.mode = opt.mode;
  dbm.resolution = opt.resolution;
  dbm.num_classes = model.config.num_classes;
  dbm.extent = pm.extent;
  dbm.palette = palette_for(dbm.num_classes);
  dbm.model_checksum = model_checksum(model);
  dbm.projection_checksum = projection_checksum(pm);
  dbm.seed = opt.seed;
  dbm.settings = opt.settings;

  const auto pts = grid_points(pm.extent, opt.resolution);
  const std::size_t M = pts.size(), C = dbm.num_classes;
  Tensor<float> coords({M, 2});
  for (std::size_t i = 0; i < M; ++i) {
    coords[2 * i] = static_cast<float>(pts[i][0]);
    coords[2 * i + 1] = static_cast<float>(pts[i][1]);
  }
  const auto decoded = decode(pm, coords);
  const std::size_t D = decoded.dim(1);
  std::vector<std::vector<float>> probs(M);

  auto from_logits = [&](const Tensor<float>& logits) {
    for (std::size_t i = 0; i < M; ++i) {
      auto p = ad::softmax_row<float>(std::span<const float>(logits.ptr() + i * C, C));
      probs[i].assign(p.begin(), p.end());
    }
  };

  if (opt.mode == DbmMode::Direct) {
    from_logits(forward(model, decoded));
  } else if (opt.mode == DbmMode::Head) {
    from_logits(head_logits(model, decoded));
  } else {
    const bool acts = space == Space::Activations;
    SynthesisBank bank{acts ? in.bank_activations : in.bank_attributions, in.bank_series,
                       acts ? nullptr : in.attribution_classes};
    std::vector<char> overrun(M, 0), reduced(M, 0);
    std::atomic<bool> map_budget_hit{false};
    parallel_for(
        M,
        [&](std::size_t i) {
          if (opt.budget_seconds > 0 &&
              std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count() >= opt.budget_seconds) {
            map_budget_hit = true;
            return;
          }
          SynthesisConfig cfg = opt.synthesis;
          cfg.seed = derive_seed(opt.seed, i);
          std::span<const float> target(decoded.ptr() + i * D, D);
          SynthesisResult r;
          try {
            r = acts ? match_activations(model, target, cfg, bank) : match_attributions(model, in.method, target, cfg, bank);
          } catch (const BudgetExceededError& e) {
            r = e.partial();
            overrun[i] = 1;
          }
          reduced[i] = r.final_loss <= 0.5 * r.initial_loss;
          probs[i].assign(r.prediction.probabilities.begin(), r.prediction.probabilities.end());
        },
        opt.workers);
    if (map_budget_hit)
      fail(ErrorKind::BudgetExceeded, "decision map synthesis exceeded " + std::to_string(opt.budget_seconds) + " s");
    dbm.stats.synthesized_cells = M;
    for (std::size_t i = 0; i < M; ++i) {
      dbm.stats.budget_overruns += overrun[i];
      dbm.stats.reduced_cells += reduced[i];
    }
  }
  dbm.cells.reserve(M);
  for (auto& p : probs) dbm.cells.push_back(make_cell(std::move(p), dbm.palette));
  dbm.stats.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return dbm;
}

// ---------------------------------------------------------------------------------------------
// on-disk cache

struct DbmKey {
  Space space = Space::Series;
  std::size_t resolution = 0;
  DbmMode mode = DbmMode::Direct;
  std::uint64_t model_checksum = 0;
  std::uint64_t projection_checksum = 0;
  std::uint64_t seed = 0;
  std::uint64_t settings = 0;

  bool operator==(const DbmKey&) const = default;
};

inline DbmKey key_of(const DecisionBoundaryMap& d) {
  return {d.space, d.resolution, d.mode, d.model_checksum, d.projection_checksum, d.seed, d.settings};
}

inline nlohmann::json to_json(const DbmKey& k) {
  return {{"space", to_string(k.space)},
          {"resolution", k.resolution},
          {"mode", to_string(k.mode)},
          {"model_checksum", hex64(k.model_checksum)},
          {"projection_checksum", hex64(k.projection_checksum)},
          {"seed", k.seed},
          {"settings", hex64(k.settings)}};
}

inline std::filesystem::path dbm_cache_path(const std::filesystem::path& dir, Space s, std::size_t G, DbmMode m) {
  return dir / ("dbm_" + std::string(to_string(s)) + "_" + std::to_string(G) + "_" + std::string(to_string(m)) + ".json");
}

inline void save_dbm(const DecisionBoundaryMap& d, const std::filesystem::path& manifest) {
  nlohmann::json meta;
  meta["key"] = to_json(key_of(d));
  meta["num_classes"] = d.num_classes;
  meta["extent"] = to_json(d.extent);
  meta["palette"] = d.palette.name;
  meta["stats"] = {{"synthesized_cells", d.stats.synthesized_cells},
                   {"budget_overruns", d.stats.budget_overruns},
                   {"reduced_cells", d.stats.reduced_cells}};
  Tensor<float> p({d.cells.size(), d.num_classes});
  for (std::size_t i = 0; i < d.cells.size(); ++i)
    std::copy(d.cells[i].probabilities.begin(), d.cells[i].probabilities.end(), p.ptr() + i * d.num_classes);
  write_artifact(manifest, "dbm", meta, {{"probabilities", std::move(p)}});
}

inline DecisionBoundaryMap load_dbm(const std::filesystem::path& manifest) {
  auto a = read_artifact(manifest, "dbm");
  DecisionBoundaryMap d;
  try {
    const auto& k = a.meta.at("key");
    auto space = parse_space(k.at("space").get<std::string>());
    auto mode = parse_dbm_mode(k.at("mode").get<std::string>());
    if (!space || !mode) fail(ErrorKind::CorruptFile, manifest.string() + ": bad space or mode");
    d.space = *space;
    d.mode = *mode;
    d.resolution = k.at("resolution").get<std::size_t>();
    d.model_checksum = std::stoull(k.at("model_checksum").get<std::string>(), nullptr, 16);
    d.projection_checksum = std::stoull(k.at("projection_checksum").get<std::string>(), nullptr, 16);
    d.seed = k.at("seed").get<std::uint64_t>();
    d.settings = std::stoull(k.value("settings", std::string("0")), nullptr, 16);
    d.num_classes = a.meta.at("num_classes").get<std::size_t>();
    d.extent = extent_from_json(a.meta.at("extent"));
    const auto& st = a.meta.at("stats");
    d.stats = {st.at("synthesized_cells").get<std::size_t>(), st.at("budget_overruns").get<std::size_t>(),
               st.at("reduced_cells").get<std::size_t>(), 0.0};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptFile, manifest.string() + ": " + e.what());
  }
  const auto& p = a.tensor("probabilities");
  if (p.rank() != 2 || p.dim(0) != d.resolution * d.resolution || p.dim(1) != d.num_classes)
    fail(ErrorKind::CorruptFile, manifest.string() + ": probability grid has shape " + shape_string(p.shape));
  d.palette = palette_for(d.num_classes);
  d.cells.reserve(p.dim(0));
  for (std::size_t i = 0; i < p.dim(0); ++i)
    d.cells.push_back(make_cell(std::vector<float>(p.ptr() + i * d.num_classes, p.ptr() + (i + 1) * d.num_classes), d.palette));
  return d;
}

/// Cached map for `key`, if present and matching.
inline std::optional<DecisionBoundaryMap> find_cached_dbm(const std::filesystem::path& dir, const DbmKey& key) {
  const auto path = dbm_cache_path(dir, key.space, key.resolution, key.mode);
  if (!std::filesystem::exists(path)) return std::nullopt;
  auto d = load_dbm(path);
  if (!(key_of(d) == key)) return std::nullopt;
  return d;
}

}  // namespace cfw
