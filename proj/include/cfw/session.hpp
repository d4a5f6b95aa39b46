#pragma once

// Immutable serving state loaded from an artifact directory, plus the counterfactual operations
// the HTTP layer exposes. Nothing here mutates after load() except the memo caches, which are
// guarded and only ever filled with deterministic values.

#include <chrono>
#include <ctime>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "cfw/config.hpp"

namespace cfw {

// ---------------------------------------------------------------------------------------------
// artifact layout

struct ArtifactPaths {
  std::filesystem::path dir;

  std::filesystem::path model() const { return dir / "model.json"; }
  std::filesystem::path train_report() const { return dir / "train_report.json"; }
  std::filesystem::path activations() const { return dir / "activations.json"; }
  std::filesystem::path attributions() const { return dir / "attributions.json"; }
  std::filesystem::path projection(Space s) const { return dir / ("projection_" + std::string(to_string(s)) + ".json"); }
  std::filesystem::path dbm(Space s, std::size_t G, DbmMode m) const { return dbm_cache_path(dir, s, G, m); }
  std::filesystem::path demo() const { return dir / "demo"; }
};

/// Settings digest stored in a decision map's cache key.
inline std::uint64_t dbm_settings(const PipelineConfig& cfg, DbmMode mode) {
  if (mode != DbmMode::Synthesis) return 0;
  auto s = cfg.synthesis;
  s.max_steps = cfg.dbm_synthesis_steps;
  return json_digest({{"synthesis", to_json(s)}, {"method", to_string(cfg.attribution_method)}});
}

inline DbmKey expected_dbm_key(const PipelineConfig& cfg, Space s, std::size_t G, DbmMode m, std::uint64_t model_ck,
                               std::uint64_t proj_ck) {
  return {s, G, m, model_ck, proj_ck, stage_seed(cfg.seed, Stage::Dbm), dbm_settings(cfg, m)};
}

// ---------------------------------------------------------------------------------------------
// results

inline nlohmann::json to_json(const PredictionRecord& p, const Palette& palette) {
  nlohmann::json j{{"logits", p.logits},
                   {"probabilities", p.probabilities},
                   {"predicted_class", p.predicted_class},
                   {"ground_truth", nullptr},
                   {"color", to_hex(blend_color(p.probabilities, palette))}};
  if (p.ground_truth) j["ground_truth"] = *p.ground_truth;
  return j;
}

inline nlohmann::json synthesis_meta(const SynthesisResult& r) {
  nlohmann::json j{{"init_source", r.init_source},
                   {"init_id", nullptr},
                   {"initial_loss", r.initial_loss},
                   {"final_loss", r.final_loss},
                   {"loss_curve", r.loss_curve},
                   {"steps", r.steps},
                   {"evaluations", r.evaluations},
                   {"converged", r.converged},
                   {"budget_exhausted", r.budget_exhausted}};
  if (r.init_id) j["init_id"] = *r.init_id;
  return j;
}

struct Point2 {
  double x = 0, y = 0;
};

struct Placement {
  std::array<Point2, 3> xy;  // indexed by Space
  std::vector<float> activation;
  AttributionVector attribution;
};

struct InverseOutcome {
  Space space = Space::Series;
  double x = 0, y = 0;
  std::vector<float> series;
  PredictionRecord prediction;
  Placement placement;
  std::optional<SynthesisResult> synthesis;
  bool extrapolated = false;
};

struct DragOrigin {
  std::optional<std::size_t> sample_id;
  std::optional<Point2> point;
};

struct CounterfactualTrace {
  Space space = Space::Series;
  DragOrigin origin;
  std::vector<InverseOutcome> waypoints;
  bool class_changed = false;
  bool warm_start = true;
  std::string created_at;
};

/// Raised when a synthesis-bearing request runs out of time; carries what was finished.
class RequestTimeout : public Error {
 public:
  RequestTimeout(const std::string& what, nlohmann::json partial)
      : Error(ErrorKind::BudgetExceeded, what), partial_(std::move(partial)) {}
  const nlohmann::json& partial() const noexcept { return partial_; }

 private:
  nlohmann::json partial_;
};

inline std::string utc_now_iso8601() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// ---------------------------------------------------------------------------------------------

class Session {
 public:
  /// Loads whatever is present. Missing or inconsistent artifacts leave the session incomplete
  /// (status() says why); only an unreadable dataset throws.
  static std::shared_ptr<Session> load(const PipelineConfig& cfg) {
    auto s = std::shared_ptr<Session>(new Session(cfg));
    s->load_all();
    return s;
  }

  bool complete() const { return problems_.empty(); }
  const std::vector<std::string>& problems() const { return problems_; }

  const PipelineConfig& config() const { return cfg_; }
  const Dataset& dataset() const { return ds_; }
  const ClassifierModel<float>& model() const { return *model_; }
  std::uint64_t model_checksum_value() const { return model_ck_; }
  std::uint64_t dataset_checksum_value() const { return ds_ck_; }
  const ProjectionModel& projection(Space s) const { return *proj_[idx(s)]; }
  std::uint64_t projection_checksum_value(Space s) const { return proj_ck_[idx(s)]; }
  const Palette& palette() const { return palette_; }
  const PredictionRecord& train_prediction(std::size_t id) const { return train_pred_.at(id); }
  const std::vector<ProjectedPoint>& train_points(Space s) const { return points_[idx(s)]; }
  const nlohmann::json& train_report() const { return report_; }
  const Tensor<float>& bank_series() const { return bank_series_; }
  const Tensor<float>& bank_activations() const { return bank_acts_; }
  const Tensor<float>& bank_attributions() const { return bank_attr_; }
  const std::vector<std::size_t>& bank_attribution_classes() const { return bank_attr_classes_; }

  // ---- derived quantities ------------------------------------------------------------------

  std::size_t attribution_class_for(const std::vector<float>& series, std::optional<std::size_t> label) const {
    if (cfg_.attribution_target == TargetRule::GroundTruth && label) return *label;
    return predict<float>(*model_, series).predicted_class;
  }

  /// Coordinates of an arbitrary series in all three spaces, with its activation and attribution.
  Placement place(const std::vector<float>& series, std::optional<std::size_t> label = {}) const {
    Placement p;
    auto put = [&](Space s, std::span<const float> v) {
      auto [x, y] = cfw::project(projection(s), v);
      p.xy[idx(s)] = {x, y};
    };
    put(Space::Series, series);
    p.activation = activations<float>(*model_, series);
    put(Space::Activations, p.activation);
    const std::size_t c = attribution_class_for(series, label);
    p.attribution = cfg_.attribution_method == AttributionMethod::DeepLiftRescale
                        ? deeplift_rescale<float>(*model_, series, {}, c)
                        : gradient_x_input<float>(*model_, series, c);
    put(Space::Attributions, p.attribution.values);
    return p;
  }

  /// Synthesis settings for one request; the seed depends only on the session seed and inputs.
  SynthesisConfig synthesis_config(Space space, double x, double y, const std::vector<float>* warm) const {
    SynthesisConfig c = cfg_.synthesis;
    const double key[3] = {static_cast<double>(idx(space)), x, y};
    c.seed = derive_seed(stage_seed(cfg_.seed, Stage::Synthesis), fnv1a(key, sizeof key));
    if (warm) {
      c.init = InitKind::Provided;
      c.init_series = *warm;
    }
    return c;
  }

  /// Inverse projection of (x, y) in `space`. Activation and attribution spaces synthesize a
  /// series; `warm` replaces the nearest-neighbor initialization. Throws RequestTimeout.
  InverseOutcome inverse(Space space, double x, double y, const std::vector<float>* warm = nullptr) const {
    require_complete();
    if (!std::isfinite(x) || !std::isfinite(y)) fail(ErrorKind::InvalidConfig, "coordinates must be finite");
    InverseOutcome out;
    out.space = space;
    out.x = x;
    out.y = y;
    const auto inv = inverse_project(projection(space), x, y);
    out.extrapolated = inv.extrapolated;
    if (space == Space::Series) {
      out.series = inv.values;
      finish(out);
      return out;
    }
    const auto cfg = synthesis_config(space, x, y, warm);
    try {
      auto r = space == Space::Activations
                   ? match_activations(*model_, inv.values, cfg, {&bank_acts_, &bank_series_, nullptr})
                   : match_attributions(*model_, cfg_.attribution_method, inv.values, cfg,
                                        {&bank_attr_, &bank_series_, &bank_attr_classes_});
      out.series = r.series;
      out.synthesis = std::move(r);
      if (out.synthesis->budget_exhausted) {
        finish(out);
        throw RequestTimeout("synthesis exceeded " + std::to_string(cfg.budget_seconds) + " s", to_json(out));
      }
    } catch (const BudgetExceededError& e) {
      out.series = e.partial().series;
      out.synthesis = e.partial();
      finish(out);
      throw RequestTimeout(e.what(), to_json(out));
    }
    finish(out);
    return out;
  }

  CounterfactualTrace drag(Space space, const DragOrigin& origin, const std::vector<Point2>& path,
                           std::optional<bool> warm_start = {}) const {
    require_complete();
    if (path.empty()) fail(ErrorKind::InvalidConfig, "path must not be empty");
    if (path.size() > cfg_.server.drag_cap)
      fail(ErrorKind::InvalidConfig, "path has " + std::to_string(path.size()) + " vertices; the cap is " +
                                         std::to_string(cfg_.server.drag_cap));
    if (origin.sample_id && *origin.sample_id >= ds_.train.size())
      fail(ErrorKind::InvalidConfig, "origin sample " + std::to_string(*origin.sample_id) + " does not exist");
    for (const auto& p : path)
      if (!std::isfinite(p.x) || !std::isfinite(p.y)) fail(ErrorKind::InvalidConfig, "path coordinates must be finite");

    CounterfactualTrace tr;
    tr.space = space;
    tr.origin = origin;
    tr.warm_start = warm_start.value_or(cfg_.server.warm_start);
    tr.created_at = utc_now_iso8601();
    const auto start = std::chrono::steady_clock::now();
    const double budget = cfg_.server.request_budget_seconds;
    for (std::size_t i = 0; i < path.size(); ++i) {
      const bool warm = tr.warm_start && i > 0 && space != Space::Series;
      try {
        tr.waypoints.push_back(inverse(space, path[i].x, path[i].y, warm ? &tr.waypoints.back().series : nullptr));
      } catch (const RequestTimeout& e) {
        finalize(tr);
        throw RequestTimeout(e.what(), to_json(tr));
      }
      const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (budget > 0 && elapsed >= budget && i + 1 < path.size()) {
        finalize(tr);
        throw RequestTimeout("drag exceeded " + std::to_string(budget) + " s after " + std::to_string(i + 1) +
                                 " waypoints",
                             to_json(tr));
      }
    }
    finalize(tr);
    return tr;
  }

  // ---- decision maps -------------------------------------------------------------------------

  /// Cached or computed map; nullptr when a synthesis-mode map has not been precomputed.
  std::shared_ptr<const DecisionBoundaryMap> dbm(Space space, std::size_t G, DbmMode mode) const {
    require_complete();
    if (!mode_supported(space, mode))
      fail(ErrorKind::ModeUnsupported, "mode " + std::string(to_string(mode)) + " is not available for space " +
                                           std::string(to_string(space)));
    const auto key = expected_dbm_key(cfg_, space, G, mode, model_ck_, proj_ck_[idx(space)]);
    std::lock_guard lk(dbm_mu_);
    auto memo_key = std::make_tuple(idx(space), G, static_cast<int>(mode));
    if (auto it = dbm_memo_.find(memo_key); it != dbm_memo_.end()) return it->second;
    std::shared_ptr<const DecisionBoundaryMap> d;
    try {
      if (auto cached = find_cached_dbm(cfg_.artifacts, key)) d = std::make_shared<DecisionBoundaryMap>(std::move(*cached));
    } catch (const Error&) {
      d.reset();  // unreadable cache: fall through to recomputation
    }
    if (!d) {
      if (mode == DbmMode::Synthesis) return nullptr;
      d = std::make_shared<DecisionBoundaryMap>(compute(space, G, mode));
    }
    dbm_memo_[memo_key] = d;
    return d;
  }

  /// Fresh computation with the pipeline's settings (no cache lookup).
  DecisionBoundaryMap compute(Space space, std::size_t G, DbmMode mode) const {
    require_complete();
    DbmInputs in{model_.get(), &projection(space), &bank_series_, &bank_acts_, &bank_attr_, &bank_attr_classes_,
                 cfg_.attribution_method};
    DbmOptions opt;
    opt.resolution = G;
    opt.mode = mode;
    opt.synthesis = cfg_.synthesis;
    opt.synthesis.max_steps = cfg_.dbm_synthesis_steps;
    opt.seed = stage_seed(cfg_.seed, Stage::Dbm);
    opt.workers = cfg_.workers;
    opt.budget_seconds = cfg_.dbm_budget_seconds;
    opt.settings = dbm_settings(cfg_, mode);
    return compute_dbm(space, in, opt);
  }

  // ---- test split (lazy; only /api/points?split=test and /api/sample?split=test need it) ------

  struct TestView {
    std::vector<PredictionRecord> predictions;
    Tensor<float> activations, attributions;
    std::vector<std::size_t> attribution_classes;
    std::array<std::vector<ProjectedPoint>, 3> points;
  };

  const TestView& test_view() const {
    std::call_once(test_once_, [this] {
      auto v = std::make_unique<TestView>();
      const std::size_t T = ds_.series_length;
      auto xs = rows_to_tensor<float>(values_of(ds_.test), T);
      v->predictions = predict_batch(*model_, xs);
      for (std::size_t i = 0; i < ds_.test.size(); ++i) v->predictions[i].ground_truth = ds_.test[i].label;
      v->activations = activations_batch(*model_, xs);
      auto attr = attribute_dataset(*model_, ds_.test, cfg_.attribution_method, cfg_.attribution_target);
      v->attributions = std::move(attr.values);
      v->attribution_classes = std::move(attr.target_classes);
      v->points[idx(Space::Series)] = embed_all(projection(Space::Series), xs);
      v->points[idx(Space::Activations)] = embed_all(projection(Space::Activations), v->activations);
      v->points[idx(Space::Attributions)] = embed_all(projection(Space::Attributions), v->attributions);
      test_ = std::move(v);
    });
    return *test_;
  }

  // ---- serialization -----------------------------------------------------------------------

  nlohmann::json coords_json(const std::array<Point2, 3>& xy) const {
    nlohmann::json j = nlohmann::json::object();
    for (Space s : kAllSpaces) j[std::string(to_string(s))] = {{"x", xy[idx(s)].x}, {"y", xy[idx(s)].y}};
    return j;
  }

  nlohmann::json to_json(const InverseOutcome& o) const {
    nlohmann::json j{{"space", cfw::to_string(o.space)},
                     {"x", o.x},
                     {"y", o.y},
                     {"series", o.series},
                     {"prediction", cfw::to_json(o.prediction, palette_)},
                     {"coords", coords_json(o.placement.xy)},
                     {"extrapolated", o.extrapolated}};
    if (o.synthesis) j["synthesis_meta"] = synthesis_meta(*o.synthesis);
    return j;
  }

  nlohmann::json to_json(const CounterfactualTrace& t) const {
    nlohmann::json origin = nlohmann::json::object();
    if (t.origin.sample_id) origin["sample_id"] = *t.origin.sample_id;
    if (t.origin.point) origin["point"] = {{"x", t.origin.point->x}, {"y", t.origin.point->y}};
    nlohmann::json wps = nlohmann::json::array();
    for (const auto& w : t.waypoints) wps.push_back(to_json(w));
    return {{"space", cfw::to_string(t.space)}, {"origin", origin},         {"waypoints", wps},
            {"class_changed", t.class_changed},  {"warm_start", t.warm_start}, {"created_at", t.created_at}};
  }

  static std::size_t idx(Space s) { return static_cast<std::size_t>(s); }

 private:
  explicit Session(PipelineConfig cfg) : cfg_(std::move(cfg)), paths_{cfg_.artifacts} {}

  static std::vector<std::vector<float>> values_of(const std::vector<LabeledSeries>& rows) {
    std::vector<std::vector<float>> xs;
    xs.reserve(rows.size());
    for (const auto& r : rows) xs.push_back(r.values);
    return xs;
  }

  void require_complete() const {
    if (!complete()) fail(ErrorKind::StaleProvenance, "session incomplete: " + problems_.front());
  }

  void finish(InverseOutcome& o) const {
    o.prediction = predict<float>(*model_, o.series);
    o.placement = place(o.series);
  }

  static void finalize(CounterfactualTrace& t) {
    t.class_changed = !t.waypoints.empty() &&
                      t.waypoints.front().prediction.predicted_class != t.waypoints.back().prediction.predicted_class;
  }

  void load_all() {
    ds_ = load_dataset(cfg_.dataset);
    ds_ck_ = dataset_checksum(ds_);
    palette_ = palette_for(ds_.num_classes);
    auto problem = [&](std::string s) { problems_.push_back(std::move(s)); };

    if (!std::filesystem::exists(paths_.model())) {
      problem("no trained model in " + cfg_.artifacts.string());
      return;
    }
    try {
      model_ = std::make_unique<ClassifierModel<float>>(load_model(paths_.model()));
      model_ck_ = model_checksum(*model_);
      if (model_->config.input_length != ds_.series_length || model_->config.num_classes != ds_.num_classes) {
        problem("model shape does not match the dataset");
        return;
      }
      if (std::filesystem::exists(paths_.train_report())) {
        std::ifstream in(paths_.train_report());
        report_ = nlohmann::json::parse(in, nullptr, false);
        if (report_.is_discarded()) report_ = nlohmann::json::object();
      }
    } catch (const Error& e) {
      problem(e.what());
      return;
    }

    const std::size_t N = ds_.train.size();
    bank_series_ = rows_to_tensor<float>(values_of(ds_.train), ds_.series_length);
    train_pred_ = predict_batch(*model_, bank_series_);
    for (std::size_t i = 0; i < N; ++i) train_pred_[i].ground_truth = ds_.train[i].label;

    auto feature = [&](const std::filesystem::path& p, const char* what) -> std::optional<Artifact> {
      if (!std::filesystem::exists(p)) {
        problem(std::string(what) + " cache missing; run precompute");
        return std::nullopt;
      }
      try {
        auto a = read_artifact(p, "features");
        if (a.meta.value("model_checksum", "") != hex64(model_ck_) || a.meta.value("dataset_checksum", "") != hex64(ds_ck_)) {
          problem(std::string(what) + " cache is stale; rerun precompute --force");
          return std::nullopt;
        }
        return a;
      } catch (const Error& e) {
        problem(e.what());
        return std::nullopt;
      }
    };
    if (auto a = feature(paths_.activations(), "activation")) bank_acts_ = a->tensor("values");
    if (auto a = feature(paths_.attributions(), "attribution")) {
      if (a->meta.value("method", "") != to_string(cfg_.attribution_method) ||
          a->meta.value("target", "") != to_string(cfg_.attribution_target)) {
        problem("attribution cache was built with another method or target rule");
      } else {
        bank_attr_ = a->tensor("values");
        for (float c : a->tensor("classes").data) bank_attr_classes_.push_back(static_cast<std::size_t>(c));
      }
    }
    if (!complete()) return;

    for (Space s : kAllSpaces) {
      const auto p = paths_.projection(s);
      if (!std::filesystem::exists(p)) {
        problem("projection for " + std::string(to_string(s)) + " missing; run precompute");
        continue;
      }
      try {
        auto manifest = read_manifest(p);
        if (manifest["meta"].value("model_checksum", "") != hex64(model_ck_)) {
          problem("projection for " + std::string(to_string(s)) + " is stale");
          continue;
        }
        proj_[idx(s)] = std::make_unique<ProjectionModel>(load_projection(p));
        proj_ck_[idx(s)] = projection_checksum(*proj_[idx(s)]);
      } catch (const Error& e) {
        problem(e.what());
      }
    }
    if (!complete()) return;
    if (bank_acts_.dim(0) != N || bank_attr_.dim(0) != N || bank_attr_classes_.size() != N) {
      problem("feature caches do not cover the train split");
      return;
    }
    // Points come from the stored training embedding, so /api/points never drifts from the fit.
    const Tensor<float>* sources[3] = {&bank_series_, &bank_acts_, &bank_attr_};
    for (Space s : kAllSpaces) {
      const auto& e = projection(s).train_embedding;
      if (e.rank() == 2 && e.dim(0) == N && e.dim(1) == 2) {
        auto& pts = points_[idx(s)];
        pts.resize(N);
        for (std::size_t i = 0; i < N; ++i) pts[i] = {i, e[2 * i], e[2 * i + 1]};
      } else {
        points_[idx(s)] = embed_all(projection(s), *sources[idx(s)]);
      }
    }
  }

  PipelineConfig cfg_;
  ArtifactPaths paths_;
  Dataset ds_;
  std::uint64_t ds_ck_ = 0;
  Palette palette_;
  std::unique_ptr<ClassifierModel<float>> model_;
  std::uint64_t model_ck_ = 0;
  nlohmann::json report_ = nlohmann::json::object();
  std::vector<PredictionRecord> train_pred_;
  Tensor<float> bank_series_, bank_acts_, bank_attr_;
  std::vector<std::size_t> bank_attr_classes_;
  std::array<std::unique_ptr<ProjectionModel>, 3> proj_;
  std::array<std::uint64_t, 3> proj_ck_{};
  std::array<std::vector<ProjectedPoint>, 3> points_;
  std::vector<std::string> problems_;

  mutable std::mutex dbm_mu_;
  mutable std::map<std::tuple<std::size_t, std::size_t, int>, std::shared_ptr<const DecisionBoundaryMap>> dbm_memo_;
  mutable std::once_flag test_once_;
  mutable std::unique_ptr<TestView> test_;
};

}  // namespace cfw
