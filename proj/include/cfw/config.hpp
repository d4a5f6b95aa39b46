#pragma once

// Pipeline configuration: one JSON document, every key optional. Unknown keys are rejected so a
// typo cannot silently fall back to a default.

#include <array>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cfw/attribution.hpp"
#include "cfw/dataset.hpp"
#include "cfw/dbm.hpp"
#include "cfw/model_io.hpp"
#include "cfw/projection.hpp"
#include "cfw/surrogate.hpp"
#include "cfw/synthesis.hpp"
#include "cfw/train.hpp"

namespace cfw {

// Stage indices mixed into the master seed. Append only; reordering changes every artifact.
enum class Stage : std::uint64_t {
  ModelInit = 1,
  Training = 2,
  ProjectionSeries = 3,
  ProjectionActivations = 4,
  ProjectionAttributions = 5,
  Dbm = 6,
  Synthesis = 7,
};

constexpr std::uint64_t stage_seed(std::uint64_t master, Stage s) noexcept {
  return derive_seed(master, static_cast<std::uint64_t>(s));
}

inline Stage projection_stage(Space s) {
  switch (s) {
    case Space::Series: return Stage::ProjectionSeries;
    case Space::Activations: return Stage::ProjectionActivations;
    case Space::Attributions: return Stage::ProjectionAttributions;
  }
  return Stage::ProjectionSeries;
}

struct DatasetSource {
  std::string name = "ECG5000";
  std::filesystem::path train, test;  // empty: CF_ECG5000_DIR, else the built-in surrogate
  NormScheme normalization = NormScheme::None;
  std::uint64_t surrogate_seed = 5000;
};

struct DbmPlan {
  Space space = Space::Series;
  std::size_t resolution = 64;
  DbmMode mode = DbmMode::Direct;
};

struct ServerConfig {
  std::string bind = "127.0.0.1:8080";
  std::size_t drag_cap = 256;
  bool warm_start = true;
  double request_budget_seconds = 300;  // whole /api/drag request
  bool cors = true;
};

struct DemoConfig {
  std::size_t series_drags = 20;
  std::size_t activation_drags = 10;
  std::size_t attribution_drags = 5;
  std::size_t waypoints = 16;
  std::size_t from_class = 0;
  std::size_t to_class = 1;
};

struct PipelineConfig {
  DatasetSource dataset;
  ModelConfig model;  // input_length and num_classes come from the data
  TrainHyper training;
  AttributionMethod attribution_method = AttributionMethod::DeepLiftRescale;
  TargetRule attribution_target = TargetRule::PredictedClass;
  std::array<ProjectionConfig, 3> projection = default_projections();
  std::vector<DbmPlan> dbms{{Space::Series, 64, DbmMode::Direct},
                            {Space::Activations, 64, DbmMode::Head},
                            {Space::Attributions, 32, DbmMode::Synthesis}};
  // Synthesis-mode maps run this many steps per cell (the interactive default is larger).
  std::size_t dbm_synthesis_steps = 25;
  double dbm_budget_seconds = 0;
  std::size_t workers = 0;
  SynthesisConfig synthesis = default_synthesis();
  ServerConfig server;
  DemoConfig demo;
  std::uint64_t seed = 0;
  std::filesystem::path artifacts = "artifacts";

  ProjectionConfig& projection_for(Space s) { return projection[static_cast<std::size_t>(s)]; }
  const ProjectionConfig& projection_for(Space s) const { return projection[static_cast<std::size_t>(s)]; }

  static std::array<ProjectionConfig, 3> default_projections() {
    std::array<ProjectionConfig, 3> p{};
    // Attribution vectors are spiky and low-variance in most dimensions; per-dimension scaling
    // blows that noise up, so they get a shared scale and a wider, longer-trained network.
    auto& a = p[static_cast<std::size_t>(Space::Attributions)];
    a.hidden = {128, 64};
    a.epochs = 3000;
    a.scaling = Scaling::Global;
    return p;
  }
  static SynthesisConfig default_synthesis() {
    SynthesisConfig s;
    s.budget_seconds = 30;
    return s;
  }
};

// ---------------------------------------------------------------------------------------------
// JSON

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) fail(ErrorKind::InvalidConfig, where + " must be an object");
  std::set<std::string> allowed(keys.begin(), keys.end());
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.contains(it.key())) fail(ErrorKind::InvalidConfig, "unknown key '" + it.key() + "' in " + where);
}

template <class T>
void read(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    fail(ErrorKind::InvalidConfig, where + "." + key + " has the wrong type");
  }
}

template <class E, class Parse>
void read_enum(const nlohmann::json& j, const char* key, E& out, Parse&& parse, const std::string& where) {
  if (!j.contains(key)) return;
  if (!j.at(key).is_string()) fail(ErrorKind::InvalidConfig, where + "." + key + " must be a string");
  out = parse(j.at(key).get<std::string>());
}

inline Space require_space(std::string_view s) {
  auto v = parse_space(s);
  if (!v) fail(ErrorKind::InvalidConfig, "unknown space '" + std::string(s) + "'");
  return *v;
}

inline DbmMode require_mode(std::string_view s) {
  auto v = parse_dbm_mode(s);
  if (!v) fail(ErrorKind::InvalidConfig, "unknown decision map mode '" + std::string(s) + "'");
  return *v;
}

inline std::string_view to_string(Scaling s) { return s == Scaling::Global ? "global" : "per_dimension"; }
inline Scaling parse_scaling(std::string_view s) {
  if (s == "global") return Scaling::Global;
  if (s == "per_dimension") return Scaling::PerDimension;
  fail(ErrorKind::InvalidConfig, "unknown scaling '" + std::string(s) + "'");
}

inline std::string_view to_string(ClassWeighting w) { return w == ClassWeighting::None ? "none" : "inverse_frequency"; }
inline ClassWeighting parse_weighting(std::string_view s) {
  if (s == "none") return ClassWeighting::None;
  if (s == "inverse_frequency") return ClassWeighting::InverseFrequency;
  fail(ErrorKind::InvalidConfig, "unknown class weighting '" + std::string(s) + "'");
}

inline std::string_view to_string(StepDirection d) { return d == StepDirection::Adam ? "adam" : "gradient"; }
inline StepDirection parse_direction(std::string_view s) {
  if (s == "adam") return StepDirection::Adam;
  if (s == "gradient") return StepDirection::Gradient;
  fail(ErrorKind::InvalidConfig, "unknown step direction '" + std::string(s) + "'");
}

}  // namespace detail

inline nlohmann::json to_json(const ProjectionConfig& c) {
  return {{"hidden", c.hidden},
          {"scaling", detail::to_string(c.scaling)},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"learning_rate", c.learning_rate},
          {"neighborhood_weight", c.neighborhood_weight},
          {"pairs_per_batch", c.pairs_per_batch},
          {"extent_padding", c.extent_padding}};
}

inline void from_json_into(const nlohmann::json& j, ProjectionConfig& c, const std::string& where) {
  detail::reject_unknown(j, {"hidden", "scaling", "epochs", "batch_size", "learning_rate", "neighborhood_weight",
                             "pairs_per_batch", "extent_padding"}, where);
  detail::read(j, "hidden", c.hidden, where);
  detail::read_enum(j, "scaling", c.scaling, detail::parse_scaling, where);
  detail::read(j, "epochs", c.epochs, where);
  detail::read(j, "batch_size", c.batch_size, where);
  detail::read(j, "learning_rate", c.learning_rate, where);
  detail::read(j, "neighborhood_weight", c.neighborhood_weight, where);
  detail::read(j, "pairs_per_batch", c.pairs_per_batch, where);
  detail::read(j, "extent_padding", c.extent_padding, where);
}

inline nlohmann::json to_json(const SynthesisConfig& c) {
  return {{"max_steps", c.max_steps},
          {"learning_rate", c.learning_rate},
          {"init", to_string(c.init)},
          {"noise_std", c.noise_std},
          {"convergence_tol", c.convergence_tol},
          {"min_relative_improvement", c.min_relative_improvement},
          {"patience", c.patience},
          {"gradient_mode", to_string(c.gradient_mode)},
          {"fd_step", c.fd_step},
          {"spsa_samples", c.spsa_samples},
          {"spsa_redraws", c.spsa_redraws},
          {"backtracking", c.backtracking},
          {"max_halvings", c.max_halvings},
          {"normalize_gradient", c.normalize_gradient},
          {"direction", detail::to_string(c.direction)},
          {"budget_seconds", c.budget_seconds}};
}

inline void from_json_into(const nlohmann::json& j, SynthesisConfig& c, const std::string& where) {
  detail::reject_unknown(j, {"max_steps", "learning_rate", "init", "noise_std", "convergence_tol", "min_relative_improvement",
                             "patience", "gradient_mode", "fd_step", "spsa_samples", "spsa_redraws", "backtracking",
                             "max_halvings", "normalize_gradient", "direction", "budget_seconds"}, where);
  detail::read(j, "max_steps", c.max_steps, where);
  detail::read(j, "learning_rate", c.learning_rate, where);
  detail::read_enum(j, "init", c.init, parse_init_kind, where);
  detail::read(j, "noise_std", c.noise_std, where);
  detail::read(j, "convergence_tol", c.convergence_tol, where);
  detail::read(j, "min_relative_improvement", c.min_relative_improvement, where);
  detail::read(j, "patience", c.patience, where);
  detail::read_enum(j, "gradient_mode", c.gradient_mode, parse_gradient_mode, where);
  detail::read(j, "fd_step", c.fd_step, where);
  detail::read(j, "spsa_samples", c.spsa_samples, where);
  detail::read(j, "spsa_redraws", c.spsa_redraws, where);
  detail::read(j, "backtracking", c.backtracking, where);
  detail::read(j, "max_halvings", c.max_halvings, where);
  detail::read(j, "normalize_gradient", c.normalize_gradient, where);
  detail::read_enum(j, "direction", c.direction, detail::parse_direction, where);
  detail::read(j, "budget_seconds", c.budget_seconds, where);
  if (c.init == InitKind::Provided) fail(ErrorKind::InvalidConfig, where + ".init cannot be 'provided' in a config file");
  validate(c);
}

inline nlohmann::json to_json(const PipelineConfig& c) {
  nlohmann::json j;
  j["dataset"] = {{"name", c.dataset.name},
                  {"train", c.dataset.train.string()},
                  {"test", c.dataset.test.string()},
                  {"normalization", to_string(c.dataset.normalization)},
                  {"surrogate_seed", c.dataset.surrogate_seed}};
  j["model"] = {{"blocks", c.model.blocks}, {"channels", c.model.channels}, {"kernel_sizes", c.model.kernel_sizes}};
  j["training"] = {{"epochs", c.training.epochs},
                   {"batch_size", c.training.batch_size},
                   {"learning_rate", c.training.learning_rate},
                   {"class_weighting", detail::to_string(c.training.class_weighting)},
                   {"divergence_factor", c.training.divergence_factor}};
  j["attribution"] = {{"method", to_string(c.attribution_method)}, {"target", to_string(c.attribution_target)}};
  for (Space s : kAllSpaces) j["projection"][std::string(to_string(s))] = to_json(c.projection_for(s));
  j["dbm"]["maps"] = nlohmann::json::array();
  for (const auto& p : c.dbms)
    j["dbm"]["maps"].push_back({{"space", to_string(p.space)}, {"resolution", p.resolution}, {"mode", to_string(p.mode)}});
  j["dbm"]["synthesis_steps"] = c.dbm_synthesis_steps;
  j["dbm"]["budget_seconds"] = c.dbm_budget_seconds;
  j["synthesis"] = to_json(c.synthesis);
  j["server"] = {{"bind", c.server.bind},
                 {"drag_cap", c.server.drag_cap},
                 {"warm_start", c.server.warm_start},
                 {"request_budget_seconds", c.server.request_budget_seconds},
                 {"cors", c.server.cors}};
  j["demo"] = {{"series_drags", c.demo.series_drags},
               {"activation_drags", c.demo.activation_drags},
               {"attribution_drags", c.demo.attribution_drags},
               {"waypoints", c.demo.waypoints},
               {"from_class", c.demo.from_class},
               {"to_class", c.demo.to_class}};
  j["workers"] = c.workers;
  j["seed"] = c.seed;
  j["artifacts"] = c.artifacts.string();
  return j;
}

inline PipelineConfig pipeline_config_from_json(const nlohmann::json& j) {
  PipelineConfig c;
  detail::reject_unknown(j, {"dataset", "model", "training", "attribution", "projection", "dbm", "synthesis", "server",
                             "demo", "workers", "seed", "artifacts"}, "config");
  if (j.contains("dataset")) {
    const auto& d = j["dataset"];
    detail::reject_unknown(d, {"name", "train", "test", "normalization", "surrogate_seed"}, "dataset");
    detail::read(d, "name", c.dataset.name, "dataset");
    std::string tr, te;
    detail::read(d, "train", tr, "dataset");
    detail::read(d, "test", te, "dataset");
    c.dataset.train = tr;
    c.dataset.test = te;
    detail::read_enum(d, "normalization", c.dataset.normalization, parse_norm_scheme, "dataset");
    detail::read(d, "surrogate_seed", c.dataset.surrogate_seed, "dataset");
  }
  if (j.contains("model")) {
    const auto& m = j["model"];
    detail::reject_unknown(m, {"blocks", "channels", "kernel_sizes"}, "model");
    detail::read(m, "blocks", c.model.blocks, "model");
    detail::read(m, "channels", c.model.channels, "model");
    detail::read(m, "kernel_sizes", c.model.kernel_sizes, "model");
  }
  if (j.contains("training")) {
    const auto& t = j["training"];
    detail::reject_unknown(t, {"epochs", "batch_size", "learning_rate", "class_weighting", "divergence_factor"}, "training");
    detail::read(t, "epochs", c.training.epochs, "training");
    detail::read(t, "batch_size", c.training.batch_size, "training");
    detail::read(t, "learning_rate", c.training.learning_rate, "training");
    detail::read_enum(t, "class_weighting", c.training.class_weighting, detail::parse_weighting, "training");
    detail::read(t, "divergence_factor", c.training.divergence_factor, "training");
  }
  if (j.contains("attribution")) {
    const auto& a = j["attribution"];
    detail::reject_unknown(a, {"method", "target"}, "attribution");
    detail::read_enum(a, "method", c.attribution_method, parse_attribution_method, "attribution");
    detail::read_enum(a, "target", c.attribution_target, parse_target_rule, "attribution");
  }
  if (j.contains("projection")) {
    const auto& p = j["projection"];
    detail::reject_unknown(p, {"series", "activations", "attributions"}, "projection");
    for (Space s : kAllSpaces) {
      const std::string key(to_string(s));
      if (p.contains(key)) from_json_into(p[key], c.projection_for(s), "projection." + key);
    }
  }
  if (j.contains("dbm")) {
    const auto& d = j["dbm"];
    detail::reject_unknown(d, {"maps", "synthesis_steps", "budget_seconds"}, "dbm");
    if (d.contains("maps")) {
      if (!d["maps"].is_array()) fail(ErrorKind::InvalidConfig, "dbm.maps must be an array");
      c.dbms.clear();
      for (const auto& m : d["maps"]) {
        detail::reject_unknown(m, {"space", "resolution", "mode"}, "dbm.maps[]");
        DbmPlan plan;
        std::string space;
        detail::read(m, "space", space, "dbm.maps[]");
        plan.space = detail::require_space(space);
        plan.resolution = default_resolution(plan.space);
        plan.mode = default_mode(plan.space);
        detail::read(m, "resolution", plan.resolution, "dbm.maps[]");
        if (m.contains("mode")) plan.mode = detail::require_mode(m["mode"].get<std::string>());
        if (plan.resolution < 2) fail(ErrorKind::InvalidConfig, "dbm resolution must be >= 2");
        if (!mode_supported(plan.space, plan.mode))
          fail(ErrorKind::InvalidConfig, "mode " + std::string(to_string(plan.mode)) + " not available for " + space);
        c.dbms.push_back(plan);
      }
    }
    detail::read(d, "synthesis_steps", c.dbm_synthesis_steps, "dbm");
    detail::read(d, "budget_seconds", c.dbm_budget_seconds, "dbm");
  }
  if (j.contains("synthesis")) from_json_into(j["synthesis"], c.synthesis, "synthesis");
  if (j.contains("server")) {
    const auto& s = j["server"];
    detail::reject_unknown(s, {"bind", "drag_cap", "warm_start", "request_budget_seconds", "cors"}, "server");
    detail::read(s, "bind", c.server.bind, "server");
    detail::read(s, "drag_cap", c.server.drag_cap, "server");
    detail::read(s, "warm_start", c.server.warm_start, "server");
    detail::read(s, "request_budget_seconds", c.server.request_budget_seconds, "server");
    detail::read(s, "cors", c.server.cors, "server");
  }
  if (j.contains("demo")) {
    const auto& d = j["demo"];
    detail::reject_unknown(d, {"series_drags", "activation_drags", "attribution_drags", "waypoints", "from_class", "to_class"},
                           "demo");
    detail::read(d, "series_drags", c.demo.series_drags, "demo");
    detail::read(d, "activation_drags", c.demo.activation_drags, "demo");
    detail::read(d, "attribution_drags", c.demo.attribution_drags, "demo");
    detail::read(d, "waypoints", c.demo.waypoints, "demo");
    detail::read(d, "from_class", c.demo.from_class, "demo");
    detail::read(d, "to_class", c.demo.to_class, "demo");
    if (c.demo.waypoints < 1) fail(ErrorKind::InvalidConfig, "demo.waypoints must be >= 1");
  }
  detail::read(j, "workers", c.workers, "config");
  detail::read(j, "seed", c.seed, "config");
  std::string art;
  detail::read(j, "artifacts", art, "config");
  if (!art.empty()) c.artifacts = art;
  return c;
}

inline PipelineConfig load_pipeline_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::IoError, "cannot open config " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::InvalidConfig, path.string() + ": " + e.what());
  }
  return pipeline_config_from_json(j);
}

/// Digest of a JSON value's canonical dump; used to key stages on their settings.
inline std::uint64_t json_digest(const nlohmann::json& j) {
  const auto s = j.dump();
  return fnv1a(s.data(), s.size());
}

// ---------------------------------------------------------------------------------------------
// dataset resolution

inline std::filesystem::path find_ucr_file(const std::filesystem::path& dir, const std::string& stem) {
  for (const char* ext : {".tsv", ".txt", ""}) {
    auto p = dir / (stem + ext);
    if (std::filesystem::exists(p)) return p;
  }
  fail(ErrorKind::IoError, "no " + stem + "{.tsv,.txt} in " + dir.string());
}

/// Which corpus the configuration resolves to: "files", "env" or "surrogate".
inline std::string corpus_origin(const DatasetSource& src) {
  if (!src.train.empty()) return "files";
  if (const char* dir = std::getenv("CF_ECG5000_DIR"); dir && *dir) return "env";
  return "surrogate";
}

inline Dataset load_dataset(const DatasetSource& src) {
  Dataset ds;
  const auto origin = corpus_origin(src);
  if (origin == "files") {
    if (!std::filesystem::exists(src.train)) fail(ErrorKind::IoError, "dataset file not found: " + src.train.string());
    if (!src.test.empty() && !std::filesystem::exists(src.test))
      fail(ErrorKind::IoError, "dataset file not found: " + src.test.string());
    ds = load_ucr(src.train, src.test);
  } else if (origin == "env") {
    const std::filesystem::path dir = std::getenv("CF_ECG5000_DIR");
    ds = load_ucr(find_ucr_file(dir, src.name + "_TRAIN"), find_ucr_file(dir, src.name + "_TEST"));
  } else {
    surrogate::CorpusSpec spec;
    spec.seed = src.surrogate_seed;
    ds = surrogate::make_corpus(spec);
  }
  if (!src.name.empty() && origin != "surrogate") ds.name = src.name;
  return normalize(std::move(ds), src.normalization);
}

inline std::uint64_t dataset_checksum(const Dataset& ds) {
  Fnv1a h;
  for (Split s : {Split::Train, Split::Test})
    for (const auto& r : ds.split(s)) {
      const std::uint64_t label = r.label;
      h.update(&label, sizeof label);
      h.update(r.values.data(), r.values.size() * sizeof(float));
    }
  return h.digest();
}

}  // namespace cfw
