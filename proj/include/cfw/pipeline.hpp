#pragma once

// Command implementations behind the cfw tool: train, precompute, serve, demo. Every stage seed
// comes from stage_seed(master, Stage) and every artifact records the checksums it was built from.

#include <csignal>
#include <iostream>
#include <pthread.h>
#include <thread>

#include "cfw/server.hpp"

namespace cfw {

// Process exit codes.
inline constexpr int kExitOk = 0;
inline constexpr int kExitInternal = 1;
inline constexpr int kExitInput = 2;
inline constexpr int kExitEnvironment = 3;

inline int exit_code_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::DivergedLoss:
    case ErrorKind::BudgetExceeded:
    case ErrorKind::DegenerateData:
      return kExitInternal;
    default: return kExitInput;
  }
}

using Logger = std::function<void(const std::string&)>;

inline Logger stderr_logger() {
  return [](const std::string& s) { std::clog << "[cfw] " << s << std::endl; };
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + p.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::IoError, "short write to " + p.string());
}

inline nlohmann::json read_json(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + p.string());
  auto j = nlohmann::json::parse(in, nullptr, false);
  if (j.is_discarded()) fail(ErrorKind::CorruptFile, p.string() + ": not valid JSON");
  return j;
}

/// Loads the dataset and fills in the data-dependent model dimensions.
inline std::pair<Dataset, ModelConfig> resolve_model_config(const PipelineConfig& cfg) {
  auto ds = load_dataset(cfg.dataset);
  ModelConfig mc = cfg.model;
  mc.input_length = ds.series_length;
  mc.num_classes = ds.num_classes;
  mc.seed = stage_seed(cfg.seed, Stage::ModelInit);
  return {std::move(ds), mc};
}

// ---------------------------------------------------------------------------------------------
// train

inline TrainReport cmd_train(const PipelineConfig& cfg, const Logger& log = stderr_logger()) {
  auto [ds, mc] = resolve_model_config(cfg);
  const auto ds_ck = dataset_checksum(ds);
  log("training on " + ds.name + " (" + corpus_origin(cfg.dataset) + "): " + std::to_string(ds.train.size()) + " train, " +
      std::to_string(ds.test.size()) + " test, T=" + std::to_string(ds.series_length));
  auto model = build_model<float>(mc);
  const auto every = std::max<std::size_t>(1, cfg.training.epochs / 10);
  auto rep = train(model, ds, cfg.training, stage_seed(cfg.seed, Stage::Training), [&](std::size_t e, double loss) {
    if ((e + 1) % every == 0 || e + 1 == cfg.training.epochs)
      log("epoch " + std::to_string(e + 1) + "/" + std::to_string(cfg.training.epochs) + " loss " + std::to_string(loss));
  });
  const auto ck = model_checksum(model);
  const nlohmann::json provenance{{"dataset_checksum", hex64(ds_ck)},
                                  {"corpus", corpus_origin(cfg.dataset)},
                                  {"master_seed", cfg.seed},
                                  {"training_seed", rep.seed}};
  save_model(model, ArtifactPaths{cfg.artifacts}.model(), provenance);
  nlohmann::json report{{"epochs", rep.epochs},
                        {"train_accuracy", rep.train_accuracy},
                        {"test_accuracy", rep.test_accuracy},
                        {"loss_curve", rep.loss_curve},
                        {"seed", rep.seed},
                        {"seconds", rep.seconds},
                        {"model_checksum", hex64(ck)}};
  report.update(provenance);
  write_json(ArtifactPaths{cfg.artifacts}.train_report(), report);
  log("test accuracy " + std::to_string(rep.test_accuracy) + ", model " + hex64(ck));
  return rep;
}

// ---------------------------------------------------------------------------------------------
// precompute

struct StageOutcome {
  std::string name;
  bool computed = false;
  double seconds = 0;
};

struct PrecomputeReport {
  std::vector<StageOutcome> stages;
  std::size_t computed() const {
    return static_cast<std::size_t>(std::count_if(stages.begin(), stages.end(), [](const auto& s) { return s.computed; }));
  }
};

namespace detail {

// Existing artifact built from a different model or dataset: refuse unless forced.
inline void guard_stale(const std::string& stage, const nlohmann::json& meta, std::uint64_t model_ck, std::uint64_t ds_ck,
                        bool force) {
  const bool stale = meta.value("model_checksum", std::string{}) != hex64(model_ck) ||
                     meta.value("dataset_checksum", std::string{}) != hex64(ds_ck);
  if (stale && !force)
    fail(ErrorKind::StaleProvenance, stage + " was built from another model or dataset; rerun with --force to rebuild");
}

inline std::optional<nlohmann::json> existing_meta(const std::filesystem::path& manifest) {
  if (!std::filesystem::exists(manifest)) return std::nullopt;
  try {
    return read_manifest(manifest).value("meta", nlohmann::json::object());
  } catch (const Error&) {
    return nlohmann::json::object();  // unreadable: treat as not up to date
  }
}

inline nlohmann::json stage_meta(std::uint64_t model_ck, std::uint64_t ds_ck, std::uint64_t settings) {
  return {{"model_checksum", hex64(model_ck)}, {"dataset_checksum", hex64(ds_ck)}, {"settings", hex64(settings)}};
}

inline bool up_to_date(const nlohmann::json& meta, const nlohmann::json& want) {
  for (const auto& [k, v] : want.items())
    if (!meta.contains(k) || meta[k] != v) return false;
  return true;
}

}  // namespace detail

inline PrecomputeReport cmd_precompute(const PipelineConfig& cfg, bool force = false, const Logger& log = stderr_logger()) {
  const ArtifactPaths paths{cfg.artifacts};
  if (!std::filesystem::exists(paths.model()))
    fail(ErrorKind::IoError, "no trained model at " + paths.model().string() + "; run train first");
  const auto ds = load_dataset(cfg.dataset);
  const auto ds_ck = dataset_checksum(ds);
  const auto model = load_model(paths.model());
  const auto model_ck = model_checksum(model);
  if (model.config.input_length != ds.series_length || model.config.num_classes != ds.num_classes)
    fail(ErrorKind::ShapeMismatch, "model shape does not match the dataset");

  PrecomputeReport rep;
  auto run = [&](const std::string& name, auto&& fn) {
    const auto t0 = std::chrono::steady_clock::now();
    const bool did = fn();
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rep.stages.push_back({name, did, s});
    log(name + (did ? " computed in " + std::to_string(s) + " s" : " up to date, skipped"));
  };

  std::vector<std::vector<float>> xs;
  for (const auto& r : ds.train) xs.push_back(r.values);
  const auto series = rows_to_tensor<float>(xs, ds.series_length);

  // Feature caches. The blob checksum of each becomes the source checksum of its projection.
  std::array<std::uint64_t, 3> source_ck{ds_ck, 0, 0};
  run("activations", [&] {
    const auto want = detail::stage_meta(model_ck, ds_ck, 0);
    if (auto meta = detail::existing_meta(paths.activations())) {
      detail::guard_stale("activations", *meta, model_ck, ds_ck, force);
      if (detail::up_to_date(*meta, want) && !force) {
        source_ck[1] = read_artifact(paths.activations(), "features").checksum;
        return false;
      }
    }
    source_ck[1] = write_artifact(paths.activations(), "features", want,
                                  {{"values", activations_batch(model, series)}});
    return true;
  });
  run("attributions", [&] {
    auto want = detail::stage_meta(model_ck, ds_ck, 0);
    want["method"] = to_string(cfg.attribution_method);
    want["target"] = to_string(cfg.attribution_target);
    if (auto meta = detail::existing_meta(paths.attributions())) {
      detail::guard_stale("attributions", *meta, model_ck, ds_ck, force);
      if (detail::up_to_date(*meta, want) && !force) {
        source_ck[2] = read_artifact(paths.attributions(), "features").checksum;
        return false;
      }
    }
    auto m = attribute_dataset(model, ds.train, cfg.attribution_method, cfg.attribution_target);
    std::vector<float> classes(m.target_classes.begin(), m.target_classes.end());
    source_ck[2] = write_artifact(paths.attributions(), "features", want,
                                  {{"values", std::move(m.values)}, {"classes", Tensor<float>({classes.size()}, classes)}});
    return true;
  });

  std::array<std::uint64_t, 3> proj_ck{};
  for (Space sp : kAllSpaces) {
    const auto i = static_cast<std::size_t>(sp);
    const auto seed = stage_seed(cfg.seed, projection_stage(sp));
    auto want = detail::stage_meta(model_ck, ds_ck, json_digest(to_json(cfg.projection_for(sp))));
    want["source_checksum"] = hex64(source_ck[i]);
    want["seed"] = seed;
    run("projection_" + std::string(to_string(sp)), [&] {
      const auto p = paths.projection(sp);
      if (auto meta = detail::existing_meta(p)) {
        detail::guard_stale("projection_" + std::string(to_string(sp)), *meta, model_ck, ds_ck, force);
        if (detail::up_to_date(*meta, want) && !force) {
          proj_ck[i] = projection_checksum(load_projection(p));
          return false;
        }
      }
      const Tensor<float> src = sp == Space::Series ? series : read_artifact(sp == Space::Activations ? paths.activations()
                                                                                                      : paths.attributions(),
                                                                             "features")
                                                                   .tensor("values");
      auto pm = fit_projection(src, sp, cfg.projection_for(sp), seed);
      proj_ck[i] = projection_checksum(pm);
      auto meta = want;
      meta["reconstruction_ratio"] = reconstruction_ratio(pm, src);
      save_projection(pm, p, meta);
      return true;
    });
  }

  // Decision maps go through a Session so they use exactly the banks the server will use.
  std::shared_ptr<Session> session;
  for (const auto& plan : cfg.dbms) {
    const std::string name =
        "dbm_" + std::string(to_string(plan.space)) + "_" + std::to_string(plan.resolution) + "_" + std::string(to_string(plan.mode));
    run(name, [&] {
      const auto key = expected_dbm_key(cfg, plan.space, plan.resolution, plan.mode, model_ck,
                                        proj_ck[static_cast<std::size_t>(plan.space)]);
      const auto p = paths.dbm(plan.space, plan.resolution, plan.mode);
      if (std::filesystem::exists(p)) {
        std::optional<DecisionBoundaryMap> old;
        try {
          old = load_dbm(p);
        } catch (const Error&) {
        }
        if (old && old->model_checksum != model_ck && !force)
          fail(ErrorKind::StaleProvenance, name + " was built from another model; rerun with --force to rebuild");
        if (old && key_of(*old) == key && !force) return false;
      }
      if (!session) {
        session = Session::load(cfg);
        if (!session->complete()) fail(ErrorKind::StaleProvenance, session->problems().front());
      }
      auto d = session->compute(plan.space, plan.resolution, plan.mode);
      save_dbm(d, p);
      if (d.stats.budget_overruns)
        log(name + ": " + std::to_string(d.stats.budget_overruns) + " cells kept partial synthesis results");
      return true;
    });
  }
  return rep;
}

// ---------------------------------------------------------------------------------------------
// serve

struct HostPort {
  std::string host;
  int port = 0;
};

inline HostPort parse_bind(const std::string& bind) {
  const auto colon = bind.rfind(':');
  if (colon == std::string::npos || colon == 0) fail(ErrorKind::InvalidConfig, "bind must be host:port, got '" + bind + "'");
  HostPort hp{bind.substr(0, colon), 0};
  const auto port = bind.substr(colon + 1);
  auto [p, ec] = std::from_chars(port.data(), port.data() + port.size(), hp.port);
  if (ec != std::errc{} || p != port.data() + port.size() || hp.port < 0 || hp.port > 65535)
    fail(ErrorKind::InvalidConfig, "invalid port in bind address '" + bind + "'");
  return hp;
}

/// Serves until SIGTERM or SIGINT. Returns the process exit code. `on_listen` receives the bound
/// port (useful with port 0). Must be called before any other thread is started, so that the
/// blocked signal mask is inherited by the server's worker threads.
inline int cmd_serve(const PipelineConfig& cfg, const Logger& log = stderr_logger(),
                     const std::function<void(int)>& on_listen = {}) {
  const auto hp = parse_bind(cfg.server.bind);
  auto session = Session::load(cfg);
  if (!session->complete()) log("artifacts incomplete, serving 503: " + session->problems().front());

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGTERM);
  sigaddset(&set, SIGINT);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  httplib::Server svr;
  // httplib's default SO_REUSEPORT would let a second server share a port that is in use.
  svr.set_socket_options([](socket_t sock) {
    int yes = 1;
    setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
  });
  Api api(session);
  api.mount(svr);
  const int port = hp.port == 0 ? svr.bind_to_any_port(hp.host) : (svr.bind_to_port(hp.host, hp.port) ? hp.port : -1);
  if (port < 0) {
    log("cannot bind " + cfg.server.bind);
    return kExitEnvironment;
  }
  std::atomic<bool> stopping{false};
  std::thread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    if (!stopping.exchange(true)) log("signal " + std::to_string(sig) + ", shutting down");
    svr.stop();
  });
  log("listening on " + hp.host + ":" + std::to_string(port));
  if (on_listen) on_listen(port);
  const bool ok = svr.listen_after_bind();
  if (!stopping.exchange(true)) pthread_kill(waiter.native_handle(), SIGTERM);  // listener ended on its own
  waiter.join();
  return ok ? kExitOk : kExitEnvironment;
}

// ---------------------------------------------------------------------------------------------
// demo

inline constexpr const char* kDemoSchema = "cfw-demo-summary/1";

namespace detail {

/// Train samples of class c ordered by 2D distance to that class's centroid (ties by id).
inline std::vector<std::size_t> near_centroid(const Session& s, Space sp, std::size_t c) {
  const auto& pts = s.train_points(sp);
  const auto& rows = s.dataset().train;
  double cx = 0, cy = 0;
  std::vector<std::size_t> ids;
  for (const auto& p : pts)
    if (rows[p.sample_id].label == c) {
      cx += p.x;
      cy += p.y;
      ids.push_back(p.sample_id);
    }
  if (ids.empty()) fail(ErrorKind::InvalidConfig, "class " + std::to_string(c) + " has no training samples");
  cx /= static_cast<double>(ids.size());
  cy /= static_cast<double>(ids.size());
  auto d2 = [&](std::size_t id) { return (pts[id].x - cx) * (pts[id].x - cx) + (pts[id].y - cy) * (pts[id].y - cy); };
  std::stable_sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) { return d2(a) < d2(b); });
  return ids;
}

inline std::vector<Point2> linear_path(Point2 a, Point2 b, std::size_t n) {
  std::vector<Point2> path(n);
  for (std::size_t k = 0; k < n; ++k) {
    const double t = n == 1 ? 1.0 : static_cast<double>(k) / static_cast<double>(n - 1);
    path[k] = {a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)};
  }
  return path;
}

inline bool monotone(const std::vector<double>& curve) {
  for (std::size_t i = 1; i < curve.size(); ++i)
    if (curve[i] > curve[i - 1]) return false;
  return true;
}

}  // namespace detail

/// Scripted drag suites from the from_class cluster toward the to_class cluster in each space.
/// Drag i starts at the i-th from_class sample nearest its class centroid and ends at the i-th
/// to_class sample nearest the other centroid. The summary carries no timings, so two runs with
/// the same seed produce identical summaries.
inline nlohmann::json cmd_demo(const PipelineConfig& cfg, const Logger& log = stderr_logger()) {
  auto session = Session::load(cfg);
  if (!session->complete()) fail(ErrorKind::StaleProvenance, "artifacts incomplete: " + session->problems().front());
  const auto& s = *session;
  const ArtifactPaths paths{cfg.artifacts};
  const auto out_dir = paths.demo();
  std::filesystem::create_directories(out_dir / "traces");
  std::filesystem::create_directories(out_dir / "rasters");
  const auto& demo = cfg.demo;
  if (demo.waypoints < 1) fail(ErrorKind::InvalidConfig, "demo.waypoints must be >= 1");
  if (demo.from_class >= s.dataset().num_classes || demo.to_class >= s.dataset().num_classes || demo.from_class == demo.to_class)
    fail(ErrorKind::InvalidConfig, "demo classes must be two distinct class indices");

  nlohmann::json suites = nlohmann::json::array();
  const std::pair<Space, std::size_t> plan[] = {{Space::Series, demo.series_drags},
                                                {Space::Activations, demo.activation_drags},
                                                {Space::Attributions, demo.attribution_drags}};
  for (auto [sp, n] : plan) {
    if (n == 0) continue;
    const auto from = detail::near_centroid(s, sp, demo.from_class);
    const auto to = detail::near_centroid(s, sp, demo.to_class);
    const auto& pts = s.train_points(sp);
    std::size_t changed = 0, synthesized = 0, exhausted = 0, timeouts = 0, monotone = 0, reduced = 0;
    double ratio_sum = 0;
    std::vector<std::size_t> final_hist(s.dataset().num_classes, 0);
    nlohmann::json drags = nlohmann::json::array();
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t a = from[i % from.size()], b = to[i % to.size()];
      const auto path = detail::linear_path({pts[a].x, pts[a].y}, {pts[b].x, pts[b].y}, demo.waypoints);
      nlohmann::json tj;
      bool timed_out = false;
      CounterfactualTrace tr;
      try {
        tr = s.drag(sp, DragOrigin{a, std::nullopt}, path);
        tj = s.to_json(tr);
      } catch (const RequestTimeout& e) {
        timed_out = true;
        tj = e.partial();
      }
      const auto& wps = tj["waypoints"];
      timeouts += timed_out;
      const bool ch = tj.value("class_changed", false) && !timed_out;
      changed += ch;
      std::vector<std::size_t> classes;
      for (const auto& w : wps) {
        classes.push_back(w["prediction"]["predicted_class"].get<std::size_t>());
        if (!w.contains("synthesis_meta")) continue;
        const auto& m = w["synthesis_meta"];
        ++synthesized;
        exhausted += m["budget_exhausted"].get<bool>();
        monotone += detail::monotone(m["loss_curve"].get<std::vector<double>>());
        const double l0 = m["initial_loss"].get<double>(), l1 = m["final_loss"].get<double>();
        const double ratio = l0 > 0 ? l1 / l0 : 0.0;
        ratio_sum += ratio;
        reduced += ratio <= 0.5;
      }
      if (!classes.empty()) ++final_hist[classes.back()];
      const auto file = "traces/" + std::string(to_string(sp)) + "_" + std::to_string(i) + ".json";
      write_json(out_dir / file, tj);
      drags.push_back({{"origin_id", a},
                       {"target_id", b},
                       {"class_changed", ch},
                       {"timed_out", timed_out},
                       {"predicted_classes", classes},
                       {"trace", file}});
    }
    nlohmann::json suite{{"space", to_string(sp)},
                         {"drags", n},
                         {"waypoints", demo.waypoints},
                         {"from_class", demo.from_class},
                         {"to_class", demo.to_class},
                         {"warm_start", cfg.server.warm_start},
                         {"class_changed", changed},
                         {"class_change_rate", static_cast<double>(changed) / static_cast<double>(n)},
                         {"final_class_histogram", final_hist},
                         {"timeouts", timeouts},
                         {"synthesized_waypoints", synthesized},
                         {"budget_exhausted", exhausted},
                         {"monotone_loss_curves", monotone},
                         {"all_monotone", monotone == synthesized},
                         {"halved_loss_waypoints", reduced},
                         {"mean_loss_ratio", synthesized ? nlohmann::json(ratio_sum / static_cast<double>(synthesized))
                                                         : nlohmann::json(nullptr)},
                         {"details", drags}};
    log(std::string(to_string(sp)) + " suite: " + std::to_string(changed) + "/" + std::to_string(n) + " drags changed class");
    suites.push_back(std::move(suite));
  }

  nlohmann::json rasters = nlohmann::json::array();
  for (const auto& p : cfg.dbms) {
    auto d = s.dbm(p.space, p.resolution, p.mode);
    if (!d) continue;
    const auto png = export_raster(*d, RasterFormat::Png);
    const auto file = "rasters/" + dbm_cache_path({}, p.space, p.resolution, p.mode).stem().string() + ".png";
    std::ofstream(out_dir / file, std::ios::binary) << png;
    rasters.push_back({{"space", to_string(p.space)},
                       {"resolution", p.resolution},
                       {"mode", to_string(p.mode)},
                       {"file", file},
                       {"checksum", hex64(fnv1a(png.data(), png.size()))},
                       {"budget_overruns", d->stats.budget_overruns}});
  }

  nlohmann::json proj = nlohmann::json::object();
  for (Space sp : kAllSpaces) proj[std::string(to_string(sp))] = hex64(s.projection_checksum_value(sp));
  nlohmann::json summary{{"schema", kDemoSchema},
                         {"seed", cfg.seed},
                         {"corpus", corpus_origin(cfg.dataset)},
                         {"dataset", {{"name", s.dataset().name}, {"checksum", hex64(s.dataset_checksum_value())}}},
                         {"model_checksum", hex64(s.model_checksum_value())},
                         {"projection_checksums", proj},
                         {"test_accuracy", s.train_report().value("test_accuracy", nlohmann::json())},
                         {"suites", suites},
                         {"rasters", rasters}};
  write_json(out_dir / "summary.json", summary);
  return summary;
}

/// Structural check of a demo summary; returns the problems found (empty when valid).
inline std::vector<std::string> validate_demo_summary(const nlohmann::json& j) {
  std::vector<std::string> errs;
  auto need = [&](const nlohmann::json& o, const char* key, auto pred, const char* what, const std::string& where) {
    if (!o.is_object() || !o.contains(key) || !pred(o[key])) {
      errs.push_back(where + "." + key + " must be " + what);
      return false;
    }
    return true;
  };
  auto is_str = [](const nlohmann::json& v) { return v.is_string(); };
  auto is_uint = [](const nlohmann::json& v) { return v.is_number_unsigned(); };
  auto is_bool = [](const nlohmann::json& v) { return v.is_boolean(); };
  auto is_arr = [](const nlohmann::json& v) { return v.is_array(); };
  auto is_obj = [](const nlohmann::json& v) { return v.is_object(); };
  auto is_rate = [](const nlohmann::json& v) { return v.is_number() && v.get<double>() >= 0 && v.get<double>() <= 1; };
  auto is_hex = [](const nlohmann::json& v) {
    return v.is_string() && v.get<std::string>().size() == 16 &&
           v.get<std::string>().find_first_not_of("0123456789abcdef") == std::string::npos;
  };
  if (!j.is_object()) return {"summary must be an object"};
  if (need(j, "schema", is_str, "a string", "$") && j["schema"] != kDemoSchema) errs.push_back("$.schema must be " + std::string(kDemoSchema));
  need(j, "seed", is_uint, "an unsigned integer", "$");
  need(j, "corpus", is_str, "a string", "$");
  need(j, "model_checksum", is_hex, "a 16-digit hex string", "$");
  if (need(j, "dataset", is_obj, "an object", "$")) need(j["dataset"], "checksum", is_hex, "a 16-digit hex string", "$.dataset");
  if (need(j, "projection_checksums", is_obj, "an object", "$"))
    for (Space sp : kAllSpaces) need(j["projection_checksums"], std::string(to_string(sp)).c_str(), is_hex, "a 16-digit hex string", "$.projection_checksums");
  if (need(j, "suites", is_arr, "an array", "$")) {
    std::size_t i = 0;
    for (const auto& s : j["suites"]) {
      const auto w = "$.suites[" + std::to_string(i++) + "]";
      if (need(s, "space", is_str, "a string", w) && !parse_space(s["space"].get<std::string>())) errs.push_back(w + ".space is unknown");
      for (const char* k : {"drags", "waypoints", "class_changed", "timeouts", "synthesized_waypoints", "budget_exhausted",
                            "monotone_loss_curves", "halved_loss_waypoints"})
        need(s, k, is_uint, "an unsigned integer", w);
      need(s, "class_change_rate", is_rate, "a number in [0, 1]", w);
      need(s, "all_monotone", is_bool, "a boolean", w);
      if (need(s, "details", is_arr, "an array", w) && s.contains("drags") && s["drags"].is_number_unsigned()) {
        if (s["details"].size() != s["drags"].get<std::size_t>()) errs.push_back(w + ".details must hold one entry per drag");
        std::size_t changed = 0;
        for (const auto& d : s["details"]) {
          need(d, "class_changed", is_bool, "a boolean", w + ".details[]");
          need(d, "predicted_classes", is_arr, "an array", w + ".details[]");
          if (d.contains("class_changed") && d["class_changed"].is_boolean()) changed += d["class_changed"].get<bool>();
        }
        if (s.contains("class_changed") && s["class_changed"].is_number_unsigned() && s["class_changed"].get<std::size_t>() != changed)
          errs.push_back(w + ".class_changed disagrees with details");
        if (s.contains("class_change_rate") && s["class_change_rate"].is_number() && !s["details"].empty() &&
            std::abs(s["class_change_rate"].get<double>() - static_cast<double>(changed) / static_cast<double>(s["details"].size())) > 1e-12)
          errs.push_back(w + ".class_change_rate disagrees with details");
      }
    }
  }
  if (need(j, "rasters", is_arr, "an array", "$"))
    for (const auto& r : j["rasters"]) {
      need(r, "file", is_str, "a string", "$.rasters[]");
      need(r, "checksum", is_hex, "a 16-digit hex string", "$.rasters[]");
      need(r, "resolution", is_uint, "an unsigned integer", "$.rasters[]");
    }
  return errs;
}

}  // namespace cfw
