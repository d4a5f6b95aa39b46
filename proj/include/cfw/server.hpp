#pragma once

// HTTP/JSON API over a loaded Session. Handlers are plain functions of (query, body) so tests can
// call them without sockets; mount() wires them onto an httplib server.

#include <algorithm>
#include <charconv>
#include <map>
#include <semaphore>
#include <string>

#include <httplib.h>

#include "cfw/raster.hpp"
#include "cfw/session.hpp"

namespace cfw {

struct Response {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

using Query = std::map<std::string, std::string>;

inline constexpr std::size_t kMaxResolution = 512;

namespace detail {

inline Response json_response(int status, const nlohmann::json& j) {
  return {status, "application/json", j.dump(), {}};
}

inline Response error_response(int status, std::string_view kind, const std::string& message) {
  return json_response(status, {{"error", kind}, {"message", message}});
}

inline int status_for(ErrorKind k) {
  switch (k) {
    case ErrorKind::InvalidConfig:
    case ErrorKind::ShapeMismatch:
    case ErrorKind::ModeUnsupported:
    case ErrorKind::UnsupportedFormat:
    case ErrorKind::InvalidExtent:
    case ErrorKind::InvalidDistribution:
      return 400;
    case ErrorKind::StaleProvenance: return 503;
    case ErrorKind::BudgetExceeded: return 504;
    default: return 500;
  }
}

inline std::string query_or(const Query& q, const std::string& key, std::string fallback) {
  auto it = q.find(key);
  return it == q.end() ? std::move(fallback) : it->second;
}

inline std::optional<std::size_t> parse_index(std::string_view s) {
  std::size_t v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || p != s.data() + s.size() || s.empty()) return std::nullopt;
  return v;
}

inline Space space_param(const std::string& s) {
  auto sp = parse_space(s);
  if (!sp) fail(ErrorKind::InvalidConfig, "unknown space '" + s + "'");
  return *sp;
}

inline Space body_space(const nlohmann::json& j) {
  if (!j.contains("space") || !j["space"].is_string()) fail(ErrorKind::InvalidConfig, "'space' must be a string");
  return space_param(j["space"].get<std::string>());
}

// Rejects non-numbers; NaN/Inf cannot appear in JSON, but strings such as "NaN" can.
inline double body_number(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_number()) fail(ErrorKind::InvalidConfig, std::string("'") + key + "' must be a number");
  const double v = j[key].get<double>();
  if (!std::isfinite(v)) fail(ErrorKind::InvalidConfig, std::string("'") + key + "' must be finite");
  return v;
}

inline Point2 body_point(const nlohmann::json& p) {
  if (p.is_array() && p.size() == 2 && p[0].is_number() && p[1].is_number()) {
    const Point2 q{p[0].get<double>(), p[1].get<double>()};
    if (!std::isfinite(q.x) || !std::isfinite(q.y)) fail(ErrorKind::InvalidConfig, "path coordinates must be finite");
    return q;
  }
  if (p.is_object()) return {body_number(p, "x"), body_number(p, "y")};
  fail(ErrorKind::InvalidConfig, "a point is [x, y] or {\"x\": .., \"y\": ..}");
}

inline std::vector<float> row_of(const Tensor<float>& t, std::size_t i) {
  const std::size_t D = t.dim(1);
  return {t.data.begin() + static_cast<std::ptrdiff_t>(i * D), t.data.begin() + static_cast<std::ptrdiff_t>((i + 1) * D)};
}

inline nlohmann::json parse_body(const std::string& body) {
  auto j = nlohmann::json::parse(body, nullptr, false);
  if (j.is_discarded() || !j.is_object()) fail(ErrorKind::InvalidConfig, "request body must be a JSON object");
  return j;
}

}  // namespace detail

class Api {
 public:
  explicit Api(std::shared_ptr<const Session> session)
      : session_(std::move(session)),
        synth_slots_(static_cast<std::ptrdiff_t>(
            std::clamp<std::size_t>(session_ ? (session_->config().workers ? session_->config().workers : default_workers()) : 1, 1, 64))) {}

  const Session& session() const { return *session_; }

  Response meta() const {
    return guarded([&] {
      const auto& s = ready();
      const auto& ds = s.dataset();
      nlohmann::json classes = nlohmann::json::array();
      for (std::size_t c = 0; c < ds.num_classes; ++c)
        classes.push_back({{"id", c},
                           {"name", c < ds.class_names.size() ? ds.class_names[c] : std::to_string(c)},
                           {"label_value", c < ds.label_values.size() ? ds.label_values[c] : static_cast<long long>(c)},
                           {"color", to_hex(s.palette().colors[c])}});
      nlohmann::json spaces = nlohmann::json::array();
      nlohmann::json proj_ck = nlohmann::json::object();
      for (Space sp : kAllSpaces) {
        nlohmann::json modes = nlohmann::json::array();
        for (DbmMode m : {DbmMode::Direct, DbmMode::Head, DbmMode::Synthesis})
          if (mode_supported(sp, m)) modes.push_back(to_string(m));
        spaces.push_back({{"name", to_string(sp)},
                          {"dimension", s.projection(sp).input_dim},
                          {"extent", to_json(s.projection(sp).extent)},
                          {"default_resolution", default_resolution(sp)},
                          {"default_mode", to_string(default_mode(sp))},
                          {"modes", modes}});
        proj_ck[std::string(to_string(sp))] = hex64(s.projection_checksum_value(sp));
      }
      const auto& rep = s.train_report();
      nlohmann::json acc{{"train", rep.value("train_accuracy", nlohmann::json())},
                         {"test", rep.value("test_accuracy", nlohmann::json())}};
      const auto& cfg = s.config();
      return detail::json_response(
          200, {{"dataset",
                 {{"name", ds.name},
                  {"T", ds.series_length},
                  {"C", ds.num_classes},
                  {"train_size", ds.train.size()},
                  {"test_size", ds.test.size()},
                  {"normalization", to_string(ds.normalization)}}},
                {"classes", classes},
                {"accuracies", acc},
                {"spaces", spaces},
                {"attribution", {{"method", to_string(cfg.attribution_method)}, {"target", to_string(cfg.attribution_target)}}},
                {"synthesis", to_json(cfg.synthesis)},
                {"drag_cap", cfg.server.drag_cap},
                {"warm_start", cfg.server.warm_start},
                {"seed", cfg.seed},
                {"checksums",
                 {{"model", hex64(s.model_checksum_value())},
                  {"dataset", hex64(s.dataset_checksum_value())},
                  {"projections", proj_ck}}}});
    });
  }

  Response points(const Query& q) const {
    return guarded([&] {
      const Space sp = detail::space_param(detail::query_or(q, "space", ""));
      const std::string color = detail::query_or(q, "color", "prediction");
      if (color != "prediction" && color != "ground_truth")
        fail(ErrorKind::InvalidConfig, "color must be prediction or ground_truth");
      const std::string inc = detail::query_or(q, "include_test", "false");
      if (inc != "true" && inc != "false" && inc != "1" && inc != "0")
        fail(ErrorKind::InvalidConfig, "include_test must be true or false");
      const auto& s = ready();
      const auto& pal = s.palette().colors;
      nlohmann::json out = nlohmann::json::array();
      auto add = [&](const ProjectedPoint& p, const PredictionRecord& r, std::size_t label, Split split) {
        const std::size_t shown = color == "prediction" ? r.predicted_class : label;
        out.push_back({{"id", p.sample_id},
                       {"split", to_string(split)},
                       {"x", p.x},
                       {"y", p.y},
                       {"label", label},
                       {"predicted_class", r.predicted_class},
                       {"probabilities", r.probabilities},
                       {"color", to_hex(pal[shown])}});
      };
      const auto& ds = s.dataset();
      for (const auto& p : s.train_points(sp)) add(p, s.train_prediction(p.sample_id), ds.train[p.sample_id].label, Split::Train);
      if (inc == "true" || inc == "1") {
        const auto& tv = s.test_view();
        for (const auto& p : tv.points[Session::idx(sp)])
          add(p, tv.predictions[p.sample_id], ds.test[p.sample_id].label, Split::Test);
      }
      return detail::json_response(200, out);
    });
  }

  Response dbm(const Query& q) const {
    return guarded([&] {
      const Space sp = detail::space_param(detail::query_or(q, "space", ""));
      std::size_t G = default_resolution(sp);
      if (auto it = q.find("resolution"); it != q.end()) {
        auto v = detail::parse_index(it->second);
        if (!v || *v < 2 || *v > kMaxResolution)
          fail(ErrorKind::InvalidConfig, "resolution must be an integer in [2, " + std::to_string(kMaxResolution) + "]");
        G = *v;
      }
      DbmMode mode = default_mode(sp);
      if (auto it = q.find("mode"); it != q.end()) {
        auto m = parse_dbm_mode(it->second);
        if (!m) fail(ErrorKind::InvalidConfig, "unknown mode '" + it->second + "'");
        mode = *m;
      }
      const auto format = parse_raster_format(detail::query_or(q, "format", "json_grid"));
      const auto& s = ready();
      auto d = s.dbm(sp, G, mode);
      if (!d) {
        Response r = detail::json_response(
            202, {{"status", "precomputing"},
                  {"message", "synthesis-mode map not available yet; run precompute for this space and resolution"}});
        r.headers["Retry-After"] = "30";
        return r;
      }
      Response r{200, std::string(content_type(format)), export_raster(*d, format), {}};
      r.headers["X-Model-Checksum"] = hex64(d->model_checksum);
      r.headers["X-Projection-Checksum"] = hex64(d->projection_checksum);
      r.headers["X-Extent"] = to_json(d->extent).dump();
      return r;
    });
  }

  Response sample(const std::string& id_text, const Query& q) const {
    return guarded([&] {
      const std::string split = detail::query_or(q, "split", "train");
      if (split != "train" && split != "test") fail(ErrorKind::InvalidConfig, "split must be train or test");
      const auto& s = ready();
      const auto& rows = split == "train" ? s.dataset().train : s.dataset().test;
      auto id = detail::parse_index(id_text);
      if (!id || *id >= rows.size())
        return detail::error_response(404, "NotFound", "no " + split + " sample '" + id_text + "'");
      const auto& row = rows[*id];
      nlohmann::json j{{"id", *id}, {"split", split}, {"series", row.values}, {"label", row.label}};
      std::array<Point2, 3> xy;
      if (split == "train") {
        j["prediction"] = to_json(s.train_prediction(*id), s.palette());
        j["activation"] = detail::row_of(s.bank_activations(), *id);
        j["attribution"] = {{"values", detail::row_of(s.bank_attributions(), *id)},
                            {"target_class", s.bank_attribution_classes()[*id]},
                            {"method", to_string(s.config().attribution_method)}};
        for (Space sp : kAllSpaces) xy[Session::idx(sp)] = Point2{s.train_points(sp)[*id].x, s.train_points(sp)[*id].y};
      } else {
        const auto& tv = s.test_view();
        j["prediction"] = to_json(tv.predictions[*id], s.palette());
        j["activation"] = detail::row_of(tv.activations, *id);
        j["attribution"] = {{"values", detail::row_of(tv.attributions, *id)},
                            {"target_class", tv.attribution_classes[*id]},
                            {"method", to_string(s.config().attribution_method)}};
        for (Space sp : kAllSpaces) xy[Session::idx(sp)] = Point2{tv.points[Session::idx(sp)][*id].x, tv.points[Session::idx(sp)][*id].y};
      }
      j["coords"] = s.coords_json(xy);
      return detail::json_response(200, j);
    });
  }

  Response inverse(const std::string& body) const {
    return guarded([&] {
      const auto j = detail::parse_body(body);
      const Space sp = detail::body_space(j);
      const double x = detail::body_number(j, "x"), y = detail::body_number(j, "y");
      const auto& s = ready();
      auto slot = synthesis_slot(sp);
      return detail::json_response(200, s.to_json(s.inverse(sp, x, y)));
    });
  }

  Response drag(const std::string& body) const {
    return guarded([&] {
      const auto j = detail::parse_body(body);
      const Space sp = detail::body_space(j);
      DragOrigin origin;
      if (j.contains("origin")) {
        const auto& o = j["origin"];
        if (o.is_object() && o.contains("sample_id")) {
          if (!o["sample_id"].is_number_unsigned()) fail(ErrorKind::InvalidConfig, "origin.sample_id must be a non-negative integer");
          origin.sample_id = o["sample_id"].get<std::size_t>();
        } else if (o.is_object() && o.contains("point")) {
          origin.point = detail::body_point(o["point"]);
        } else {
          fail(ErrorKind::InvalidConfig, "origin must hold sample_id or point");
        }
      }
      if (!j.contains("path") || !j["path"].is_array()) fail(ErrorKind::InvalidConfig, "'path' must be an array of points");
      std::vector<Point2> path;
      for (const auto& p : j["path"]) path.push_back(detail::body_point(p));
      std::optional<bool> warm;
      if (j.contains("warm_start")) {
        if (!j["warm_start"].is_boolean()) fail(ErrorKind::InvalidConfig, "warm_start must be a boolean");
        warm = j["warm_start"].get<bool>();
      }
      const auto& s = ready();
      auto slot = synthesis_slot(sp);
      return detail::json_response(200, s.to_json(s.drag(sp, origin, path, warm)));
    });
  }

  Response edit(const std::string& body) const {
    return guarded([&] {
      const auto j = detail::parse_body(body);
      const auto& s = ready();
      const std::size_t T = s.dataset().series_length;
      if (!j.contains("series") || !j["series"].is_array()) fail(ErrorKind::InvalidConfig, "'series' must be an array");
      if (j["series"].size() != T)
        fail(ErrorKind::ShapeMismatch, "series has " + std::to_string(j["series"].size()) + " values, expected " + std::to_string(T));
      std::vector<float> series;
      series.reserve(T);
      for (const auto& v : j["series"]) {
        if (!v.is_number()) fail(ErrorKind::InvalidConfig, "series values must be numbers");
        const double d = v.get<double>();
        if (!std::isfinite(d) || std::abs(d) > std::numeric_limits<float>::max())
          fail(ErrorKind::InvalidConfig, "series values must be finite");
        series.push_back(static_cast<float>(d));
      }
      const auto pl = s.place(series);
      const auto pred = predict<float>(s.model(), series);
      return detail::json_response(200, {{"series", series},
                                         {"prediction", to_json(pred, s.palette())},
                                         {"coords", s.coords_json(pl.xy)},
                                         {"activation", pl.activation},
                                         {"attribution",
                                          {{"values", pl.attribution.values},
                                           {"target_class", pl.attribution.target_class},
                                           {"method", to_string(pl.attribution.method)}}}});
    });
  }

  /// Registers every route plus CORS on `svr`.
  void mount(httplib::Server& svr) const {
    auto send = [](httplib::Response& res, const Response& r) {
      res.status = r.status;
      for (const auto& [k, v] : r.headers) res.set_header(k, v);
      res.set_content(r.body, r.content_type);
    };
    auto query = [](const httplib::Request& req) {
      Query q;
      for (const auto& [k, v] : req.params) q.emplace(k, v);  // first value wins
      return q;
    };
    const bool cors = session_ && session_->config().server.cors;
    if (cors) {
      svr.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                               {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                               {"Access-Control-Allow-Headers", "Content-Type"},
                               {"Access-Control-Expose-Headers", "X-Model-Checksum, X-Projection-Checksum, X-Extent"}});
      svr.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    }
    svr.Get("/api/meta", [=, this](const httplib::Request&, httplib::Response& res) { send(res, meta()); });
    svr.Get("/api/points", [=, this](const httplib::Request& req, httplib::Response& res) { send(res, points(query(req))); });
    svr.Get("/api/dbm", [=, this](const httplib::Request& req, httplib::Response& res) { send(res, dbm(query(req))); });
    svr.Get(R"(/api/sample/([^/]*))", [=, this](const httplib::Request& req, httplib::Response& res) {
      send(res, sample(req.matches[1].str(), query(req)));
    });
    svr.Post("/api/inverse", [=, this](const httplib::Request& req, httplib::Response& res) { send(res, inverse(req.body)); });
    svr.Post("/api/drag", [=, this](const httplib::Request& req, httplib::Response& res) { send(res, drag(req.body)); });
    svr.Post("/api/edit", [=, this](const httplib::Request& req, httplib::Response& res) { send(res, edit(req.body)); });
  }

 private:
  struct Slot {
    std::counting_semaphore<64>* sem = nullptr;
    ~Slot() {
      if (sem) sem->release();
    }
  };

  // Synthesis is CPU-bound; cap concurrent runs at the worker count.
  Slot synthesis_slot(Space sp) const {
    if (sp == Space::Series) return {};
    synth_slots_.acquire();
    return {&synth_slots_};
  }

  const Session& ready() const {
    if (!session_) fail(ErrorKind::StaleProvenance, "no session loaded");
    if (!session_->complete()) fail(ErrorKind::StaleProvenance, session_->problems().front());
    return *session_;
  }

  template <class Fn>
  static Response guarded(Fn&& fn) {
    try {
      return fn();
    } catch (const RequestTimeout& e) {
      return detail::json_response(504, {{"error", "BudgetExceeded"}, {"message", e.what()}, {"partial", e.partial()}});
    } catch (const Error& e) {
      return detail::error_response(detail::status_for(e.kind()), to_string(e.kind()), e.what());
    } catch (const nlohmann::json::exception& e) {
      return detail::error_response(400, "InvalidConfig", e.what());
    } catch (const std::exception& e) {
      return detail::error_response(500, "Internal", e.what());
    }
  }

  std::shared_ptr<const Session> session_;
  mutable std::counting_semaphore<64> synth_slots_;
};

}  // namespace cfw
