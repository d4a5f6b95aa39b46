#include <catch2/catch_amalgamated.hpp>

#include "pipeline_fixture.hpp"

using namespace cfw;
using namespace testsupport;
using nlohmann::json;

namespace {

const Api& api() {
  static const Api a(built_pipeline().session);
  return a;
}

json body_of(const Response& r) { return json::parse(r.body); }

json post(Response (Api::*fn)(const std::string&) const, const json& body, int expect = 200) {
  auto r = (api().*fn)(body.dump());
  INFO(r.body.substr(0, 300));
  REQUIRE(r.status == expect);
  return body_of(r);
}

void require_series_ok(const json& s, std::size_t T) {
  REQUIRE(s.is_array());
  REQUIRE(s.size() == T);
  for (const auto& v : s) REQUIRE(std::isfinite(v.get<double>()));
}

}  // namespace

TEST_CASE("meta describes the session and is stable", "[server]") {
  auto r = api().meta();
  REQUIRE(r.status == 200);
  REQUIRE(r.content_type == "application/json");
  auto j = body_of(r);
  CHECK(j["dataset"]["T"] == 48);
  CHECK(j["dataset"]["C"] == 3);
  CHECK(j["dataset"]["train_size"] == 90);
  CHECK(j["classes"].size() == 3);
  CHECK(j["classes"][1]["color"] == "#d95f02");
  CHECK(j["spaces"].size() == 3);
  CHECK(j["accuracies"]["test"].is_number());
  const auto& s = *built_pipeline().session;
  CHECK(j["checksums"]["model"] == hex64(s.model_checksum_value()));
  CHECK(api().meta().body == r.body);
}

TEST_CASE("meta is 503 while artifacts are incomplete", "[server]") {
  TempDir dir("incomplete");
  auto cfg = small_pipeline_config(dir.path());
  auto session = Session::load(cfg);
  REQUIRE_FALSE(session->complete());
  Api a(session);
  auto r = a.meta();
  CHECK(r.status == 503);
  CHECK(body_of(r)["error"] == "StaleProvenance");
  CHECK(a.points({{"space", "series"}}).status == 503);
  CHECK(a.inverse(R"({"space":"series","x":0,"y":0})").status == 503);
}

TEST_CASE("points: one entry per train sample in id order", "[server]") {
  for (const char* sp : {"series", "activations", "attributions"}) {
    auto r = api().points({{"space", sp}});
    REQUIRE(r.status == 200);
    auto j = body_of(r);
    REQUIRE(j.size() == 90);
    for (std::size_t i = 0; i < j.size(); ++i) {
      CHECK(j[i]["id"] == i);
      CHECK(j[i]["split"] == "train");
      double sum = 0;
      for (const auto& p : j[i]["probabilities"]) sum += p.get<double>();
      CHECK(sum == Catch::Approx(1.0).margin(1e-6));
    }
    CHECK(api().points({{"space", sp}}).body == r.body);
  }
  auto gt = body_of(api().points({{"space", "series"}, {"color", "ground_truth"}}));
  const auto pal = palette_for(3);
  for (const auto& e : gt) CHECK(e["color"] == to_hex(pal.colors[e["label"].get<std::size_t>()]));
  auto both = body_of(api().points({{"space", "series"}, {"include_test", "true"}}));
  CHECK(both.size() == 180);
  CHECK(both[90]["split"] == "test");
  CHECK(api().points({{"space", "latent"}}).status == 400);
  CHECK(api().points({}).status == 400);
  CHECK(api().points({{"space", "series"}, {"color", "rainbow"}}).status == 400);
}

TEST_CASE("dbm: cached maps, deterministic bodies and error statuses", "[server]") {
  auto r = api().dbm({{"space", "series"}, {"resolution", "8"}, {"mode", "direct"}});
  REQUIRE(r.status == 200);
  auto j = body_of(r);
  CHECK(j["cells"].size() == 64);
  for (const auto& c : j["cells"]) {
    double s = 0;
    for (const auto& p : c["probabilities"]) s += p.get<double>();
    CHECK(std::abs(s - 1.0) <= 1e-6);
  }
  CHECK(api().dbm({{"space", "series"}, {"resolution", "8"}, {"mode", "direct"}}).body == r.body);
  const auto meta = body_of(api().meta());
  CHECK(j["provenance"]["model_checksum"] == meta["checksums"]["model"]);
  CHECK(j["provenance"]["projection_checksum"] == meta["checksums"]["projections"]["series"]);

  // Not precomputed at this resolution: computed on demand for direct, 202 for synthesis.
  CHECK(api().dbm({{"space", "series"}, {"resolution", "5"}}).status == 200);
  auto pending = api().dbm({{"space", "attributions"}, {"resolution", "6"}, {"mode", "synthesis"}});
  CHECK(pending.status == 202);
  CHECK(pending.headers.count("Retry-After") == 1);
  auto done = api().dbm({{"space", "attributions"}, {"resolution", "4"}, {"mode", "synthesis"}});
  CHECK(done.status == 200);
  CHECK(body_of(done)["cells"].size() == 16);

  auto png = api().dbm({{"space", "activations"}, {"resolution", "8"}, {"mode", "head"}, {"format", "png"}});
  REQUIRE(png.status == 200);
  CHECK(png.content_type == "image/png");
  CHECK(png.body.substr(1, 3) == "PNG");
  CHECK(png.headers.at("X-Model-Checksum") == meta["checksums"]["model"]);
  CHECK(png.headers.at("X-Projection-Checksum") == meta["checksums"]["projections"]["activations"]);
  CHECK(json::parse(png.headers.at("X-Extent")).contains("x_min"));
  auto ppm = api().dbm({{"space", "series"}, {"resolution", "8"}, {"format", "ppm"}});
  CHECK(ppm.content_type == "image/x-portable-pixmap");
  CHECK(ppm.body.size() == std::string("P6\n8 8\n255\n").size() + 8 * 8 * 3);

  CHECK(api().dbm({{"space", "series"}, {"mode", "sideways"}}).status == 400);
  CHECK(api().dbm({{"space", "series"}, {"mode", "head"}}).status == 400);
  CHECK(api().dbm({{"space", "series"}, {"resolution", "1"}}).status == 400);
  CHECK(api().dbm({{"space", "series"}, {"resolution", "x"}}).status == 400);
  CHECK(api().dbm({{"space", "series"}, {"resolution", "8"}, {"format", "gif"}}).status == 400);
}

TEST_CASE("sample: contents agree with points", "[server]") {
  auto j = body_of(api().sample("0", {}));
  require_series_ok(j["series"], 48);
  CHECK(j["activation"].size() == 8);
  CHECK(j["attribution"]["values"].size() == 48);
  auto pts = body_of(api().points({{"space", "activations"}}));
  auto s7 = body_of(api().sample("7", {}));
  CHECK(s7["coords"]["activations"]["x"] == pts[7]["x"]);
  CHECK(s7["coords"]["activations"]["y"] == pts[7]["y"]);
  CHECK(s7["prediction"]["probabilities"] == pts[7]["probabilities"]);
  auto tp = body_of(api().points({{"space", "series"}, {"include_test", "true"}}));
  auto t3 = body_of(api().sample("3", {{"split", "test"}}));
  CHECK(t3["coords"]["series"]["x"] == tp[93]["x"]);
  CHECK(api().sample("90", {}).status == 404);
  CHECK(api().sample("abc", {}).status == 404);
  CHECK(api().sample("-1", {}).status == 404);
  CHECK(api().sample("0", {{"split", "validation"}}).status == 400);
}

TEST_CASE("inverse in series space decodes a train point close to its series", "[server]") {
  const auto& s = *built_pipeline().session;
  const auto& ds = s.dataset();
  const std::size_t T = ds.series_length;
  std::vector<double> mean(T, 0.0);
  for (const auto& r : ds.train)
    for (std::size_t t = 0; t < T; ++t) mean[t] += r.values[t] / static_cast<double>(ds.train.size());
  double err = 0, var = 0;
  const auto pts = body_of(api().points({{"space", "series"}}));
  for (std::size_t i = 0; i < 20; ++i) {
    auto j = post(&Api::inverse, {{"space", "series"}, {"x", pts[i]["x"]}, {"y", pts[i]["y"]}});
    require_series_ok(j["series"], T);
    CHECK_FALSE(j.contains("synthesis_meta"));
    CHECK(j["coords"].contains("attributions"));
    for (std::size_t t = 0; t < T; ++t) {
      const double d = j["series"][t].get<double>() - ds.train[i].values[t];
      const double v = ds.train[i].values[t] - mean[t];
      err += d * d;
      var += v * v;
    }
  }
  CHECK(err / var <= 0.35);
}

TEST_CASE("inverse in synthesis spaces reports a monotone loss curve", "[server]") {
  for (const char* sp : {"activations", "attributions"}) {
    auto j = post(&Api::inverse, {{"space", sp}, {"x", 0.1}, {"y", -0.2}});
    require_series_ok(j["series"], 48);
    REQUIRE(j.contains("synthesis_meta"));
    const auto curve = j["synthesis_meta"]["loss_curve"].get<std::vector<double>>();
    REQUIRE_FALSE(curve.empty());
    for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] <= curve[i - 1]);
    CHECK(j["synthesis_meta"]["final_loss"] == curve.back());
    // Same request, same seed, same answer.
    CHECK(post(&Api::inverse, {{"space", sp}, {"x", 0.1}, {"y", -0.2}}) == j);
  }
}

TEST_CASE("inverse rejects malformed requests", "[server]") {
  post(&Api::inverse, {{"space", "series"}, {"x", "NaN"}, {"y", 0}}, 400);
  post(&Api::inverse, {{"space", "series"}, {"y", 0}}, 400);
  post(&Api::inverse, {{"space", "latent"}, {"x", 0}, {"y", 0}}, 400);
  CHECK(api().inverse("not json").status == 400);
  CHECK(api().inverse("[1,2]").status == 400);
}

TEST_CASE("drag with one vertex equals inverse at that vertex", "[server]") {
  for (const char* sp : {"series", "activations", "attributions"}) {
    const json p{{"x", 0.3}, {"y", 0.05}};
    auto inv = post(&Api::inverse, {{"space", sp}, {"x", 0.3}, {"y", 0.05}});
    auto tr = post(&Api::drag, {{"space", sp}, {"origin", {{"point", p}}}, {"path", json::array({p})}});
    REQUIRE(tr["waypoints"].size() == 1);
    CHECK(tr["waypoints"][0] == inv);
    CHECK(tr["class_changed"] == false);
    CHECK(tr["origin"]["point"] == p);
  }
}

TEST_CASE("drag chains waypoints and flags class changes", "[server]") {
  const auto pts = body_of(api().points({{"space", "activations"}}));
  json path = json::array();
  for (int k = 0; k < 4; ++k) path.push_back({pts[0]["x"].get<double>() + 0.2 * k, pts[0]["y"].get<double>()});
  auto tr = post(&Api::drag, {{"space", "activations"}, {"origin", {{"sample_id", 0}}}, {"path", path}});
  const auto& w = tr["waypoints"];
  REQUIRE(w.size() == 4);
  CHECK(tr["warm_start"] == true);
  CHECK(w[0]["synthesis_meta"]["init_source"] != "provided");
  for (std::size_t i = 1; i < w.size(); ++i) CHECK(w[i]["synthesis_meta"]["init_source"] == "provided");
  for (const auto& x : w) require_series_ok(x["series"], 48);
  CHECK(tr["class_changed"] ==
        (w.front()["prediction"]["predicted_class"] != w.back()["prediction"]["predicted_class"]));
  CHECK(tr["created_at"].get<std::string>().size() == 20);

  auto cold = post(&Api::drag, {{"space", "activations"}, {"path", path}, {"warm_start", false}});
  for (const auto& x : cold["waypoints"]) CHECK(x["synthesis_meta"]["init_source"] != "provided");
}

TEST_CASE("drag rejects bad paths and origins", "[server]") {
  post(&Api::drag, {{"space", "series"}, {"path", json::array()}}, 400);
  post(&Api::drag, {{"space", "series"}}, 400);
  post(&Api::drag, {{"space", "series"}, {"path", json::array({json::array({0, "x"})})}}, 400);
  post(&Api::drag, {{"space", "series"}, {"origin", {{"sample_id", 5000}}}, {"path", json::array({{0, 0}})}}, 400);
  post(&Api::drag, {{"space", "series"}, {"origin", {{"sample_id", -1}}}, {"path", json::array({{0, 0}})}}, 400);
  post(&Api::drag, {{"space", "series"}, {"origin", 3}, {"path", json::array({{0, 0}})}}, 400);
  json longpath = json::array();
  for (int i = 0; i < 257; ++i) longpath.push_back({0.0, 0.0});
  post(&Api::drag, {{"space", "series"}, {"path", longpath}}, 400);
  longpath.erase(longpath.begin());
  CHECK(post(&Api::drag, {{"space", "series"}, {"path", longpath}})["waypoints"].size() == 256);
}

TEST_CASE("budget exhaustion returns 504 with the completed waypoints", "[server]") {
  auto cfg = built_pipeline().cfg;
  cfg.server.request_budget_seconds = 1e-9;
  Api slow(Session::load(cfg));
  auto r = slow.drag(R"({"space":"series","path":[[0,0],[0.1,0],[0.2,0]]})");
  REQUIRE(r.status == 504);
  auto j = body_of(r);
  CHECK(j["error"] == "BudgetExceeded");
  CHECK(j["partial"]["waypoints"].size() == 1);

  cfg = built_pipeline().cfg;
  cfg.synthesis.budget_seconds = 1e-9;
  Api starved(Session::load(cfg));
  auto inv = starved.inverse(R"({"space":"attributions","x":0.1,"y":0.1})");
  REQUIRE(inv.status == 504);
  auto partial = body_of(inv)["partial"];
  CHECK(partial["synthesis_meta"]["budget_exhausted"] == true);
  require_series_ok(partial["series"], 48);
  CHECK(starved.inverse(R"({"space":"activations","x":0.1,"y":0.1})").status == 504);
  CHECK(starved.inverse(R"({"space":"series","x":0.1,"y":0.1})").status == 200);
}

TEST_CASE("edit re-predicts and re-projects a series", "[server]") {
  const auto& s = *built_pipeline().session;
  const auto& row = s.dataset().train[4];
  auto j = post(&Api::edit, {{"series", row.values}});
  auto sample = body_of(api().sample("4", {}));
  CHECK(j["prediction"]["predicted_class"] == sample["prediction"]["predicted_class"]);
  for (std::size_t c = 0; c < 3; ++c)
    CHECK(j["prediction"]["probabilities"][c].get<double>() ==
          Catch::Approx(sample["prediction"]["probabilities"][c].get<double>()).margin(1e-6));
  CHECK(j["attribution"]["values"].size() == 48);

  auto bumped = row.values;
  bumped[24] += 3.0f;
  auto b = post(&Api::edit, {{"series", bumped}});
  for (Space sp : kAllSpaces) {
    CHECK(std::isfinite(b["coords"][std::string(to_string(sp))]["x"].get<double>()));
    CHECK(std::isfinite(b["coords"][std::string(to_string(sp))]["y"].get<double>()));
  }
  post(&Api::edit, {{"series", std::vector<float>(47, 0.0f)}}, 400);
  post(&Api::edit, {{"series", "flat"}}, 400);
  post(&Api::edit, {{"series", json::array({1e300})}}, 400);
  post(&Api::edit, json::object(), 400);
}

TEST_CASE("mounted routes answer over HTTP with CORS", "[server]") {
  httplib::Server svr;
  api().mount(svr);
  const int port = svr.bind_to_any_port("127.0.0.1");
  REQUIRE(port > 0);
  std::thread t([&] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  httplib::Client cli("127.0.0.1", port);
  auto meta = cli.Get("/api/meta");
  REQUIRE(meta);
  CHECK(meta->status == 200);
  CHECK(meta->get_header_value("Access-Control-Allow-Origin") == "*");
  CHECK(meta->body == api().meta().body);
  auto sample = cli.Get("/api/sample/2?split=test");
  REQUIRE(sample);
  CHECK(sample->body == api().sample("2", {{"split", "test"}}).body);
  auto inv = cli.Post("/api/inverse", R"({"space":"series","x":0,"y":0})", "application/json");
  REQUIRE(inv);
  CHECK(inv->status == 200);
  auto img = cli.Get("/api/dbm?space=series&resolution=8&format=png");
  REQUIRE(img);
  CHECK(img->get_header_value("Content-Type") == "image/png");
  CHECK(img->has_header("X-Model-Checksum"));
  auto pre = cli.Options("/api/drag");
  REQUIRE(pre);
  CHECK(pre->status == 204);
  svr.stop();
  t.join();
}
