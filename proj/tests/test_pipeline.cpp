#include <catch2/catch_amalgamated.hpp>

#include <set>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include "pipeline_fixture.hpp"

using namespace cfw;
using namespace testsupport;
using nlohmann::json;

TEST_CASE("stage seeds are distinct and depend on the master seed", "[pipeline]") {
  std::set<std::uint64_t> seen;
  for (auto s : {Stage::ModelInit, Stage::Training, Stage::ProjectionSeries, Stage::ProjectionActivations,
                 Stage::ProjectionAttributions, Stage::Dbm, Stage::Synthesis}) {
    seen.insert(stage_seed(0, s));
    seen.insert(stage_seed(1, s));
  }
  CHECK(seen.size() == 14);
  CHECK(stage_seed(7, Stage::Dbm) == stage_seed(7, Stage::Dbm));
}

TEST_CASE("pipeline config survives a JSON round trip", "[pipeline]") {
  PipelineConfig c;
  c.seed = 42;
  c.attribution_method = AttributionMethod::GradientXInput;
  c.projection_for(Space::Activations).epochs = 77;
  c.dbms = {{Space::Activations, 16, DbmMode::Synthesis}};
  c.synthesis.gradient_mode = GradientMode::Spsa;
  c.server.drag_cap = 9;
  const auto j = to_json(c);
  const auto back = pipeline_config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.projection_for(Space::Activations).epochs == 77);
  CHECK(back.synthesis.gradient_mode == GradientMode::Spsa);

  // Defaults: attribution projection uses the shared scale.
  CHECK(PipelineConfig{}.projection_for(Space::Attributions).scaling == Scaling::Global);
  CHECK(PipelineConfig{}.projection_for(Space::Series).scaling == Scaling::PerDimension);
}

TEST_CASE("pipeline config rejects unknown keys and bad values", "[pipeline]") {
  auto bad = [](const json& j) {
    try {
      pipeline_config_from_json(j);
    } catch (const Error& e) {
      return e.kind() == ErrorKind::InvalidConfig;
    }
    return false;
  };
  CHECK(bad({{"sed", 1}}));
  CHECK(bad({{"training", {{"epoch", 3}}}}));
  CHECK(bad({{"training", {{"epochs", "many"}}}}));
  CHECK(bad({{"attribution", {{"method", "lime"}}}}));
  CHECK(bad({{"dbm", {{"maps", json::array({{{"space", "series"}, {"mode", "head"}}})}}}}));
  CHECK(bad({{"dbm", {{"maps", json::array({{{"space", "latent"}}})}}}}));
  CHECK(bad({{"synthesis", {{"init", "provided"}}}}));
  CHECK(bad({{"projection", {{"series", {{"scaling", "log"}}}}}}));
  CHECK_FALSE(bad({{"seed", 3}, {"workers", 2}}));
}

TEST_CASE("config file loading reports missing and malformed files", "[pipeline]") {
  TempDir dir("cfgfile");
  CHECK_THROWS_AS(load_pipeline_config(dir / "none.json"), Error);
  write_text(dir / "bad.json", "{ nope");
  try {
    load_pipeline_config(dir / "bad.json");
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(exit_code_for(e.kind()) == kExitInput);
  }
  write_text(dir / "ok.json", R"({"seed": 5, "artifacts": "out"})");
  auto c = load_pipeline_config(dir / "ok.json");
  CHECK(c.seed == 5);
  CHECK(c.artifacts == "out");
}

TEST_CASE("train is reproducible under a fixed seed", "[pipeline]") {
  const auto& b = built_pipeline();
  TempDir dir("retrain");
  auto cfg = small_pipeline_config(dir.path());
  CHECK(cfg.seed == b.cfg.seed);
  auto rep = cmd_train(cfg, quiet());
  CHECK(rep.test_accuracy >= 0.8);
  const auto a = read_json(ArtifactPaths{cfg.artifacts}.train_report());
  const auto o = read_json(ArtifactPaths{b.cfg.artifacts}.train_report());
  CHECK(a["model_checksum"] == o["model_checksum"]);
  CHECK(a["model_checksum"] == hex64(b.session->model_checksum_value()));
  CHECK(a["dataset_checksum"] == o["dataset_checksum"]);
  CHECK(a["test_accuracy"] == o["test_accuracy"]);
}

TEST_CASE("train fails with an input error when the dataset is missing", "[pipeline]") {
  TempDir dir("nodata");
  auto cfg = small_pipeline_config(dir.path());
  cfg.dataset.train = dir / "absent_TRAIN.tsv";
  try {
    cmd_train(cfg, quiet());
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::IoError);
    CHECK(exit_code_for(e.kind()) == kExitInput);
  }
}

TEST_CASE("precompute writes every artifact and skips up-to-date stages", "[pipeline]") {
  const auto& b = built_pipeline();
  const ArtifactPaths paths{b.cfg.artifacts};
  for (Space sp : kAllSpaces) CHECK(std::filesystem::exists(paths.projection(sp)));
  for (const auto& p : b.cfg.dbms) CHECK(std::filesystem::exists(paths.dbm(p.space, p.resolution, p.mode)));
  REQUIRE(b.session->complete());

  auto again = cmd_precompute(b.cfg, false, quiet());
  CHECK(again.stages.size() == 2 + 3 + b.cfg.dbms.size());
  CHECK(again.computed() == 0);

  // The attribution projection records the cache it was fitted on.
  const auto meta = read_manifest(paths.projection(Space::Attributions))["meta"];
  CHECK(meta["source_checksum"] == read_manifest(paths.attributions())["checksum"]);
  CHECK(meta["model_checksum"] == hex64(b.session->model_checksum_value()));
}

TEST_CASE("precompute refuses stale caches unless forced", "[pipeline]") {
  TempDir dir("stale");
  auto cfg = small_pipeline_config(dir.path());
  cfg.dbms = {{Space::Series, 4, DbmMode::Direct}};
  cmd_train(cfg, quiet());
  CHECK(cmd_precompute(cfg, false, quiet()).computed() == 6);

  // A settings-only change recomputes just the affected stage.
  cfg.projection_for(Space::Series).epochs = 100;
  auto partial = cmd_precompute(cfg, false, quiet());
  CHECK(partial.computed() == 2);  // projection_series and the series map keyed on it

  cfg.seed = 99;
  cmd_train(cfg, quiet());
  try {
    cmd_precompute(cfg, false, quiet());
    FAIL("expected StaleProvenance");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::StaleProvenance);
    CHECK(exit_code_for(e.kind()) == kExitInput);
  }
  CHECK(cmd_precompute(cfg, true, quiet()).computed() == 6);
  CHECK(cmd_precompute(cfg, false, quiet()).computed() == 0);
  CHECK(Session::load(cfg)->complete());
}

TEST_CASE("session reports why it is incomplete", "[pipeline]") {
  TempDir dir("partial");
  auto cfg = small_pipeline_config(dir.path());
  CHECK(Session::load(cfg)->problems().front().find("no trained model") != std::string::npos);
  cmd_train(cfg, quiet());
  auto s = Session::load(cfg);
  REQUIRE_FALSE(s->complete());
  CHECK(s->problems().front().find("cache missing") != std::string::npos);
  CHECK_THROWS_AS(s->inverse(Space::Series, 0, 0), Error);
}

TEST_CASE("demo summary validates and is reproducible", "[pipeline]") {
  const auto& b = built_pipeline();
  const auto first = cmd_demo(b.cfg, quiet());
  CHECK(validate_demo_summary(first).empty());
  REQUIRE(first["suites"].size() == 3);
  CHECK(first["suites"][0]["space"] == "series");
  CHECK(first["suites"][0]["drags"] == 4);
  CHECK(first["suites"][1]["all_monotone"] == true);
  CHECK(first["suites"][2]["all_monotone"] == true);
  CHECK(first["rasters"].size() == 3);
  const auto demo = ArtifactPaths{b.cfg.artifacts}.demo();
  CHECK(read_json(demo / "summary.json") == first);
  CHECK(std::filesystem::exists(demo / "traces" / "attributions_0.json"));
  CHECK(std::filesystem::exists(demo / first["rasters"][0]["file"].get<std::string>()));
  CHECK(cmd_demo(b.cfg, quiet()) == first);
}

TEST_CASE("demo summary validator catches malformed summaries", "[pipeline]") {
  const auto& b = built_pipeline();
  auto good = read_json(ArtifactPaths{b.cfg.artifacts}.demo() / "summary.json");
  if (!good.is_object()) good = cmd_demo(b.cfg, quiet());
  REQUIRE(validate_demo_summary(good).empty());
  auto broken = good;
  broken["schema"] = "other/1";
  CHECK_FALSE(validate_demo_summary(broken).empty());
  broken = good;
  broken["suites"][0]["class_change_rate"] = 1.5;
  CHECK_FALSE(validate_demo_summary(broken).empty());
  broken = good;
  broken["suites"][0]["class_changed"] = 99;
  CHECK_FALSE(validate_demo_summary(broken).empty());
  broken = good;
  broken.erase("model_checksum");
  CHECK_FALSE(validate_demo_summary(broken).empty());
  CHECK_FALSE(validate_demo_summary(json::array()).empty());
}

TEST_CASE("bind addresses parse as host:port", "[pipeline]") {
  auto hp = parse_bind("127.0.0.1:8080");
  CHECK(hp.host == "127.0.0.1");
  CHECK(hp.port == 8080);
  CHECK(parse_bind("[::1]:0").host == "[::1]");
  CHECK_THROWS_AS(parse_bind("localhost"), Error);
  CHECK_THROWS_AS(parse_bind("localhost:http"), Error);
  CHECK_THROWS_AS(parse_bind("localhost:70000"), Error);
  CHECK_THROWS_AS(parse_bind(":80"), Error);
}

TEST_CASE("serve exits with the environment code when the port is taken", "[pipeline]") {
  const int holder = ::socket(AF_INET, SOCK_STREAM, 0);
  REQUIRE(holder >= 0);
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = 0;
  REQUIRE(::bind(holder, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
  REQUIRE(::listen(holder, 1) == 0);
  socklen_t len = sizeof addr;
  ::getsockname(holder, reinterpret_cast<sockaddr*>(&addr), &len);
  auto cfg = built_pipeline().cfg;
  cfg.server.bind = "127.0.0.1:" + std::to_string(ntohs(addr.sin_port));
  int rc = -1;
  std::thread t([&] { rc = cmd_serve(cfg, quiet()); });
  t.join();
  ::close(holder);
  CHECK(rc == kExitEnvironment);
}
