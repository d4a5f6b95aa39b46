#pragma once

#include <filesystem>

#include <json.hpp>

#include "cfw/container.hpp"
#include "cfw/model.hpp"

namespace cfw {

inline constexpr int kModelConfigVersion = 1;

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"input_length", c.input_length}, {"num_classes", c.num_classes}, {"blocks", c.blocks},
          {"channels", c.channels},         {"kernel_sizes", c.kernel_sizes}, {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.input_length = j.value("input_length", c.input_length);
  c.num_classes = j.value("num_classes", c.num_classes);
  c.blocks = j.value("blocks", c.blocks);
  c.channels = j.value("channels", c.channels);
  c.kernel_sizes = j.value("kernel_sizes", c.kernel_sizes);
  c.seed = j.value("seed", c.seed);
  return c;
}

inline void save_model(const ClassifierModel<float>& m, const std::filesystem::path& manifest,
                       const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json meta = extra;
  meta["config_version"] = kModelConfigVersion;
  meta["config"] = to_json(m.config);
  meta["activation_layer"] = m.activation_layer;
  meta["model_checksum"] = hex64(model_checksum(m));
  write_artifact(manifest, "classifier", meta, m.parameters);
}

inline ClassifierModel<float> load_model(const std::filesystem::path& manifest) {
  auto a = read_artifact(manifest, "classifier");
  if (a.meta.value("config_version", -1) != kModelConfigVersion)
    fail(ErrorKind::VersionMismatch, manifest.string() + ": config_version " + a.meta.value("config_version", nlohmann::json()).dump());
  ClassifierModel<float> m;
  try {
    m.config = model_config_from_json(a.meta.at("config"));
    m.activation_layer = a.meta.value("activation_layer", std::string(kPooledLayer));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptFile, manifest.string() + ": " + e.what());
  }
  validate(m.config);
  auto reference = build_model<float>(m.config);
  if (reference.parameters.size() != a.tensors.size())
    fail(ErrorKind::CorruptFile, manifest.string() + ": parameter count does not match config");
  for (std::size_t i = 0; i < a.tensors.size(); ++i) {
    if (a.tensors[i].name != reference.parameters[i].name || a.tensors[i].value.shape != reference.parameters[i].value.shape)
      fail(ErrorKind::CorruptFile, manifest.string() + ": parameter " + a.tensors[i].name + " inconsistent with config");
  }
  m.parameters = std::move(a.tensors);
  return m;
}

}  // namespace cfw
