#pragma once

// Artifact container: a JSON manifest plus an adjacent little-endian float32 blob.
//
//   foo.json  {"format_version": ..., "kind": ..., "tensors": [{"name","shape","offset","count"}],
//              "blob": "foo.bin", "blob_bytes": n, "checksum": "<fnv1a-64 hex of blob>", "meta": {...}}
//   foo.bin   tensors back to back, in manifest order

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cfw/common.hpp"
#include "cfw/model.hpp"

namespace cfw {

inline constexpr const char* kArtifactFormat = "cfw-artifact/1";

struct Artifact {
  std::string kind;
  nlohmann::json meta;
  std::vector<NamedTensor<float>> tensors;
  std::uint64_t checksum = 0;

  const Tensor<float>& tensor(std::string_view name) const {
    for (const auto& t : tensors)
      if (t.name == name) return t.value;
    fail(ErrorKind::CorruptFile, "artifact has no tensor '" + std::string(name) + "'");
  }
};

namespace detail {

inline std::uint32_t to_le(std::uint32_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  return ((v & 0xffu) << 24) | ((v & 0xff00u) << 8) | ((v >> 8) & 0xff00u) | (v >> 24);
}

inline std::vector<char> encode_blob(const std::vector<NamedTensor<float>>& tensors) {
  std::size_t total = 0;
  for (const auto& t : tensors) total += t.value.size();
  std::vector<char> blob(total * 4);
  std::size_t pos = 0;
  for (const auto& t : tensors)
    for (float f : t.value.data) {
      std::uint32_t bits = to_le(std::bit_cast<std::uint32_t>(f));
      std::memcpy(blob.data() + pos, &bits, 4);
      pos += 4;
    }
  return blob;
}

}  // namespace detail

inline std::filesystem::path blob_path_for(const std::filesystem::path& manifest) {
  auto p = manifest;
  return p.replace_extension(".bin");
}

/// Writes manifest + blob; returns the blob checksum.
inline std::uint64_t write_artifact(const std::filesystem::path& manifest, const std::string& kind,
                                    const nlohmann::json& meta, const std::vector<NamedTensor<float>>& tensors) {
  const auto blob = detail::encode_blob(tensors);
  const std::uint64_t sum = fnv1a(blob.data(), blob.size());

  nlohmann::json j;
  j["format_version"] = kArtifactFormat;
  j["kind"] = kind;
  auto& idx = j["tensors"] = nlohmann::json::array();
  std::size_t off = 0;
  for (const auto& t : tensors) {
    idx.push_back({{"name", t.name}, {"shape", t.value.shape}, {"offset", off}, {"count", t.value.size()}});
    off += t.value.size();
  }
  const auto blob_path = blob_path_for(manifest);
  j["blob"] = blob_path.filename().string();
  j["blob_bytes"] = blob.size();
  j["checksum"] = hex64(sum);
  j["meta"] = meta;

  if (manifest.has_parent_path()) std::filesystem::create_directories(manifest.parent_path());
  {
    std::ofstream out(blob_path, std::ios::binary);
    if (!out) fail(ErrorKind::IoError, "cannot write " + blob_path.string());
    out.write(blob.data(), static_cast<std::streamsize>(blob.size()));
    if (!out) fail(ErrorKind::IoError, "short write to " + blob_path.string());
  }
  std::ofstream out(manifest, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + manifest.string());
  out << j.dump(2) << '\n';
  if (!out) fail(ErrorKind::IoError, "short write to " + manifest.string());
  return sum;
}

inline nlohmann::json read_manifest(const std::filesystem::path& manifest) {
  std::ifstream in(manifest, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + manifest.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptFile, manifest.string() + ": " + e.what());
  }
  return j;
}

/// Reads and verifies an artifact. `kind` empty accepts any kind.
inline Artifact read_artifact(const std::filesystem::path& manifest, const std::string& kind = {}) {
  auto j = read_manifest(manifest);
  if (j.value("format_version", std::string{}) != kArtifactFormat)
    fail(ErrorKind::VersionMismatch, manifest.string() + ": format_version " + j.value("format_version", std::string{"?"}));
  Artifact a;
  try {
    a.kind = j.at("kind").get<std::string>();
    if (!kind.empty() && a.kind != kind)
      fail(ErrorKind::CorruptFile, manifest.string() + ": expected kind " + kind + ", found " + a.kind);
    a.meta = j.value("meta", nlohmann::json::object());

    const auto blob_path = manifest.parent_path() / j.at("blob").get<std::string>();
    std::ifstream in(blob_path, std::ios::binary);
    if (!in) fail(ErrorKind::IoError, "cannot open " + blob_path.string());
    std::vector<char> blob((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (blob.size() != j.at("blob_bytes").get<std::size_t>())
      fail(ErrorKind::CorruptFile, blob_path.string() + ": expected " + j.at("blob_bytes").dump() + " bytes, found " +
                                       std::to_string(blob.size()));
    a.checksum = fnv1a(blob.data(), blob.size());
    if (hex64(a.checksum) != j.at("checksum").get<std::string>())
      fail(ErrorKind::CorruptFile, blob_path.string() + ": checksum mismatch");

    for (const auto& t : j.at("tensors")) {
      auto shape = t.at("shape").get<std::vector<std::size_t>>();
      const auto off = t.at("offset").get<std::size_t>(), count = t.at("count").get<std::size_t>();
      if ((off + count) * 4 > blob.size() || Tensor<float>::element_count(shape) != count)
        fail(ErrorKind::CorruptFile, manifest.string() + ": bad tensor index entry " + t.dump());
      Tensor<float> v(std::move(shape));
      for (std::size_t i = 0; i < count; ++i) {
        std::uint32_t bits;
        std::memcpy(&bits, blob.data() + (off + i) * 4, 4);
        v[i] = std::bit_cast<float>(detail::to_le(bits));
      }
      a.tensors.push_back({t.at("name").get<std::string>(), std::move(v)});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorKind::CorruptFile, manifest.string() + ": " + e.what());
  }
  return a;
}

}  // namespace cfw
