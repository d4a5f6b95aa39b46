#pragma once

// Byte-stable encodings of a decision boundary map. Image formats put the top row at y_max.

#include <string>
#include <zlib.h>

#include "cfw/dbm.hpp"

namespace cfw {

enum class RasterFormat { JsonGrid, Ppm, Png };

inline RasterFormat parse_raster_format(std::string_view s) {
  if (s == "json_grid" || s == "json") return RasterFormat::JsonGrid;
  if (s == "ppm") return RasterFormat::Ppm;
  if (s == "png") return RasterFormat::Png;
  fail(ErrorKind::UnsupportedFormat, "unsupported raster format '" + std::string(s) + "'");
}

inline std::string_view content_type(RasterFormat f) {
  switch (f) {
    case RasterFormat::JsonGrid: return "application/json";
    case RasterFormat::Ppm: return "image/x-portable-pixmap";
    case RasterFormat::Png: return "image/png";
  }
  return "application/octet-stream";
}

inline nlohmann::json dbm_to_json(const DecisionBoundaryMap& d) {
  nlohmann::json j;
  j["space"] = to_string(d.space);
  j["mode"] = to_string(d.mode);
  j["resolution"] = d.resolution;
  j["num_classes"] = d.num_classes;
  j["extent"] = to_json(d.extent);
  j["palette"] = nlohmann::json::array();
  for (auto c : d.palette.colors) j["palette"].push_back(to_hex(c));
  j["provenance"] = {{"model_checksum", hex64(d.model_checksum)},
                     {"projection_checksum", hex64(d.projection_checksum)},
                     {"seed", d.seed}};
  auto& cells = j["cells"] = nlohmann::json::array();
  for (const auto& c : d.cells)
    cells.push_back({{"probabilities", c.probabilities}, {"color", to_hex(c.color)}, {"argmax", c.argmax_class}});
  return j;
}

namespace detail {

// RGB pixels, top row = highest y.
inline std::string image_rows(const DecisionBoundaryMap& d) {
  const std::size_t G = d.resolution;
  std::string px;
  px.reserve(G * G * 3);
  for (std::size_t r = G; r-- > 0;)
    for (std::size_t c = 0; c < G; ++c) {
      const auto& rgb = d.cells[r * G + c].color;
      px.push_back(static_cast<char>(rgb.r));
      px.push_back(static_cast<char>(rgb.g));
      px.push_back(static_cast<char>(rgb.b));
    }
  return px;
}

inline void put_be32(std::string& s, std::uint32_t v) {
  for (int sh = 24; sh >= 0; sh -= 8) s.push_back(static_cast<char>((v >> sh) & 0xff));
}

inline void png_chunk(std::string& out, const char* type, const std::string& data) {
  put_be32(out, static_cast<std::uint32_t>(data.size()));
  std::string body(type, 4);
  body += data;
  out += body;
  put_be32(out, static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size()))));
}

inline std::string encode_png(std::size_t w, std::size_t h, const std::string& rgb) {
  std::string raw;
  raw.reserve(h * (1 + 3 * w));
  for (std::size_t y = 0; y < h; ++y) {
    raw.push_back('\0');  // filter: none
    raw.append(rgb, y * 3 * w, 3 * w);
  }
  uLongf cap = compressBound(static_cast<uLong>(raw.size()));
  std::string z(cap, '\0');
  if (compress2(reinterpret_cast<Bytef*>(z.data()), &cap, reinterpret_cast<const Bytef*>(raw.data()),
                static_cast<uLong>(raw.size()), 9) != Z_OK)
    fail(ErrorKind::IoError, "zlib compression failed");
  z.resize(cap);

  std::string out("\x89PNG\r\n\x1a\n", 8);
  std::string ihdr;
  put_be32(ihdr, static_cast<std::uint32_t>(w));
  put_be32(ihdr, static_cast<std::uint32_t>(h));
  ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB, deflate, no filter, no interlace
  png_chunk(out, "IHDR", ihdr);
  png_chunk(out, "IDAT", z);
  png_chunk(out, "IEND", {});
  return out;
}

}  // namespace detail

inline std::string export_raster(const DecisionBoundaryMap& d, RasterFormat f) {
  if (d.cells.size() != d.resolution * d.resolution || d.resolution == 0)
    fail(ErrorKind::InvalidConfig, "decision map is not populated");
  switch (f) {
    case RasterFormat::JsonGrid: return dbm_to_json(d).dump();
    case RasterFormat::Ppm: {
      const auto G = std::to_string(d.resolution);
      return "P6\n" + G + " " + G + "\n255\n" + detail::image_rows(d);
    }
    case RasterFormat::Png: return detail::encode_png(d.resolution, d.resolution, detail::image_rows(d));
  }
  fail(ErrorKind::UnsupportedFormat, "unsupported raster format");
}

inline std::string export_raster(const DecisionBoundaryMap& d, std::string_view format) {
  return export_raster(d, parse_raster_format(format));
}

}  // namespace cfw
