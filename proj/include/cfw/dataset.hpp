#pragma once

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cfw/common.hpp"

namespace cfw {

enum class Split { Train, Test };

inline std::string_view to_string(Split s) { return s == Split::Train ? "train" : "test"; }

enum class NormScheme { None, ZScorePerSeries, ZScoreGlobal };

inline std::string_view to_string(NormScheme s) {
  switch (s) {
    case NormScheme::None: return "none";
    case NormScheme::ZScorePerSeries: return "zscore_per_series";
    case NormScheme::ZScoreGlobal: return "zscore_global";
  }
  return "none";
}

inline NormScheme parse_norm_scheme(std::string_view s) {
  if (s == "none") return NormScheme::None;
  if (s == "zscore_per_series") return NormScheme::ZScorePerSeries;
  if (s == "zscore_global") return NormScheme::ZScoreGlobal;
  fail(ErrorKind::InvalidConfig, "unknown normalization scheme '" + std::string(s) + "'");
}

struct LabeledSeries {
  std::size_t id = 0;
  std::vector<float> values;
  std::size_t label = 0;
  Split split = Split::Train;
  // Set by normalize() when the series had (near) zero variance and was passed through.
  bool degenerate = false;
};

struct Dataset {
  std::string name;
  std::size_t series_length = 0;
  std::size_t num_classes = 0;
  std::vector<LabeledSeries> train;
  std::vector<LabeledSeries> test;
  std::vector<std::string> class_names;
  // Original label value for each contiguous class index.
  std::vector<long long> label_values;
  NormScheme normalization = NormScheme::None;

  const std::vector<LabeledSeries>& split(Split s) const { return s == Split::Train ? train : test; }
};

struct LoadOptions {
  // Reject test labels that never occur in the train split.
  bool require_test_labels_in_train = false;
};

namespace detail {

inline std::vector<std::string_view> split_tokens(std::string_view line, char delim) {
  std::vector<std::string_view> out;
  if (delim == ' ') {
    std::size_t i = 0;
    while (i < line.size()) {
      while (i < line.size() && (line[i] == ' ' || line[i] == '\t')) ++i;
      if (i >= line.size()) break;
      std::size_t j = i;
      while (j < line.size() && line[j] != ' ' && line[j] != '\t') ++j;
      out.push_back(line.substr(i, j - i));
      i = j;
    }
    return out;
  }
  std::size_t start = 0;
  for (std::size_t i = 0; i <= line.size(); ++i) {
    if (i == line.size() || line[i] == delim) {
      auto tok = line.substr(start, i - start);
      while (!tok.empty() && (tok.front() == ' ' || tok.front() == '\t')) tok.remove_prefix(1);
      while (!tok.empty() && (tok.back() == ' ' || tok.back() == '\t')) tok.remove_suffix(1);
      out.push_back(tok);
      start = i + 1;
    }
  }
  return out;
}

inline double parse_number(std::string_view tok, const std::string& where) {
  if (!tok.empty() && tok.front() == '+') tok.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc{} || ptr != tok.data() + tok.size() || !std::isfinite(v))
    fail(ErrorKind::NonNumericToken, "'" + std::string(tok) + "' at " + where);
  return v;
}

struct RawRow {
  long long label;
  std::vector<float> values;
};

inline std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::IoError, "cannot open " + path.string());
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    bool blank = std::all_of(line.begin(), line.end(), [](char c) { return c == ' ' || c == '\t'; });
    if (!blank) lines.push_back(std::move(line));
  }
  if (lines.empty()) fail(ErrorKind::EmptyFile, path.string());
  return lines;
}

// Tab, then comma, then whitespace runs; the first delimiter giving a uniform column count
// of at least two wins.
inline char detect_delimiter(const std::vector<std::string>& lines, const std::string& name) {
  for (char d : {'\t', ',', ' '}) {
    std::size_t cols = split_tokens(lines.front(), d).size();
    if (cols < 2) continue;
    bool uniform = std::all_of(lines.begin(), lines.end(),
                               [&](const std::string& l) { return split_tokens(l, d).size() == cols; });
    if (uniform) return d;
  }
  fail(ErrorKind::RaggedRows, name + ": rows do not share a column count under any delimiter");
}

inline std::vector<RawRow> parse_ucr_file(const std::filesystem::path& path) {
  auto lines = read_lines(path);
  const std::string name = path.filename().string();
  char delim = detect_delimiter(lines, name);
  std::vector<RawRow> rows;
  rows.reserve(lines.size());
  for (std::size_t r = 0; r < lines.size(); ++r) {
    auto toks = split_tokens(lines[r], delim);
    const std::string where = name + ":" + std::to_string(r + 1);
    double lab = parse_number(toks[0], where);
    if (lab != std::floor(lab)) fail(ErrorKind::NonNumericToken, "non-integral label at " + where);
    RawRow row{static_cast<long long>(lab), {}};
    row.values.reserve(toks.size() - 1);
    for (std::size_t i = 1; i < toks.size(); ++i)
      row.values.push_back(static_cast<float>(parse_number(toks[i], where)));
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace detail

/// Loads a UCR-format train/test pair. Labels are remapped to 0-based contiguous indices in
/// ascending order of their original values. An empty `test_path` yields an empty test split.
inline Dataset load_ucr(const std::filesystem::path& train_path, const std::filesystem::path& test_path = {},
                        const LoadOptions& opts = {}) {
  auto train_rows = detail::parse_ucr_file(train_path);
  std::vector<detail::RawRow> test_rows;
  if (!test_path.empty()) test_rows = detail::parse_ucr_file(test_path);

  const std::size_t T = train_rows.front().values.size();
  for (const auto& r : test_rows)
    if (r.values.size() != T)
      fail(ErrorKind::RaggedRows, "test series length " + std::to_string(r.values.size()) +
                                      " differs from train length " + std::to_string(T));

  std::map<long long, std::size_t> remap;
  for (const auto& r : train_rows) remap.emplace(r.label, 0);
  if (opts.require_test_labels_in_train) {
    for (const auto& r : test_rows)
      if (!remap.contains(r.label))
        fail(ErrorKind::LabelMismatch, "test label " + std::to_string(r.label) + " absent from train");
  }
  for (const auto& r : test_rows) remap.emplace(r.label, 0);

  Dataset ds;
  auto stem = train_path.stem().string();
  if (auto pos = stem.rfind("_TRAIN"); pos != std::string::npos) stem.erase(pos);
  ds.name = stem;
  ds.series_length = T;
  std::size_t idx = 0;
  for (auto& [orig, mapped] : remap) {
    mapped = idx++;
    ds.label_values.push_back(orig);
    ds.class_names.push_back(std::to_string(orig));
  }
  ds.num_classes = remap.size();

  auto fill = [&](std::vector<detail::RawRow>& rows, Split s, std::vector<LabeledSeries>& out) {
    out.reserve(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i)
      out.push_back(LabeledSeries{i, std::move(rows[i].values), remap.at(rows[i].label), s, false});
  };
  fill(train_rows, Split::Train, ds.train);
  fill(test_rows, Split::Test, ds.test);
  return ds;
}

/// Per-class counts for one split; length equals num_classes.
inline std::vector<std::size_t> class_distribution(const Dataset& ds, Split s) {
  std::vector<std::size_t> counts(ds.num_classes, 0);
  for (const auto& row : ds.split(s)) ++counts[row.label];
  return counts;
}

inline constexpr double kDegenerateStd = 1e-9;

inline Dataset normalize(Dataset ds, NormScheme scheme) {
  ds.normalization = scheme;
  if (scheme == NormScheme::None) return ds;

  auto stats = [](std::span<const float> v) {
    double mean = 0.0;
    for (float x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (float x : v) var += (x - mean) * (x - mean);
    return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
  };

  if (scheme == NormScheme::ZScorePerSeries) {
    for (auto* split : {&ds.train, &ds.test}) {
      for (auto& row : *split) {
        auto [mean, sd] = stats(row.values);
        if (sd < kDegenerateStd) {
          row.degenerate = true;
          continue;
        }
        for (float& x : row.values) x = static_cast<float>((x - mean) / sd);
      }
    }
    return ds;
  }

  // Global statistics come from the train split only.
  std::vector<float> all;
  for (const auto& row : ds.train) all.insert(all.end(), row.values.begin(), row.values.end());
  if (all.empty()) return ds;
  auto [mean, sd] = stats(all);
  if (sd < kDegenerateStd) {
    for (auto* split : {&ds.train, &ds.test})
      for (auto& row : *split) row.degenerate = true;
    return ds;
  }
  for (auto* split : {&ds.train, &ds.test})
    for (auto& row : *split)
      for (float& x : row.values) x = static_cast<float>((x - mean) / sd);
  return ds;
}

/// Writes a split back out in tab-separated UCR layout, using the original label values.
inline void write_ucr(const Dataset& ds, Split s, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorKind::IoError, "cannot write " + path.string());
  char buf[64];
  for (const auto& row : ds.split(s)) {
    out << ds.label_values.at(row.label);
    for (float v : row.values) {
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
      out << '\t' << std::string_view(buf, static_cast<std::size_t>(end - buf));
    }
    out << '\n';
  }
  if (!out) fail(ErrorKind::IoError, "short write to " + path.string());
}

}  // namespace cfw
