#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace cfw {

enum class ErrorKind {
  RaggedRows,
  NonNumericToken,
  EmptyFile,
  LabelMismatch,
  InvalidConfig,
  ShapeMismatch,
  DivergedLoss,
  IoError,
  VersionMismatch,
  CorruptFile,
  DegenerateData,
  EmptyBank,
  BudgetExceeded,
  InvalidExtent,
  ModeUnsupported,
  InvalidDistribution,
  UnsupportedFormat,
  StaleProvenance,
};

inline std::string_view to_string(ErrorKind k) {
  switch (k) {
    case ErrorKind::RaggedRows: return "RaggedRows";
    case ErrorKind::NonNumericToken: return "NonNumericToken";
    case ErrorKind::EmptyFile: return "EmptyFile";
    case ErrorKind::LabelMismatch: return "LabelMismatch";
    case ErrorKind::InvalidConfig: return "InvalidConfig";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::DivergedLoss: return "DivergedLoss";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::VersionMismatch: return "VersionMismatch";
    case ErrorKind::CorruptFile: return "CorruptFile";
    case ErrorKind::DegenerateData: return "DegenerateData";
    case ErrorKind::EmptyBank: return "EmptyBank";
    case ErrorKind::BudgetExceeded: return "BudgetExceeded";
    case ErrorKind::InvalidExtent: return "InvalidExtent";
    case ErrorKind::ModeUnsupported: return "ModeUnsupported";
    case ErrorKind::InvalidDistribution: return "InvalidDistribution";
    case ErrorKind::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorKind::StaleProvenance: return "StaleProvenance";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

// splitmix64 finalizer; used to derive independent stage/sample seeds from one master seed.
constexpr std::uint64_t mix64(std::uint64_t x) noexcept {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t derive_seed(std::uint64_t master, std::uint64_t stream) noexcept {
  return mix64(master ^ mix64(stream + 0x632be59bd9b4e019ULL));
}

/// FNV-1a, 64 bit. Artifact checksums and provenance keys.
class Fnv1a {
 public:
  void update(const void* data, std::size_t n) noexcept {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h_ ^= p[i];
      h_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) noexcept { update(s.data(), s.size()); }
  std::uint64_t digest() const noexcept { return h_; }

 private:
  std::uint64_t h_ = 0xcbf29ce484222325ULL;
};

inline std::uint64_t fnv1a(const void* data, std::size_t n) noexcept {
  Fnv1a h;
  h.update(data, n);
  return h.digest();
}

inline std::string hex64(std::uint64_t v) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[v & 0xf];
    v >>= 4;
  }
  return s;
}

/// Index of the largest element; ties go to the smallest index.
template <class T>
std::size_t argmax(std::span<const T> v) noexcept {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

}  // namespace cfw
