#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "metafo/tensor.hpp"

namespace metafo {

inline constexpr char kBundleMagic[] = "METAFO1\n";
inline constexpr std::uint32_t kBundleVersion = 1;

/// Binary container for checkpoints and training state: magic, version, a
/// JSON header, then every tensor as raw little-endian doubles.
struct Bundle {
  std::string kind;
  /// Serialized JSON object with kind-specific metadata.
  std::string metadata = "{}";
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

void write_bundle(const std::filesystem::path& path, const Bundle& bundle);
/// Throws FormatError on a bad magic, version, header, or truncated payload.
Bundle read_bundle(const std::filesystem::path& path);

/// FNV-1a 64-bit digest of the file bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& path);
/// Digest of every regular file below `dir`, combined in sorted path order.
std::string directory_digest(const std::filesystem::path& dir);

}  // namespace metafo
