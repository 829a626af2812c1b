#include "metafo/bundle.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "json.hpp"

#include "metafo/errors.hpp"

namespace metafo {

static_assert(std::endian::native == std::endian::little, "bundle I/O assumes little-endian");

using nlohmann::json;

const Tensor& Bundle::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors) {
    if (n == name) return t;
  }
  throw FormatError("bundle has no tensor '" + name + "'");
}

void write_bundle(const std::filesystem::path& path, const Bundle& bundle) {
  json header;
  header["kind"] = bundle.kind;
  header["metadata"] = json::parse(bundle.metadata);
  header["tensors"] = json::array();
  for (const auto& [name, t] : bundle.tensors) {
    header["tensors"].push_back({{"name", name}, {"shape", t.shape()}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kBundleMagic, sizeof(kBundleMagic) - 1);
  const std::uint32_t version = kBundleVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  const std::uint64_t length = text.size();
  out.write(reinterpret_cast<const char*>(&length), sizeof(length));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : bundle.tensors) {
    out.write(reinterpret_cast<const char*>(t.ptr()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
  }
  if (!out) throw Error("failed writing " + path.string());
}

Bundle read_bundle(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char magic[sizeof(kBundleMagic) - 1];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kBundleMagic, sizeof(magic)) != 0) {
    throw FormatError("bad magic in " + path.string());
  }
  std::uint32_t version = 0;
  std::uint64_t length = 0;
  if (!in.read(reinterpret_cast<char*>(&version), sizeof(version))) {
    throw FormatError("truncated header in " + path.string());
  }
  if (version != kBundleVersion) {
    throw FormatError("unsupported bundle version " + std::to_string(version));
  }
  if (!in.read(reinterpret_cast<char*>(&length), sizeof(length)) || length > (1u << 30)) {
    throw FormatError("bad header length in " + path.string());
  }
  std::string text(length, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(length))) {
    throw FormatError("truncated header in " + path.string());
  }
  Bundle bundle;
  try {
    const json header = json::parse(text);
    bundle.kind = header.at("kind").get<std::string>();
    bundle.metadata = header.at("metadata").dump();
    for (const auto& entry : header.at("tensors")) {
      Shape shape = entry.at("shape").get<Shape>();
      Tensor t(shape, 0.0);
      if (!in.read(reinterpret_cast<char*>(t.ptr()),
                   static_cast<std::streamsize>(t.size() * sizeof(double)))) {
        throw FormatError("truncated payload in " + path.string());
      }
      bundle.tensors.emplace_back(entry.at("name").get<std::string>(), std::move(t));
    }
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed bundle header: ") + e.what());
  } catch (const DimensionError& e) {
    throw FormatError(std::string("malformed bundle header: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw FormatError("trailing bytes in " + path.string());
  }
  return bundle;
}

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

void fnv_update(std::uint64_t& h, const char* data, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= static_cast<unsigned char>(data[i]);
    h *= kFnvPrime;
  }
}

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

void hash_file(std::uint64_t& h, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  char buf[1 << 16];
  while (in) {
    in.read(buf, sizeof(buf));
    fnv_update(h, buf, static_cast<std::size_t>(in.gcount()));
  }
}

}  // namespace

std::string file_digest(const std::filesystem::path& path) {
  std::uint64_t h = kFnvOffset;
  hash_file(h, path);
  return hex(h);
}

std::string directory_digest(const std::filesystem::path& dir) {
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::uint64_t h = kFnvOffset;
  for (const auto& f : files) {
    const auto rel = std::filesystem::relative(f, dir).generic_string();
    fnv_update(h, rel.data(), rel.size());
    hash_file(h, f);
  }
  return hex(h);
}

}  // namespace metafo
