#pragma once

// File plumbing shared by checkpoints, dataset caches and reports.
//
// Container layout (all integers little-endian):
//   8-byte magic | 1-byte version | u64 header length | UTF-8 JSON header |
//   raw little-endian float64 blobs, at the byte offsets listed in the header
//   (relative to the first byte after the JSON header).

#include <array>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

namespace eavae::io {

using json = nlohmann::json;

inline constexpr const char* kToolVersion = "0.1.0";

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnsupportedVersion : FormatError {
  using FormatError::FormatError;
};

/// FNV-1a 64-bit, rendered as 16 hex digits.
inline std::string fnv1a_hex(std::span<const unsigned char> bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}
inline std::string fnv1a_hex(const std::string& s) {
  return fnv1a_hex(std::span(reinterpret_cast<const unsigned char*>(s.data()), s.size()));
}
inline std::string file_hash(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return fnv1a_hex(bytes);
}
/// Hash of the canonical (key-sorted, compact) JSON text.
inline std::string json_hash(const json& j) { return fnv1a_hex(j.dump()); }

namespace detail {

inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline std::uint64_t get_u64(const unsigned char* p) {
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}
inline void put_f64(std::string& out, double d) {
  std::uint64_t bits;
  std::memcpy(&bits, &d, 8);
  put_u64(out, bits);
}
inline double get_f64(const unsigned char* p) {
  const std::uint64_t bits = get_u64(p);
  double d;
  std::memcpy(&d, &bits, 8);
  return d;
}

}  // namespace detail

struct Container {
  json header;
  std::vector<std::vector<double>> blobs;
};

/// Writes the header plus blobs; header["blobs"] receives {offset, count} per blob.
inline void write_container(const std::filesystem::path& path, std::string_view magic, std::uint8_t version,
                            json header, const std::vector<std::span<const double>>& blobs) {
  if (magic.size() != 8) throw std::invalid_argument("container magic must be 8 bytes");
  json table = json::array();
  std::uint64_t offset = 0;
  for (const auto& b : blobs) {
    table.push_back({{"offset", offset}, {"count", b.size()}});
    offset += 8 * b.size();
  }
  header["blobs"] = table;
  const std::string text = header.dump();
  std::string out;
  out.reserve(17 + text.size() + offset);
  out.append(magic);
  out.push_back(static_cast<char>(version));
  detail::put_u64(out, text.size());
  out.append(text);
  for (const auto& b : blobs)
    for (double d : b) detail::put_f64(out, d);
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
}

inline Container read_container(const std::filesystem::path& path, std::string_view magic,
                                std::uint8_t supported_version) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  if (bytes.size() < 17) throw FormatError(path.string() + ": truncated container header");
  if (bytes.compare(0, 8, magic) != 0)
    throw FormatError(path.string() + ": bad magic, expected '" + std::string(magic) + "'");
  const std::uint8_t version = p[8];
  if (version != supported_version) {
    throw UnsupportedVersion(path.string() + ": unsupported version " + std::to_string(version) + " (supported: " +
                             std::to_string(supported_version) + ")");
  }
  const std::uint64_t header_len = detail::get_u64(p + 9);
  if (header_len > bytes.size() - 17) throw FormatError(path.string() + ": truncated JSON header");
  Container c;
  try {
    c.header = json::parse(bytes.substr(17, header_len));
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": corrupt JSON header: " + e.what());
  }
  const std::size_t base = 17 + header_len;
  if (!c.header.contains("blobs") || !c.header["blobs"].is_array())
    throw FormatError(path.string() + ": header lacks a blob table");
  for (const auto& entry : c.header["blobs"]) {
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (base + offset + 8 * count > bytes.size()) throw FormatError(path.string() + ": truncated payload");
    std::vector<double> v(count);
    for (std::uint64_t i = 0; i < count; ++i) v[i] = detail::get_f64(p + base + offset + 8 * i);
    c.blobs.push_back(std::move(v));
  }
  return c;
}

/// Provenance stamp embedded in every output file.
struct Stamp {
  std::string config_hash = "none";
  std::string checkpoint_hash = "none";
  std::uint64_t seed = 0;
  std::string version = kToolVersion;

  json to_json() const {
    return {{"config_hash", config_hash}, {"checkpoint_hash", checkpoint_hash}, {"seed", seed}, {"tool_version", version}};
  }
  std::string csv_comment() const {
    return "# config_hash=" + config_hash + " checkpoint_hash=" + checkpoint_hash + " seed=" + std::to_string(seed) +
           " tool_version=" + version;
  }
};

inline std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

/// Small CSV writer: a stamp comment line, a header row, then rows.
class CsvWriter {
 public:
  CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& columns, const Stamp* stamp = nullptr)
      : columns_(columns.size()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path, std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot write " + path.string());
    if (stamp) out_ << stamp->csv_comment() << '\n';
    for (std::size_t i = 0; i < columns.size(); ++i) out_ << (i ? "," : "") << columns[i];
    out_ << '\n';
  }

  template <class... Ts>
  void row(const Ts&... values) {
    static_assert(sizeof...(Ts) > 0);
    if (sizeof...(Ts) != columns_) throw std::invalid_argument("csv row width mismatch");
    bool first = true;
    ((out_ << (first ? "" : ",") << cell(values), first = false), ...);
    out_ << '\n';
  }

  void row(const std::vector<double>& values) {
    if (values.size() != columns_) throw std::invalid_argument("csv row width mismatch");
    for (std::size_t i = 0; i < values.size(); ++i) out_ << (i ? "," : "") << format_double(values[i]);
    out_ << '\n';
  }

 private:
  static std::string cell(double v) { return format_double(v); }
  static std::string cell(const std::string& s) { return s; }
  static std::string cell(const char* s) { return s; }
  template <class T>
    requires std::is_integral_v<T>
  static std::string cell(T v) {
    return std::to_string(v);
  }

  std::size_t columns_;
  std::ofstream out_;
};

inline void write_json(const std::filesystem::path& path, const json& j) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

inline json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return json::parse(in);
}

}  // namespace eavae::io
