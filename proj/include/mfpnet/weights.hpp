#pragma once

// Weight file: "MFPW", u32 version, u64 entry count, then per entry
// u16 name length, UTF-8 name, u32 rank, u64 dims, f64 payload; a trailing
// CRC-32 (IEEE) of every preceding byte. All integers little-endian.
// Trainable parameters come first in registry order, then norm buffers.

#include <zlib.h>

#include <cstdint>
#include <limits>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "mfpnet/error.hpp"
#include "mfpnet/network.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

inline constexpr std::uint32_t kWeightFileVersion = 1;

struct WeightEntry {
  std::string name;
  std::vector<std::size_t> dims;
  std::vector<double> values;
};

inline std::uint32_t crc32_of(std::string_view bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(bytes.data()), static_cast<uInt>(bytes.size()));
  return static_cast<std::uint32_t>(crc);
}

inline std::vector<WeightEntry> collect_weights(const Model& model) {
  std::vector<WeightEntry> out;
  for (const auto& p : model.registry().params()) {
    const auto d = p.var.value().data();
    out.push_back({p.name, p.dims, std::vector<double>(d.begin(), d.end())});
  }
  for (const auto& b : model.registry().buffers()) {
    out.push_back({b.name, {b.values().size()}, b.values()});
  }
  return out;
}

inline std::string encode_weights(const std::vector<WeightEntry>& entries) {
  std::string out = "MFPW";
  binio::put<std::uint32_t>(out, kWeightFileVersion);
  binio::put<std::uint64_t>(out, entries.size());
  for (const auto& e : entries) {
    if (e.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw FormatError("weight entry name too long: " + e.name);
    }
    binio::put<std::uint16_t>(out, static_cast<std::uint16_t>(e.name.size()));
    out += e.name;
    binio::put<std::uint32_t>(out, static_cast<std::uint32_t>(e.dims.size()));
    for (std::size_t d : e.dims) binio::put<std::uint64_t>(out, d);
    for (double v : e.values) binio::put<double>(out, v);
  }
  binio::put<std::uint32_t>(out, crc32_of(out));
  return out;
}

inline std::vector<WeightEntry> decode_weights(std::string_view bytes) {
  if (bytes.size() < 4 + 4 + 8 + 4) throw FormatError("weight file: truncated header");
  const std::string_view body = bytes.substr(0, bytes.size() - 4);
  binio::Reader tail(bytes.substr(bytes.size() - 4), "weight file");
  const auto stored = tail.get<std::uint32_t>();
  const auto actual = crc32_of(body);
  binio::Reader r(body, "weight file");
  if (r.bytes(4) != "MFPW") throw FormatError("weight file: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kWeightFileVersion) {
    throw FormatError("weight file: expected version " + std::to_string(kWeightFileVersion) +
                      ", found " + std::to_string(version));
  }
  if (stored != actual) {
    std::ostringstream os;
    os << "weight file: checksum mismatch (stored 0x" << std::hex << stored << ", computed 0x"
       << actual << ")";
    throw FormatError(os.str());
  }
  const auto count = r.get<std::uint64_t>();
  std::vector<WeightEntry> entries;
  for (std::uint64_t i = 0; i < count; ++i) {
    WeightEntry e;
    const auto len = r.get<std::uint16_t>();
    e.name = std::string(r.bytes(len));
    const auto rank = r.get<std::uint32_t>();
    std::size_t numel = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      e.dims.push_back(r.get<std::uint64_t>());
      numel *= e.dims.back();
    }
    if (numel > r.remaining() / sizeof(double)) {
      throw FormatError("weight file: entry '" + e.name + "' payload exceeds file size");
    }
    e.values.resize(numel);
    for (auto& v : e.values) v = r.get<double>();
    entries.push_back(std::move(e));
  }
  if (r.remaining() != 0) {
    throw FormatError("weight file: " + std::to_string(r.remaining()) +
                      " unexpected trailing bytes before checksum");
  }
  return entries;
}

inline std::string dims_str(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "," : "") + std::to_string(dims[i]);
  return s + "]";
}

inline void save_weights(const Model& model, const std::string& path) {
  binio::write_file(path, encode_weights(collect_weights(model)));
}

/// Copies decoded entries into `model`. Every entry is validated against the
/// registry before anything is written, so a failed load leaves the model as it was.
inline void assign_weights(Model& model, const std::vector<WeightEntry>& entries) {
  const auto expected = collect_weights(model);
  if (entries.size() != expected.size()) {
    throw FormatError("weight file: expected " + std::to_string(expected.size()) +
                      " entries, found " + std::to_string(entries.size()));
  }
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& want = expected[i];
    const auto& got = entries[i];
    if (want.name != got.name || want.dims != got.dims) {
      throw FormatError("weight file: entry " + std::to_string(i) + " expected '" + want.name +
                        "' " + dims_str(want.dims) + ", found '" + got.name + "' " +
                        dims_str(got.dims));
    }
  }
  auto& store = model.registry();
  std::size_t i = 0;
  for (const auto& p : store.params()) {
    Var v = p.var;
    auto dst = v.mutable_value().data();
    std::copy(entries[i].values.begin(), entries[i].values.end(), dst.begin());
    ++i;
  }
  for (const auto& b : store.buffers()) {
    b.values() = entries[i].values;
    ++i;
  }
}

inline void load_weights(Model& model, const std::string& path) {
  assign_weights(model, decode_weights(binio::read_file(path)));
}

/// Builds `config` and fills it from a weight file.
inline Model load_model(const ModelConfig& config, const std::string& path) {
  Model m(config);
  load_weights(m, path);
  return m;
}

}  // namespace mfpnet
