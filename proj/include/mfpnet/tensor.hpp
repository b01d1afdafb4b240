#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mfpnet/error.hpp"

namespace mfpnet {

/// Dense (batch, channel, height, width) extent.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  constexpr bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "(" << n << "," << c << "," << h << "," << w << ")";
    return os.str();
  }
};

/// Row-major 4-D array of doubles with an optional gradient buffer of the same length.
///
/// Matrices are stored as (batch, 1, rows, cols) so batched graph algebra reuses the
/// same container.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0) : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<double> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel()) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_.str());
    }
  }

  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{1, 1, rows, cols}, fill);
  }

  const Shape& shape() const { return shape_; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  double& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  double at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }

  bool has_grad() const { return grad_.has_value(); }
  std::span<double> grad() { return ensure_grad(); }
  std::span<const double> grad() const {
    if (!grad_) throw Error("tensor has no gradient buffer");
    return *grad_;
  }
  std::vector<double>& ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }
  void clear_grad() { grad_.reset(); }

  // Same buffer, new extent. Element count must match.
  Tensor reshaped(Shape s) const {
    if (s.numel() != numel()) {
      throw ShapeError("cannot reshape " + shape_.str() + " to " + s.str());
    }
    Tensor t(s, data_);
    return t;
  }

  bool all_finite() const {
    for (double v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

/// Convolution geometry. Pairs are (vertical, horizontal).
struct ConvSpec {
  std::array<std::size_t, 2> kernel{1, 1};
  std::array<std::size_t, 2> stride{1, 1};
  std::array<std::size_t, 2> padding{0, 0};
  std::array<std::size_t, 2> dilation{1, 1};
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  bool has_bias = true;

  void validate() const {
    for (int i = 0; i < 2; ++i) {
      if (kernel[i] < 1 || stride[i] < 1 || dilation[i] < 1) {
        throw ShapeError("conv kernel, stride and dilation must be >= 1");
      }
    }
    if (in_channels < 1 || out_channels < 1) {
      throw ShapeError("conv channel counts must be positive");
    }
  }

  Shape weight_shape() const { return Shape{out_channels, in_channels, kernel[0], kernel[1]}; }

  // Output extent along one axis, or nullopt when the kernel does not fit.
  std::optional<std::size_t> out_extent(std::size_t in, int axis) const {
    const auto span = static_cast<long long>(dilation[axis] * (kernel[axis] - 1) + 1);
    const auto padded = static_cast<long long>(in + 2 * padding[axis]);
    if (padded < span) return std::nullopt;
    return static_cast<std::size_t>((padded - span) / static_cast<long long>(stride[axis]) + 1);
  }

  /// 'same' padded k×k conv with the given dilation.
  static ConvSpec same(std::size_t in_c, std::size_t out_c, std::size_t kh, std::size_t kw,
                       std::size_t dil_h = 1, std::size_t dil_w = 1, bool bias = true) {
    ConvSpec s;
    s.kernel = {kh, kw};
    s.dilation = {dil_h, dil_w};
    s.padding = {dil_h * (kh - 1) / 2, dil_w * (kw - 1) / 2};
    s.in_channels = in_c;
    s.out_channels = out_c;
    s.has_bias = bias;
    return s;
  }

  static ConvSpec strided(std::size_t in_c, std::size_t out_c, std::size_t k, std::size_t stride,
                          bool bias = true) {
    ConvSpec s = same(in_c, out_c, k, k, 1, 1, bias);
    s.stride = {stride, stride};
    return s;
  }
};

/// Deterministic generator. Draws are built from raw mt19937_64 output so the
/// sequence is identical on every standard library.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  // [0, 1)
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // [lo, hi] inclusive
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    const auto range = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<std::int64_t>(engine_() % range);
  }

  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

 private:
  std::mt19937_64 engine_;
};

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline Tensor random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

// ---------------------------------------------------------------------------
// Little-endian binary helpers shared by the tensor dump and weight file formats.

namespace binio {

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

template <typename T>
void put(std::string& out, T value) {
  static_assert(std::is_trivially_copyable_v<T>);
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(bytes, bytes + sizeof(T));
  }
  out.append(reinterpret_cast<const char*>(bytes), sizeof(T));
}

class Reader {
 public:
  Reader(std::string_view buf, std::string what) : buf_(buf), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    unsigned char bytes[sizeof(T)];
    std::memcpy(bytes, buf_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) {
      std::reverse(bytes, bytes + sizeof(T));
    }
    pos_ += sizeof(T);
    T value;
    std::memcpy(&value, bytes, sizeof(T));
    return value;
  }

  std::string_view bytes(std::size_t count) {
    need(count);
    auto view = buf_.substr(pos_, count);
    pos_ += count;
    return view;
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return buf_.size() - pos_; }

 private:
  void need(std::size_t count) const {
    if (buf_.size() - pos_ < count) {
      throw FormatError(what_ + ": truncated at byte " + std::to_string(pos_) + " (need " +
                        std::to_string(count) + " more, have " +
                        std::to_string(buf_.size() - pos_) + ")");
    }
  }

  std::string_view buf_;
  std::size_t pos_ = 0;
  std::string what_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to '" + path + "'");
}

}  // namespace binio

// ---------------------------------------------------------------------------
// Tensor dump: "MFPT", u32 version = 1, u32 rank = 4, four u64 dims, f64 payload.

inline constexpr std::uint32_t kTensorDumpVersion = 1;

inline std::string encode_tensor(const Tensor& t) {
  std::string out = "MFPT";
  binio::put<std::uint32_t>(out, kTensorDumpVersion);
  binio::put<std::uint32_t>(out, 4);
  const auto& s = t.shape();
  for (std::size_t d : {s.n, s.c, s.h, s.w}) binio::put<std::uint64_t>(out, d);
  for (double v : t.data()) binio::put<double>(out, v);
  return out;
}

inline Tensor decode_tensor(std::string_view bytes) {
  binio::Reader r(bytes, "tensor dump");
  if (r.bytes(4) != "MFPT") throw FormatError("tensor dump: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kTensorDumpVersion) {
    throw FormatError("tensor dump: expected version 1, found " + std::to_string(version));
  }
  const auto rank = r.get<std::uint32_t>();
  if (rank != 4) throw FormatError("tensor dump: expected rank 4, found " + std::to_string(rank));
  Shape s;
  s.n = r.get<std::uint64_t>();
  s.c = r.get<std::uint64_t>();
  s.h = r.get<std::uint64_t>();
  s.w = r.get<std::uint64_t>();
  if (r.remaining() != s.numel() * sizeof(double)) {
    throw FormatError("tensor dump: payload holds " + std::to_string(r.remaining()) +
                      " bytes, shape " + s.str() + " needs " +
                      std::to_string(s.numel() * sizeof(double)));
  }
  Tensor t(s);
  for (auto& v : t.data()) v = r.get<double>();
  return t;
}

inline void save_tensor(const Tensor& t, const std::string& path) {
  binio::write_file(path, encode_tensor(t));
}

inline Tensor load_tensor(const std::string& path) { return decode_tensor(binio::read_file(path)); }

}  // namespace mfpnet
