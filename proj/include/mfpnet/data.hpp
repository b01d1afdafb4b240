#pragma once

// Synthetic segmentation samples, binary netpbm I/O (P6 images, P5 labels),
// dataset manifests and the confusion-matrix mIoU metric.

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mfpnet/error.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

inline constexpr std::uint8_t kIgnoreLabel = 255;

struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> rgb;  // row-major, interleaved

  Image() = default;
  Image(std::size_t h, std::size_t w) : height(h), width(w), rgb(h * w * 3, 0) {}
  std::uint8_t& at(std::size_t y, std::size_t x, std::size_t ch) { return rgb[(y * width + x) * 3 + ch]; }
  std::uint8_t at(std::size_t y, std::size_t x, std::size_t ch) const {
    return rgb[(y * width + x) * 3 + ch];
  }
  bool operator==(const Image&) const = default;
};

struct LabelMap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> labels;

  LabelMap() = default;
  LabelMap(std::size_t h, std::size_t w, std::uint8_t fill = 0)
      : height(h), width(w), labels(h * w, fill) {}
  std::uint8_t& at(std::size_t y, std::size_t x) { return labels[y * width + x]; }
  std::uint8_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  bool operator==(const LabelMap&) const = default;
};

struct SegmentationSample {
  Image image;
  LabelMap label;

  void validate(std::size_t num_classes) const {
    if (image.height != label.height || image.width != label.width) {
      throw ShapeError("sample: image " + std::to_string(image.height) + "x" +
                       std::to_string(image.width) + " vs label " + std::to_string(label.height) +
                       "x" + std::to_string(label.width));
    }
    for (std::uint8_t v : label.labels) {
      if (v != kIgnoreLabel && v >= num_classes) {
        throw FormatError("sample: label " + std::to_string(v) + " outside [0, " +
                          std::to_string(num_classes) + ") and not the ignore index");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Synthetic data

/// Fixed 20-entry RGB palette; class k uses entry k mod 20.
inline constexpr std::array<std::array<std::uint8_t, 3>, 20> kPalette{{
    {0, 0, 0},       {230, 25, 75},   {60, 180, 75},   {255, 225, 25}, {0, 130, 200},
    {245, 130, 48},  {145, 30, 180},  {70, 240, 240},  {240, 50, 230}, {210, 245, 60},
    {250, 190, 212}, {0, 128, 128},   {220, 190, 255}, {170, 110, 40}, {255, 250, 200},
    {128, 0, 0},     {170, 255, 195}, {128, 128, 0},   {255, 215, 180}, {0, 0, 128},
}};

inline std::array<std::uint8_t, 3> class_color(std::size_t k) { return kPalette[k % kPalette.size()]; }

struct SynthOptions {
  std::size_t min_shapes = 2;
  std::size_t max_shapes = 5;
  int noise = 10;
};

/// Sample `index` of the stream for `seed`; independent of every other index.
inline SegmentationSample synth_sample(std::uint64_t seed, std::size_t index,
                                       std::array<std::size_t, 2> hw, std::size_t num_classes,
                                       const SynthOptions& opts = {}) {
  if (num_classes < 2) {
    throw ConfigError("synth_dataset: num_classes must be >= 2, got " + std::to_string(num_classes));
  }
  if (num_classes > kIgnoreLabel) throw ConfigError("synth_dataset: at most 255 classes");
  if (opts.min_shapes > opts.max_shapes) throw ConfigError("synth_dataset: min_shapes > max_shapes");
  const auto [h, w] = hw;
  if (h == 0 || w == 0) throw ShapeError("synth_dataset: empty extent");

  Rng rng(mix_seed(seed, index));
  LabelMap label(h, w, 0);
  const auto shapes = static_cast<std::size_t>(
      rng.integer(static_cast<std::int64_t>(opts.min_shapes), static_cast<std::int64_t>(opts.max_shapes)));
  const double side = static_cast<double>(std::min(h, w));
  for (std::size_t s = 0; s < shapes; ++s) {
    const auto cls = static_cast<std::uint8_t>(rng.integer(1, static_cast<std::int64_t>(num_classes) - 1));
    const bool circle = rng.uniform() < 0.5;
    const double cy = rng.uniform(0.0, static_cast<double>(h));
    const double cx = rng.uniform(0.0, static_cast<double>(w));
    if (circle) {
      const double r = rng.uniform(side / 10.0, side / 4.0);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double dy = static_cast<double>(y) + 0.5 - cy;
          const double dx = static_cast<double>(x) + 0.5 - cx;
          if (dy * dy + dx * dx <= r * r) label.at(y, x) = cls;
        }
      }
    } else {
      const double hh = rng.uniform(side / 10.0, side / 4.0);
      const double hw2 = rng.uniform(side / 10.0, side / 4.0);
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          const double py = static_cast<double>(y) + 0.5;
          const double px = static_cast<double>(x) + 0.5;
          if (py >= cy - hh && py < cy + hh && px >= cx - hw2 && px < cx + hw2) label.at(y, x) = cls;
        }
      }
    }
  }

  Image image(h, w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const auto color = class_color(label.at(y, x));
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const auto v = static_cast<std::int64_t>(color[ch]) + rng.integer(-opts.noise, opts.noise);
        image.at(y, x, ch) = static_cast<std::uint8_t>(std::clamp<std::int64_t>(v, 0, 255));
      }
    }
  }
  return {std::move(image), std::move(label)};
}

inline std::vector<SegmentationSample> synth_dataset(std::uint64_t seed, std::size_t count,
                                                     std::array<std::size_t, 2> hw,
                                                     std::size_t num_classes,
                                                     const SynthOptions& opts = {},
                                                     std::size_t first_index = 0) {
  std::vector<SegmentationSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    out.push_back(synth_sample(seed, first_index + i, hw, num_classes, opts));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Netpbm

namespace detail {

class PnmHeader {
 public:
  PnmHeader(std::string_view bytes, const std::string& path) : b_(bytes), path_(path) {}

  void expect_magic(std::string_view magic) {
    if (b_.size() < 2 || b_.substr(0, 2) != magic) {
      throw FormatError(path_ + ": bad magic, expected " + std::string(magic));
    }
    pos_ = 2;
  }

  std::size_t number(const char* what) {
    skip_space_and_comments();
    std::size_t v = 0;
    std::size_t digits = 0;
    while (pos_ < b_.size() && std::isdigit(static_cast<unsigned char>(b_[pos_]))) {
      v = v * 10 + static_cast<std::size_t>(b_[pos_] - '0');
      if (v > (1u << 24)) throw FormatError(path_ + ": " + what + " too large");
      ++pos_;
      ++digits;
    }
    if (digits == 0) throw FormatError(path_ + ": expected " + what);
    return v;
  }

  // Exactly one whitespace byte separates maxval from the raster.
  std::string_view payload() {
    if (pos_ >= b_.size() || !std::isspace(static_cast<unsigned char>(b_[pos_]))) {
      throw FormatError(path_ + ": missing whitespace before raster");
    }
    return b_.substr(pos_ + 1);
  }

 private:
  void skip_space_and_comments() {
    while (pos_ < b_.size()) {
      const char c = b_[pos_];
      if (c == '#') {
        while (pos_ < b_.size() && b_[pos_] != '\n' && b_[pos_] != '\r') ++pos_;
      } else if (std::isspace(static_cast<unsigned char>(c))) {
        ++pos_;
      } else {
        break;
      }
    }
  }

  std::string_view b_;
  std::string path_;
  std::size_t pos_ = 0;
};

inline std::vector<std::uint8_t> decode_pnm(std::string_view bytes, std::string_view magic,
                                            std::size_t channels, const std::string& path,
                                            std::size_t& h, std::size_t& w) {
  PnmHeader hdr(bytes, path);
  hdr.expect_magic(magic);
  w = hdr.number("width");
  h = hdr.number("height");
  const std::size_t maxval = hdr.number("maxval");
  if (maxval != 255) throw FormatError(path + ": maxval " + std::to_string(maxval) + " unsupported, expected 255");
  if (w == 0 || h == 0) throw FormatError(path + ": empty image");
  const std::string_view raster = hdr.payload();
  const std::size_t need = h * w * channels;
  if (raster.size() < need) {
    throw FormatError(path + ": short payload, " + std::to_string(raster.size()) + " of " +
                      std::to_string(need) + " bytes");
  }
  if (raster.size() > need) {
    throw FormatError(path + ": " + std::to_string(raster.size() - need) + " trailing bytes after raster");
  }
  return {raster.begin(), raster.end()};
}

inline std::string encode_pnm(std::string_view magic, std::size_t h, std::size_t w,
                              const std::vector<std::uint8_t>& data) {
  std::string out = std::string(magic) + "\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.append(data.begin(), data.end());
  return out;
}

}  // namespace detail

inline Image decode_ppm(std::string_view bytes, const std::string& source = "<memory>") {
  Image img;
  img.rgb = detail::decode_pnm(bytes, "P6", 3, source, img.height, img.width);
  return img;
}

inline LabelMap decode_pgm(std::string_view bytes, const std::string& source = "<memory>") {
  LabelMap m;
  m.labels = detail::decode_pnm(bytes, "P5", 1, source, m.height, m.width);
  return m;
}

inline std::string encode_ppm(const Image& img) {
  if (img.rgb.size() != img.height * img.width * 3) throw ShapeError("encode_ppm: buffer size mismatch");
  return detail::encode_pnm("P6", img.height, img.width, img.rgb);
}

inline std::string encode_pgm(const LabelMap& m) {
  if (m.labels.size() != m.height * m.width) throw ShapeError("encode_pgm: buffer size mismatch");
  return detail::encode_pnm("P5", m.height, m.width, m.labels);
}

inline Image load_ppm(const std::string& path) { return decode_ppm(binio::read_file(path), path); }
inline LabelMap load_pgm(const std::string& path) { return decode_pgm(binio::read_file(path), path); }
inline void save_ppm(const std::string& path, const Image& img) { binio::write_file(path, encode_ppm(img)); }
inline void save_pgm(const std::string& path, const LabelMap& m) { binio::write_file(path, encode_pgm(m)); }

// ---------------------------------------------------------------------------
// Manifest: one "image_path<TAB>label_path" line per sample, relative paths
// resolved against the manifest's directory.

struct ManifestEntry {
  std::string image_path;
  std::string label_path;
};

inline std::vector<ManifestEntry> read_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest '" + path + "'");
  const auto base = std::filesystem::path(path).parent_path();
  std::vector<ManifestEntry> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || line.find('\t', tab + 1) != std::string::npos) {
      throw FormatError(path + ":" + std::to_string(lineno) + ": expected image<TAB>label");
    }
    auto resolve = [&](std::string p) {
      const std::filesystem::path fp(p);
      return fp.is_absolute() ? p : (base / fp).string();
    };
    out.push_back({resolve(line.substr(0, tab)), resolve(line.substr(tab + 1))});
  }
  return out;
}

/// Writes samples as img_NNNN.ppm / lbl_NNNN.pgm plus manifest.tsv under dir.
inline std::string save_dataset(const std::string& dir, const std::vector<SegmentationSample>& samples) {
  std::filesystem::create_directories(dir);
  std::ostringstream manifest;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%04zu", i);
    const std::string img = std::string("img_") + stem + ".ppm";
    const std::string lbl = std::string("lbl_") + stem + ".pgm";
    save_ppm((std::filesystem::path(dir) / img).string(), samples[i].image);
    save_pgm((std::filesystem::path(dir) / lbl).string(), samples[i].label);
    manifest << img << '\t' << lbl << '\n';
  }
  const std::string path = (std::filesystem::path(dir) / "manifest.tsv").string();
  binio::write_file(path, manifest.str());
  return path;
}

inline std::vector<SegmentationSample> load_dataset(const std::string& manifest_path) {
  std::vector<SegmentationSample> out;
  for (const auto& e : read_manifest(manifest_path)) {
    SegmentationSample s{load_ppm(e.image_path), load_pgm(e.label_path)};
    if (s.image.height != s.label.height || s.image.width != s.label.width) {
      throw FormatError(e.label_path + ": label extent differs from " + e.image_path);
    }
    out.push_back(std::move(s));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Tensor conversion

/// (N,3,H,W) tensor with v/127.5 - 1 scaling.
inline Tensor images_to_tensor(std::span<const Image* const> images) {
  if (images.empty()) throw ShapeError("images_to_tensor: empty batch");
  const std::size_t h = images[0]->height;
  const std::size_t w = images[0]->width;
  Tensor t(Shape{images.size(), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const Image& img = *images[n];
    if (img.height != h || img.width != w) throw ShapeError("images_to_tensor: mixed extents in batch");
    for (std::size_t ch = 0; ch < 3; ++ch) {
      for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
          t.at(n, ch, y, x) = static_cast<double>(img.at(y, x, ch)) / 127.5 - 1.0;
        }
      }
    }
  }
  return t;
}

inline Tensor image_to_tensor(const Image& img) {
  const Image* p = &img;
  return images_to_tensor(std::span<const Image* const>(&p, 1));
}

/// Per-pixel argmax over the class axis of (N,K,H,W); first index wins ties.
inline std::vector<LabelMap> argmax_labels(const Tensor& logits) {
  const Shape& s = logits.shape();
  std::vector<LabelMap> out;
  for (std::size_t n = 0; n < s.n; ++n) {
    LabelMap m(s.h, s.w);
    for (std::size_t y = 0; y < s.h; ++y) {
      for (std::size_t x = 0; x < s.w; ++x) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < s.c; ++k) {
          if (logits.at(n, k, y, x) > logits.at(n, best, y, x)) best = k;
        }
        m.at(y, x) = static_cast<std::uint8_t>(best);
      }
    }
    out.push_back(std::move(m));
  }
  return out;
}

/// RGB rendering of a label map with the fixed palette; ignore pixels are white.
inline Image colorize(const LabelMap& m) {
  Image img(m.height, m.width);
  for (std::size_t y = 0; y < m.height; ++y) {
    for (std::size_t x = 0; x < m.width; ++x) {
      const auto v = m.at(y, x);
      const std::array<std::uint8_t, 3> c =
          v == kIgnoreLabel ? std::array<std::uint8_t, 3>{255, 255, 255} : class_color(v);
      for (std::size_t ch = 0; ch < 3; ++ch) img.at(y, x, ch) = c[ch];
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Metric

struct IouResult {
  std::vector<std::optional<double>> per_class;  // empty when the class has zero union
  double mean = 0.0;
  std::size_t valid_classes = 0;
};

class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t num_classes)
      : k_(num_classes), counts_(num_classes * num_classes, 0) {
    if (num_classes == 0) throw ConfigError("confusion matrix needs at least one class");
  }

  std::size_t num_classes() const { return k_; }
  std::uint64_t at(std::size_t truth, std::size_t pred) const { return counts_.at(truth * k_ + pred); }
  const std::vector<std::uint64_t>& counts() const { return counts_; }

  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (auto c : counts_) t += c;
    return t;
  }

  void accumulate(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> truth) {
    if (pred.size() != truth.size()) {
      throw ShapeError("accumulate: prediction has " + std::to_string(pred.size()) +
                       " pixels, truth has " + std::to_string(truth.size()));
    }
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const std::uint8_t t = truth[i];
      if (t == kIgnoreLabel) continue;
      if (t >= k_ || pred[i] >= k_) {
        throw FormatError("accumulate: label " + std::to_string(t >= k_ ? t : pred[i]) +
                          " outside [0, " + std::to_string(k_) + ")");
      }
      ++counts_[t * k_ + pred[i]];
    }
  }

  void accumulate(const LabelMap& pred, const LabelMap& truth) {
    if (pred.height != truth.height || pred.width != truth.width) {
      throw ShapeError("accumulate: prediction " + std::to_string(pred.height) + "x" +
                       std::to_string(pred.width) + " vs truth " + std::to_string(truth.height) +
                       "x" + std::to_string(truth.width));
    }
    accumulate(std::span<const std::uint8_t>(pred.labels), std::span<const std::uint8_t>(truth.labels));
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw ShapeError("merge: class counts differ");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  bool operator==(const ConfusionMatrix&) const = default;

  IouResult miou() const {
    IouResult r;
    r.per_class.resize(k_);
    double sum = 0.0;
    for (std::size_t k = 0; k < k_; ++k) {
      std::uint64_t tp = at(k, k);
      std::uint64_t fp = 0;
      std::uint64_t fn = 0;
      for (std::size_t j = 0; j < k_; ++j) {
        if (j == k) continue;
        fp += at(j, k);
        fn += at(k, j);
      }
      const std::uint64_t uni = tp + fp + fn;
      if (uni == 0) continue;
      r.per_class[k] = static_cast<double>(tp) / static_cast<double>(uni);
      sum += *r.per_class[k];
      ++r.valid_classes;
    }
    r.mean = r.valid_classes == 0 ? 0.0 : sum / static_cast<double>(r.valid_classes);
    return r;
  }

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

}  // namespace mfpnet
