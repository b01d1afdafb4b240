#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <numeric>

#include "mfpnet/data.hpp"

using namespace mfpnet;

namespace {

std::filesystem::path temp_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("mfpnet_test_data_" + name);
  std::filesystem::remove_all(p);
  return p;
}

LabelMap random_labels(std::size_t h, std::size_t w, std::size_t k, std::uint64_t seed, bool with_ignore = false) {
  Rng rng(seed);
  LabelMap m(h, w);
  for (auto& v : m.labels) {
    v = static_cast<std::uint8_t>(rng.integer(0, static_cast<std::int64_t>(k) - 1));
    if (with_ignore && rng.uniform() < 0.1) v = kIgnoreLabel;
  }
  return m;
}

}  // namespace

TEST(Synth, DeterministicPerIndex) {
  const auto a = synth_dataset(3, 4, {24, 32}, 5);
  const auto b = synth_dataset(3, 4, {24, 32}, 5);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(a[i].image, b[i].image);
    EXPECT_EQ(a[i].label, b[i].label);
  }
  const auto tail = synth_dataset(3, 2, {24, 32}, 5, {}, 2);
  EXPECT_EQ(tail[0].label, a[2].label);
  EXPECT_EQ(tail[1].image, a[3].image);
  EXPECT_NE(synth_dataset(4, 1, {24, 32}, 5)[0].image, a[0].image);
}

TEST(Synth, NoShapesMeansAllBackground) {
  const auto s = synth_sample(1, 0, {16, 16}, 2, SynthOptions{0, 0});
  for (auto v : s.label.labels) EXPECT_EQ(v, 0);
  s.validate(2);
}

TEST(Synth, HundredSamplesCoverEveryClass) {
  std::vector<std::size_t> hist(6, 0);
  for (const auto& s : synth_dataset(0, 100, {32, 32}, 6)) {
    for (auto v : s.label.labels) ++hist.at(v);
  }
  for (std::size_t k = 0; k < hist.size(); ++k) EXPECT_GT(hist[k], 0u) << "class " << k;
}

TEST(Synth, ImageColorsFollowPaletteWithinNoise) {
  const auto s = synth_sample(2, 7, {20, 20}, 4);
  for (std::size_t y = 0; y < 20; ++y)
    for (std::size_t x = 0; x < 20; ++x) {
      const auto c = class_color(s.label.at(y, x));
      for (std::size_t ch = 0; ch < 3; ++ch) EXPECT_LE(std::abs(int(s.image.at(y, x, ch)) - int(c[ch])), 10);
    }
}

TEST(Synth, RejectsBadArguments) {
  EXPECT_THROW(synth_sample(0, 0, {8, 8}, 1), ConfigError);
  EXPECT_THROW(synth_sample(0, 0, {8, 8}, 3, SynthOptions{4, 2}), ConfigError);
  EXPECT_THROW(synth_sample(0, 0, {0, 8}, 3), ShapeError);
}

TEST(Pnm, RoundTrip) {
  const auto s = synth_sample(5, 0, {7, 9}, 4);
  EXPECT_EQ(decode_ppm(encode_ppm(s.image)), s.image);
  EXPECT_EQ(decode_pgm(encode_pgm(s.label)), s.label);
  const auto dir = temp_dir("pnm");
  std::filesystem::create_directories(dir);
  save_ppm((dir / "a.ppm").string(), s.image);
  save_pgm((dir / "a.pgm").string(), s.label);
  EXPECT_EQ(load_ppm((dir / "a.ppm").string()), s.image);
  EXPECT_EQ(load_pgm((dir / "a.pgm").string()), s.label);
  std::filesystem::remove_all(dir);
}

TEST(Pnm, HandWrittenFileWithComment) {
  std::string bytes = "P6\n2 2\n255\n";
  for (int i = 0; i < 12; ++i) bytes.push_back(static_cast<char>(i * 20));
  ASSERT_EQ(bytes.size(), 23u);
  const Image img = decode_ppm(bytes);
  EXPECT_EQ(img.height, 2u);
  EXPECT_EQ(img.width, 2u);
  EXPECT_EQ(img.at(1, 0, 2), 8 * 20);

  std::string commented = "P6\n# made by hand\n2 # width\n2\n255\n" + bytes.substr(11);
  EXPECT_EQ(decode_ppm(commented), img);
  EXPECT_EQ(encode_ppm(img), bytes);
}

TEST(Pnm, RejectsMalformedFiles) {
  const std::string good = encode_pgm(LabelMap(2, 3, 1));
  EXPECT_THROW(decode_pgm("P2\n3 2\n255\n123456"), FormatError);
  EXPECT_THROW(decode_ppm(good), FormatError);
  EXPECT_THROW(decode_pgm("P5\n3 2\n65535\n" + std::string(12, '\0')), FormatError);
  EXPECT_THROW(decode_pgm(good.substr(0, good.size() - 1)), FormatError);
  EXPECT_THROW(decode_pgm(good + "x"), FormatError);
  EXPECT_THROW(decode_pgm("P5\n0 2\n255\n"), FormatError);
  EXPECT_THROW(decode_pgm("P5\n3"), FormatError);
  EXPECT_THROW(load_pgm("/nonexistent/mfpnet.pgm"), IoError);
}

TEST(Manifest, SaveLoadDataset) {
  const auto data = synth_dataset(9, 3, {8, 12}, 3);
  const auto dir = temp_dir("manifest");
  const std::string manifest = save_dataset(dir.string(), data);
  const auto entries = read_manifest(manifest);
  ASSERT_EQ(entries.size(), 3u);
  EXPECT_EQ(std::filesystem::path(entries[1].image_path).filename(), "img_0001.ppm");
  const auto back = load_dataset(manifest);
  ASSERT_EQ(back.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(back[i].image, data[i].image);
    EXPECT_EQ(back[i].label, data[i].label);
  }
  binio::write_file((dir / "bad.tsv").string(), "only_one_column\n");
  EXPECT_THROW(read_manifest((dir / "bad.tsv").string()), FormatError);
  save_pgm((dir / "lbl_0000.pgm").string(), LabelMap(4, 4));
  EXPECT_THROW(load_dataset(manifest), FormatError);
  std::filesystem::remove_all(dir);
  EXPECT_THROW(read_manifest(manifest), IoError);
}

TEST(Sample, ValidateCatchesLabelAndExtentErrors) {
  SegmentationSample s{Image(2, 2), LabelMap(2, 2, 3)};
  EXPECT_THROW(s.validate(3), FormatError);
  s.label.at(0, 0) = kIgnoreLabel;
  s.label.at(0, 1) = s.label.at(1, 0) = s.label.at(1, 1) = 2;
  EXPECT_NO_THROW(s.validate(3));
  s.label = LabelMap(2, 3);
  EXPECT_THROW(s.validate(3), ShapeError);
}

TEST(Confusion, PerfectPredictionScoresOne) {
  const auto m = random_labels(16, 16, 4, 1);
  ConfusionMatrix c(4);
  c.accumulate(m, m);
  EXPECT_EQ(c.miou().mean, 1.0);
  EXPECT_EQ(c.total(), 256u);
}

TEST(Confusion, ConstantPredictionOnHalfSplit) {
  LabelMap truth(4, 4, 0), pred(4, 4, 0);
  for (std::size_t y = 2; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x) truth.at(y, x) = 1;
  ConfusionMatrix c(2);
  c.accumulate(pred, truth);
  const auto r = c.miou();
  EXPECT_DOUBLE_EQ(*r.per_class[0], 0.5);
  EXPECT_DOUBLE_EQ(*r.per_class[1], 0.0);
  EXPECT_DOUBLE_EQ(r.mean, 0.25);
}

TEST(Confusion, MatchesPixelLoopOracle) {
  const std::size_t k = 5;
  const auto truth = random_labels(16, 16, k, 2, true);
  const auto pred = random_labels(16, 16, k, 3);
  ConfusionMatrix c(k);
  c.accumulate(pred, truth);
  double sum = 0.0;
  std::size_t valid = 0;
  for (std::size_t cls = 0; cls < k; ++cls) {
    std::size_t inter = 0, uni = 0;
    for (std::size_t i = 0; i < truth.labels.size(); ++i) {
      if (truth.labels[i] == kIgnoreLabel) continue;
      const bool t = truth.labels[i] == cls, p = pred.labels[i] == cls;
      inter += t && p;
      uni += t || p;
    }
    if (uni == 0) {
      EXPECT_FALSE(c.miou().per_class[cls].has_value());
      continue;
    }
    EXPECT_NEAR(*c.miou().per_class[cls], double(inter) / double(uni), 1e-15);
    sum += double(inter) / double(uni);
    ++valid;
  }
  EXPECT_NEAR(c.miou().mean, sum / double(valid), 1e-15);
  const auto ignored = std::count(truth.labels.begin(), truth.labels.end(), kIgnoreLabel);
  EXPECT_GT(ignored, 0);
  EXPECT_EQ(c.total(), 256u - static_cast<std::uint64_t>(ignored));
}

TEST(Confusion, AbsentClassIsExcludedFromMean) {
  LabelMap truth(1, 2, 0), pred(1, 2, 0);
  ConfusionMatrix c(3);
  c.accumulate(pred, truth);
  EXPECT_EQ(c.miou().valid_classes, 1u);
  EXPECT_EQ(c.miou().mean, 1.0);
  EXPECT_EQ(ConfusionMatrix(3).miou().mean, 0.0);
}

TEST(Confusion, MergeAndOrderIndependence) {
  const std::size_t k = 4;
  std::vector<std::pair<LabelMap, LabelMap>> batch;
  for (std::uint64_t s = 0; s < 6; ++s) batch.emplace_back(random_labels(8, 8, k, 10 + s), random_labels(8, 8, k, 20 + s, true));
  ConfusionMatrix whole(k), a(k), b(k), reversed(k);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    whole.accumulate(batch[i].first, batch[i].second);
    (i < 3 ? a : b).accumulate(batch[i].first, batch[i].second);
  }
  for (std::size_t i = batch.size(); i-- > 0;) reversed.accumulate(batch[i].first, batch[i].second);
  a.merge(b);
  EXPECT_EQ(a, whole);
  EXPECT_EQ(reversed, whole);
  EXPECT_THROW(a.merge(ConfusionMatrix(k + 1)), ShapeError);
}

TEST(Confusion, PixelPermutationInvariantAndBounded) {
  Rng rng(30);
  for (int trial = 0; trial < 20; ++trial) {
    const auto truth = random_labels(6, 7, 3, 40 + trial, true);
    const auto pred = random_labels(6, 7, 3, 80 + trial);
    std::vector<std::size_t> perm(42);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = perm.size(); i > 1; --i)
      std::swap(perm[i - 1], perm[static_cast<std::size_t>(rng.integer(0, static_cast<std::int64_t>(i) - 1))]);
    LabelMap pt(6, 7), pp(6, 7);
    for (std::size_t i = 0; i < 42; ++i) {
      pt.labels[i] = truth.labels[perm[i]];
      pp.labels[i] = pred.labels[perm[i]];
    }
    ConfusionMatrix c1(3), c2(3);
    c1.accumulate(pred, truth);
    c2.accumulate(pp, pt);
    EXPECT_EQ(c1, c2);
    EXPECT_GE(c1.miou().mean, 0.0);
    EXPECT_LE(c1.miou().mean, 1.0);
  }
}

TEST(Confusion, RejectsOutOfRangeAndMismatch) {
  ConfusionMatrix c(3);
  EXPECT_THROW(c.accumulate(LabelMap(2, 2, 3), LabelMap(2, 2, 0)), FormatError);
  EXPECT_THROW(c.accumulate(LabelMap(2, 2, 0), LabelMap(2, 2, 4)), FormatError);
  EXPECT_THROW(c.accumulate(LabelMap(2, 2, 0), LabelMap(2, 3, 0)), ShapeError);
  EXPECT_THROW(ConfusionMatrix(0), ConfigError);
}

TEST(Labels, ArgmaxFirstIndexWinsTies) {
  Tensor logits(Shape{1, 3, 1, 2});
  logits.at(0, 1, 0, 0) = 2.0;
  logits.at(0, 2, 0, 0) = 2.0;
  const auto m = argmax_labels(logits).front();
  EXPECT_EQ(m.at(0, 0), 1);
  EXPECT_EQ(m.at(0, 1), 0);
}

TEST(Labels, ColorizeUsesPaletteAndWhiteForIgnore) {
  LabelMap m(1, 3);
  m.at(0, 1) = 21;
  m.at(0, 2) = kIgnoreLabel;
  const Image img = colorize(m);
  for (std::size_t ch = 0; ch < 3; ++ch) {
    EXPECT_EQ(img.at(0, 0, ch), kPalette[0][ch]);
    EXPECT_EQ(img.at(0, 1, ch), kPalette[1][ch]);
    EXPECT_EQ(img.at(0, 2, ch), 255);
  }
}

TEST(Labels, ImageScalingToUnitRange) {
  Image img(1, 2);
  img.at(0, 0, 0) = 0;
  img.at(0, 1, 1) = 255;
  img.at(0, 1, 2) = 51;
  const Tensor t = image_to_tensor(img);
  EXPECT_EQ(t.shape(), (Shape{1, 3, 1, 2}));
  EXPECT_EQ(t.at(0, 0, 0, 0), -1.0);
  EXPECT_EQ(t.at(0, 1, 0, 1), 1.0);
  EXPECT_NEAR(t.at(0, 2, 0, 1), 51.0 / 127.5 - 1.0, 1e-15);
  Image other(2, 2);
  const Image* pair[] = {&img, &other};
  EXPECT_THROW(images_to_tensor(pair), ShapeError);
}
