#include <gtest/gtest.h>

#include <set>

#include "gsgn/data.hpp"
#include "gsgn/metrics.hpp"

namespace {

using namespace gsgn;
namespace fs = std::filesystem;

fs::path scratch(const std::string& name) {
  fs::path p = fs::path(GSGN_TEST_TMP) / ("data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

TEST(ResizePad, LongSideRule) {
  auto a = resize_pad(Image::zeros({3, 768, 1024}));
  EXPECT_EQ(a.image.shape(), (Shape{3, 512, 512}));
  EXPECT_EQ(a.content_w, 512u);
  EXPECT_EQ(a.content_h, 384u);

  auto src = Image::full({3, 512, 512}, 0.5f);
  auto b = resize_pad(src);
  EXPECT_FALSE(b.padded());
  EXPECT_EQ(b.image.values(), src.values());

  auto c = resize_pad(Image::zeros({3, 128, 256}));
  EXPECT_EQ(c.content_w, 512u);
  EXPECT_EQ(c.content_h, 256u);
  EXPECT_EQ(c.image.shape(), (Shape{3, 512, 512}));
}

TEST(ResizePad, PaddingIsZeroAndMaskMatches) {
  auto p = resize_pad(Image::ones({3, 6, 12}), 8);
  EXPECT_EQ(p.content_h, 4u);
  auto m = p.mask();
  for (std::size_t y = 0; y < 8; ++y)
    for (std::size_t x = 0; x < 8; ++x) {
      EXPECT_EQ(m[y * 8 + x], y < 4 ? 1.0f : 0.0f);
      EXPECT_EQ(p.image[y * 8 + x], y < 4 ? 1.0f : 0.0f);
    }
  EXPECT_EQ(crop(p).shape(), (Shape{3, 4, 8}));
}

TEST(ResizeBilinear, ConstantStaysConstant) {
  auto r = resize_bilinear(Image::full({3, 5, 7}, 0.3f), 11, 3);
  for (float v : r.values()) EXPECT_FLOAT_EQ(v, 0.3f);
}

TEST(PadToMultiple, RoundsUpWithoutResampling) {
  auto p = pad_to_multiple(Image::ones({3, 5, 9}), 4);
  EXPECT_EQ(p.image.shape(), (Shape{3, 8, 12}));
  EXPECT_EQ(crop(p).values(), Image::ones({3, 5, 9}).values());
}

TEST(Png, RoundTripIsLosslessOnQuantizedImages) {
  std::mt19937_64 rng(0);
  auto img = quantize(Image::uniform({3, 9, 13}, rng));
  EXPECT_EQ(decode_png(encode_png(img)).values(), img.values());
  EXPECT_THROW(decode_png("not a png"), Error);
}

TEST(Styles, IdentityStyle) {
  std::mt19937_64 rng(1);
  auto x = Image::uniform({3, 4, 4}, rng);
  EXPECT_EQ(apply_style(x, SyntheticStyle{"id", 1.0, {1, 1, 1}, 0.0}).values(), x.values());
}

TEST(Styles, GammaAndClip) {
  auto x = Image::full({3, 1, 1}, 0.5f);
  EXPECT_FLOAT_EQ(apply_style(x, SyntheticStyle{"g", 2.0, {1, 1, 1}, 0.0})[0], 0.25f);
  auto y = Image::full({3, 1, 1}, 0.9f);
  EXPECT_EQ(apply_style(y, SyntheticStyle{"c", 1.0, {1.2, 1.2, 1.2}, 0.0})[0], 1.0f);
  EXPECT_THROW(apply_style(y, SyntheticStyle{"", 1.0, {1, 1, 1}, 0.0}), Error);
  EXPECT_THROW(apply_style(y, SyntheticStyle{"bad", -1.0, {1, 1, 1}, 0.0}), Error);
}

TEST(Synthetic, SplitCountsAndDeterminism) {
  auto a = make_synthetic_dataset(500, default_styles(), 0);
  EXPECT_EQ(a.train.size(), 1200u);
  EXPECT_EQ(a.val.size(), 150u);
  EXPECT_EQ(a.test.size(), 150u);
  auto b = make_synthetic_dataset(500, default_styles(), 0);
  for (const char* s : {"train", "val", "test"})
    for (std::size_t i = 0; i < a.split(s).image_count(); ++i) {
      ASSERT_EQ(a.split(s).ids[i], b.split(s).ids[i]);
      ASSERT_EQ(a.split(s).sources[i].values(), b.split(s).sources[i].values());
      for (std::size_t t = 0; t < 3; ++t) ASSERT_EQ(a.split(s).targets[t][i].values(), b.split(s).targets[t][i].values());
    }
  std::set<std::string> seen;
  for (const char* s : {"train", "val", "test"})
    for (const auto& id : a.split(s).ids) EXPECT_TRUE(seen.insert(id).second) << "id in two splits: " << id;
}

TEST(Synthetic, DoNothingBaselineIsFiniteAndBelowCap) {
  auto ds = make_synthetic_dataset(50, default_styles(), 0);
  for (std::size_t t = 0; t < 3; ++t) {
    double total = 0;
    for (std::size_t i = 0; i < ds.test.image_count(); ++i) total += psnr(ds.test.sources[i], ds.test.targets[t][i]);
    const double mean = total / static_cast<double>(ds.test.image_count());
    EXPECT_TRUE(std::isfinite(mean));
    EXPECT_LT(mean, 100.0);
    EXPECT_GT(mean, 5.0);
  }
}

TEST(Synthetic, DifferentSeedsDiffer) {
  auto a = make_synthetic_dataset(10, default_styles(), 0), b = make_synthetic_dataset(10, default_styles(), 1);
  EXPECT_NE(a.train.sources[0].values(), b.train.sources[0].values());
}

TEST(PairedDir, RoundTripCountsAndOrdering) {
  auto root = scratch("roundtrip");
  auto ds = make_synthetic_dataset(13, default_styles(), 3, 16);
  write_synthetic_dataset(root, ds);
  EXPECT_EQ(discover_tasks(root), (std::vector<std::string>{"expertA", "expertB", "expertC"}));
  auto a = load_paired_dir(root / "train", discover_tasks(root));
  EXPECT_EQ(a.image_count(), 11u);
  EXPECT_EQ(a.size(), 33u);
  EXPECT_EQ(a.ids, ds.train.ids);
  for (std::size_t i = 0; i < a.image_count(); ++i) {
    EXPECT_EQ(a.sources[i].values(), ds.train.sources[i].values());
    EXPECT_EQ(a.targets[2][i].values(), ds.train.targets[2][i].values());
  }
  auto b = load_paired_dir(root / "train", discover_tasks(root));
  EXPECT_EQ(a.ids, b.ids);
}

TEST(PairedDir, TenSourcesThreeTasks) {
  auto root = scratch("ten");
  std::mt19937_64 rng(5);
  for (int i = 0; i < 10; ++i) {
    const std::string name = "img" + std::to_string(i) + ".png";
    for (const char* dir : {"source", "t1", "t2", "t3"}) write_png(root / dir / name, quantize(Image::uniform({3, 4, 6}, rng)));
  }
  EXPECT_EQ(discover_tasks(root, "."), (std::vector<std::string>{"t1", "t2", "t3"}));
  auto d = load_paired_dir(root, {"t1", "t2", "t3"});
  EXPECT_EQ(d.size(), 30u);
  auto s = d.sample(4);
  EXPECT_EQ(s.task, 1u);
  EXPECT_EQ(*s.id, "img1");
}

TEST(PairedDir, MissingTargetNamesTheFile) {
  auto root = scratch("missing");
  auto img = Image::zeros({3, 4, 4});
  for (const char* n : {"a.png", "b.png"}) {
    write_png(root / "source" / n, img);
    write_png(root / "t1" / n, img);
  }
  write_png(root / "t2" / "a.png", img);
  try {
    load_paired_dir(root, {"t1", "t2"});
    FAIL() << "expected an error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find((root / "t2" / "b.png").string()), std::string::npos) << e.what();
  }
}

TEST(PairedDir, DimensionMismatchIsAnError) {
  auto root = scratch("dims");
  write_png(root / "source" / "a.png", Image::zeros({3, 4, 4}));
  write_png(root / "t1" / "a.png", Image::zeros({3, 4, 5}));
  EXPECT_THROW(load_paired_dir(root, {"t1"}), ShapeError);
}

TEST(BatchSampler, DeterministicAndEpochCounts) {
  BatchSampler a(10, 3, 42), b(10, 3, 42), c(10, 3, 43);
  EXPECT_EQ(a.batches_per_epoch(), 4u);
  bool differs = false;
  for (std::uint64_t i = 0; i < 12; ++i) {
    EXPECT_EQ(a.batch(i), b.batch(i));
    differs = differs || a.batch(i) != c.batch(i);
  }
  EXPECT_TRUE(differs);
  std::multiset<std::size_t> epoch;
  for (std::uint64_t i = 0; i < 4; ++i)
    for (auto k : a.batch(i)) epoch.insert(k);
  EXPECT_EQ(epoch.size(), 10u);
  EXPECT_EQ(std::set<std::size_t>(epoch.begin(), epoch.end()).size(), 10u);
  EXPECT_EQ(a.batch(3).size(), 1u);
  EXPECT_THROW(BatchSampler(3, 4, 0), Error);
}

TEST(BatchSampler, RandomAccessMatchesSequential) {
  BatchSampler a(17, 4, 9), b(17, 4, 9);
  std::vector<std::vector<std::size_t>> seq;
  for (std::uint64_t i = 0; i < 20; ++i) seq.push_back(a.batch(i));
  for (std::uint64_t i = 20; i-- > 0;) EXPECT_EQ(b.batch(i), seq[i]);
}

TEST(UnpairedSampler, IndependentStreams) {
  UnpairedSampler u(20, 20, 4, 7);
  int equal = 0;
  for (std::uint64_t i = 0; i < 10; ++i) equal += u.source_batch(i) == u.target_batch(i);
  EXPECT_LT(equal, 2);
  UnpairedSampler v(20, 20, 4, 7);
  for (std::uint64_t i = 0; i < 10; ++i) EXPECT_EQ(u.target_batch(i), v.target_batch(i));
}

}  // namespace
