#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace darnet;
using namespace darnet::testing;
namespace fs = std::filesystem;

namespace {

LabeledImage make_record(int size, std::uint64_t seed, int class_id = 0, const std::string& id = "r") {
  std::mt19937_64 rng(seed);
  LabeledImage li;
  li.image = random_map(3, size, size, rng, 0.0, 1.0).cast<float>();
  li.mask = random_mixed_mask(size, size, rng);
  li.class_id = class_id;
  li.source_id = id;
  return li;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path d = fs::temp_directory_path() / ("darnet_test_" + name);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

void write_class(const fs::path& root, const std::string& cls, int n, int size, int mask_size = 0) {
  fs::create_directories(root / cls / "images");
  fs::create_directories(root / cls / "masks");
  for (int i = 0; i < n; ++i) {
    const auto r = make_record(size, std::hash<std::string>{}(cls) + i);
    const std::string stem = "img" + std::to_string(i);
    write_image(root / cls / "images" / (stem + ".png"), r.image);
    write_mask(root / cls / "masks" / (stem + ".png"),
               mask_size ? resize_nearest(r.mask, mask_size, mask_size) : r.mask);
  }
}

}  // namespace

TEST(LoadDataset, CountsRecordsAndClasses) {
  const auto root = fresh_dir("load");
  for (const char* c : {"a", "b", "c"}) write_class(root, c, 10, 16);
  const Dataset d = load_dataset({root});
  EXPECT_EQ(d.size(), 30u);
  EXPECT_EQ(d.num_classes(), 3u);
  EXPECT_EQ(d.indices_of(1).size(), 10u);
}

TEST(LoadDataset, MismatchedMaskAndMissingRoot) {
  const auto root = fresh_dir("mismatch");
  write_class(root, "a", 2, 16, 8);
  EXPECT_THROW(load_dataset({root}), ShapeError);
  EXPECT_THROW(load_dataset({root / "nope"}), DataError);
}

TEST(LoadDataset, ResizeOnIngest) {
  const auto root = fresh_dir("resize");
  write_class(root, "a", 2, 20);
  const Dataset d = load_dataset({root, 0, 12});
  for (const auto& r : d.records()) {
    EXPECT_EQ(r.height(), 12);
    EXPECT_TRUE(((r.mask == 0) || (r.mask == 1)).all());
  }
}

TEST(ImageIo, RoundTripWithinQuantization) {
  const auto dir = fresh_dir("io");
  const auto r = make_record(9, 3);
  write_image(dir / "x.png", r.image);
  write_mask(dir / "m.png", r.mask);
  EXPECT_LT((read_image(dir / "x.png").data - r.image.data).cwiseAbs().maxCoeff(), 0.5f / 255.0f + 1e-6f);
  EXPECT_TRUE((read_mask(dir / "m.png") == r.mask).all());
  EXPECT_THROW(read_image(dir / "missing.png"), DataError);
}

TEST(TileImage, CountsAndReconstruction) {
  LabeledImage big = make_record(24, 5);
  const auto tiles = tile_image(big, 8, true);
  ASSERT_EQ(tiles.size(), 9u);
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    const int ty = int(i / 3) * 8, tx = int(i % 3) * 8;
    EXPECT_TRUE((tiles[i].mask == big.mask.block(ty, tx, 8, 8)).all());
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) ASSERT_EQ(tiles[i].image.at(c, y, x), big.image.at(c, ty + y, tx + x));
  }
  // 2448 / 408 = 6 tiles per axis
  LabeledImage wide;
  wide.image = Image(3, 2448, 2448);
  wide.mask = BinaryMask::Zero(2448, 2448);
  EXPECT_EQ(tile_image(wide, 408, true).size(), 36u);
}

TEST(TileImage, DropsUniformTilesAndIdentityTiling) {
  LabeledImage img = make_record(16, 6);
  img.mask.block(0, 0, 8, 8).setZero();
  const auto kept = tile_image(img, 8);
  for (const auto& t : kept) EXPECT_GT(t.mask.cast<int>().sum(), 0);
  EXPECT_LT(kept.size(), 4u);
  const auto whole = tile_image(img, 16);
  ASSERT_EQ(whole.size(), 1u);
  EXPECT_TRUE((whole[0].mask == img.mask).all());
}

TEST(Resize, IdentityBinaryAndConstant) {
  const auto r = make_record(16, 7);
  const auto same = resize(r, 16);
  EXPECT_TRUE((same.image.data.array() == r.image.data.array()).all());
  EXPECT_TRUE((same.mask == r.mask).all());
  const auto small = resize(r, 10);
  EXPECT_TRUE(((small.mask == 0) || (small.mask == 1)).all());
  LabeledImage ones = r;
  ones.mask.setOnes();
  EXPECT_TRUE((resize(ones, 11).mask == 1).all());
}

TEST(SampleEpisode, DisjointDeterministicAndInsufficient) {
  std::vector<LabeledImage> recs;
  for (int i = 0; i < 10; ++i) recs.push_back(make_record(8, i, 0, "a/" + std::to_string(i)));
  for (int i = 0; i < 5; ++i) recs.push_back(make_record(8, 50 + i, 1, "b/" + std::to_string(i)));
  const Dataset d(recs, {"a", "b"});
  for (int t = 0; t < 1000; ++t) {
    Rng rng(t);
    const Episode ep = sample_episode(d, 0, 1, 1, rng);
    ASSERT_NE(ep.support[0].source_id, ep.query[0].source_id);
  }
  Rng r1(9), r2(9);
  EXPECT_EQ(sample_episode(d, 2, 2, r1).query[1].source_id, sample_episode(d, 2, 2, r2).query[1].source_id);
  Rng r3(1);
  EXPECT_THROW(sample_episode(d, 1, 5, 1, r3), DataError);
}

TEST(SyntheticEpisode, DeterministicAndSeparable) {
  const SyntheticSpec spec = easy_spec(12);
  const Episode a = generate_synthetic_episode(spec, 2, 3);
  const Episode b = generate_synthetic_episode(spec, 2, 3);
  ASSERT_EQ(a.support.size(), 2u);
  ASSERT_EQ(a.query.size(), 3u);
  EXPECT_TRUE((a.query[2].image.data.array() == b.query[2].image.data.array()).all());
  // nearest-prototype classifier on raw pixels
  for (const auto& q : a.query) {
    const auto f = q.image.cast<double>();
    const auto p = support_prototype(a.support[0].image.cast<double>(), a.support[0].mask);
    BinaryMask pred(q.height(), q.width());
    for (int y = 0; y < q.height(); ++y)
      for (int x = 0; x < q.width(); ++x) {
        const Vector<double> v = f.data.col(y * q.width() + x);
        pred(y, x) = (v - p.fg).norm() < (v - p.bg).norm();
      }
    EXPECT_GT(oracle_iou(pred, q.mask), 0.95);
  }
}

TEST(SyntheticEpisode, FullSimilarityGivesIdenticalTextureMeans) {
  SyntheticSpec spec = easy_spec(13);
  spec.fg_bg_similarity = 1.0;
  spec.texture_noise = 0.0;
  const Episode ep = generate_synthetic_episode(spec, 1, 1);
  const auto p = support_prototype(ep.support[0].image.cast<double>(), ep.support[0].mask);
  EXPECT_LT((p.fg - p.bg).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(SyntheticEpisode, DistractorsCoverRequestedQueryBackground) {
  SyntheticSpec spec = easy_spec(14);
  spec.texture_noise = 0.0;
  spec.query_distractor_min = spec.query_distractor_max = 0.4;
  const Episode ep = generate_synthetic_episode(spec, 1, 2);
  // Without noise each image holds flat colors; count background pixels that
  // differ from the background color at the least ambiguous corner pixel.
  const auto off_color = [](const LabeledImage& li, bool fg_region, long* region) {
    float ref = -1;
    long n = 0, off = 0;
    for (int y = 0; y < li.height(); ++y)
      for (int x = 0; x < li.width(); ++x) {
        if (bool(li.mask(y, x)) != fg_region) continue;
        if (ref < 0) ref = li.image.at(0, y, x);
        ++n;
        off += li.image.at(0, y, x) != ref;
      }
    *region = n;
    return off;
  };
  long n = 0;
  EXPECT_EQ(off_color(ep.support[0], false, &n), 0);
  EXPECT_EQ(off_color(ep.support[0], true, &n), 0);
  for (const auto& q : ep.query) {
    EXPECT_EQ(off_color(q, true, &n), 0);
    const long off = off_color(q, false, &n);
    // the reference pixel may itself lie in a patch, which flips the count
    const double frac = double(std::min(off, n - off)) / double(n);
    EXPECT_NEAR(frac, 0.4, 2.0 / double(n));
  }
  spec.query_distractor_max = 1.5;
  EXPECT_THROW(generate_synthetic_episode(spec, 1, 1), std::invalid_argument);
}

TEST(SyntheticEpisode, DisabledDistractorsKeepEpisodes) {
  SyntheticSpec spec = easy_spec(15);
  const Episode a = generate_synthetic_episode(spec, 1, 1);
  spec.distractor_mix = 0.9;  // unused while coverage is zero
  const Episode b = generate_synthetic_episode(spec, 1, 1);
  EXPECT_TRUE((a.query[0].image.data.array() == b.query[0].image.data.array()).all());
}

TEST(Augment, IdentityConfigLeavesImage) {
  const auto r = make_record(12, 15);
  Rng rng(1);
  const auto out = augment_support(r, AugmentConfig::identity(), rng);
  EXPECT_TRUE((out.image.data.array() == r.image.data.array()).all());
  EXPECT_TRUE((out.mask == r.mask).all());
}

TEST(Augment, GrayscaleChannelsEqual) {
  const auto r = make_record(12, 16);
  const Image g = to_grayscale(r.image);
  EXPECT_TRUE((g.data.row(0).array() == g.data.row(1).array()).all());
  EXPECT_TRUE((g.data.row(1).array() == g.data.row(2).array()).all());
  AugmentConfig cfg = AugmentConfig::identity();
  cfg.grayscale_probability = 1.0;
  Rng rng(2);
  AugmentRecord rec;
  const auto out = augment_support(r, cfg, rng, &rec);
  EXPECT_TRUE(rec.grayscale);
  EXPECT_TRUE((out.image.data.row(0).array() == out.image.data.row(2).array()).all());
}

TEST(Augment, CutoutZeroesExactlyThePatch) {
  LabeledImage r = make_record(32, 17);
  r.image.data = r.image.data.cwiseMax(0.01f);  // no accidental zeros
  AugmentConfig cfg = AugmentConfig::identity();
  cfg.cutout = true;
  cfg.cutout_min_area = cfg.cutout_max_area = 0.25;  // 16 x 16 patch
  Rng rng(3);
  AugmentRecord rec;
  const auto out = augment_support(r, cfg, rng, &rec);
  ASSERT_TRUE(rec.cutout);
  EXPECT_EQ(rec.cutout->height, 16);
  EXPECT_EQ(rec.cutout->width, 16);
  Image expect = r.image;
  apply_cutout(expect, *rec.cutout);
  EXPECT_TRUE((out.image.data.array() == expect.data.array()).all());
  EXPECT_TRUE((out.mask == r.mask).all());
  int zeros = 0;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) zeros += out.image.at(0, y, x) == 0.0f;
  EXPECT_EQ(zeros, 256);
}

TEST(EpisodeSeed, DistinctAcrossRunsAndIndices) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t run = 0; run < 5; ++run)
    for (std::uint64_t i = 0; i < 200; ++i) seen.insert(episode_seed(7, run, i));
  EXPECT_EQ(seen.size(), 1000u);
  EXPECT_EQ(episode_seed(7, 1, 2), episode_seed(7, 1, 2));
}
