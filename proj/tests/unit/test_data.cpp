#include <gtest/gtest.h>
#include <unistd.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>

#include "chanssl/data.hpp"
#include "chanssl/errors.hpp"

using namespace chanssl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("chanssl_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

int points_inside(const Scene& s, const Box3D& b) {
  int n = 0;
  for (const Point& p : s.cloud) n += point_in_box(b, p.x, p.y, p.z) ? 1 : 0;
  return n;
}

}  // namespace

TEST(Synth, DeterministicPerSeed) {
  const Scene a = synth_scene(7, {}), b = synth_scene(7, {}), c = synth_scene(8, {});
  EXPECT_EQ(a.cloud, b.cloud);
  EXPECT_EQ(a.gt_boxes, b.gt_boxes);
  EXPECT_NE(a.cloud, c.cloud);
}

TEST(Synth, NoObjectsWhenMaxPerClassIsZero) {
  SynthConfig cfg;
  cfg.max_per_class = 0;
  const Scene s = synth_scene(3, cfg);
  EXPECT_TRUE(s.gt_boxes.empty());
  EXPECT_TRUE(s.gt_classes.empty());
  EXPECT_GT(s.cloud.size(), 0u);
}

TEST(Synth, EveryBoxContainsMinimumPoints) {
  const SynthConfig cfg;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Scene s = synth_scene(seed, cfg);
    ASSERT_EQ(s.gt_boxes.size(), s.gt_classes.size());
    for (const Box3D& b : s.gt_boxes) EXPECT_GE(points_inside(s, b), cfg.min_pts) << "seed " << seed;
  }
}

TEST(Synth, GroundHeightNoise) {
  SynthConfig cfg;
  cfg.max_per_class = 0;
  cfg.max_clutter = 0;
  const Scene s = synth_scene(4, cfg);
  double sum = 0, sq = 0;
  for (const Point& p : s.cloud) {
    sum += p.z;
    sq += p.z * p.z;
  }
  const double n = static_cast<double>(s.cloud.size());
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  EXPECT_NEAR(sum / n, 0.0, 0.01);
  EXPECT_NEAR(sd, cfg.ground_sigma, 0.005);
}

TEST(KittiLabel, RoundtripWithinFormattingQuantum) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const Scene s = synth_scene(seed, {});
    const std::string text = write_kitti_label(s);
    const auto objs = parse_kitti_label(text);
    ASSERT_EQ(objs.size(), s.gt_boxes.size());
    for (std::size_t i = 0; i < objs.size(); ++i) {
      EXPECT_EQ(objs[i].cls, s.gt_classes[i]);
      const Box3D& a = objs[i].box;
      const Box3D& b = s.gt_boxes[i];
      for (auto [x, y] : {std::pair{a.cx, b.cx}, {a.cy, b.cy}, {a.cz, b.cz}, {a.w, b.w},
                          {a.h, b.h}, {a.l, b.l}, {a.r, b.r}})
        EXPECT_NEAR(x, y, 0.005);
    }
  }
}

TEST(KittiLabel, LinesHaveFifteenFields) {
  const std::string text = write_kitti_label(synth_scene(1, {}));
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream f(line);
    int n = 0;
    for (std::string tok; f >> tok;) ++n;
    EXPECT_EQ(n, 15) << line;
  }
}

TEST(KittiLabel, ParseErrors) {
  try {
    parse_kitti_label("Car 1 2");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 1u);
  }
  const std::string ok = "Car 0.00 0 -1.00 -1 -1 -1 -1 1.50 1.60 3.90 1.00 2.00 0.75 0.10\n";
  try {
    parse_kitti_label(ok + "Truck 0.00 0 -1.00 -1 -1 -1 -1 1.50 1.60 3.90 1.00 2.00 0.75 0.10\n");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_EQ(e.line(), 2u);
    EXPECT_NE(std::string(e.what()).find("Truck"), std::string::npos);
  }
  EXPECT_THROW(parse_kitti_label("Car 0.00 0 -1.00 -1 -1 -1 -1 1.50 abc 3.90 1.00 2.00 0.75 0.10"),
               ParseError);
  const auto dc = parse_kitti_label("DontCare 0.00 0 -1.00 -1 -1 -1 -1 1.50 1.60 3.90 1.00 2.00 0.75 0.10");
  ASSERT_EQ(dc.size(), 1u);
  EXPECT_TRUE(dc[0].dont_care);
  EXPECT_EQ(parse_kitti_label(ok).at(0).box, (Box3D{1.0, 2.0, 0.75, 1.6, 1.5, 3.9, 0.1}));
}

TEST(BinCloud, BitExactRoundtrip) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-50.0f, 50.0f);
  PointCloud cloud(100000);
  for (Point& p : cloud) p = {u(rng), u(rng), u(rng), u(rng)};
  const std::string bytes = encode_bin_cloud(cloud);
  EXPECT_EQ(bytes.size(), cloud.size() * 16);
  EXPECT_EQ(decode_bin_cloud(bytes), cloud);
  float first;
  std::memcpy(&first, bytes.data(), 4);
  EXPECT_EQ(static_cast<double>(first), cloud[0].x);

  const fs::path dir = temp_dir("bin");
  write_bin_cloud(dir / "c.bin", cloud);
  EXPECT_EQ(read_bin_cloud(dir / "c.bin"), cloud);
  write_bin_cloud(dir / "empty.bin", {});
  EXPECT_TRUE(read_bin_cloud(dir / "empty.bin").empty());
  fs::remove_all(dir);
}

TEST(BinCloud, TruncatedInputNamesOffset) {
  try {
    decode_bin_cloud(std::string(17, '\0'));
    FAIL();
  } catch (const IoError& e) {
    EXPECT_NE(std::string(e.what()).find("16"), std::string::npos) << e.what();
  }
}

TEST(Split, SizesAndPartition) {
  const Split s = split_sample(3712, {0.01, 1});
  EXPECT_EQ(s.labeled.size(), 37u);
  EXPECT_EQ(s.unlabeled.size(), 3712u - 37u);
  std::set<std::size_t> all(s.labeled.begin(), s.labeled.end());
  all.insert(s.unlabeled.begin(), s.unlabeled.end());
  EXPECT_EQ(all.size(), 3712u);
  EXPECT_EQ(*all.rbegin(), 3711u);
  EXPECT_TRUE(std::is_sorted(s.labeled.begin(), s.labeled.end()));

  const Split full = split_sample(10, {1.0, 1});
  EXPECT_EQ(full.labeled.size(), 10u);
  EXPECT_TRUE(full.unlabeled.empty());
  EXPECT_EQ(split_sample(10, {0.01, 1}).labeled.size(), 1u);
  EXPECT_THROW(split_sample(10, {0.0, 1}), std::invalid_argument);
  EXPECT_THROW(split_sample(10, {1.5, 1}), std::invalid_argument);
}

TEST(Split, DeterministicAndSeedDependent) {
  const Split a = split_sample(200, {0.05, 1}), b = split_sample(200, {0.05, 1});
  const Split c = split_sample(200, {0.05, 2});
  EXPECT_EQ(a.labeled, b.labeled);
  EXPECT_EQ(a.labeled.size(), c.labeled.size());
  EXPECT_NE(a.labeled, c.labeled);
}

TEST(DatasetDir, SceneAndSplitRoundtrip) {
  const fs::path root = temp_dir("ds");
  const Scene s = synth_scene(5, {}, scene_id(5));
  for (const char* sub : {"points", "labels", "splits"}) fs::create_directories(root / sub);
  write_scene(root, s);
  EXPECT_TRUE(fs::exists(root / "points" / (s.id + ".bin")));
  EXPECT_TRUE(fs::exists(root / "labels" / (s.id + ".txt")));
  const Scene r = read_scene(root, s.id);
  EXPECT_EQ(r.cloud, s.cloud);
  EXPECT_EQ(r.gt_boxes, s.gt_boxes);
  EXPECT_EQ(r.gt_classes, s.gt_classes);
  const std::vector<std::string> ids{"000001", "000007"};
  write_split_file(root, "labeled", ids);
  EXPECT_EQ(read_split_file(root, "labeled"), ids);
  EXPECT_THROW(read_split_file(root, "missing"), IoError);
  EXPECT_THROW(read_scene(root, "nope"), IoError);
  fs::remove_all(root);
}
