#include "d3ga/synthetic.hpp"

#include <gtest/gtest.h>

#include <filesystem>

using namespace d3ga;
namespace fs = std::filesystem;

namespace {

SceneSpec tiny_spec() {
  SceneSpec s;
  s.cameras = 4;
  s.frames = 3;
  s.heldout_cameras = 2;
  s.heldout_camera_frames = 2;
  s.width = 24;
  s.height = 24;
  s.supersample = 1;
  return s;
}

std::string fresh_dir(const std::string& name) {
  const auto d = fs::temp_directory_path() / "d3ga_synth_tests" / name;
  fs::remove_all(d);
  fs::create_directories(d.parent_path());
  return d.string();
}

std::size_t count_png(const std::string& dir) {
  std::size_t n = 0;
  if (!fs::exists(dir)) return 0;
  for (const auto& e : fs::recursive_directory_iterator(dir)) n += e.path().extension() == ".png";
  return n;
}

} // namespace

TEST(SyntheticScene, LayoutAndCounts) {
  const std::string dir = fresh_dir("layout");
  const SceneSpec spec = tiny_spec();
  generate_synthetic_scene(spec, dir);
  EXPECT_EQ(count_png(dir + "/frames"), 12u);
  EXPECT_EQ(count_png(dir + "/masks"), 12u);
  EXPECT_EQ(count_png(dir + "/heldout_poses/frames"), 12u);
  EXPECT_EQ(count_png(dir + "/heldout_cameras/frames"), 4u);
  EXPECT_TRUE(verify_manifest(dir).empty());

  const SceneData train = load_scene(dir, Split::train);
  EXPECT_EQ(train.views.size(), 12u);
  EXPECT_EQ(train.rgb.size(), 12u);
  EXPECT_EQ(train.skeleton.size(), 8u);
  const SceneData hp = load_scene(dir, Split::heldout_poses);
  EXPECT_EQ(hp.views.size(), 12u);
  const SceneData hc = load_scene(dir, Split::heldout_cameras);
  EXPECT_EQ(hc.views.size(), 4u);
  EXPECT_EQ(hc.cameras.size(), 2u);
}

TEST(SyntheticScene, ManifestDetectsTampering) {
  const std::string dir = fresh_dir("tamper");
  generate_synthetic_scene(tiny_spec(), dir);
  { std::ofstream(dir + "/poses.jsonl", std::ios::app) << "\n"; }
  const auto bad = verify_manifest(dir);
  ASSERT_EQ(bad.size(), 1u);
  EXPECT_EQ(bad[0], "poses.jsonl");
}

TEST(SyntheticScene, SameSeedSameBytes) {
  const std::string a = fresh_dir("seed_a"), b = fresh_dir("seed_b");
  SceneSpec s = tiny_spec();
  s.seed = 1;
  generate_synthetic_scene(s, a);
  generate_synthetic_scene(s, b);
  EXPECT_EQ(read_json_file(a + "/manifest.json"), read_json_file(b + "/manifest.json"));
  s.seed = 2;
  const std::string c = fresh_dir("seed_c");
  generate_synthetic_scene(s, c);
  EXPECT_NE(read_json_file(a + "/manifest.json"), read_json_file(c + "/manifest.json"));
}

TEST(SyntheticScene, MissingParentThrows) {
  EXPECT_THROW(generate_synthetic_scene(tiny_spec(), "/nonexistent_d3ga_parent/child/out"), IoError);
}

TEST(SyntheticScene, PosesWithinJointLimits) {
  SceneSpec s;
  for (bool held : {false, true})
    for (const Pose& p : synthetic_poses(s, 8, held)) EXPECT_TRUE(within_joint_limits(p)) << "frame " << p.frame;
}

TEST(SyntheticScene, HeldOutPosesInterleaveTraining) {
  SceneSpec s;
  const auto train = synthetic_poses(s, 8, false), held = synthetic_poses(s, 8, true);
  ASSERT_EQ(train.size(), held.size());
  for (std::size_t f = 0; f < train.size(); ++f) EXPECT_GT((train[f].flatten() - held[f].flatten()).norm(), 1e-6);
}

TEST(SyntheticScene, RestMaskCoverageStableAroundTheRing) {
  // Opposite cameras see mirror silhouettes of the rest pose; after the 1/d²
  // perspective factor their mask areas agree within 20%.
  SceneSpec s;
  s.supersample = 1;
  const SyntheticBody body = make_synthetic_body(s);
  const auto cams = ring_cameras(s);
  const auto meshes = posed_meshes(body, Pose::identity(body.skeleton.size()));
  std::vector<double> area;
  for (const auto& c : cams) {
    const auto gt = render_triangles(meshes, c, 1);
    double n = 0;
    for (int y = 0; y < gt.mask.height; ++y)
      for (int x = 0; x < gt.mask.width; ++x) n += gt.mask.pixel(x, y).squaredNorm() > 0 ? 1 : 0;
    const double d = (c.center() - Vec3(0, 0.5, 0)).norm();
    area.push_back(n * d * d);
  }
  const std::size_t half = cams.size() / 2;
  for (std::size_t k = 0; k < half; ++k) {
    const double a = area[k], b = area[k + half];
    EXPECT_LT(std::abs(a - b) / std::max(a, b), 0.2) << "cameras " << k << " and " << k + half;
  }
}

TEST(SyntheticScene, SpecRejectsUnknownKeys) {
  EXPECT_THROW(scene_spec_from_json({{"camras", 3}}), ConfigError);
  EXPECT_EQ(scene_spec_from_json({{"cameras", 3}}).cameras, 3);
}

TEST(SyntheticBody, LimbVerticesIgnoreTheOppositeLimb) {
  const SyntheticBody body = make_synthetic_body();
  auto weight_of = [](const SkinWeights& w, int joint) {
    for (int k = 0; k < w.count; ++k)
      if (w.joint[static_cast<std::size_t>(k)] == joint) return w.weight[static_cast<std::size_t>(k)];
    return 0.0;
  };
  // legs are joints 6 and 7, arms 4 and 5
  for (const auto* set : {&body.template_weights, &body.upper_weights, &body.lower_weights})
    for (const auto& w : *set) {
      EXPECT_NEAR(w.total(), 1.0, 1e-12);
      const int top = w.joint[0];
      for (const auto& [a, b] : {std::pair{6, 7}, std::pair{4, 5}}) {
        if (top == a) EXPECT_EQ(weight_of(w, b), 0.0);
        if (top == b) EXPECT_EQ(weight_of(w, a), 0.0);
      }
    }
}
