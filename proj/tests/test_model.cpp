#include "d3ga/model.hpp"
#include "d3ga/synthetic.hpp"

#include <gtest/gtest.h>

using namespace d3ga;

namespace {

TriMesh unit_square() {
  TriMesh m;
  m.positions = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

struct Fixture {
  SyntheticBody body;
  std::map<Part, TetCage> cages;
  Camera cam;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    Fixture x;
    x.body = make_synthetic_body();
    x.cages = build_cages(x.body.template_mesh, x.body.template_weights);
    x.cam = ring_cameras(SceneSpec{})[0];
    return x;
  }();
  return f;
}

Avatar make_avatar(int count, std::uint64_t seed, const AvatarOptions& opts = {}) {
  const Fixture& f = fixture();
  return Avatar::create(opts, f.body.skeleton, f.body.template_mesh, f.body.template_weights, f.cages, count, 4, seed);
}

} // namespace

TEST(Init, SingleSampleLiesOnTheTriangle) {
  TriMesh tri;
  tri.positions = {{0, 0, 0}, {2, 0, 0}, {0, 1, 1}};
  tri.faces = {{0, 1, 2}};
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto r = init_gaussians(tri, {}, 1, seed);
    ASSERT_EQ(r.gaussians.size(), 1u);
    const Gaussian3D& g = r.gaussians[0];
    // barycentric coordinates by least squares on the two edges
    Eigen::Matrix<double, 3, 2> e;
    e << tri.positions[1] - tri.positions[0], tri.positions[2] - tri.positions[0];
    const Vec2 uv = e.colPivHouseholderQr().solve(g.mean_canonical - tri.positions[0]);
    EXPECT_GE(uv[0], -1e-12);
    EXPECT_GE(uv[1], -1e-12);
    EXPECT_LE(uv.sum(), 1 + 1e-12);
    EXPECT_LT((e * uv + tri.positions[0] - g.mean_canonical).norm(), 1e-12);
    const Vec3 n = e.col(0).cross(e.col(1)).normalized();
    const Mat3 rot = quat_to_rotation(g.rotation);
    EXPECT_LT((rot.col(2) - n).norm(), 1e-12);
    EXPECT_NEAR(rot.determinant(), 1.0, 1e-12);
    EXPECT_NEAR(sigmoid(g.opacity_logit), 0.8, 1e-12);
  }
}

TEST(Init, AreaUniformOnTheUnitSquare) {
  const auto r = init_gaussians(unit_square(), {}, 10000, 7);
  std::array<int, 4> q{};
  for (const auto& g : r.gaussians) {
    const Vec3& p = g.mean_canonical;
    ++q[static_cast<std::size_t>((p.x() >= 0.5) + 2 * (p.y() >= 0.5))];
  }
  double chi2 = 0;
  for (int c : q) {
    EXPECT_NEAR(c, 2500, 125);
    chi2 += (c - 2500.0) * (c - 2500.0) / 2500.0;
  }
  // 3 degrees of freedom, 99.9th percentile
  EXPECT_LT(chi2, 16.27);
}

TEST(Init, ScaleIsNearestNeighbourSpacing) {
  const auto r = init_gaussians(unit_square(), {}, 400, 3);
  double mean = 0;
  for (const auto& g : r.gaussians) mean += std::exp(g.log_scale[0]);
  mean /= 400.0;
  // mean 3-NN distance for 400 uniform points in a unit square is about 0.035
  EXPECT_GT(mean, 0.02);
  EXPECT_LT(mean, 0.06);
}

TEST(Init, CountTooSmallThrows) {
  TriMesh m = unit_square();
  m.face_parts = {Part::body, Part::upper};
  EXPECT_THROW(init_gaussians(m, {}, 1, 0), ConfigError);
  EXPECT_EQ(init_gaussians(m, {}, 2, 0).gaussians.size(), 2u);
}

TEST(Init, SameSeedIsBitwiseIdentical) {
  const Fixture& f = fixture();
  const auto a = init_gaussians(f.body.template_mesh, f.cages, 2000, 11);
  const auto b = init_gaussians(f.body.template_mesh, f.cages, 2000, 11);
  ASSERT_EQ(a.gaussians.size(), b.gaussians.size());
  for (std::size_t i = 0; i < a.gaussians.size(); ++i) {
    EXPECT_EQ(a.gaussians[i].mean_canonical, b.gaussians[i].mean_canonical);
    EXPECT_EQ(a.gaussians[i].barycentric, b.gaussians[i].barycentric);
    EXPECT_EQ(a.gaussians[i].tet_index, b.gaussians[i].tet_index);
  }
}

TEST(Init, EmbeddingIsConsistentWithTheCage) {
  const Fixture& f = fixture();
  const auto r = init_gaussians(f.body.template_mesh, f.cages, 2000, 5, {}, &f.body.hidden_faces);
  for (const auto& g : r.gaussians) {
    const auto it = f.cages.count(g.part_id) ? f.cages.find(g.part_id) : f.cages.find(Part::body);
    const TetCage& c = it->second;
    ASSERT_GE(g.tet_index, 0);
    EXPECT_NEAR(g.barycentric.sum(), 1.0, 1e-12);
    EXPECT_GE(g.barycentric.minCoeff(), -0.2 - 1e-12);
    EXPECT_LE(g.barycentric.maxCoeff(), 1.2 + 1e-12);
    const Vec3 p = deform_point(c, c.nodes_canonical, g.tet_index, g.barycentric);
    EXPECT_LT((p - g.mean_canonical).norm(), 1e-9);
  }
  // Almost every surface sample keeps its exact position.
  EXPECT_LT(r.embedding_failures, 100);
}

TEST(Init, ShellSamplesFollowTheSkinnedSurface) {
  const Fixture& f = fixture();
  const TriMesh& m = f.body.template_mesh;
  const auto r = init_gaussians(m, f.cages, 2000, 8, {}, &f.body.hidden_faces);
  const auto& skel = f.body.skeleton;
  const auto world = forward_kinematics(skel, MotionGenerator(skel.size(), 1, 1.0).at(0.4));
  const auto skin = skinning_matrices(world, skel.inverse_bind());
  std::map<Part, std::vector<Vec3>> posed;
  for (const auto& [p, c] : f.cages) posed[p] = lbs_points(c.nodes_canonical, c.node_skin_weights, world, skel.inverse_bind());
  int checked = 0;
  double worst = 0, mean = 0;
  for (std::size_t i = 0; i < r.gaussians.size(); ++i) {
    const Gaussian3D& g = r.gaussians[i];
    if (g.part_id == Part::body) continue;
    const auto& t = m.faces[static_cast<std::size_t>(r.faces[i])];
    Eigen::Matrix<double, 3, 2> e;
    e << m.positions[t[1]] - m.positions[t[0]], m.positions[t[2]] - m.positions[t[0]];
    const Vec2 uv = e.colPivHouseholderQr().solve(g.mean_canonical - m.positions[t[0]]);
    Vec3 q[3];
    for (int k = 0; k < 3; ++k) q[k] = lbs_point(m.positions[t[k]], f.body.template_weights[t[k]], skin);
    const Vec3 surface = (1 - uv.sum()) * q[0] + uv[0] * q[1] + uv[1] * q[2];
    const Vec3 moved = deform_point(f.cages.at(g.part_id), posed.at(g.part_id), g.tet_index, g.barycentric);
    worst = std::max(worst, (moved - surface).norm());
    mean += (moved - surface).norm();
    ++checked;
  }
  ASSERT_GT(checked, 500);
  // Off the prism's side edges the three-tet split is only piecewise linear,
  // so a sample drifts from the flat skinned triangle by a fraction of a pixel.
  EXPECT_LT(worst, 5e-3);
  EXPECT_LT(mean / checked, 5e-4);
}

TEST(Avatar, ZeroInitNetsMatchDisabledNets) {
  const Avatar a = make_avatar(1500, 2);
  const Fixture& f = fixture();
  MotionGenerator gen(a.skeleton.size(), 3, 1.0);
  const Pose pose = gen.at(0.3);
  RenderOptions off;
  off.disable_deformation_nets = true;
  const RenderOutput x = a.render(pose, f.cam, 0), y = a.render(pose, f.cam, 0, off);
  EXPECT_EQ(x.color.data, y.color.data);
  EXPECT_EQ(x.part.data, y.part.data);
}

TEST(Avatar, CreationAndRenderAreDeterministic) {
  const Avatar a = make_avatar(1000, 9), b = make_avatar(1000, 9);
  EXPECT_EQ(a.bary, b.bary);
  EXPECT_EQ(a.rot, b.rot);
  EXPECT_EQ(a.features, b.features);
  const Fixture& f = fixture();
  const Pose pose = Pose::identity(a.skeleton.size());
  EXPECT_EQ(a.render(pose, f.cam, 1).color.data, b.render(pose, f.cam, 1).color.data);
  const Avatar c = make_avatar(1000, 10);
  EXPECT_NE(a.features, c.features);
}

TEST(Avatar, PartsAreContiguousAndLabelled) {
  const Avatar a = make_avatar(3000, 4);
  int covered = 0;
  for (const auto& p : a.parts) {
    EXPECT_EQ(p.begin, covered);
    covered = p.end;
    for (int i = p.begin; i < p.end; ++i) EXPECT_EQ(a.label[static_cast<std::size_t>(i)], p.part);
  }
  EXPECT_EQ(covered, a.gaussian_count());
  std::set<Part> seen(a.label.begin(), a.label.end());
  EXPECT_TRUE(seen.count(Part::body));
  EXPECT_TRUE(seen.count(Part::upper));
  EXPECT_TRUE(seen.count(Part::lower));
}

TEST(Avatar, InitialSplatsCoverTheSilhouette) {
  const Avatar a = make_avatar(5000, 1);
  const Fixture& f = fixture();
  const Pose rest = Pose::identity(a.skeleton.size());
  const RenderOutput out = a.render(rest, f.cam, 0);
  const GroundTruth gt = render_ground_truth(f.body, rest, f.cam, 1);
  int inside = 0, covered = 0;
  for (int y = 0; y < f.cam.height; ++y)
    for (int x = 0; x < f.cam.width; ++x) {
      if (gt.mask.pixel(x, y).squaredNorm() == 0) continue;
      ++inside;
      covered += out.alpha[static_cast<std::size_t>(y) * f.cam.width + x] > 0.5;
    }
  ASSERT_GT(inside, 100);
  EXPECT_GE(static_cast<double>(covered) / inside, 0.8);
}

TEST(Avatar, PartFilterRendersOnlyThatLabel) {
  const Avatar a = make_avatar(3000, 6);
  const Fixture& f = fixture();
  RenderOptions ro;
  ro.part_filter = Part::upper;
  const RenderOutput out = a.render(Pose::identity(a.skeleton.size()), f.cam, 0, ro);
  const Vec3 upper = part_color(Part::upper);
  int lit = 0;
  for (int y = 0; y < f.cam.height; ++y)
    for (int x = 0; x < f.cam.width; ++x) {
      const double al = out.alpha[static_cast<std::size_t>(y) * f.cam.width + x];
      EXPECT_LT((out.part.pixel(x, y) - al * upper).norm(), 1e-12);
      lit += al > 0.5;
    }
  EXPECT_GT(lit, 50);
}

TEST(Avatar, LbsOnlyModeRendersWithoutCages) {
  AvatarOptions o;
  o.no_cage = true;
  const Avatar a = make_avatar(1000, 2, o);
  EXPECT_EQ(a.total_tets(), 0u);
  EXPECT_EQ(a.skin.size(), 1000u);
  const RenderOutput out = a.render(Pose::identity(a.skeleton.size()), fixture().cam, 0);
  double cov = 0;
  for (double v : out.alpha) cov += v;
  EXPECT_GT(cov, 50.0);
}

TEST(Avatar, SingleLayerUsesOneBodyCage) {
  AvatarOptions o;
  o.single_layer = true;
  const Avatar a = make_avatar(1000, 2, o);
  ASSERT_EQ(a.parts.size(), 1u);
  EXPECT_EQ(a.parts[0].part, Part::body);
  std::set<Part> seen(a.label.begin(), a.label.end());
  EXPECT_GT(seen.size(), 1u);
}
