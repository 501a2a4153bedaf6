#include "d3ga/cage.hpp"
#include "d3ga/model.hpp"
#include "d3ga/synthetic.hpp"

#include <gtest/gtest.h>

#include <numbers>
#include <random>
#include <sstream>

using namespace d3ga;

namespace {

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return quat_to_rotation(Vec4(n(rng), n(rng), n(rng), n(rng)).normalized());
}

TetCage unit_tet() {
  TetCage c;
  c.nodes_canonical = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  c.tets = {{0, 1, 2, 3}};
  c.finalize();
  return c;
}

TetCage cube_cage(double step) { return tetrahedralize_solid(make_box(Vec3::Zero(), Vec3::Ones()), step); }

double min_signed_volume(const TetCage& c, const std::vector<Vec3>& nodes) {
  double m = std::numeric_limits<double>::infinity();
  for (const auto& t : c.tets)
    m = std::min(m, signed_tet_volume(nodes[t[0]], nodes[t[1]], nodes[t[2]], nodes[t[3]]));
  return m;
}

} // namespace

TEST(ShellCage, SingleTriangle) {
  TriMesh tri;
  tri.positions = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  tri.faces = {{0, 1, 2}};
  const TetCage c = tetrahedralize_shell(tri, 0.03);
  EXPECT_EQ(c.tet_count(), 3u);
  EXPECT_EQ(c.node_count(), 6u);
  EXPECT_NEAR(c.total_volume(), 0.5 * 0.03, 1e-15);
}

TEST(ShellCage, IcosahedronNoFlips) {
  const TetCage c = tetrahedralize_shell(make_icosahedron(1.0), 0.03);
  EXPECT_EQ(c.tet_count(), 60u);
  EXPECT_EQ(c.node_count(), 24u);
  EXPECT_GT(min_signed_volume(c, c.nodes_canonical), 0.0);
}

TEST(ShellCage, UnitSquareVolume) {
  const TetCage c = tetrahedralize_shell(make_unit_square(), 0.03);
  double v = 0;
  for (const auto& t : c.tets)
    v += signed_tet_volume(c.nodes_canonical[t[0]], c.nodes_canonical[t[1]], c.nodes_canonical[t[2]],
                           c.nodes_canonical[t[3]]);
  EXPECT_NEAR(v, 0.03, 1e-12);
}

TEST(ShellCage, InvertedExtrusionThrows) {
  TriMesh tri;
  tri.positions = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0)};
  tri.faces = {{0, 1, 2}};
  const std::vector<Vec3> bad(3, Vec3(1, 0, 0));  // normals in the triangle plane
  EXPECT_THROW(tetrahedralize_shell(tri, 0.03, &bad), DegenerateTet);
}

TEST(SolidCage, UnitCubeOneCell) {
  const TetCage c = cube_cage(1.0);
  EXPECT_EQ(c.tet_count(), 5u);
  EXPECT_NEAR(c.total_volume(), 1.0, 1e-12);
}

TEST(SolidCage, UnitCubeEightCells) {
  const TetCage c = cube_cage(0.5);
  EXPECT_EQ(c.tet_count(), 40u);
  EXPECT_NEAR(c.total_volume(), 1.0, 1e-12);
  EXPECT_GT(min_signed_volume(c, c.nodes_canonical), 0.0);
}

TEST(SolidCage, SphereKeepsCubesWhoseCentreIsInside) {
  const double step = 0.45, r = 0.5;
  const TriMesh sphere = make_uv_sphere(Vec3::Zero(), r, 48, 24);
  // Oracle: the 3×3×3 lattice centred on the bounding box, centre inside the
  // polyhedral sphere. Face neighbours sit at distance 0.45 < 0.5, so seven
  // cubes survive (the centre alone would need a step above 0.5).
  int expected = 0;
  const InsideTester inside(sphere);
  for (int i = -1; i <= 1; ++i)
    for (int j = -1; j <= 1; ++j)
      for (int k = -1; k <= 1; ++k) expected += inside.inside(step * Vec3(i, j, k)) ? 1 : 0;
  EXPECT_EQ(expected, 7);
  EXPECT_EQ(tetrahedralize_solid(sphere, step).tet_count(), 5u * expected);
  // One cube spans the whole box; a 2×2×2 lattice puts every centre at 0.52 > r.
  EXPECT_EQ(tetrahedralize_solid(sphere, 1.2).tet_count(), 5u);
  EXPECT_THROW(tetrahedralize_solid(sphere, 0.6), EmptyCage);
}

TEST(SolidCage, ConformingFaces) {
  // Every interior triangle is shared by exactly two tets.
  const TetCage c = cube_cage(0.25);
  std::map<std::array<int, 3>, int> faces;
  for (const auto& t : c.tets)
    for (int skip = 0; skip < 4; ++skip) {
      std::array<int, 3> f{};
      int n = 0;
      for (int k = 0; k < 4; ++k)
        if (k != skip) f[static_cast<std::size_t>(n++)] = t[static_cast<std::size_t>(k)];
      std::sort(f.begin(), f.end());
      ++faces[f];
    }
  for (const auto& [f, count] : faces) EXPECT_LE(count, 2);
  EXPECT_NEAR(c.total_volume(), 1.0, 1e-12);
}

TEST(Embedding, CentroidAndVertices) {
  const TetCage c = cube_cage(0.5);
  for (int t = 0; t < static_cast<int>(c.tet_count()); t += 7) {
    const auto [tet, b] = embed_point(c, c.centroid(t));
    EXPECT_EQ(tet, t);
    EXPECT_LT((b - Vec4::Constant(0.25)).cwiseAbs().maxCoeff(), 1e-12);
  }
  const TetCage u = unit_tet();
  for (int j = 0; j < 4; ++j) {
    const auto [tet, b] = embed_point(u, u.nodes_canonical[static_cast<std::size_t>(j)]);
    EXPECT_EQ(tet, 0);
    EXPECT_LT((b - Vec4::Unit(j)).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Embedding, RandomInteriorPointsReconstruct) {
  const TetCage c = cube_cage(0.25);
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.001, 0.999);
  for (int k = 0; k < 300; ++k) {
    const Vec3 x(u(rng), u(rng), u(rng));
    const auto [tet, b] = embed_point(c, x);
    ASSERT_GE(tet, 0);
    EXPECT_GE(b.minCoeff(), -1e-9);
    EXPECT_NEAR(b.sum(), 1.0, 1e-12);
    // Independent solve: [v1-v0 v2-v0 v3-v0] r = x - v0.
    const auto& t = c.tets[static_cast<std::size_t>(tet)];
    Mat3 e;
    for (int i = 0; i < 3; ++i) e.col(i) = c.nodes_canonical[t[i + 1]] - c.nodes_canonical[t[0]];
    const Vec3 r = e.fullPivLu().solve(x - c.nodes_canonical[t[0]]);
    EXPECT_LT((Vec3(b[1], b[2], b[3]) - r).norm(), 1e-10);
    EXPECT_LT((deform_point(c, c.nodes_canonical, tet, b) - x).norm(), 1e-12);
  }
}

TEST(Embedding, OutsidePointSnapsToNearestTet) {
  const TetCage c = cube_cage(0.5);
  TetLocator loc(c);
  const auto r = loc.locate(Vec3(1.3, 0.5, 0.5));
  EXPECT_FALSE(r.inside);
  EXPECT_NEAR(r.distance, 0.3, 1e-12);
  EXPECT_GE(r.barycentric.minCoeff(), 0.0);
  EXPECT_NEAR(r.barycentric.sum(), 1.0, 1e-12);
  EXPECT_NEAR(deform_point(c, c.nodes_canonical, r.tet, r.barycentric).x(), 1.0, 1e-12);
}

TEST(Embedding, EmptyCageThrows) { EXPECT_THROW(TetLocator(TetCage{}), EmptyCage); }

TEST(DeformationGradient, RestIsIdentity) {
  const TetCage c = cube_cage(0.5);
  for (const auto& j : deformation_gradients(c, c.nodes_canonical)) EXPECT_LT((j - Mat3::Identity()).norm(), 1e-12);
}

TEST(DeformationGradient, RigidMotionGivesRotation) {
  std::mt19937_64 rng(9);
  const TetCage c = cube_cage(0.5);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat3 r = random_rotation(rng);
    const Vec3 t(0.3 * trial, -1.0, 2.0);
    std::vector<Vec3> posed;
    for (const auto& v : c.nodes_canonical) posed.push_back(r * v + t);
    const auto js = deformation_gradients(c, posed);
    for (const auto& j : js) EXPECT_LT((j - r).norm(), 1e-9);
    EXPECT_NEAR(neo_hookean_energy(js, {1.0, 1.0}), 0.0, 1e-12);
  }
}

TEST(DeformationGradient, StretchX) {
  const TetCage c = unit_tet();
  std::vector<Vec3> posed;
  for (const auto& v : c.nodes_canonical) posed.push_back(Vec3(2 * v.x(), v.y(), v.z()));
  EXPECT_LT((deformation_gradient(c, posed, 0) - Vec3(2, 1, 1).asDiagonal().toDenseMatrix()).norm(), 1e-15);
}

TEST(DeformationGradient, DeterminantScalesVolume) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  const TetCage c = cube_cage(0.5);
  std::vector<Vec3> posed;
  for (const auto& v : c.nodes_canonical) posed.push_back(1.3 * v + Vec3(u(rng), u(rng), u(rng)));
  for (int t = 0; t < static_cast<int>(c.tet_count()); ++t) {
    const auto& k = c.tets[static_cast<std::size_t>(t)];
    const double vp = signed_tet_volume(posed[k[0]], posed[k[1]], posed[k[2]], posed[k[3]]);
    const double pred = deformation_gradient(c, posed, t).determinant() * c.canonical_volumes[static_cast<std::size_t>(t)];
    EXPECT_LT(std::abs(pred - vp), 1e-9 * std::abs(vp));
  }
}

TEST(DeformPoint, RigidMotionIsAffine) {
  std::mt19937_64 rng(11);
  const TetCage c = unit_tet();
  const Mat3 r = random_rotation(rng);
  const Vec3 t(1, 2, 3);
  std::vector<Vec3> posed;
  for (const auto& v : c.nodes_canonical) posed.push_back(r * v + t);
  const Vec4 b(0.1, 0.2, 0.3, 0.4);
  const Vec3 x = deform_point(c, c.nodes_canonical, 0, b);
  EXPECT_LT((deform_point(c, posed, 0, b) - (r * x + t)).norm(), 1e-14);
}

TEST(DeformPoint, DoubledTetCentroid) {
  const TetCage c = unit_tet();
  std::vector<Vec3> posed;
  for (const auto& v : c.nodes_canonical) posed.push_back(2.0 * v);
  EXPECT_LT((deform_point(c, posed, 0, Vec4::Constant(0.25)) - Vec3::Constant(0.5)).norm(), 1e-15);
}

TEST(NeoHookean, KnownValues) {
  EXPECT_EQ(neo_hookean_energy({Mat3::Identity(), Mat3::Identity()}, {}), 0.0);
  EXPECT_NEAR(neo_hookean_energy({Vec3(2, 1, 1).asDiagonal().toDenseMatrix()}, {1.0, 1.0}), 2.0, 1e-15);
  std::mt19937_64 rng(12);
  std::vector<Mat3> rots;
  for (int k = 0; k < 20; ++k) rots.push_back(random_rotation(rng));
  EXPECT_NEAR(neo_hookean_energy(rots, {3.0, 0.7}), 0.0, 1e-12);
}

TEST(NeoHookean, MeanOverTets) {
  const Mat3 s = Vec3(2, 1, 1).asDiagonal();
  EXPECT_NEAR(neo_hookean_energy({s, Mat3::Identity()}, {1.0, 1.0}), 1.0, 1e-15);
}

TEST(TcagFormat, RoundTrip) {
  TetCage c = cube_cage(0.5);
  c.part_id = Part::lower;
  for (std::size_t v = 0; v < c.node_count(); ++v)
    c.node_skin_weights[v] = SkinWeights::from_dense({0.25, 0.75 * static_cast<double>(v % 3) / 2.0, 0.1});
  std::stringstream s(std::ios::in | std::ios::out | std::ios::binary);
  write_cage(s, c);
  const TetCage d = read_cage(s);
  EXPECT_EQ(d.part_id, Part::lower);
  ASSERT_EQ(d.node_count(), c.node_count());
  EXPECT_EQ(d.tets, c.tets);
  for (std::size_t v = 0; v < c.node_count(); ++v) {
    EXPECT_EQ(d.nodes_canonical[v], c.nodes_canonical[v]);
    EXPECT_EQ(d.node_skin_weights[v].count, c.node_skin_weights[v].count);
    EXPECT_EQ(d.node_skin_weights[v].weight, c.node_skin_weights[v].weight);
  }
}

TEST(TcagFormat, RejectsBadMagic) {
  std::stringstream s("XXXX0000");
  EXPECT_THROW(read_cage(s), FormatError);
}

TEST(TcagFormat, RejectsTruncation) {
  std::stringstream s(std::ios::in | std::ios::out | std::ios::binary);
  write_cage(s, cube_cage(1.0));
  const std::string full = s.str();
  std::stringstream cut(full.substr(0, full.size() / 2));
  EXPECT_THROW(read_cage(cut), FormatError);
}

TEST(SyntheticCages, ShellsHaveNoInvertedTets) {
  const SyntheticBody body = make_synthetic_body();
  const auto cages = build_cages(body.template_mesh, body.template_weights);
  ASSERT_TRUE(cages.count(Part::body));
  for (const auto& [p, c] : cages) {
    EXPECT_GT(c.tet_count(), 0u) << part_name(p);
    EXPECT_GT(min_signed_volume(c, c.nodes_canonical), 0.0) << part_name(p);
    for (const auto& w : c.node_skin_weights) EXPECT_NEAR(w.total(), 1.0, 1e-9);
  }
}

TEST(SyntheticCages, ShellsReproduceTemplateSkinningOfTheirRegion) {
  const SyntheticBody body = make_synthetic_body();
  const TriMesh& m = body.template_mesh;
  const auto cages = build_cages(m, body.template_weights);
  const auto& skel = body.skeleton;
  const Pose pose = synthetic_poses(SceneSpec{}, 8, false)[5];
  const auto world = forward_kinematics(skel, pose);
  const auto skin = skinning_matrices(world, skel.inverse_bind());
  for (const Part p : {Part::upper, Part::lower}) {
    const TetCage& c = cages.at(p);
    const auto posed = lbs_points(c.nodes_canonical, c.node_skin_weights, world, skel.inverse_bind());
    int checked = 0, rank = 0;
    for (std::size_t f = 0; f < m.face_count(); ++f) {
      if (m.face_part(f) != p) continue;
      const int k = rank++;
      if (body.hidden_faces[f]) continue;
      // each vertex sits on a side edge of its face's prism (tets 3k..3k+2)
      for (int v : m.faces[f]) {
        const Vec3& x = m.positions[static_cast<std::size_t>(v)];
        int best = 3 * k;
        for (int t = 3 * k + 1; t < 3 * k + 3; ++t)
          if (c.barycentric(t, x).minCoeff() > c.barycentric(best, x).minCoeff()) best = t;
        const Vec4 b = c.barycentric(best, x);
        ASSERT_GE(b.minCoeff(), -1e-9);
        const Vec3 moved = deform_point(c, posed, best, b);
        EXPECT_LT((moved - lbs_point(x, body.template_weights[static_cast<std::size_t>(v)], skin)).norm(), 1e-9);
        ++checked;
      }
    }
    EXPECT_GT(checked, 100) << part_name(p);
  }
}
