#include "d3ga/skeleton.hpp"

#include <gtest/gtest.h>

#include <numbers>

using namespace d3ga;

namespace {

// root at the origin, elbow one unit along x, tip one unit further.
Skeleton chain() {
  return Skeleton({{"shoulder", -1, quat_identity(), Vec3::Zero()},
                   {"elbow", 0, quat_identity(), Vec3(1, 0, 0)},
                   {"tip", 1, quat_identity(), Vec3(1, 0, 0)}});
}

Vec3 origin(const Mat4& m) { return m.topRightCorner<3, 1>(); }

} // namespace

TEST(ForwardKinematics, IdentityPoseGivesBind) {
  const Skeleton s = make_synthetic_skeleton();
  const auto w = forward_kinematics(s, Pose::identity(s.size()));
  for (std::size_t j = 0; j < s.size(); ++j) EXPECT_LT((w[j] - s.bind()[j]).norm(), 1e-15);
}

TEST(ForwardKinematics, RootRotationPropagates) {
  const Skeleton s = make_synthetic_skeleton();
  Pose p = Pose::identity(s.size());
  p.joint_rotations[0] = quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2);
  const auto w = forward_kinematics(s, p);
  const Vec3 root = origin(s.bind()[0]);
  const Mat3 r = quat_to_rotation(p.joint_rotations[0]);
  for (std::size_t j = 0; j < s.size(); ++j) {
    const Vec3 expected = root + r * (origin(s.bind()[j]) - root);
    EXPECT_LT((origin(w[j]) - expected).norm(), 1e-12) << s.joint(j).name;
  }
}

TEST(ForwardKinematics, BentElbow) {
  const Skeleton s = chain();
  EXPECT_LT((origin(forward_kinematics(s, Pose::identity(3))[2]) - Vec3(2, 0, 0)).norm(), 1e-15);
  Pose p = Pose::identity(3);
  p.joint_rotations[1] = quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2);
  EXPECT_LT((origin(forward_kinematics(s, p)[2]) - Vec3(1, 1, 0)).norm(), 1e-15);
}

TEST(ForwardKinematics, RootTranslation) {
  const Skeleton s = chain();
  Pose p = Pose::identity(3);
  p.root_translation = Vec3(0.5, -1, 2);
  EXPECT_LT((origin(forward_kinematics(s, p)[2]) - Vec3(2.5, -1, 2)).norm(), 1e-15);
}

TEST(ForwardKinematics, JointCountMismatchThrows) {
  EXPECT_THROW(forward_kinematics(chain(), Pose::identity(2)), JointCountMismatch);
}

TEST(Skeleton, RejectsUnsortedJoints) {
  EXPECT_THROW(Skeleton({{"a", 1, quat_identity(), Vec3::Zero()}, {"b", -1, quat_identity(), Vec3::Zero()}}),
               ConfigError);
}

TEST(Skeleton, PoseDimension) { EXPECT_EQ(make_synthetic_skeleton().pose_dim(), 35); }

TEST(Lbs, IdentityPoseLeavesPointsUnchanged) {
  const Skeleton s = make_synthetic_skeleton();
  const auto w = forward_kinematics(s, Pose::identity(s.size()));
  std::vector<Vec3> pts{{0.1, 0.7, 0.0}, {-0.3, 0.2, 0.1}};
  std::vector<SkinWeights> sw{SkinWeights::single(2), SkinWeights::from_dense({0.2, 0.3, 0.5, 0, 0, 0, 0, 0})};
  const auto out = lbs_points(pts, sw, w, s.inverse_bind());
  for (std::size_t i = 0; i < pts.size(); ++i) EXPECT_LT((out[i] - pts[i]).norm(), 1e-14);
}

TEST(Lbs, SingleJointRotatesAboutItsOrigin) {
  const Skeleton s = chain();
  Pose p = Pose::identity(3);
  const Vec4 q = quat_from_axis_angle(Vec3(0, 0.6, 0.8), 0.7);
  p.joint_rotations[1] = q;
  const auto out = lbs_points({Vec3(1.5, 0.2, -0.1)}, {SkinWeights::single(1)}, forward_kinematics(s, p),
                              s.inverse_bind());
  const Vec3 expected = Vec3(1, 0, 0) + quat_to_rotation(q) * Vec3(0.5, 0.2, -0.1);
  EXPECT_LT((out[0] - expected).norm(), 1e-14);
}

TEST(Lbs, HalfHalfBlendIsMidpoint) {
  const Skeleton s({{"a", -1, quat_identity(), Vec3::Zero()}, {"b", 0, quat_identity(), Vec3::Zero()}});
  Pose p = Pose::identity(2);
  p.joint_rotations[0] = quat_from_axis_angle(Vec3::UnitZ(), std::numbers::pi / 2);
  p.joint_rotations[1] = quat_from_axis_angle(Vec3::UnitZ(), -std::numbers::pi / 2);  // back to identity
  SkinWeights w = SkinWeights::from_dense({0.5, 0.5});
  const Vec3 x(1, 0, 0);
  const auto out = lbs_points({x}, {w}, forward_kinematics(s, p), s.inverse_bind());
  const Vec3 rotated(0, 1, 0);
  EXPECT_LT((out[0] - 0.5 * (rotated + x)).norm(), 1e-15);
}

TEST(SkinWeights, FromDenseKeepsTopFourNormalized) {
  const SkinWeights w = SkinWeights::from_dense({0.05, 0.3, 0.1, 0.2, 0.25, 0.1});
  EXPECT_EQ(w.count, 4);
  EXPECT_NEAR(w.total(), 1.0, 1e-15);
  EXPECT_EQ(w.joint[0], 1);
}

TEST(PoseJson, RoundTrip) {
  Pose p = Pose::identity(8);
  p.frame = 7;
  p.joint_rotations[3] = quat_from_axis_angle(Vec3(1, 2, 3).normalized(), 0.4);
  p.root_translation = Vec3(0.1, -0.2, 0.3);
  const Pose q = pose_from_json(nlohmann::json::parse(pose_to_json(p).dump()));
  EXPECT_EQ(q.frame, 7);
  EXPECT_EQ(q.flatten(), p.flatten());
}
