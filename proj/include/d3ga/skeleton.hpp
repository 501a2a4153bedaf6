#pragma once

// Kinematic skeleton, forward kinematics and linear blend skinning, with the
// backward passes used to check gradients with respect to joint rotations.

#include "d3ga/common.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <string>
#include <vector>

namespace d3ga {

/// Up to four (joint, weight) influences, weights summing to one.
struct SkinWeights {
  static constexpr int kMaxInfluences = 4;
  std::array<int, kMaxInfluences> joint{};
  std::array<double, kMaxInfluences> weight{};
  int count = 0;

  double total() const {
    double t = 0.0;
    for (int k = 0; k < count; ++k) t += weight[static_cast<std::size_t>(k)];
    return t;
  }

  /// Keeps the strongest kMaxInfluences nonnegative entries and renormalizes.
  static SkinWeights from_dense(const std::vector<double>& w) {
    std::vector<int> order(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) order[i] = static_cast<int>(i);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return w[static_cast<std::size_t>(a)] > w[static_cast<std::size_t>(b)];
    });
    SkinWeights s;
    double total = 0.0;
    for (std::size_t k = 0; k < order.size() && s.count < kMaxInfluences; ++k) {
      const double v = w[static_cast<std::size_t>(order[k])];
      if (!(v > 0.0)) break;
      s.joint[static_cast<std::size_t>(s.count)] = order[k];
      s.weight[static_cast<std::size_t>(s.count)] = v;
      total += v;
      ++s.count;
    }
    if (s.count == 0) {
      s.count = 1;
      s.joint[0] = 0;
      s.weight[0] = 1.0;
      return s;
    }
    for (int k = 0; k < s.count; ++k) s.weight[static_cast<std::size_t>(k)] /= total;
    return s;
  }

  static SkinWeights single(int j) {
    SkinWeights s;
    s.count = 1;
    s.joint[0] = j;
    s.weight[0] = 1.0;
    return s;
  }

  double sum() const {
    double t = 0.0;
    for (int k = 0; k < count; ++k) t += weight[static_cast<std::size_t>(k)];
    return t;
  }
};

struct Joint {
  std::string name;
  int parent = -1;
  Vec4 rest_rotation = quat_identity();
  Vec3 rest_translation = Vec3::Zero();
};

inline Mat4 rigid_transform(const Vec4& q, const Vec3& t) {
  Mat4 m = Mat4::Identity();
  m.topLeftCorner<3, 3>() = quat_to_rotation(q);
  m.topRightCorner<3, 1>() = t;
  return m;
}

inline Mat4 rest_local(const Joint& j) { return rigid_transform(j.rest_rotation, j.rest_translation); }

/// Joint rotations plus root translation; the driving signal of the avatar.
struct Pose {
  std::vector<Vec4> joint_rotations;
  Vec3 root_translation = Vec3::Zero();
  int frame = 0;

  static Pose identity(std::size_t joints) {
    Pose p;
    p.joint_rotations.assign(joints, quat_identity());
    return p;
  }

  /// Network conditioning vector: quaternion components then root translation.
  VecX flatten() const {
    VecX v(static_cast<Eigen::Index>(4 * joint_rotations.size() + 3));
    for (std::size_t j = 0; j < joint_rotations.size(); ++j)
      v.segment<4>(static_cast<Eigen::Index>(4 * j)) = joint_rotations[j];
    v.tail<3>() = root_translation;
    return v;
  }
};

class Skeleton {
public:
  Skeleton() = default;
  explicit Skeleton(std::vector<Joint> joints) : joints_(std::move(joints)) { finalize(); }

  std::size_t size() const { return joints_.size(); }
  const std::vector<Joint>& joints() const { return joints_; }
  const Joint& joint(std::size_t i) const { return joints_[i]; }
  const std::vector<Mat4>& inverse_bind() const { return inverse_bind_; }
  const std::vector<Mat4>& bind() const { return bind_; }

  int find(const std::string& name) const {
    for (std::size_t i = 0; i < joints_.size(); ++i)
      if (joints_[i].name == name) return static_cast<int>(i);
    return -1;
  }

  /// Pose-vector length fed to the networks.
  int pose_dim() const { return static_cast<int>(4 * joints_.size() + 3); }

private:
  void finalize() {
    for (std::size_t i = 0; i < joints_.size(); ++i)
      if (joints_[i].parent >= static_cast<int>(i))
        throw ConfigError("skeleton joints must be topologically sorted (joint " +
                          joints_[i].name + ")");
    bind_.resize(joints_.size());
    inverse_bind_.resize(joints_.size());
    for (std::size_t i = 0; i < joints_.size(); ++i) {
      const Mat4 local = rest_local(joints_[i]);
      bind_[i] = joints_[i].parent < 0 ? local : Mat4(bind_[static_cast<std::size_t>(joints_[i].parent)] * local);
      inverse_bind_[i] = bind_[i].inverse();
    }
  }

  std::vector<Joint> joints_;
  std::vector<Mat4> bind_;
  std::vector<Mat4> inverse_bind_;
};

/// World transform per joint: child = parent_world · rest_local · pose_rotation.
inline std::vector<Mat4> forward_kinematics(const Skeleton& skel, const Pose& pose) {
  if (pose.joint_rotations.size() != skel.size())
    throw JointCountMismatch("pose has " + std::to_string(pose.joint_rotations.size()) +
                             " joints, skeleton " + std::to_string(skel.size()));
  std::vector<Mat4> world(skel.size());
  for (std::size_t i = 0; i < skel.size(); ++i) {
    const Joint& j = skel.joint(i);
    const Mat4 local = rest_local(j) * rigid_transform(pose.joint_rotations[i], Vec3::Zero());
    if (j.parent < 0) {
      Mat4 t = Mat4::Identity();
      t.topRightCorner<3, 1>() = pose.root_translation;
      world[i] = t * local;
    } else {
      world[i] = world[static_cast<std::size_t>(j.parent)] * local;
    }
  }
  return world;
}

struct PoseGrad {
  std::vector<Vec4> joint_rotations;
  Vec3 root_translation = Vec3::Zero();
};

/// Pulls dL/d(world_j) back onto the pose. Only the top 3x4 block of each
/// gradient matters; the constant last row is ignored.
inline PoseGrad forward_kinematics_backward(const Skeleton& skel, const Pose& pose,
                                            std::vector<Mat4> grad_world) {
  const auto world = forward_kinematics(skel, pose);
  PoseGrad out;
  out.joint_rotations.assign(skel.size(), Vec4::Zero());
  for (auto& g : grad_world) g.row(3).setZero();
  for (std::size_t ii = skel.size(); ii-- > 0;) {
    const Joint& j = skel.joint(ii);
    const Mat4 rest = rest_local(j);
    const Mat4 prot = rigid_transform(pose.joint_rotations[ii], Vec3::Zero());
    Mat4 parent_world = Mat4::Identity();
    if (j.parent < 0) {
      parent_world.topRightCorner<3, 1>() = pose.root_translation;
      out.root_translation = grad_world[ii].topRightCorner<3, 1>();
    } else {
      parent_world = world[static_cast<std::size_t>(j.parent)];
      grad_world[static_cast<std::size_t>(j.parent)] +=
          grad_world[ii] * (rest * prot).transpose();
    }
    const Mat4 g_local = parent_world.transpose() * grad_world[ii];
    const Mat4 g_prot = rest.transpose() * g_local;
    out.joint_rotations[ii] =
        quat_to_rotation_backward(pose.joint_rotations[ii], g_prot.topLeftCorner<3, 3>());
  }
  return out;
}

/// Skinning matrices W_j · B_j⁻¹.
inline std::vector<Mat4> skinning_matrices(const std::vector<Mat4>& joint_worlds,
                                           const std::vector<Mat4>& inv_binds) {
  std::vector<Mat4> m(joint_worlds.size());
  for (std::size_t j = 0; j < m.size(); ++j) m[j] = joint_worlds[j] * inv_binds[j];
  return m;
}

/// Blended affine transform for one weight set (top 3x4 block).
inline Mat34 blend_transform(const SkinWeights& w, const std::vector<Mat4>& skin) {
  Mat34 a = Mat34::Zero();
  for (int k = 0; k < w.count; ++k)
    a += w.weight[static_cast<std::size_t>(k)] *
         skin[static_cast<std::size_t>(w.joint[static_cast<std::size_t>(k)])].topRows<3>();
  return a;
}

inline Vec3 lbs_point(const Vec3& x, const SkinWeights& w, const std::vector<Mat4>& skin) {
  const Mat34 a = blend_transform(w, skin);
  return a.leftCols<3>() * x + a.col(3);
}

/// x̂ = Σ_j w_j (W_j B_j⁻¹) x.
inline std::vector<Vec3> lbs_points(const std::vector<Vec3>& points,
                                    const std::vector<SkinWeights>& weights,
                                    const std::vector<Mat4>& joint_worlds,
                                    const std::vector<Mat4>& inv_binds) {
  const auto skin = skinning_matrices(joint_worlds, inv_binds);
  std::vector<Vec3> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = lbs_point(points[i], weights[i], skin);
  return out;
}

struct LbsGrad {
  std::vector<Vec3> points;
  std::vector<Mat4> joint_worlds;
};

inline LbsGrad lbs_points_backward(const std::vector<Vec3>& points,
                                   const std::vector<SkinWeights>& weights,
                                   const std::vector<Mat4>& joint_worlds,
                                   const std::vector<Mat4>& inv_binds,
                                   const std::vector<Vec3>& grad_out) {
  const auto skin = skinning_matrices(joint_worlds, inv_binds);
  LbsGrad g;
  g.points.assign(points.size(), Vec3::Zero());
  std::vector<Mat4> g_skin(skin.size(), Mat4::Zero());
  for (std::size_t i = 0; i < points.size(); ++i) {
    const auto& w = weights[i];
    Eigen::Vector4d xh;
    xh << points[i], 1.0;
    for (int k = 0; k < w.count; ++k) {
      const auto j = static_cast<std::size_t>(w.joint[static_cast<std::size_t>(k)]);
      const double wk = w.weight[static_cast<std::size_t>(k)];
      g_skin[j].topRows<3>() += wk * grad_out[i] * xh.transpose();
      g.points[i] += wk * skin[j].topLeftCorner<3, 3>().transpose() * grad_out[i];
    }
  }
  g.joint_worlds.resize(skin.size());
  for (std::size_t j = 0; j < skin.size(); ++j)
    g.joint_worlds[j] = g_skin[j] * inv_binds[j].transpose();
  return g;
}

// ---------------------------------------------------------------------------
// Synthetic 8-joint skeleton (y-up, T-pose rest, body height about one unit).

inline Skeleton make_synthetic_skeleton() {
  std::vector<Joint> j(8);
  j[0] = {"root", -1, quat_identity(), {0.0, 0.50, 0.0}};
  j[1] = {"spine", 0, quat_identity(), {0.0, 0.12, 0.0}};
  j[2] = {"chest", 1, quat_identity(), {0.0, 0.12, 0.0}};
  j[3] = {"head", 2, quat_identity(), {0.0, 0.10, 0.0}};
  j[4] = {"l_arm", 2, quat_identity(), {0.14, 0.04, 0.0}};
  j[5] = {"r_arm", 2, quat_identity(), {-0.14, 0.04, 0.0}};
  j[6] = {"l_leg", 0, quat_identity(), {0.07, -0.03, 0.0}};
  j[7] = {"r_leg", 0, quat_identity(), {-0.07, -0.03, 0.0}};
  return Skeleton(std::move(j));
}

// ---------------------------------------------------------------------------
// JSON: skeleton as a joint list, poses as JSON-lines. Quaternions are [w,x,y,z].

inline nlohmann::json quat_to_json(const Vec4& q) { return {q[0], q[1], q[2], q[3]}; }
inline nlohmann::json vec3_to_json(const Vec3& v) { return {v[0], v[1], v[2]}; }

inline Vec4 quat_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("quaternion must be [w,x,y,z]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

inline Vec3 vec3_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) throw FormatError("expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

inline constexpr int kSkeletonFormatVersion = 1;

inline nlohmann::json skeleton_to_json(const Skeleton& s) {
  nlohmann::json joints = nlohmann::json::array();
  for (const auto& j : s.joints())
    joints.push_back({{"name", j.name},
                      {"parent", j.parent},
                      {"rotation", quat_to_json(j.rest_rotation)},
                      {"translation", vec3_to_json(j.rest_translation)}});
  return {{"version", kSkeletonFormatVersion}, {"joints", joints}};
}

inline Skeleton skeleton_from_json(const nlohmann::json& doc) {
  try {
    if (doc.value("version", 0) != kSkeletonFormatVersion)
      throw FormatError("unsupported skeleton version");
    std::vector<Joint> joints;
    for (const auto& jj : doc.at("joints"))
      joints.push_back({jj.at("name").get<std::string>(), jj.at("parent").get<int>(),
                        quat_from_json(jj.at("rotation")), vec3_from_json(jj.at("translation"))});
    return Skeleton(std::move(joints));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("skeleton json: ") + e.what());
  }
}

inline nlohmann::json pose_to_json(const Pose& p) {
  nlohmann::json rot = nlohmann::json::array();
  for (const auto& q : p.joint_rotations) rot.push_back(quat_to_json(q));
  return {{"frame", p.frame}, {"rotations", rot}, {"root_translation", vec3_to_json(p.root_translation)}};
}

inline Pose pose_from_json(const nlohmann::json& j) {
  try {
    Pose p;
    p.frame = j.at("frame").get<int>();
    for (const auto& q : j.at("rotations")) p.joint_rotations.push_back(quat_from_json(q));
    p.root_translation = vec3_from_json(j.at("root_translation"));
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("pose json: ") + e.what());
  }
}

inline void write_poses_jsonl(const std::string& path, const std::vector<Pose>& poses) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& p : poses) out << pose_to_json(p).dump() << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline std::vector<Pose> read_poses_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<Pose> poses;
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      poses.push_back(pose_from_json(nlohmann::json::parse(line)));
    } catch (const nlohmann::json::parse_error& e) {
      throw FormatError(path + ": " + e.what());
    }
  }
  return poses;
}

} // namespace d3ga
