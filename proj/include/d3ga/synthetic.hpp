#pragma once

// Synthetic multi-view capture: an articulated capsule body with a shirt and
// trousers layer, smooth joint trajectories, a camera ring, and ground truth
// from an independent z-buffered triangle rasterizer (supersampled,
// Lambertian). Written to disk with a SHA-256 manifest.

#include "d3ga/common.hpp"
#include "d3ga/image.hpp"
#include "d3ga/mesh.hpp"
#include "d3ga/rasterizer.hpp"
#include "d3ga/skeleton.hpp"

#include <nlohmann/json.hpp>
#include <openssl/evp.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

namespace d3ga {

inline constexpr int kSceneFormatVersion = 1;

struct SceneSpec {
  int cameras = 16;
  int frames = 60;
  int heldout_cameras = 4;
  /// Train frames rendered from the held-out cameras (evenly spaced).
  int heldout_camera_frames = 10;
  int width = 128;
  int height = 128;
  double fov_deg = 35.0;
  int supersample = 3;
  double camera_radius_min = 2.0;
  double camera_radius_max = 2.6;
  double garment_offset = 0.01;
  double skin_sigma = 0.03;
  /// Garments follow smoother skinning than the body underneath.
  double garment_skin_sigma = 0.06;
  double motion_scale = 1.0;
  std::uint64_t seed = 0;
};

inline nlohmann::json scene_spec_to_json(const SceneSpec& s) {
  return {{"version", kSceneFormatVersion},
          {"cameras", s.cameras},
          {"frames", s.frames},
          {"heldout_cameras", s.heldout_cameras},
          {"heldout_camera_frames", s.heldout_camera_frames},
          {"width", s.width},
          {"height", s.height},
          {"fov_deg", s.fov_deg},
          {"supersample", s.supersample},
          {"camera_radius_min", s.camera_radius_min},
          {"camera_radius_max", s.camera_radius_max},
          {"garment_offset", s.garment_offset},
          {"skin_sigma", s.skin_sigma},
          {"garment_skin_sigma", s.garment_skin_sigma},
          {"motion_scale", s.motion_scale},
          {"seed", s.seed}};
}

/// Unknown keys are rejected.
inline SceneSpec scene_spec_from_json(const nlohmann::json& j) {
  SceneSpec s;
  static const std::vector<std::string> known{
      "version", "cameras", "frames", "heldout_cameras", "heldout_camera_frames", "width", "height",
      "fov_deg", "supersample", "camera_radius_min", "camera_radius_max", "garment_offset", "skin_sigma",
      "garment_skin_sigma", "motion_scale", "seed"};
  if (!j.is_object()) throw ConfigError("scene spec must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (std::find(known.begin(), known.end(), k) == known.end()) throw ConfigError("unknown scene key: " + k);
  try {
    s.cameras = j.value("cameras", s.cameras);
    s.frames = j.value("frames", s.frames);
    s.heldout_cameras = j.value("heldout_cameras", s.heldout_cameras);
    s.heldout_camera_frames = j.value("heldout_camera_frames", s.heldout_camera_frames);
    s.width = j.value("width", s.width);
    s.height = j.value("height", s.height);
    s.fov_deg = j.value("fov_deg", s.fov_deg);
    s.supersample = j.value("supersample", s.supersample);
    s.camera_radius_min = j.value("camera_radius_min", s.camera_radius_min);
    s.camera_radius_max = j.value("camera_radius_max", s.camera_radius_max);
    s.garment_offset = j.value("garment_offset", s.garment_offset);
    s.skin_sigma = j.value("skin_sigma", s.skin_sigma);
    s.garment_skin_sigma = j.value("garment_skin_sigma", s.garment_skin_sigma);
    s.motion_scale = j.value("motion_scale", s.motion_scale);
    s.seed = j.value("seed", s.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("scene spec: ") + e.what());
  }
  if (s.cameras <= 0 || s.frames <= 0 || s.width <= 0 || s.height <= 0 || s.supersample <= 0)
    throw ConfigError("scene counts and sizes must be positive");
  if (s.heldout_cameras < 0 || s.heldout_camera_frames < 0) throw ConfigError("held-out counts must be >= 0");
  return s;
}

// ---------------------------------------------------------------------------
// Body

/// Capsule bone used for skin weights: the segment a→b with a radius.
struct Bone {
  int joint;
  Vec3 a, b;
  double radius;
};

inline double segment_distance(const Vec3& p, const Vec3& a, const Vec3& b) {
  const Vec3 ab = b - a;
  const double t = std::clamp((p - a).dot(ab) / ab.squaredNorm(), 0.0, 1.0);
  return (p - (a + t * ab)).norm();
}

inline std::vector<Bone> synthetic_bones() {
  return {{0, {0, 0.40, 0}, {0, 0.50, 0}, 0.11},        {1, {0, 0.50, 0}, {0, 0.62, 0}, 0.11},
          {2, {0, 0.62, 0}, {0, 0.80, 0}, 0.11},        {3, {0, 0.84, 0}, {0, 0.97, 0}, 0.075},
          {4, {0.14, 0.78, 0}, {0.42, 0.78, 0}, 0.045}, {5, {-0.14, 0.78, 0}, {-0.42, 0.78, 0}, 0.045},
          {6, {0.07, 0.47, 0}, {0.07, 0.05, 0}, 0.05},  {7, {-0.07, 0.47, 0}, {-0.07, 0.05, 0}, 0.05}};
}

/// w_j ∝ exp(−s_j² / 2σ²), s_j = max(0, distance to bone j − its radius),
/// over the closest bone and its parent and children; top four kept. Siblings
/// such as the two legs never share a vertex.
inline SkinWeights bone_skin_weights(const Vec3& p, const std::vector<Bone>& bones, const Skeleton& skel,
                                     double sigma) {
  std::vector<double> depth(skel.size(), std::numeric_limits<double>::infinity());
  for (const auto& b : bones) {
    auto& d = depth[static_cast<std::size_t>(b.joint)];
    d = std::min(d, segment_distance(p, b.a, b.b) - b.radius);
  }
  const int near = static_cast<int>(std::min_element(depth.begin(), depth.end()) - depth.begin());
  std::vector<double> w(skel.size(), 0.0);
  for (std::size_t j = 0; j < skel.size(); ++j) {
    const int parent = skel.joint(j).parent;
    const bool linked = static_cast<int>(j) == near || parent == near || skel.joint(static_cast<std::size_t>(near)).parent == static_cast<int>(j);
    if (!linked || !std::isfinite(depth[j])) continue;
    const double s = std::max(0.0, depth[j]);
    w[j] = std::exp(-s * s / (2.0 * sigma * sigma));
  }
  return SkinWeights::from_dense(w);
}

struct SyntheticBody {
  Skeleton skeleton;
  /// Closed, possibly overlapping components; faces labelled body/upper/lower.
  TriMesh template_mesh;
  std::vector<SkinWeights> template_weights;
  /// Face hidden inside another component (never visible, never sampled).
  std::vector<bool> hidden_faces;
  /// Garment surfaces: the labelled template region pushed out along normals.
  TriMesh upper, lower;
  std::vector<SkinWeights> upper_weights, lower_weights;
};

inline Vec3 part_albedo(Part p) {
  switch (p) {
  case Part::body: return {0.80, 0.58, 0.46};
  case Part::upper: return {0.20, 0.42, 0.78};
  case Part::lower: return {0.36, 0.30, 0.22};
  case Part::face: return {0.80, 0.58, 0.46};
  }
  return Vec3::Ones();
}

/// Faces whose centroid lies inside another component.
inline std::vector<bool> hidden_faces(const TriMesh& mesh) {
  const InsideTester tester(mesh);
  std::vector<bool> hidden(mesh.face_count(), false);
  for (std::size_t f = 0; f < mesh.face_count(); ++f) {
    const auto& t = mesh.faces[f];
    const Vec3 c = (mesh.positions[t[0]] + mesh.positions[t[1]] + mesh.positions[t[2]]) / 3.0;
    hidden[f] = tester.inside_other(c, tester.component_of_face(f));
  }
  return hidden;
}

inline TriMesh offset_region(const TriMesh& mesh, Part label, double offset, std::vector<int>* vertex_map) {
  const auto normals = mesh.vertex_normals();
  TriMesh region = mesh.submesh(label, vertex_map);
  for (std::size_t i = 0; i < region.positions.size(); ++i)
    region.positions[i] += offset * normals[static_cast<std::size_t>((*vertex_map)[i])];
  return region;
}

inline SyntheticBody make_synthetic_body(const SceneSpec& spec = {}) {
  SyntheticBody body;
  body.skeleton = make_synthetic_skeleton();
  TriMesh& m = body.template_mesh;
  m.append(make_capsule({0, 0.46, 0}, {0, 0.74, 0}, 0.11, 32, 6, 10, 0.7), Part::body);
  for (const double s : {1.0, -1.0}) {
    m.append(make_capsule({s * 0.07, 0.44, 0}, {s * 0.07, 0.05, 0}, 0.05, 20, 5, 16), Part::body);
    m.append(make_capsule({s * 0.13, 0.78, 0}, {s * 0.42, 0.78, 0}, 0.043, 20, 5, 12), Part::body);
  }
  m.append(make_uv_sphere({0, 0.92, 0}, 0.075, 24, 14), Part::body);
  int ncomp = 0;
  const auto comp = m.face_components(&ncomp);
  body.hidden_faces = hidden_faces(m);
  for (std::size_t f = 0; f < m.face_count(); ++f) {
    if (body.hidden_faces[f]) continue;
    const auto& t = m.faces[f];
    const Vec3 c = (m.positions[t[0]] + m.positions[t[1]] + m.positions[t[2]]) / 3.0;
    if (comp[f] == 0)
      m.face_parts[f] = c.y() > 0.56 ? Part::upper : Part::lower;
    else if ((comp[f] == 1 || comp[f] == 3) && c.y() > 0.15)
      m.face_parts[f] = Part::lower;
  }
  const auto bones = synthetic_bones();
  for (const auto& p : m.positions)
    body.template_weights.push_back(bone_skin_weights(p, bones, body.skeleton, spec.skin_sigma));
  std::vector<int> map_u, map_l;
  body.upper = offset_region(m, Part::upper, spec.garment_offset, &map_u);
  body.lower = offset_region(m, Part::lower, spec.garment_offset, &map_l);
  for (const int v : map_u)
    body.upper_weights.push_back(
        bone_skin_weights(m.positions[static_cast<std::size_t>(v)], bones, body.skeleton, spec.garment_skin_sigma));
  for (const int v : map_l)
    body.lower_weights.push_back(
        bone_skin_weights(m.positions[static_cast<std::size_t>(v)], bones, body.skeleton, spec.garment_skin_sigma));
  return body;
}

// ---------------------------------------------------------------------------
// Motion

struct JointMotion {
  int joint;
  Vec3 axis;
  double center;     // radians
  double amplitude;  // radians
  int cycles;        // per sequence
};

/// Per-joint bound on the rotation angle, radians.
inline std::vector<double> joint_limits() {
  const double d = std::numbers::pi / 180.0;
  return {30 * d, 20 * d, 25 * d, 45 * d, 70 * d, 70 * d, 45 * d, 45 * d};
}

inline std::vector<JointMotion> synthetic_motions(double scale) {
  const double d = std::numbers::pi / 180.0 * scale;
  return {{0, Vec3::UnitY(), 0, 20 * d, 1},        {1, Vec3::UnitX(), 0, 12 * d, 2},
          {2, Vec3::UnitY(), 0, 15 * d, 1},        {3, Vec3::UnitX(), 0, 15 * d, 2},
          {3, Vec3::UnitY(), 0, 25 * d, 1},        {4, Vec3::UnitZ(), -15 * d, 35 * d, 2},
          {4, Vec3::UnitY(), 0, 20 * d, 1},        {5, Vec3::UnitZ(), 15 * d, 35 * d, 2},
          {5, Vec3::UnitY(), 0, 20 * d, 1},        {6, Vec3::UnitX(), 0, 30 * d, 2},
          {7, Vec3::UnitX(), 0, 30 * d, 2}};
}

/// Smooth periodic trajectory sampled at t ∈ [0, 1); phases depend on the seed.
class MotionGenerator {
public:
  MotionGenerator(std::size_t joints, std::uint64_t seed, double scale = 1.0)
      : joints_(joints), motions_(synthetic_motions(scale)), scale_(scale) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ull);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < motions_.size(); ++i) phases_.push_back(u(rng));
    for (int k = 0; k < 3; ++k) root_phase_[k] = u(rng);
  }

  Pose at(double t) const {
    Pose p = Pose::identity(joints_);
    const double tau = 2.0 * std::numbers::pi;
    for (std::size_t i = 0; i < motions_.size(); ++i) {
      const auto& m = motions_[i];
      const double angle = m.center + m.amplitude * std::sin(tau * (m.cycles * t + phases_[i]));
      auto& q = p.joint_rotations[static_cast<std::size_t>(m.joint)];
      q = quat_mul(q, quat_from_axis_angle(m.axis, angle));
    }
    for (auto& q : p.joint_rotations) q = quat_canonical(q.normalized());
    p.root_translation = {0.03 * scale_ * std::sin(tau * (t + root_phase_[0])),
                          0.01 * scale_ * std::sin(tau * (2 * t + root_phase_[1])),
                          0.03 * scale_ * std::sin(tau * (t + root_phase_[2]))};
    return p;
  }

private:
  std::size_t joints_;
  std::vector<JointMotion> motions_;
  std::vector<double> phases_;
  std::array<double, 3> root_phase_{};
  double scale_;
};

inline double rotation_angle(const Vec4& q) { return 2.0 * std::acos(std::clamp(std::abs(q[0]), 0.0, 1.0)); }

inline bool within_joint_limits(const Pose& p) {
  const auto lim = joint_limits();
  for (std::size_t j = 0; j < p.joint_rotations.size() && j < lim.size(); ++j)
    if (rotation_angle(p.joint_rotations[j]) > lim[j] + 1e-12) return false;
  return true;
}

// ---------------------------------------------------------------------------
// Cameras

inline std::vector<Camera> ring_cameras(const SceneSpec& s) {
  std::mt19937_64 rng(s.seed ^ 0xc2b2ae3d27d4eb4full);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Camera> cams;
  for (int k = 0; k < s.cameras; ++k) {
    const double az = 2.0 * std::numbers::pi * (k + 0.2 * (u(rng) - 0.5)) / s.cameras;
    const double r = s.camera_radius_min + (s.camera_radius_max - s.camera_radius_min) * u(rng);
    const double h = 0.35 + 0.4 * u(rng);
    const Vec3 eye(r * std::sin(az), h, r * std::cos(az));
    Camera c = Camera::look_at(eye, {0.0, 0.5, 0.0}, Vec3::UnitY(), s.fov_deg, s.width, s.height);
    c.id = k;
    cams.push_back(c);
  }
  return cams;
}

inline std::vector<Camera> heldout_ring_cameras(const SceneSpec& s) {
  std::vector<Camera> cams;
  const double r = 0.5 * (s.camera_radius_min + s.camera_radius_max);
  for (int k = 0; k < s.heldout_cameras; ++k) {
    const double az = 2.0 * std::numbers::pi * (k + 0.5) / std::max(1, s.heldout_cameras) + 0.3;
    const Vec3 eye(r * std::sin(az), 1.5, r * std::cos(az));
    Camera c = Camera::look_at(eye, {0.0, 0.5, 0.0}, Vec3::UnitY(), s.fov_deg, s.width, s.height);
    c.id = k;
    cams.push_back(c);
  }
  return cams;
}

// ---------------------------------------------------------------------------
// Ground-truth triangle rasterizer

struct ShadedMesh {
  std::vector<Vec3> positions;
  std::vector<Vec3> normals;
  std::vector<std::array<int, 3>> faces;
  std::vector<Part> labels;
};

struct Lighting {
  double ambient = 0.25;
  std::array<Vec3, 2> directions{Vec3(0.5, 1.0, 0.8).normalized(), Vec3(-0.7, 0.3, -0.5).normalized()};
  std::array<double, 2> intensity{0.65, 0.3};
};

struct GroundTruth {
  Image rgb;   // linear
  Image mask;  // palette colors
};

/// Z-buffered rasterization at `ss`×`ss` samples per pixel with
/// perspective-correct interpolation; color averaged, mask by majority label.
inline GroundTruth render_triangles(const std::vector<ShadedMesh>& meshes, const Camera& cam, int ss,
                                    const Lighting& light = {}) {
  const int w = cam.width * ss, h = cam.height * ss;
  struct Sample {
    double z = std::numeric_limits<double>::infinity();
    int mesh = -1, face = -1;
    double b0 = 0, b1 = 0, b2 = 0;
  };
  std::vector<Sample> buf(static_cast<std::size_t>(w) * h);
  for (std::size_t mi = 0; mi < meshes.size(); ++mi) {
    const auto& m = meshes[mi];
    std::vector<Vec3> pc(m.positions.size());
    for (std::size_t i = 0; i < pc.size(); ++i) pc[i] = cam.to_camera(m.positions[i]);
    for (std::size_t f = 0; f < m.faces.size(); ++f) {
      const auto& t = m.faces[f];
      const Vec3 &c0 = pc[t[0]], &c1 = pc[t[1]], &c2 = pc[t[2]];
      if (c0.z() < 1e-3 || c1.z() < 1e-3 || c2.z() < 1e-3) continue;
      auto proj = [&](const Vec3& c) {
        return Vec2((cam.fx * c.x() / c.z() + cam.cx) * ss, (cam.fy * c.y() / c.z() + cam.cy) * ss);
      };
      const Vec2 p0 = proj(c0), p1 = proj(c1), p2 = proj(c2);
      const double area = (p1 - p0).x() * (p2 - p0).y() - (p1 - p0).y() * (p2 - p0).x();
      if (std::abs(area) < 1e-14) continue;
      const int x0 = std::max(0, static_cast<int>(std::floor(std::min({p0.x(), p1.x(), p2.x()}))));
      const int x1 = std::min(w - 1, static_cast<int>(std::ceil(std::max({p0.x(), p1.x(), p2.x()}))));
      const int y0 = std::max(0, static_cast<int>(std::floor(std::min({p0.y(), p1.y(), p2.y()}))));
      const int y1 = std::min(h - 1, static_cast<int>(std::ceil(std::max({p0.y(), p1.y(), p2.y()}))));
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          const Vec2 p(x + 0.5, y + 0.5);
          auto edge = [](const Vec2& a, const Vec2& b, const Vec2& q) {
            return (b - a).x() * (q - a).y() - (b - a).y() * (q - a).x();
          };
          double l0 = edge(p1, p2, p) / area, l1 = edge(p2, p0, p) / area, l2 = edge(p0, p1, p) / area;
          if (l0 < 0 || l1 < 0 || l2 < 0) continue;
          // Screen-space weights → perspective-correct weights.
          const double i0 = l0 / c0.z(), i1 = l1 / c1.z(), i2 = l2 / c2.z();
          const double s = i0 + i1 + i2;
          const double z = 1.0 / s;
          Sample& smp = buf[static_cast<std::size_t>(y) * w + x];
          if (z < smp.z) smp = {z, static_cast<int>(mi), static_cast<int>(f), i0 / s, i1 / s, i2 / s};
        }
    }
  }
  GroundTruth gt{Image(cam.width, cam.height), Image(cam.width, cam.height)};
  const double inv = 1.0 / (ss * ss);
  for (int py = 0; py < cam.height; ++py)
    for (int px = 0; px < cam.width; ++px) {
      Vec3 col = Vec3::Zero();
      std::array<int, kPartCount + 1> votes{};
      for (int sy = 0; sy < ss; ++sy)
        for (int sx = 0; sx < ss; ++sx) {
          const Sample& smp = buf[static_cast<std::size_t>(py * ss + sy) * w + px * ss + sx];
          if (smp.mesh < 0) {
            ++votes[0];
            continue;
          }
          const auto& m = meshes[static_cast<std::size_t>(smp.mesh)];
          const auto& t = m.faces[static_cast<std::size_t>(smp.face)];
          const Vec3 n = (smp.b0 * m.normals[t[0]] + smp.b1 * m.normals[t[1]] + smp.b2 * m.normals[t[2]]).normalized();
          const Part label = m.labels[static_cast<std::size_t>(smp.face)];
          double shade = light.ambient;
          for (int k = 0; k < 2; ++k) shade += light.intensity[k] * std::max(0.0, n.dot(light.directions[k]));
          col += shade * part_albedo(label);
          ++votes[1 + static_cast<int>(label)];
        }
      gt.rgb.set_pixel(px, py, (col * inv).cwiseMin(1.0));
      int best = 0;
      for (int k = 1; k <= kPartCount; ++k)
        if (votes[k] > votes[best]) best = k;
      gt.mask.set_pixel(px, py, best == 0 ? Vec3::Zero() : part_color(static_cast<Part>(best - 1)));
    }
  return gt;
}

/// Posed body and garment meshes for one frame.
inline std::vector<ShadedMesh> posed_meshes(const SyntheticBody& body, const Pose& pose) {
  const auto world = forward_kinematics(body.skeleton, pose);
  auto pose_mesh = [&](const TriMesh& mesh, const std::vector<SkinWeights>& w, bool all_labels) {
    ShadedMesh s;
    s.positions = lbs_points(mesh.positions, w, world, body.skeleton.inverse_bind());
    TriMesh posed = mesh;
    posed.positions = s.positions;
    s.normals = posed.vertex_normals();
    s.faces = mesh.faces;
    for (std::size_t f = 0; f < mesh.face_count(); ++f)
      s.labels.push_back(all_labels ? mesh.face_part(f) : Part::body);
    return s;
  };
  return {pose_mesh(body.template_mesh, body.template_weights, false), pose_mesh(body.upper, body.upper_weights, true),
          pose_mesh(body.lower, body.lower_weights, true)};
}

inline GroundTruth render_ground_truth(const SyntheticBody& body, const Pose& pose, const Camera& cam, int ss) {
  return render_triangles(posed_meshes(body, pose), cam, ss);
}

// ---------------------------------------------------------------------------
// Manifest

inline std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw IoError("sha256 init failed");
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), md, &len);
  static const char* hex = "0123456789abcdef";
  std::string s;
  for (unsigned int i = 0; i < len; ++i) {
    s += hex[md[i] >> 4];
    s += hex[md[i] & 15];
  }
  return s;
}

inline constexpr const char* kManifestName = "manifest.json";

/// Hashes every regular file under `dir` except the manifest itself.
inline nlohmann::json build_manifest(const std::string& dir) {
  namespace fs = std::filesystem;
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).generic_string();
    if (rel == kManifestName) continue;
    files[rel] = sha256_file(e.path().string());
  }
  return {{"version", 1}, {"algorithm", "sha256"}, {"files", files}};
}

/// Returns the relative paths that are missing, extra or changed.
inline std::vector<std::string> verify_manifest(const std::string& dir) {
  std::ifstream in(std::filesystem::path(dir) / kManifestName);
  if (!in) throw IoError("no manifest in " + dir);
  nlohmann::json stored;
  try {
    stored = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("manifest: ") + e.what());
  }
  const auto now = build_manifest(dir);
  std::vector<std::string> bad;
  const auto& a = stored.at("files");
  const auto& b = now.at("files");
  for (const auto& [k, v] : a.items())
    if (!b.contains(k) || b.at(k) != v) bad.push_back(k);
  for (const auto& [k, v] : b.items())
    if (!a.contains(k)) bad.push_back(k);
  return bad;
}

// ---------------------------------------------------------------------------
// Scene on disk

namespace scene_paths {
inline std::string frame_image(const std::string& root, const std::string& kind, int frame, int cam) {
  return root + "/" + kind + "/" + std::to_string(frame) + "/" + std::to_string(cam) + ".png";
}
} // namespace scene_paths

inline nlohmann::json skin_weights_to_json(const std::vector<SkinWeights>& w) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& s : w) {
    nlohmann::json j = nlohmann::json::array(), v = nlohmann::json::array();
    for (int k = 0; k < s.count; ++k) {
      j.push_back(s.joint[static_cast<std::size_t>(k)]);
      v.push_back(s.weight[static_cast<std::size_t>(k)]);
    }
    a.push_back({{"j", j}, {"w", v}});
  }
  return a;
}

inline std::vector<SkinWeights> skin_weights_from_json(const nlohmann::json& a) {
  std::vector<SkinWeights> out;
  try {
    for (const auto& e : a) {
      SkinWeights s;
      const auto j = e.at("j").get<std::vector<int>>();
      const auto w = e.at("w").get<std::vector<double>>();
      if (j.size() != w.size() || j.empty() || j.size() > SkinWeights::kMaxInfluences)
        throw FormatError("bad skin weight entry");
      s.count = static_cast<int>(j.size());
      for (std::size_t k = 0; k < j.size(); ++k) {
        s.joint[k] = j[k];
        s.weight[k] = w[k];
      }
      out.push_back(s);
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("skin weights: ") + e.what());
  }
  return out;
}

inline void write_json_file(const std::string& path, const nlohmann::json& j) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << j.dump(1) << '\n';
  if (!out) throw IoError("write failed: " + path);
}

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": " + e.what());
  }
}

/// Poses for the training frames and the interleaved held-out poses.
inline std::vector<Pose> synthetic_poses(const SceneSpec& s, std::size_t joints, bool heldout) {
  const MotionGenerator gen(joints, s.seed, s.motion_scale);
  std::vector<Pose> poses;
  for (int f = 0; f < s.frames; ++f) {
    Pose p = gen.at((f + (heldout ? 0.5 : 0.0)) / s.frames);
    p.frame = f;
    poses.push_back(p);
  }
  return poses;
}

inline std::vector<int> heldout_camera_frame_list(const SceneSpec& s) {
  std::vector<int> f;
  const int n = std::min(s.heldout_camera_frames, s.frames);
  for (int k = 0; k < n; ++k) f.push_back(k * s.frames / std::max(1, n));
  return f;
}

using ProgressFn = std::function<void(const std::string&)>;

/// Writes the full dataset under `dir` (created; its parent must exist).
inline void generate_synthetic_scene(const SceneSpec& spec, const std::string& dir, const ProgressFn& log = {}) {
  namespace fs = std::filesystem;
  const fs::path root(dir);
  if (!root.parent_path().empty() && !fs::exists(root.parent_path()))
    throw IoError("parent directory does not exist: " + root.parent_path().string());
  std::error_code ec;
  fs::create_directories(root, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());

  const SyntheticBody body = make_synthetic_body(spec);
  const auto cams = ring_cameras(spec);
  const auto hcams = heldout_ring_cameras(spec);
  const auto poses = synthetic_poses(spec, body.skeleton.size(), false);
  const auto hposes = synthetic_poses(spec, body.skeleton.size(), true);

  write_json_file(dir + "/scene.json", scene_spec_to_json(spec));
  write_json_file(dir + "/cameras.json", cameras_to_json(cams));
  write_json_file(dir + "/skeleton.json", skeleton_to_json(body.skeleton));
  write_poses_jsonl(dir + "/poses.jsonl", poses);
  write_obj(dir + "/template.obj", body.template_mesh);
  write_json_file(dir + "/template_weights.json", skin_weights_to_json(body.template_weights));

  auto render_set = [&](const std::string& sub, const std::vector<Pose>& ps, const std::vector<int>& frames,
                        const std::vector<Camera>& cs) {
    for (const int f : frames) {
      const auto meshes = posed_meshes(body, ps[static_cast<std::size_t>(f)]);
      fs::create_directories(sub + "/frames/" + std::to_string(f));
      fs::create_directories(sub + "/masks/" + std::to_string(f));
      for (const auto& c : cs) {
        const auto gt = render_triangles(meshes, c, spec.supersample);
        write_png(scene_paths::frame_image(sub, "frames", f, c.id), gt.rgb, true);
        write_png(scene_paths::frame_image(sub, "masks", f, c.id), gt.mask, false);
      }
      if (log && (f % 10 == 0)) log(sub + ": frame " + std::to_string(f));
    }
  };
  std::vector<int> all(static_cast<std::size_t>(spec.frames));
  std::iota(all.begin(), all.end(), 0);
  render_set(dir, poses, all, cams);

  const std::string hp = dir + "/heldout_poses";
  fs::create_directories(hp);
  write_poses_jsonl(hp + "/poses.jsonl", hposes);
  render_set(hp, hposes, all, cams);

  if (spec.heldout_cameras > 0) {
    const std::string hc = dir + "/heldout_cameras";
    fs::create_directories(hc);
    write_json_file(hc + "/cameras.json", cameras_to_json(hcams));
    const auto hf = heldout_camera_frame_list(spec);
    write_json_file(hc + "/frames.json", hf);
    render_set(hc, poses, hf, hcams);
  }
  write_json_file(dir + "/" + kManifestName, build_manifest(dir));
}

// ---------------------------------------------------------------------------
// Loading

enum class Split { train, heldout_poses, heldout_cameras };

inline Split split_from_name(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "heldout_poses" || s == "heldout-poses" || s == "poses") return Split::heldout_poses;
  if (s == "heldout_cameras" || s == "heldout-cameras" || s == "cameras") return Split::heldout_cameras;
  throw ConfigError("unknown split: " + s);
}

inline std::string split_name(Split s) {
  switch (s) {
  case Split::train: return "train";
  case Split::heldout_poses: return "heldout_poses";
  case Split::heldout_cameras: return "heldout_cameras";
  }
  return "?";
}

struct View {
  int frame;
  int camera;  // index into SceneData::cameras
};

/// One split of a dataset, images kept as 8-bit until used.
struct SceneData {
  std::string root;
  Split split = Split::train;
  Skeleton skeleton;
  TriMesh template_mesh;
  std::vector<SkinWeights> template_weights;
  std::vector<Camera> cameras;
  std::vector<Pose> poses;
  std::vector<View> views;
  std::vector<Image8> rgb;
  std::vector<Image8> masks;

  Image target(std::size_t v) const { return decode(rgb[v], true); }
  Image mask(std::size_t v) const { return decode(masks[v], false); }
};

/// `with_images = false` loads only metadata.
inline SceneData load_scene(const std::string& dir, Split split = Split::train, bool with_images = true) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("scene directory not found: " + dir);
  SceneData s;
  s.root = dir;
  s.split = split;
  s.skeleton = skeleton_from_json(read_json_file(dir + "/skeleton.json"));
  s.template_mesh = read_obj(dir + "/template.obj");
  s.template_weights = skin_weights_from_json(read_json_file(dir + "/template_weights.json"));
  if (s.template_weights.size() != s.template_mesh.vertex_count())
    throw FormatError("template weights do not match template vertices");
  std::string sub = dir;
  std::vector<int> frames;
  switch (split) {
  case Split::train:
    s.cameras = cameras_from_json(read_json_file(dir + "/cameras.json"));
    s.poses = read_poses_jsonl(dir + "/poses.jsonl");
    break;
  case Split::heldout_poses:
    sub = dir + "/heldout_poses";
    s.cameras = cameras_from_json(read_json_file(dir + "/cameras.json"));
    s.poses = read_poses_jsonl(sub + "/poses.jsonl");
    break;
  case Split::heldout_cameras:
    sub = dir + "/heldout_cameras";
    s.cameras = cameras_from_json(read_json_file(sub + "/cameras.json"));
    s.poses = read_poses_jsonl(dir + "/poses.jsonl");
    frames = read_json_file(sub + "/frames.json").get<std::vector<int>>();
    break;
  }
  if (frames.empty())
    for (std::size_t f = 0; f < s.poses.size(); ++f) frames.push_back(static_cast<int>(f));
  for (const int f : frames)
    for (std::size_t c = 0; c < s.cameras.size(); ++c) {
      s.views.push_back({f, static_cast<int>(c)});
      if (!with_images) continue;
      s.rgb.push_back(read_png8(scene_paths::frame_image(sub, "frames", f, s.cameras[c].id)));
      s.masks.push_back(read_png8(scene_paths::frame_image(sub, "masks", f, s.cameras[c].id)));
    }
  return s;
}

} // namespace d3ga
