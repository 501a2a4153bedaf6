#pragma once

// Tile-based splat rasterizer: EWA projection of 3D Gaussians, global depth
// sort, 16×16 tile binning, front-to-back compositing of color and part
// images with shared weights, and the exact reverse pass.

#include "d3ga/common.hpp"
#include "d3ga/gauss.hpp"
#include "d3ga/image.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <numeric>
#include <optional>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace d3ga {

// ---------------------------------------------------------------------------
// Camera

/// Pinhole camera. x_cam = R x_world + t, +z forward, +y down the image.
/// Pixel (i, j) has its center at (i + 0.5, j + 0.5).
struct Camera {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
  double fx = 1, fy = 1, cx = 0, cy = 0;
  int width = 1, height = 1;
  int id = 0;

  Vec3 center() const { return -rotation.transpose() * translation; }
  Vec3 to_camera(const Vec3& x) const { return rotation * x + translation; }

  void validate() const {
    if (!(fx > 0 && fy > 0)) throw ConfigError("camera focal lengths must be positive");
    if (width <= 0 || height <= 0) throw ConfigError("camera image size must be positive");
    if ((rotation * rotation.transpose() - Mat3::Identity()).norm() > 1e-8)
      throw ConfigError("camera rotation is not orthonormal");
  }

  /// Camera at `eye` looking at `target`; `up` is the world up direction.
  static Camera look_at(const Vec3& eye, const Vec3& target, const Vec3& up, double fov_y_deg, int width,
                        int height) {
    Camera c;
    const Vec3 f = (target - eye).normalized();
    const Vec3 r = f.cross(up).normalized();
    const Vec3 d = f.cross(r);  // image-down
    c.rotation.row(0) = r;
    c.rotation.row(1) = d;
    c.rotation.row(2) = f;
    c.translation = -c.rotation * eye;
    c.fy = 0.5 * height / std::tan(0.5 * fov_y_deg * std::numbers::pi / 180.0);
    c.fx = c.fy;
    c.cx = 0.5 * width;
    c.cy = 0.5 * height;
    c.width = width;
    c.height = height;
    return c;
  }
};

inline nlohmann::json camera_to_json(const Camera& c) {
  std::vector<double> w(16, 0.0);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) w[i * 4 + j] = c.rotation(i, j);
    w[i * 4 + 3] = c.translation[i];
  }
  w[15] = 1.0;
  return {{"id", c.id}, {"W", w}, {"fx", c.fx}, {"fy", c.fy}, {"cx", c.cx},
          {"cy", c.cy}, {"width", c.width}, {"height", c.height}};
}

inline Camera camera_from_json(const nlohmann::json& j) {
  Camera c;
  try {
    const auto w = j.at("W").get<std::vector<double>>();
    if (w.size() != 16) throw FormatError("camera W must have 16 entries");
    for (int i = 0; i < 3; ++i) {
      for (int k = 0; k < 3; ++k) c.rotation(i, k) = w[i * 4 + k];
      c.translation[i] = w[i * 4 + 3];
    }
    c.fx = j.at("fx").get<double>();
    c.fy = j.at("fy").get<double>();
    c.cx = j.at("cx").get<double>();
    c.cy = j.at("cy").get<double>();
    c.width = j.at("width").get<int>();
    c.height = j.at("height").get<int>();
    c.id = j.value("id", 0);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("camera json: ") + e.what());
  }
  c.validate();
  return c;
}

inline nlohmann::json cameras_to_json(const std::vector<Camera>& cams) {
  nlohmann::json a = nlohmann::json::array();
  for (const auto& c : cams) a.push_back(camera_to_json(c));
  return a;
}

inline std::vector<Camera> cameras_from_json(const nlohmann::json& j) {
  if (!j.is_array()) throw FormatError("cameras json must be a list");
  std::vector<Camera> out;
  for (const auto& e : j) out.push_back(camera_from_json(e));
  return out;
}

// ---------------------------------------------------------------------------
// Projection

struct RasterSettings {
  double dilation = 0.3;          // px² added to the 2D covariance diagonal
  double alpha_max = 0.99;
  double cutoff = 9.0;            // Mahalanobis² beyond which a splat is ignored
  double min_transmittance = 1e-4;
  double near = 0.01;
  int tile = 16;
};

struct Splat2D {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Identity();
  double depth = 1.0;
  Vec3 color = Vec3::Zero();
  Vec3 part_color = Vec3::Zero();
  double alpha_base = 0.0;
  /// Tie-break key for equal depths (the source Gaussian's index).
  int id = 0;
};

/// Camera-space mean and the affine Jacobian A of the pinhole at that mean.
struct ProjectionState {
  Vec3 t;
  Eigen::Matrix<double, 2, 3> a;
};

inline Eigen::Matrix<double, 2, 3> projection_jacobian(const Camera& cam, const Vec3& t) {
  const double iz = 1.0 / t.z(), iz2 = iz * iz;
  Eigen::Matrix<double, 2, 3> a;
  a << cam.fx * iz, 0.0, -cam.fx * t.x() * iz2, 0.0, cam.fy * iz, -cam.fy * t.y() * iz2;
  return a;
}

/// Returns nullopt for splats behind the near plane or with a degenerate
/// footprint; those are culled from the frame.
inline std::optional<Splat2D> project_gaussian(const Vec3& mean3d, const Covariance3& cov3d, const Camera& cam,
                                               const RasterSettings& rs = {}) {
  const Vec3 t = cam.to_camera(mean3d);
  if (!(t.z() > rs.near)) return std::nullopt;
  Splat2D s;
  s.mean2d = {cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy};
  const Eigen::Matrix<double, 2, 3> m = projection_jacobian(cam, t) * cam.rotation;
  s.cov2d = m * cov3d.matrix() * m.transpose();
  s.cov2d(0, 1) = s.cov2d(1, 0) = 0.5 * (s.cov2d(0, 1) + s.cov2d(1, 0));
  s.cov2d(0, 0) += rs.dilation;
  s.cov2d(1, 1) += rs.dilation;
  s.depth = t.z();
  if (!(s.cov2d.determinant() > 1e-12) || !all_finite(s.cov2d) || !all_finite(s.mean2d)) return std::nullopt;
  return s;
}

struct ProjectGrad {
  Vec3 mean3d = Vec3::Zero();
  Covariance3 cov3d;  // gradient in packed convention
};

/// `grad_cov2d` is a full 2×2 gradient (entries treated independently).
inline ProjectGrad project_gaussian_backward(const Vec3& mean3d, const Covariance3& cov3d, const Camera& cam,
                                             const Vec2& grad_mean2d, const Mat2& grad_cov2d) {
  const Vec3 t = cam.to_camera(mean3d);
  const double x = t.x(), y = t.y(), iz = 1.0 / t.z(), iz2 = iz * iz, iz3 = iz2 * iz;
  const Eigen::Matrix<double, 2, 3> a = projection_jacobian(cam, t);
  const Eigen::Matrix<double, 2, 3> m = a * cam.rotation;
  const Mat3 sigma = cov3d.matrix();
  const Mat2 g = grad_cov2d;
  ProjectGrad out;
  out.cov3d = cov_grad_from_full(m.transpose() * g * m);
  const Eigen::Matrix<double, 2, 3> gm = (g + g.transpose()) * m * sigma;
  const Eigen::Matrix<double, 2, 3> ga = gm * cam.rotation.transpose();
  Vec3 gt = a.transpose() * grad_mean2d;
  gt.z() += ga(0, 0) * (-cam.fx * iz2) + ga(0, 2) * (2.0 * cam.fx * x * iz3) + ga(1, 1) * (-cam.fy * iz2) +
            ga(1, 2) * (2.0 * cam.fy * y * iz3);
  gt.x() += ga(0, 2) * (-cam.fx * iz2);
  gt.y() += ga(1, 2) * (-cam.fy * iz2);
  out.mean3d = cam.rotation.transpose() * gt;
  return out;
}

// ---------------------------------------------------------------------------
// Compositing

struct RenderOutput {
  Image color;
  Image part;
  std::vector<double> alpha;          // Σ w_i per pixel
  std::vector<double> transmittance;  // residual T per pixel
  std::vector<int> contributors;      // list entries visited per pixel
};

/// Saved forward state for the reverse pass.
struct RenderState {
  std::vector<int> order;                     // splat indices sorted by (depth, id)
  std::vector<std::vector<int>> tile_lists;   // per tile, indices into `order` sequence (splat ids)
  std::vector<Mat2> conics;
  int tiles_x = 0, tiles_y = 0;
  Vec3 background = Vec3::Zero();
};

struct SplatGrad {
  Vec2 mean2d = Vec2::Zero();
  Mat2 cov2d = Mat2::Zero();
  Vec3 color = Vec3::Zero();
  double alpha_base = 0.0;
};

namespace detail {

inline std::vector<int> depth_order(const std::vector<Splat2D>& splats) {
  std::vector<int> order(splats.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (splats[a].depth != splats[b].depth) return splats[a].depth < splats[b].depth;
    if (splats[a].id != splats[b].id) return splats[a].id < splats[b].id;
    return a < b;
  });
  return order;
}

inline Mat2 conic_of(const Mat2& c) {
  const double det = c(0, 0) * c(1, 1) - c(0, 1) * c(1, 0);
  Mat2 q;
  q << c(1, 1) / det, -c(0, 1) / det, -c(1, 0) / det, c(0, 0) / det;
  return q;
}

struct PixelAccum {
  Vec3 color = Vec3::Zero();
  Vec3 part = Vec3::Zero();
  double alpha = 0.0;
  double t = 1.0;
  int visited = 0;
};

/// Composites `list` (already depth-sorted) at pixel center p.
template <typename List>
PixelAccum composite_pixel(const std::vector<Splat2D>& splats, const std::vector<Mat2>& conics, const List& list,
                           const Vec2& p, const RasterSettings& rs) {
  PixelAccum acc;
  for (const int s : list) {
    ++acc.visited;
    const Splat2D& sp = splats[s];
    const Vec2 d = p - sp.mean2d;
    const double q = d.dot(conics[s] * d);
    if (q > rs.cutoff) continue;
    const double alpha = std::min(rs.alpha_max, sp.alpha_base * std::exp(-0.5 * q));
    const double w = acc.t * alpha;
    acc.color += w * sp.color;
    acc.part += w * sp.part_color;
    acc.alpha += w;
    acc.t *= 1.0 - alpha;
    if (acc.t < rs.min_transmittance) break;
  }
  return acc;
}

inline void store_pixel(RenderOutput& out, int x, int y, const PixelAccum& acc, const Vec3& background) {
  const std::size_t k = static_cast<std::size_t>(y) * out.color.width + x;
  out.color.set_pixel(x, y, acc.color + acc.t * background);
  out.part.set_pixel(x, y, acc.part);
  out.alpha[k] = acc.alpha;
  out.transmittance[k] = acc.t;
  out.contributors[k] = acc.visited;
}

inline RenderOutput blank_output(int w, int h) {
  RenderOutput out;
  out.color = Image(w, h);
  out.part = Image(w, h);
  out.alpha.assign(static_cast<std::size_t>(w) * h, 0.0);
  out.transmittance.assign(static_cast<std::size_t>(w) * h, 1.0);
  out.contributors.assign(static_cast<std::size_t>(w) * h, 0);
  return out;
}

} // namespace detail

/// Tile renderer. `state`, when given, records what the reverse pass needs.
inline RenderOutput rasterize(const std::vector<Splat2D>& splats, const Camera& cam, const Vec3& background,
                              const RasterSettings& rs = {}, RenderState* state = nullptr) {
  const int w = cam.width, h = cam.height, ts = rs.tile;
  const int tx = (w + ts - 1) / ts, ty = (h + ts - 1) / ts;
  RenderState local;
  RenderState& st = state ? *state : local;
  st.order = detail::depth_order(splats);
  st.conics.resize(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i) st.conics[i] = detail::conic_of(splats[i].cov2d);
  st.tiles_x = tx;
  st.tiles_y = ty;
  st.background = background;
  st.tile_lists.assign(static_cast<std::size_t>(tx) * ty, {});
  const double k = std::sqrt(rs.cutoff);
  for (const int s : st.order) {
    const Splat2D& sp = splats[s];
    const double rx = k * std::sqrt(sp.cov2d(0, 0)), ry = k * std::sqrt(sp.cov2d(1, 1));
    // Pixel centers (i + 0.5) inside [mean - r, mean + r].
    const int x0 = std::max(0, static_cast<int>(std::ceil(sp.mean2d.x() - rx - 0.5)));
    const int x1 = std::min(w - 1, static_cast<int>(std::floor(sp.mean2d.x() + rx - 0.5)));
    const int y0 = std::max(0, static_cast<int>(std::ceil(sp.mean2d.y() - ry - 0.5)));
    const int y1 = std::min(h - 1, static_cast<int>(std::floor(sp.mean2d.y() + ry - 0.5)));
    if (x0 > x1 || y0 > y1) continue;
    for (int j = y0 / ts; j <= y1 / ts; ++j)
      for (int i = x0 / ts; i <= x1 / ts; ++i) st.tile_lists[static_cast<std::size_t>(j) * tx + i].push_back(s);
  }
  RenderOutput out = detail::blank_output(w, h);
  const int tiles = tx * ty;
#pragma omp parallel for schedule(dynamic, 1)
  for (int tile = 0; tile < tiles; ++tile) {
    const int bx = (tile % tx) * ts, by = (tile / tx) * ts;
    const auto& list = st.tile_lists[tile];
    for (int y = by; y < std::min(h, by + ts); ++y)
      for (int x = bx; x < std::min(w, bx + ts); ++x) {
        const auto acc = detail::composite_pixel(splats, st.conics, list, Vec2(x + 0.5, y + 0.5), rs);
        detail::store_pixel(out, x, y, acc, background);
      }
  }
  return out;
}

/// Brute-force reference: every pixel walks the full depth-sorted list.
inline RenderOutput rasterize_reference(const std::vector<Splat2D>& splats, const Camera& cam,
                                        const Vec3& background, const RasterSettings& rs = {}) {
  std::vector<Mat2> conics(splats.size());
  for (std::size_t i = 0; i < splats.size(); ++i) conics[i] = detail::conic_of(splats[i].cov2d);
  const auto order = detail::depth_order(splats);
  RenderOutput out = detail::blank_output(cam.width, cam.height);
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x)
      detail::store_pixel(out, x, y, detail::composite_pixel(splats, conics, order, Vec2(x + 0.5, y + 0.5), rs),
                          background);
  return out;
}

/// Reverse pass. grad_part may be empty (zero-sized) when the part image is
/// not in the loss. Per-tile partial gradients are reduced in tile order, so
/// the result does not depend on the thread count.
inline std::vector<SplatGrad> rasterize_backward(const std::vector<Splat2D>& splats, const Camera& cam,
                                                 const RenderState& st, const RenderOutput& fwd,
                                                 const Image& grad_color, const Image& grad_part,
                                                 const RasterSettings& rs = {}) {
  const int w = cam.width, h = cam.height, ts = rs.tile;
  const bool use_part = grad_part.width == w && grad_part.height == h;
  const int tiles = st.tiles_x * st.tiles_y;
  std::vector<std::vector<SplatGrad>> partial(tiles);
#pragma omp parallel for schedule(dynamic, 1)
  for (int tile = 0; tile < tiles; ++tile) {
    const auto& list = st.tile_lists[tile];
    if (list.empty()) continue;
    auto& acc = partial[tile];
    acc.assign(list.size(), SplatGrad{});
    const int bx = (tile % st.tiles_x) * ts, by = (tile / st.tiles_x) * ts;
    for (int y = by; y < std::min(h, by + ts); ++y)
      for (int x = bx; x < std::min(w, bx + ts); ++x) {
        const std::size_t k = static_cast<std::size_t>(y) * w + x;
        const Vec3 gc = grad_color.pixel(x, y);
        const Vec3 gp = use_part ? grad_part.pixel(x, y) : Vec3::Zero();
        if (gc.isZero(0.0) && gp.isZero(0.0)) continue;
        const Vec2 p(x + 0.5, y + 0.5);
        double t = fwd.transmittance[k];
        // Contribution of everything behind the current splat (incl. background).
        Vec3 behind_c = t * st.background;
        Vec3 behind_p = Vec3::Zero();
        for (int n = fwd.contributors[k]; n-- > 0;) {
          const int s = list[n];
          const Splat2D& sp = splats[s];
          const Vec2 d = p - sp.mean2d;
          const Mat2& qm = st.conics[s];
          const double q = d.dot(qm * d);
          if (q > rs.cutoff) continue;
          const double g = std::exp(-0.5 * q);
          const double raw = sp.alpha_base * g;
          const double alpha = std::min(rs.alpha_max, raw);
          const double t_before = t / (1.0 - alpha);
          const double wgt = t_before * alpha;
          SplatGrad& sg = acc[n];
          sg.color += wgt * gc;
          // dC/dα = T_before · c − behind / (1 − α)
          const double dl_dalpha = t_before * (sp.color.dot(gc) + sp.part_color.dot(gp)) -
                                   (behind_c.dot(gc) + behind_p.dot(gp)) / (1.0 - alpha);
          behind_c += wgt * sp.color;
          behind_p += wgt * sp.part_color;
          t = t_before;
          if (raw >= rs.alpha_max) continue;
          sg.alpha_base += dl_dalpha * g;
          const double dl_dq = dl_dalpha * sp.alpha_base * g * -0.5;
          // q = dᵀ Q d, d = p − μ; Q = C⁻¹ ⇒ dL/dC = −Q (dL/dQ) Q
          sg.mean2d += dl_dq * (-2.0 * (qm * d));
          const Mat2 gq = dl_dq * (d * d.transpose());
          sg.cov2d += -(qm * gq * qm);
        }
      }
  }
  std::vector<SplatGrad> out(splats.size());
  for (int tile = 0; tile < tiles; ++tile) {
    const auto& list = st.tile_lists[tile];
    const auto& acc = partial[tile];
    if (acc.empty()) continue;
    for (std::size_t n = 0; n < list.size(); ++n) {
      SplatGrad& o = out[list[n]];
      o.mean2d += acc[n].mean2d;
      o.cov2d += acc[n].cov2d;
      o.color += acc[n].color;
      o.alpha_base += acc[n].alpha_base;
    }
  }
  return out;
}

/// Thread cap for all parallel regions (0 keeps the runtime default).
inline void set_thread_count(int n) {
#ifdef _OPENMP
  if (n > 0) omp_set_num_threads(n);
#else
  (void)n;
#endif
}

} // namespace d3ga
