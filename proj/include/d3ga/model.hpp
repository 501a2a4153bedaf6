#pragma once

// The drivable avatar: per-layer tetrahedral cages posed by LBS plus learned
// node offsets, Gaussians embedded in cage tets with learned corrections,
// shading predicted per Gaussian, and the full reverse pass from image
// gradients back to every learnable tensor.

#include "d3ga/cage.hpp"
#include "d3ga/gauss.hpp"
#include "d3ga/mesh.hpp"
#include "d3ga/nets.hpp"
#include "d3ga/optim.hpp"
#include "d3ga/params.hpp"
#include "d3ga/rasterizer.hpp"
#include "d3ga/skeleton.hpp"

#include <map>
#include <optional>
#include <random>
#include <unordered_map>

namespace d3ga {

// ---------------------------------------------------------------------------
// Cage construction

struct CageBuildOptions {
  double solid_step = 0.03;
  /// Garment shells span [-shell_inner, +shell_outer] along the surface normal.
  double shell_inner = 0.02;
  double shell_outer = 0.03;
};

/// Faces whose centroid lies inside another closed component.
inline std::vector<bool> occluded_faces(const TriMesh& mesh) {
  const InsideTester tester(mesh);
  std::vector<bool> hidden(mesh.face_count(), false);
  if (tester.component_count() < 2) return hidden;
  for (std::size_t f = 0; f < mesh.face_count(); ++f) {
    const auto& t = mesh.faces[f];
    const Vec3 c = (mesh.positions[t[0]] + mesh.positions[t[1]] + mesh.positions[t[2]]) / 3.0;
    hidden[f] = tester.inside_other(c, tester.component_of_face(f));
  }
  return hidden;
}

/// Each prism node is an offset copy of one region vertex and inherits that
/// vertex's skin weights, i.e. the nearest vertex of the inflated region.
inline TetCage build_shell_cage(const TriMesh& templ, const std::vector<SkinWeights>& weights, Part label,
                                const CageBuildOptions& o) {
  std::vector<int> map;
  TriMesh region = templ.submesh(label, &map);
  if (region.face_count() == 0) throw EmptyCage(std::string("no faces labelled ") + std::string(part_name(label)));
  const auto n = region.vertex_normals();
  for (std::size_t i = 0; i < region.positions.size(); ++i) region.positions[i] -= o.shell_inner * n[i];
  TetCage c = tetrahedralize_shell(region, o.shell_inner + o.shell_outer, &n);
  c.part_id = label;
  c.node_skin_weights.resize(c.nodes_canonical.size());
  for (std::size_t i = 0; i < map.size(); ++i)
    c.node_skin_weights[i] = c.node_skin_weights[i + map.size()] = weights[static_cast<std::size_t>(map[i])];
  return c;
}

/// Body: solid lattice cage of the whole template, node weights from the
/// nearest visible template vertex. Garments: shells around their labelled
/// regions.
inline std::map<Part, TetCage> build_cages(const TriMesh& templ, const std::vector<SkinWeights>& weights,
                                           const CageBuildOptions& o = {}) {
  std::map<Part, TetCage> cages;
  TriMesh whole = templ;
  whole.face_parts.clear();
  cages[Part::body] = tetrahedralize_solid(whole, o.solid_step);
  cages[Part::body].part_id = Part::body;
  for (const Part p : {Part::upper, Part::lower, Part::face}) {
    bool present = false;
    for (std::size_t f = 0; f < templ.face_count(); ++f) present = present || templ.face_part(f) == p;
    if (present) cages[p] = build_shell_cage(templ, weights, p, o);
  }
  // Vertices buried inside another component would drag nodes along the wrong bone.
  const auto hidden = occluded_faces(templ);
  std::vector<bool> visible(templ.vertex_count(), false);
  for (std::size_t f = 0; f < templ.face_count(); ++f)
    if (!hidden[f])
      for (int v : templ.faces[f]) visible[static_cast<std::size_t>(v)] = true;
  transfer_skin_weights(cages[Part::body], templ.positions, weights, &visible);
  return cages;
}

// ---------------------------------------------------------------------------
// Gaussian initialization

/// Mean distance from each point to its k nearest others (uniform grid).
inline std::vector<double> knn_mean_distance(const std::vector<Vec3>& pts, int k) {
  std::vector<double> out(pts.size(), 0.0);
  if (pts.size() < 2) return out;
  Vec3 lo = pts[0], hi = pts[0];
  for (const auto& p : pts) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  const Vec3 ext = hi - lo;
  const double big = std::max(ext.maxCoeff(), 1e-9);
  // Size cells from the occupied dimensions only, so flat or thin sets stay cheap.
  double measure = 1.0;
  int dims = 0;
  for (int a = 0; a < 3; ++a)
    if (ext[a] > 1e-3 * big) {
      measure *= ext[a];
      ++dims;
    }
  const double cell = std::max(std::pow(measure * 4.0 / static_cast<double>(pts.size()), 1.0 / dims), big * 1e-4);
  auto cell_of = [&](const Vec3& p) {
    return std::array<long, 3>{static_cast<long>((p.x() - lo.x()) / cell), static_cast<long>((p.y() - lo.y()) / cell),
                               static_cast<long>((p.z() - lo.z()) / cell)};
  };
  auto key = [](long i, long j, long l) {
    return (static_cast<std::uint64_t>(i + 1) << 42) ^ (static_cast<std::uint64_t>(j + 1) << 21) ^
           static_cast<std::uint64_t>(l + 1);
  };
  std::unordered_map<std::uint64_t, std::vector<int>> grid;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = cell_of(pts[i]);
    grid[key(c[0], c[1], c[2])].push_back(static_cast<int>(i));
  }
  const int kk = std::min<int>(k, static_cast<int>(pts.size()) - 1);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    const auto c = cell_of(pts[i]);
    std::vector<double> best;
    for (long r = 1;; ++r) {
      best.clear();
      for (long a = c[0] - r; a <= c[0] + r; ++a)
        for (long b = c[1] - r; b <= c[1] + r; ++b)
          for (long d = c[2] - r; d <= c[2] + r; ++d) {
            auto it = grid.find(key(a, b, d));
            if (it == grid.end()) continue;
            for (int j : it->second)
              if (j != static_cast<int>(i)) best.push_back((pts[static_cast<std::size_t>(j)] - pts[i]).norm());
          }
      // Neighbours within r·cell are exact once k of them are found.
      std::sort(best.begin(), best.end());
      if (static_cast<int>(best.size()) >= kk && best[static_cast<std::size_t>(kk - 1)] <= r * cell) break;
      if (r > 4096) break;
    }
    double s = 0;
    for (int q = 0; q < kk; ++q) s += best[static_cast<std::size_t>(q)];
    out[i] = s / kk;
  }
  return out;
}

struct InitOptions {
  double opacity = 0.8;
  double feature_std = 0.05;
  double min_scale = 1e-4;
};

struct InitResult {
  std::vector<Gaussian3D> gaussians;
  /// Samples too far outside their cage to extrapolate (snapped onto the nearest tet).
  int embedding_failures = 0;
  /// Source face per Gaussian.
  std::vector<int> faces;
};

/// Area-weighted surface samples, split across labels in proportion to
/// their visible area. Rotation columns: (edge tangent, bitangent, normal).
/// Isotropic scale = mean distance to the 3 nearest samples. Each sample is
/// embedded into the cage of its label (or the body cage when that label has none).
inline InitResult init_gaussians(const TriMesh& templ, const std::map<Part, TetCage>& cages, int count,
                                 std::uint64_t seed, const InitOptions& opt = {},
                                 const std::vector<bool>* hidden = nullptr) {
  std::array<std::vector<int>, kPartCount> faces_of;
  std::array<double, kPartCount> area{};
  for (std::size_t f = 0; f < templ.face_count(); ++f) {
    if (hidden && (*hidden)[f]) continue;
    const double a = templ.face_area(f);
    if (!(a > 0)) continue;
    const int p = static_cast<int>(templ.face_part(f));
    faces_of[static_cast<std::size_t>(p)].push_back(static_cast<int>(f));
    area[static_cast<std::size_t>(p)] += a;
  }
  int present = 0;
  double total = 0;
  for (int p = 0; p < kPartCount; ++p)
    if (area[static_cast<std::size_t>(p)] > 0) {
      ++present;
      total += area[static_cast<std::size_t>(p)];
    }
  if (present == 0) throw ConfigError("template has no sampleable faces");
  if (count < present) throw ConfigError("gaussian count must be at least the number of parts");
  // Largest-remainder allocation with one sample minimum per present part.
  std::array<int, kPartCount> alloc{};
  std::vector<std::pair<double, int>> rem;
  int used = 0;
  for (int p = 0; p < kPartCount; ++p) {
    if (area[static_cast<std::size_t>(p)] <= 0) continue;
    const double exact = (count - present) * area[static_cast<std::size_t>(p)] / total;
    alloc[static_cast<std::size_t>(p)] = 1 + static_cast<int>(std::floor(exact));
    used += alloc[static_cast<std::size_t>(p)];
    rem.push_back({exact - std::floor(exact), p});
  }
  std::stable_sort(rem.begin(), rem.end(), [](auto a, auto b) { return a.first > b.first; });
  for (std::size_t i = 0; used < count; ++i, ++used) ++alloc[static_cast<std::size_t>(rem[i % rem.size()].second)];

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  InitResult res;
  for (int p = 0; p < kPartCount; ++p) {
    const auto& fl = faces_of[static_cast<std::size_t>(p)];
    if (fl.empty()) continue;
    std::vector<double> cdf;
    double acc = 0;
    for (int f : fl) {
      acc += templ.face_area(static_cast<std::size_t>(f));
      cdf.push_back(acc);
    }
    for (int k = 0; k < alloc[static_cast<std::size_t>(p)]; ++k) {
      const double r = u01(rng) * acc;
      const auto it = std::upper_bound(cdf.begin(), cdf.end(), r);
      const int f = fl[std::min<std::size_t>(static_cast<std::size_t>(it - cdf.begin()), fl.size() - 1)];
      const auto& t = templ.faces[static_cast<std::size_t>(f)];
      const Vec3 &a = templ.positions[t[0]], &b = templ.positions[t[1]], &c = templ.positions[t[2]];
      double s1 = std::sqrt(u01(rng)), s2 = u01(rng);
      Gaussian3D g;
      g.mean_canonical = (1 - s1) * a + s1 * (1 - s2) * b + s1 * s2 * c;
      const Vec3 n = (b - a).cross(c - a).normalized();
      const Vec3 tx = (b - a).normalized();
      Mat3 rot;
      rot.col(0) = tx;
      rot.col(1) = n.cross(tx);
      rot.col(2) = n;
      g.rotation = quat_from_rotation(rot);
      g.opacity_logit = logit(opt.opacity);
      for (int q = 0; q < 48; ++q) g.color_feature[q] = opt.feature_std * normal(rng);
      g.part_id = static_cast<Part>(p);
      res.gaussians.push_back(g);
      res.faces.push_back(f);
    }
  }
  std::vector<Vec3> pts;
  for (const auto& g : res.gaussians) pts.push_back(g.mean_canonical);
  const auto d = knn_mean_distance(pts, 3);
  for (std::size_t i = 0; i < pts.size(); ++i)
    res.gaussians[i].log_scale = Vec3::Constant(std::log(std::max(d[i], opt.min_scale)));
  if (!cages.empty()) {
    // A shell extruded from this template holds face k's prism in tets
    // 3k..3k+2, k counted over the faces of that label.
    std::vector<int> rank(templ.face_count(), -1);
    std::array<int, kPartCount> labelled{};
    for (std::size_t f = 0; f < templ.face_count(); ++f)
      rank[f] = labelled[static_cast<std::size_t>(templ.face_part(f))]++;
    std::map<Part, std::unique_ptr<TetLocator>> loc;
    for (std::size_t i = 0; i < res.gaussians.size(); ++i) {
      Gaussian3D& g = res.gaussians[i];
      auto it = cages.find(g.part_id);
      if (it == cages.end()) it = cages.find(Part::body);
      if (it == cages.end()) it = cages.begin();
      const TetCage& cage = it->second;
      const auto f = static_cast<std::size_t>(res.faces[i]);
      if (it->first != Part::body && it->first == g.part_id &&
          cage.tet_count() == 3 * static_cast<std::size_t>(labelled[static_cast<std::size_t>(g.part_id)])) {
        // Prefer the sample's own prism: overlapping shells near a junction
        // would otherwise hand it a neighbour's prism with other weights.
        int best = -1;
        Vec4 bb;
        for (int t = 3 * rank[f]; t < 3 * rank[f] + 3; ++t) {
          const Vec4 b = cage.barycentric(t, g.mean_canonical);
          if (best < 0 || b.minCoeff() > bb.minCoeff()) {
            best = t;
            bb = b;
          }
        }
        if (bb.minCoeff() >= -1e-9) {
          g.tet_index = best;
          g.barycentric = bb;
          continue;
        }
      }
      auto& l = loc[it->first];
      if (!l) l = std::make_unique<TetLocator>(cage);
      const auto r = l->locate(g.mean_canonical);
      g.tet_index = r.tet;
      g.barycentric = r.barycentric;
      if (!r.inside) {
        // Just outside the cage: extrapolate from the nearest tet when the
        // coordinates stay inside the optimiser's box, otherwise snap.
        Vec4 b = cage.barycentric(r.tet, g.mean_canonical);
        if (project_barycentric(b.data())) {
          ++res.embedding_failures;
          b = r.barycentric;
          g.mean_canonical = deform_point(cage, cage.nodes_canonical, r.tet, b);
        }
        g.barycentric = b;
      }
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Avatar

struct AvatarOptions {
  int pe_octaves = 6;
  int frame_embedding_dim = 8;
  int hidden_width = kHiddenWidth;
  int hidden_layers = 3;
  HeadScales heads;
  bool no_cage = false;
  bool sh_color = false;
  bool single_layer = false;
};

struct AvatarPart {
  Part part = Part::body;
  int begin = 0, end = 0;  // Gaussian range
  TetCage cage;
  Mlp psi, pi, gamma;
  MatX psi_input;  // encodings of canonical nodes (constant)

  int size() const { return end - begin; }
};

struct RenderOptions {
  Vec3 background = Vec3::Zero();
  RasterSettings raster;
  /// Restricts compositing to one layer's Gaussians.
  std::optional<Part> part_filter;
  /// Skip Ψ and Π (deltas exactly zero).
  bool disable_deformation_nets = false;
};

struct PartCache {
  std::vector<Vec3> nodes_posed;
  std::vector<Mat3> j;
  Mlp::Cache psi, pi, gamma;
  MatX psi_raw, pi_raw, gamma_raw;
  PiDeltas deltas;
  GammaOut gout;
};

struct FrameCache {
  VecX pose;
  std::vector<Mat4> skin;
  Camera cam;
  int frame = -1;
  bool nets_disabled = false;
  std::vector<PartCache> parts;
  MatX mean_posed, qsum, scale, view;  // view = μ̂ − camera center
  MatX color;
  VecX opacity;
  std::vector<Covariance3> cov_canon, cov_posed;
  std::vector<Mat3> lin;  // LBS-only mode: blended linear part per Gaussian
  std::vector<int> splat_of;
  std::vector<int> gauss_of_splat;
  std::vector<Splat2D> splats;
  RenderState rstate;
  RenderOutput out;
  double neo = 0.0;
};

class Avatar {
public:
  AvatarOptions opts;
  Skeleton skeleton;
  TriMesh template_mesh;
  std::vector<SkinWeights> template_weights;
  std::vector<AvatarPart> parts;

  // Per-Gaussian tensors, one column per Gaussian, grouped by part range.
  MatX bary, mean, rot, log_scale, opacity_logit, features;
  MatX g_bary, g_mean, g_rot, g_log_scale, g_opacity_logit, g_features;
  std::vector<int> tet;
  std::vector<Part> label;
  std::vector<SkinWeights> skin;  // LBS-only mode
  FrameEmbedding frames;
  int embedding_failures = 0;  // at creation

  int gaussian_count() const { return static_cast<int>(rot.cols()); }
  int pose_dim() const { return skeleton.pose_dim(); }

  /// Builds networks and Gaussian tensors. `cages` must hold a body cage
  /// unless `opts.no_cage`.
  static Avatar create(const AvatarOptions& opts, const Skeleton& skel, const TriMesh& templ,
                       const std::vector<SkinWeights>& weights, const std::map<Part, TetCage>& cages,
                       int gaussian_count, int frame_count, std::uint64_t seed, const InitOptions& init = {}) {
    Avatar a;
    a.opts = opts;
    a.skeleton = skel;
    a.template_mesh = templ;
    a.template_weights = weights;
    const auto hidden = occluded_faces(templ);
    std::map<Part, TetCage> embed_cages;
    if (!opts.no_cage) {
      if (!cages.count(Part::body)) throw EmptyCage("a body cage is required");
      if (opts.single_layer)
        embed_cages[Part::body] = cages.at(Part::body);
      else
        embed_cages = cages;
    }
    auto init_res = init_gaussians(templ, embed_cages, gaussian_count, seed, init, &hidden);
    auto& gs = init_res.gaussians;
    a.embedding_failures = init_res.embedding_failures;
    // Group Gaussians by owning slot.
    std::vector<Part> slot_parts;
    auto slot_of = [&](Part p) -> Part {
      if (opts.single_layer) return Part::body;
      if (!opts.no_cage && !embed_cages.count(p)) return Part::body;
      return p;
    };
    for (const auto& g : gs) {
      const Part s = slot_of(g.part_id);
      if (std::find(slot_parts.begin(), slot_parts.end(), s) == slot_parts.end()) slot_parts.push_back(s);
    }
    std::sort(slot_parts.begin(), slot_parts.end());
    std::vector<std::size_t> order(gs.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return slot_of(gs[x].part_id) < slot_of(gs[y].part_id); });
    const int n = static_cast<int>(gs.size());
    a.bary.resize(4, n);
    a.mean.resize(3, n);
    a.rot.resize(4, n);
    a.log_scale.resize(3, n);
    a.opacity_logit.resize(1, n);
    a.features.resize(kColorFeatureDim, n);
    a.tet.resize(static_cast<std::size_t>(n));
    a.label.resize(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      const auto& g = gs[order[static_cast<std::size_t>(i)]];
      a.bary.col(i) = g.barycentric;
      a.mean.col(i) = g.mean_canonical;
      a.rot.col(i) = quat_canonical(g.rotation);
      a.log_scale.col(i) = g.log_scale;
      a.opacity_logit(0, i) = g.opacity_logit;
      a.features.col(i) = g.color_feature;
      a.tet[static_cast<std::size_t>(i)] = g.tet_index;
      a.label[static_cast<std::size_t>(i)] = g.part_id;
    }
    if (opts.no_cage) {
      a.skin.resize(static_cast<std::size_t>(n));
      for (int i = 0; i < n; ++i) {
        const auto& t = templ.faces[static_cast<std::size_t>(init_res.faces[order[static_cast<std::size_t>(i)]])];
        int best = t[0];
        for (int v : t)
          if ((templ.positions[static_cast<std::size_t>(v)] - a.mean.col(i)).squaredNorm() <
              (templ.positions[static_cast<std::size_t>(best)] - a.mean.col(i)).squaredNorm())
            best = v;
        a.skin[static_cast<std::size_t>(i)] = weights[static_cast<std::size_t>(best)];
      }
    }
    std::mt19937_64 rng(seed ^ 0x5bd1e995ull);
    int begin = 0;
    for (const Part s : slot_parts) {
      AvatarPart ap;
      ap.part = s;
      ap.begin = begin;
      while (begin < n && slot_of(a.label[static_cast<std::size_t>(begin)]) == s) ++begin;
      ap.end = begin;
      if (!opts.no_cage) ap.cage = embed_cages.at(s);
      a.parts.push_back(std::move(ap));
    }
    a.frames = FrameEmbedding(opts.frame_embedding_dim, frame_count);
    a.build_networks(rng);
    a.zero_grad_buffers();
    return a;
  }

  std::vector<int> hidden_widths() const { return std::vector<int>(static_cast<std::size_t>(opts.hidden_layers), opts.hidden_width); }
  int pi_in() const { return opts.no_cage ? 10 : 11; }
  int pi_out() const { return opts.no_cage ? 10 : 11; }
  int gamma_in() const { return 16 + kColorFeatureDim + opts.frame_embedding_dim; }

  /// Shapes networks; Kaiming-uniform init with zero final layers for Ψ and Π.
  void build_networks(std::mt19937_64& rng) {
    for (auto& p : parts) {
      if (!opts.no_cage) {
        p.psi = Mlp(pose_dim(), positional_encoding_dim(opts.pe_octaves, true), hidden_widths(), 3);
        p.psi.init_kaiming(rng, true);
      }
      p.pi = Mlp(pose_dim(), pi_in(), hidden_widths(), pi_out());
      p.pi.init_kaiming(rng, true);
      if (!opts.sh_color) {
        p.gamma = Mlp(pose_dim(), gamma_in(), hidden_widths(), 4);
        p.gamma.init_kaiming(rng, false);
      }
    }
    refresh_encodings();
  }

  void refresh_encodings() {
    for (auto& p : parts)
      if (!opts.no_cage) p.psi_input = psi_inputs(p.cage.nodes_canonical, opts.pe_octaves);
  }

  void zero_grad_buffers() {
    g_bary = MatX::Zero(bary.rows(), bary.cols());
    g_mean = MatX::Zero(mean.rows(), mean.cols());
    g_rot = MatX::Zero(rot.rows(), rot.cols());
    g_log_scale = MatX::Zero(log_scale.rows(), log_scale.cols());
    g_opacity_logit = MatX::Zero(opacity_logit.rows(), opacity_logit.cols());
    g_features = MatX::Zero(features.rows(), features.cols());
  }

  /// Every learnable tensor, in a fixed order.
  ParamList params() {
    ParamList out;
    for (auto& p : parts) {
      const std::string pre = "net." + std::string(part_name(p.part));
      if (!opts.no_cage) p.psi.collect(out, pre + ".psi", "psi");
      p.pi.collect(out, pre + ".pi", "pi");
      if (!opts.sh_color) p.gamma.collect(out, pre + ".gamma", "gamma");
    }
    if (opts.no_cage)
      out.push_back(make_param("gauss.mean", mean, g_mean, "mean"));
    else
      out.push_back(make_param("gauss.barycentric", bary, g_bary, "barycentric"));
    out.push_back(make_param("gauss.rotation", rot, g_rot, "rotation"));
    out.push_back(make_param("gauss.log_scale", log_scale, g_log_scale, "log_scale"));
    out.push_back(make_param("gauss.opacity_logit", opacity_logit, g_opacity_logit, "opacity"));
    out.push_back(make_param("gauss.features", features, g_features, "features"));
    if (!opts.sh_color) frames.collect(out, "frame_embedding");
    return out;
  }

  Vec3 canonical_mean(int i) const {
    if (opts.no_cage) return mean.col(i);
    const auto& p = parts[static_cast<std::size_t>(slot_index(i))];
    return deform_point(p.cage, p.cage.nodes_canonical, tet[static_cast<std::size_t>(i)], bary.col(i));
  }

  int slot_index(int i) const {
    for (std::size_t s = 0; s < parts.size(); ++s)
      if (i >= parts[s].begin && i < parts[s].end) return static_cast<int>(s);
    return -1;
  }

  std::size_t total_tets() const {
    std::size_t n = 0;
    for (const auto& p : parts) n += p.cage.tet_count();
    return n;
  }

  // -------------------------------------------------------------------------
  // Forward

  RenderOutput render(const Pose& pose, const Camera& cam, int frame, const RenderOptions& ro = {},
                      FrameCache* cache = nullptr) const {
    FrameCache local;
    FrameCache& fc = cache ? *cache : local;
    const bool keep = cache != nullptr;
    fc.pose = pose.flatten();
    fc.cam = cam;
    fc.frame = frame;
    fc.nets_disabled = ro.disable_deformation_nets;
    const auto world = forward_kinematics(skeleton, pose);
    fc.skin = skinning_matrices(world, skeleton.inverse_bind());
    const int n = gaussian_count();
    fc.mean_posed.resize(3, n);
    fc.qsum.resize(4, n);
    fc.scale.resize(3, n);
    fc.view.resize(3, n);
    fc.color.resize(3, n);
    fc.opacity.resize(n);
    fc.cov_canon.resize(static_cast<std::size_t>(n));
    fc.cov_posed.resize(static_cast<std::size_t>(n));
    if (opts.no_cage) fc.lin.resize(static_cast<std::size_t>(n));
    fc.parts.assign(parts.size(), PartCache{});
    const Vec3 eye = cam.center();
    const VecX emb = opts.sh_color ? VecX() : frames.lookup(frame);
    std::vector<Mat3> all_j;
    for (std::size_t s = 0; s < parts.size(); ++s) {
      const AvatarPart& p = parts[s];
      PartCache& pc = fc.parts[s];
      const int m = p.size();
      if (!opts.no_cage) {
        pc.nodes_posed = lbs_points(p.cage.nodes_canonical, p.cage.node_skin_weights, world, skeleton.inverse_bind());
        if (!ro.disable_deformation_nets) {
          pc.psi_raw = p.psi.forward(fc.pose, p.psi_input, keep ? &pc.psi : nullptr);
          const MatX dv = psi_head(pc.psi_raw, opts.heads.cage_offset);
          for (std::size_t k = 0; k < pc.nodes_posed.size(); ++k) pc.nodes_posed[k] += dv.col(static_cast<Eigen::Index>(k));
        }
        pc.j = deformation_gradients(p.cage, pc.nodes_posed);
        all_j.insert(all_j.end(), pc.j.begin(), pc.j.end());
      }
      if (m == 0) continue;
      // Π
      if (ro.disable_deformation_nets) {
        pc.deltas.barycentric = MatX::Zero(opts.no_cage ? 3 : 4, m);
        pc.deltas.log_scale = MatX::Zero(3, m);
        pc.deltas.rotation = MatX::Zero(4, m);
      } else {
        MatX x(pi_in(), m);
        if (opts.no_cage)
          x.topRows(3) = mean.middleCols(p.begin, m);
        else
          x.topRows(4) = bary.middleCols(p.begin, m);
        x.middleRows(opts.no_cage ? 3 : 4, 4) = rot.middleCols(p.begin, m);
        x.bottomRows(3) = log_scale.middleCols(p.begin, m);
        pc.pi_raw = p.pi.forward(fc.pose, x, keep ? &pc.pi : nullptr);
        pc.deltas = pi_head(pc.pi_raw, opts.heads, opts.no_cage);
      }
      for (int k = 0; k < m; ++k) {
        const int i = p.begin + k;
        const auto ui = static_cast<std::size_t>(i);
        const Vec4 qs = rot.col(i) + pc.deltas.rotation.col(k);
        const Vec3 sc = (log_scale.col(i) + pc.deltas.log_scale.col(k)).array().exp();
        fc.qsum.col(i) = qs;
        fc.scale.col(i) = sc;
        fc.cov_canon[ui] = compose_covariance(qs.normalized(), sc);
        if (opts.no_cage) {
          const Mat34 a = blend_transform(skin[ui], fc.skin);
          fc.lin[ui] = a.leftCols<3>();
          fc.mean_posed.col(i) = a.leftCols<3>() * (mean.col(i) + pc.deltas.barycentric.col(k)) + a.col(3);
          fc.cov_posed[ui] = transform_covariance(fc.cov_canon[ui], fc.lin[ui]);
        } else {
          const Vec4 b = bary.col(i) + pc.deltas.barycentric.col(k);
          fc.mean_posed.col(i) = deform_point(p.cage, pc.nodes_posed, tet[ui], b);
          fc.cov_posed[ui] = transform_covariance(fc.cov_canon[ui], pc.j[static_cast<std::size_t>(tet[ui])]);
        }
        fc.view.col(i) = fc.mean_posed.col(i) - eye;
      }
      // Γ or SH color
      if (opts.sh_color) {
        for (int k = 0; k < m; ++k) {
          const int i = p.begin + k;
          const Vec48 h = features.col(i);
          fc.color.col(i) = sh_color_eval(h, fc.view.col(i).normalized());
          fc.opacity[i] = sigmoid(opacity_logit(0, i));
        }
      } else {
        MatX x(gamma_in(), m);
        for (int k = 0; k < m; ++k) x.col(k).head<16>() = sh_basis_unchecked(fc.view.col(p.begin + k).normalized());
        x.middleRows(16, kColorFeatureDim) = features.middleCols(p.begin, m);
        x.bottomRows(opts.frame_embedding_dim).colwise() = emb;
        pc.gamma_raw = p.gamma.forward(fc.pose, x, keep ? &pc.gamma : nullptr);
        const VecX bias = opacity_logit.middleCols(p.begin, m).transpose();
        pc.gout = gamma_head(pc.gamma_raw, &bias);
        fc.color.middleCols(p.begin, m) = pc.gout.color;
        fc.opacity.segment(p.begin, m) = pc.gout.opacity;
      }
    }
    fc.neo = 0.0;
    // Splats
    fc.splats.clear();
    fc.gauss_of_splat.clear();
    fc.splat_of.assign(static_cast<std::size_t>(n), -1);
    for (int i = 0; i < n; ++i) {
      if (ro.part_filter && label[static_cast<std::size_t>(i)] != *ro.part_filter) continue;
      auto sp = project_gaussian(fc.mean_posed.col(i), fc.cov_posed[static_cast<std::size_t>(i)], cam, ro.raster);
      if (!sp) continue;
      sp->color = fc.color.col(i);
      sp->part_color = part_color(label[static_cast<std::size_t>(i)]);
      sp->alpha_base = fc.opacity[i];
      sp->id = i;
      fc.splat_of[static_cast<std::size_t>(i)] = static_cast<int>(fc.splats.size());
      fc.gauss_of_splat.push_back(i);
      fc.splats.push_back(*sp);
    }
    fc.out = rasterize(fc.splats, cam, ro.background, ro.raster, &fc.rstate);
    return fc.out;
  }

  /// Mean Neo-Hookean energy over every cage tet for the cached frame.
  double neo_energy(const FrameCache& fc, const NeoParams& np) const {
    std::vector<Mat3> all;
    for (const auto& pc : fc.parts) all.insert(all.end(), pc.j.begin(), pc.j.end());
    return neo_hookean_energy(all, np);
  }

  // -------------------------------------------------------------------------
  // Backward

  /// Accumulates parameter gradients of
  ///   ⟨grad_color, C̄⟩ + ⟨grad_part, P̄⟩ + neo_weight · L_neo.
  void backward(const FrameCache& fc, const Image& grad_color, const Image& grad_part, const RenderOptions& ro,
                double neo_weight, const NeoParams& np = {}) {
    const int n = gaussian_count();
    const auto sg = rasterize_backward(fc.splats, fc.cam, fc.rstate, fc.out, grad_color, grad_part, ro.raster);
    MatX d_mean_posed = MatX::Zero(3, n);
    MatX d_color = MatX::Zero(3, n);
    VecX d_opacity = VecX::Zero(n);
    std::vector<Covariance3> d_cov_posed(static_cast<std::size_t>(n));
    for (std::size_t s = 0; s < fc.splats.size(); ++s) {
      const int i = fc.gauss_of_splat[s];
      const auto pg = project_gaussian_backward(fc.mean_posed.col(i), fc.cov_posed[static_cast<std::size_t>(i)], fc.cam,
                                                sg[s].mean2d, sg[s].cov2d);
      d_mean_posed.col(i) = pg.mean3d;
      d_cov_posed[static_cast<std::size_t>(i)] = pg.cov3d;
      d_color.col(i) = sg[s].color;
      d_opacity[i] = sg[s].alpha_base;
    }
    std::size_t tet_offset = 0;
    std::size_t total = total_tets();
    for (std::size_t s = 0; s < parts.size(); ++s) {
      AvatarPart& p = parts[s];
      const PartCache& pc = fc.parts[s];
      const int m = p.size();
      std::vector<Mat3> d_j(pc.j.size(), Mat3::Zero());
      if (!opts.no_cage && neo_weight != 0.0 && total > 0) {
        // Mean over all tets: rescale the per-part mean gradient.
        const auto gn = neo_hookean_backward(pc.j, np, neo_weight * static_cast<double>(pc.j.size()) /
                                                           static_cast<double>(total));
        for (std::size_t t = 0; t < gn.size(); ++t) d_j[t] += gn[t];
      }
      tet_offset += pc.j.size();
      std::vector<Vec3> d_nodes(pc.nodes_posed.size(), Vec3::Zero());
      if (m > 0) {
        // Color / opacity heads.
        if (opts.sh_color) {
          for (int k = 0; k < m; ++k) {
            const int i = p.begin + k;
            const Vec3 v = fc.view.col(i);
            const Vec48 h = features.col(i);
            const auto g = sh_color_eval_backward(h, v.normalized(), d_color.col(i));
            g_features.col(i) += g.coeffs;
            d_mean_posed.col(i) += normalize_backward(v, g.direction);
            const double o = fc.opacity[i];
            g_opacity_logit(0, i) += d_opacity[i] * o * (1.0 - o);
          }
        } else {
          const MatX graw = gamma_head_backward(pc.gout, d_color.middleCols(p.begin, m), d_opacity.segment(p.begin, m));
          g_opacity_logit.middleCols(p.begin, m) += graw.row(3);
          const MatX dx = p.gamma.backward(pc.gamma, graw, true);
          g_features.middleCols(p.begin, m) += dx.middleRows(16, kColorFeatureDim);
          if (fc.frame >= 0 && fc.frame < frames.frames())
            frames.grad.col(fc.frame) += dx.bottomRows(opts.frame_embedding_dim).rowwise().sum();
          for (int k = 0; k < m; ++k) {
            const int i = p.begin + k;
            const Vec3 v = fc.view.col(i);
            const Vec16 dsh = dx.col(k).head<16>();
            d_mean_posed.col(i) += normalize_backward(v, sh_basis_backward(v.normalized(), dsh));
          }
        }
        // Geometry.
        PiDeltas dd;
        dd.barycentric = MatX::Zero(opts.no_cage ? 3 : 4, m);
        dd.log_scale = MatX::Zero(3, m);
        dd.rotation = MatX::Zero(4, m);
        for (int k = 0; k < m; ++k) {
          const int i = p.begin + k;
          const auto ui = static_cast<std::size_t>(i);
          const Vec4 qs = fc.qsum.col(i);
          const Vec4 qn = qs.normalized();
          const Vec3 sc = fc.scale.col(i);
          Covariance3 d_cov;
          if (opts.no_cage) {
            const auto tb = transform_covariance_backward(fc.cov_canon[ui], fc.lin[ui], d_cov_posed[ui]);
            d_cov = tb.cov;
            const Vec3 dmc = fc.lin[ui].transpose() * d_mean_posed.col(i);
            g_mean.col(i) += dmc;
            dd.barycentric.col(k) = dmc;
          } else {
            const std::size_t t = static_cast<std::size_t>(tet[ui]);
            const auto tb = transform_covariance_backward(fc.cov_canon[ui], pc.j[t], d_cov_posed[ui]);
            d_cov = tb.cov;
            d_j[t] += tb.j;
            const Vec4 b = bary.col(i) + pc.deltas.barycentric.col(k);
            const Vec4 db = deform_point_backward(p.cage, pc.nodes_posed, tet[ui], b, d_mean_posed.col(i), d_nodes);
            g_bary.col(i) += db;
            dd.barycentric.col(k) = db;
          }
          const auto cg = compose_covariance_backward(qn, sc, d_cov);
          const Vec4 dqs = normalize_backward(qs, cg.rotation);
          g_rot.col(i) += dqs;
          dd.rotation.col(k) = dqs;
          const Vec3 dls = cg.scale.cwiseProduct(sc);
          g_log_scale.col(i) += dls;
          dd.log_scale.col(k) = dls;
        }
        if (!fc.nets_disabled) {
          const MatX draw = pi_head_backward(fc.parts[s].pi_raw, opts.heads, dd, opts.no_cage);
          const MatX dx = p.pi.backward(pc.pi, draw, true);
          if (opts.no_cage)
            g_mean.middleCols(p.begin, m) += dx.topRows(3);
          else
            g_bary.middleCols(p.begin, m) += dx.topRows(4);
          g_rot.middleCols(p.begin, m) += dx.middleRows(opts.no_cage ? 3 : 4, 4);
          g_log_scale.middleCols(p.begin, m) += dx.bottomRows(3);
        }
      }
      if (!opts.no_cage) {
        for (std::size_t t = 0; t < d_j.size(); ++t)
          if (!d_j[t].isZero(0.0)) deformation_gradient_backward(p.cage, static_cast<int>(t), d_j[t], d_nodes);
        if (!fc.nets_disabled) {
          MatX dv(3, static_cast<Eigen::Index>(d_nodes.size()));
          for (std::size_t k = 0; k < d_nodes.size(); ++k) dv.col(static_cast<Eigen::Index>(k)) = d_nodes[k];
          p.psi.backward(pc.psi, psi_head_backward(pc.psi_raw, opts.heads.cage_offset, dv), false);
        }
      }
    }
    (void)tet_offset;
  }
};

} // namespace d3ga
