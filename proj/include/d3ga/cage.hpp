#pragma once

// Tetrahedral cages: construction (prism shells and cube lattices), point
// embedding, deformation gradients and the Neo-Hookean regularizer.

#include "d3ga/binary_io.hpp"
#include "d3ga/common.hpp"
#include "d3ga/mesh.hpp"
#include "d3ga/skeleton.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <map>
#include <unordered_map>
#include <vector>

namespace d3ga {

using Tet = std::array<int, 4>;

inline double signed_tet_volume(const Vec3& a, const Vec3& b, const Vec3& c, const Vec3& d) {
  return (b - a).dot((c - a).cross(d - a)) / 6.0;
}

/// Edge matrix with columns (v1-v0, v2-v0, v3-v0).
inline Mat3 edge_matrix(const Vec3& v0, const Vec3& v1, const Vec3& v2, const Vec3& v3) {
  Mat3 e;
  e.col(0) = v1 - v0;
  e.col(1) = v2 - v0;
  e.col(2) = v3 - v0;
  return e;
}

inline constexpr double kMinTetVolume = 1e-12;

struct TetCage {
  std::vector<Vec3> nodes_canonical;
  std::vector<Tet> tets;
  Part part_id = Part::body;
  std::vector<SkinWeights> node_skin_weights;
  std::vector<Mat3> inv_canonical_edges;
  std::vector<double> canonical_volumes;

  std::size_t node_count() const { return nodes_canonical.size(); }
  std::size_t tet_count() const { return tets.size(); }

  /// Recomputes E⁻¹ and volumes; throws DegenerateTet on a non-positive tet.
  void finalize() {
    inv_canonical_edges.resize(tets.size());
    canonical_volumes.resize(tets.size());
    for (std::size_t t = 0; t < tets.size(); ++t) {
      const auto& k = tets[t];
      for (int i : k)
        if (i < 0 || i >= static_cast<int>(nodes_canonical.size()))
          throw FormatError("tet node index out of range");
      const Vec3& a = nodes_canonical[static_cast<std::size_t>(k[0])];
      const Vec3& b = nodes_canonical[static_cast<std::size_t>(k[1])];
      const Vec3& c = nodes_canonical[static_cast<std::size_t>(k[2])];
      const Vec3& d = nodes_canonical[static_cast<std::size_t>(k[3])];
      const double vol = signed_tet_volume(a, b, c, d);
      if (!(vol > kMinTetVolume))
        throw DegenerateTet("tet " + std::to_string(t) + " has volume " + std::to_string(vol));
      canonical_volumes[t] = vol;
      inv_canonical_edges[t] = edge_matrix(a, b, c, d).inverse();
    }
    if (node_skin_weights.size() != nodes_canonical.size())
      node_skin_weights.assign(nodes_canonical.size(), SkinWeights::single(0));
  }

  Vec3 node(const std::vector<Vec3>& nodes, int tet, int corner) const {
    return nodes[static_cast<std::size_t>(tets[static_cast<std::size_t>(tet)][static_cast<std::size_t>(corner)])];
  }

  Vec3 centroid(int tet) const {
    Vec3 c = Vec3::Zero();
    for (int k = 0; k < 4; ++k) c += node(nodes_canonical, tet, k);
    return 0.25 * c;
  }

  /// Barycentric coordinates of x with respect to a canonical tet.
  Vec4 barycentric(int tet, const Vec3& x) const {
    const Vec3 r = inv_canonical_edges[static_cast<std::size_t>(tet)] *
                   (x - node(nodes_canonical, tet, 0));
    return {1.0 - r.sum(), r[0], r[1], r[2]};
  }

  double total_volume() const {
    double v = 0.0;
    for (double x : canonical_volumes) v += x;
    return v;
  }
};

/// Concatenates cages (used by the single-layer configuration).
inline TetCage merge_cages(const std::vector<const TetCage*>& cages, Part part) {
  TetCage out;
  out.part_id = part;
  for (const TetCage* c : cages) {
    const int base = static_cast<int>(out.nodes_canonical.size());
    out.nodes_canonical.insert(out.nodes_canonical.end(), c->nodes_canonical.begin(),
                               c->nodes_canonical.end());
    out.node_skin_weights.insert(out.node_skin_weights.end(), c->node_skin_weights.begin(),
                                 c->node_skin_weights.end());
    for (const auto& t : c->tets) out.tets.push_back({t[0] + base, t[1] + base, t[2] + base, t[3] + base});
  }
  out.finalize();
  return out;
}

// ---------------------------------------------------------------------------
// Shell cage: every triangle extruded along vertex normals into a prism, each
// prism split into three tets. The split orders the triangle's vertices by
// global index, so the diagonal on every shared quad face runs from the higher
// inner vertex to the lower outer vertex and neighbouring prisms agree.

inline TetCage tetrahedralize_shell(const TriMesh& surface, double thickness,
                                    const std::vector<Vec3>* normals = nullptr) {
  const std::vector<Vec3> n = normals ? *normals : surface.vertex_normals();
  const int nv = static_cast<int>(surface.vertex_count());
  TetCage cage;
  cage.part_id = surface.face_parts.empty() ? Part::body : surface.face_parts.front();
  cage.nodes_canonical.resize(static_cast<std::size_t>(2 * nv));
  for (int i = 0; i < nv; ++i) {
    cage.nodes_canonical[static_cast<std::size_t>(i)] = surface.positions[static_cast<std::size_t>(i)];
    cage.nodes_canonical[static_cast<std::size_t>(nv + i)] =
        surface.positions[static_cast<std::size_t>(i)] + thickness * n[static_cast<std::size_t>(i)];
  }
  for (std::size_t f = 0; f < surface.face_count(); ++f) {
    std::array<int, 3> v = surface.faces[f];
    // Sorting is a permutation of a ccw triangle; odd permutations flip the
    // expected orientation of all three tets.
    int swaps = 0;
    for (int a = 0; a < 2; ++a)
      for (int b = 0; b < 2 - a; ++b)
        if (v[static_cast<std::size_t>(b)] > v[static_cast<std::size_t>(b + 1)]) {
          std::swap(v[static_cast<std::size_t>(b)], v[static_cast<std::size_t>(b + 1)]);
          ++swaps;
        }
    const double expected = (swaps % 2 == 0) ? 1.0 : -1.0;
    const int t0 = v[0], t1 = v[1], t2 = v[2];
    const std::array<Tet, 3> prism{{{t0, t1, t2, t0 + nv}, {t1, t2, t0 + nv, t1 + nv},
                                    {t2, t0 + nv, t1 + nv, t2 + nv}}};
    for (Tet t : prism) {
      const double vol = expected * signed_tet_volume(cage.nodes_canonical[static_cast<std::size_t>(t[0])],
                                                      cage.nodes_canonical[static_cast<std::size_t>(t[1])],
                                                      cage.nodes_canonical[static_cast<std::size_t>(t[2])],
                                                      cage.nodes_canonical[static_cast<std::size_t>(t[3])]);
      if (!(vol > kMinTetVolume))
        throw DegenerateTet("extrusion of triangle " + std::to_string(f) +
                            " produces an inverted or flat tet (volume " + std::to_string(vol) + ")");
      if (expected < 0.0) std::swap(t[2], t[3]);
      cage.tets.push_back(t);
    }
  }
  cage.finalize();
  return cage;
}

// ---------------------------------------------------------------------------
// Solid cage: cube lattice centred on the surface bounding box, cubes kept
// when their centre is inside, five tets per cube with alternating mirror
// pattern for conforming faces, boundary nodes snapped onto the surface.

inline TetCage tetrahedralize_solid(const TriMesh& surface, double lattice_step) {
  if (!(lattice_step > 0.0)) throw ConfigError("lattice step must be positive");
  Vec3 lo = Vec3::Constant(std::numeric_limits<double>::infinity());
  Vec3 hi = -lo;
  for (const auto& p : surface.positions) {
    lo = lo.cwiseMin(p);
    hi = hi.cwiseMax(p);
  }
  std::array<int, 3> n{};
  Vec3 origin;
  for (int a = 0; a < 3; ++a) {
    const double extent = hi[a] - lo[a];
    n[static_cast<std::size_t>(a)] = std::max(1, static_cast<int>(std::ceil(extent / lattice_step - 1e-9)));
    origin[a] = 0.5 * (lo[a] + hi[a]) - 0.5 * lattice_step * n[static_cast<std::size_t>(a)];
  }
  const InsideTester inside(surface);
  auto cube_index = [&](int i, int j, int k) { return (k * n[1] + j) * n[0] + i; };
  std::vector<char> kept(static_cast<std::size_t>(n[0] * n[1] * n[2]), 0);
  int kept_count = 0;
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        const Vec3 c = origin + lattice_step * Vec3(i + 0.5, j + 0.5, k + 0.5);
        if (inside.inside(c)) {
          kept[static_cast<std::size_t>(cube_index(i, j, k))] = 1;
          ++kept_count;
        }
      }
  if (kept_count == 0) throw EmptyCage("no lattice cube centre falls inside the surface");

  auto is_kept = [&](int i, int j, int k) {
    if (i < 0 || j < 0 || k < 0 || i >= n[0] || j >= n[1] || k >= n[2]) return false;
    return kept[static_cast<std::size_t>(cube_index(i, j, k))] != 0;
  };

  TetCage cage;
  cage.part_id = Part::body;
  std::map<std::array<int, 3>, int> node_id;
  auto node_at = [&](int i, int j, int k) {
    const std::array<int, 3> key{i, j, k};
    auto it = node_id.find(key);
    if (it != node_id.end()) return it->second;
    const int id = static_cast<int>(cage.nodes_canonical.size());
    cage.nodes_canonical.push_back(origin + lattice_step * Vec3(i, j, k));
    node_id.emplace(key, id);
    return id;
  };

  static constexpr std::array<Tet, 5> kEven{{{1, 2, 4, 7}, {0, 1, 2, 4}, {3, 1, 7, 2}, {5, 1, 4, 7}, {6, 2, 7, 4}}};
  static constexpr std::array<Tet, 5> kOdd{{{0, 3, 5, 6}, {1, 0, 3, 5}, {2, 0, 6, 3}, {4, 0, 5, 6}, {7, 3, 6, 5}}};
  std::vector<char> boundary;
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) {
        if (!is_kept(i, j, k)) continue;
        std::array<int, 8> corner{};
        for (int c = 0; c < 8; ++c)
          corner[static_cast<std::size_t>(c)] = node_at(i + (c & 1), j + ((c >> 1) & 1), k + ((c >> 2) & 1));
        boundary.resize(cage.nodes_canonical.size(), 0);
        const auto& pattern = ((i + j + k) % 2 == 0) ? kEven : kOdd;
        for (const Tet& local : pattern) {
          Tet t{corner[static_cast<std::size_t>(local[0])], corner[static_cast<std::size_t>(local[1])],
                corner[static_cast<std::size_t>(local[2])], corner[static_cast<std::size_t>(local[3])]};
          const double vol = signed_tet_volume(cage.nodes_canonical[static_cast<std::size_t>(t[0])],
                                               cage.nodes_canonical[static_cast<std::size_t>(t[1])],
                                               cage.nodes_canonical[static_cast<std::size_t>(t[2])],
                                               cage.nodes_canonical[static_cast<std::size_t>(t[3])]);
          if (vol < 0.0) std::swap(t[2], t[3]);
          cage.tets.push_back(t);
        }
        // Exposed faces mark their four corners as boundary nodes.
        const std::array<std::array<int, 3>, 6> dirs{{{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}}};
        for (const auto& d : dirs) {
          if (is_kept(i + d[0], j + d[1], k + d[2])) continue;
          for (int c = 0; c < 8; ++c) {
            const int bx = c & 1, by = (c >> 1) & 1, bz = (c >> 2) & 1;
            const bool on_face = (d[0] != 0 && bx == (d[0] > 0)) || (d[1] != 0 && by == (d[1] > 0)) ||
                                 (d[2] != 0 && bz == (d[2] > 0));
            if (on_face) boundary[static_cast<std::size_t>(corner[static_cast<std::size_t>(c)])] = 1;
          }
        }
      }
  boundary.resize(cage.nodes_canonical.size(), 0);

  // Snap, then undo snaps around any tet that lost too much volume.
  const std::vector<Vec3> lattice = cage.nodes_canonical;
  std::vector<char> snapped(lattice.size(), 0);
  for (std::size_t v = 0; v < lattice.size(); ++v)
    if (boundary[v]) {
      cage.nodes_canonical[v] = closest_point_on_mesh(surface, lattice[v]);
      snapped[v] = 1;
    }
  const double min_vol = 0.02 * lattice_step * lattice_step * lattice_step;
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto& t : cage.tets) {
      const double vol = signed_tet_volume(cage.nodes_canonical[static_cast<std::size_t>(t[0])],
                                           cage.nodes_canonical[static_cast<std::size_t>(t[1])],
                                           cage.nodes_canonical[static_cast<std::size_t>(t[2])],
                                           cage.nodes_canonical[static_cast<std::size_t>(t[3])]);
      if (vol >= min_vol) continue;
      for (int v : t)
        if (snapped[static_cast<std::size_t>(v)]) {
          snapped[static_cast<std::size_t>(v)] = 0;
          cage.nodes_canonical[static_cast<std::size_t>(v)] = lattice[static_cast<std::size_t>(v)];
          changed = true;
        }
    }
  }
  cage.finalize();
  return cage;
}

// ---------------------------------------------------------------------------
// Embedding

/// Uniform spatial hash over tet bounding boxes.
class TetLocator {
public:
  explicit TetLocator(const TetCage& cage) : cage_(cage) {
    if (cage.tets.empty()) throw EmptyCage("cannot locate points in an empty cage");
    std::vector<double> edges;
    edges.reserve(cage.tets.size() * 6);
    for (std::size_t t = 0; t < cage.tets.size(); ++t)
      for (int a = 0; a < 4; ++a)
        for (int b = a + 1; b < 4; ++b)
          edges.push_back((cage.node(cage.nodes_canonical, static_cast<int>(t), a) -
                           cage.node(cage.nodes_canonical, static_cast<int>(t), b)).norm());
    std::nth_element(edges.begin(), edges.begin() + static_cast<std::ptrdiff_t>(edges.size() / 2), edges.end());
    cell_ = std::max(edges[edges.size() / 2], 1e-9);
    for (std::size_t t = 0; t < cage.tets.size(); ++t) {
      Vec3 lo = cage.node(cage.nodes_canonical, static_cast<int>(t), 0), hi = lo;
      for (int k = 1; k < 4; ++k) {
        lo = lo.cwiseMin(cage.node(cage.nodes_canonical, static_cast<int>(t), k));
        hi = hi.cwiseMax(cage.node(cage.nodes_canonical, static_cast<int>(t), k));
      }
      const auto a = cell_of(lo), b = cell_of(hi);
      for (long i = a[0]; i <= b[0]; ++i)
        for (long j = a[1]; j <= b[1]; ++j)
          for (long k = a[2]; k <= b[2]; ++k) grid_[key(i, j, k)].push_back(static_cast<int>(t));
    }
  }

  struct Result {
    int tet = -1;
    Vec4 barycentric = Vec4::Zero();
    bool inside = false;
    double distance = 0.0;  // from x to the returned tet (0 when inside)
  };

  /// Containing tet (all barycentrics >= -1e-9). Otherwise the nearest tet
  /// by Euclidean distance, with the barycentrics of its closest point to x.
  Result locate(const Vec3& x) const {
    const auto c = cell_of(x);
    Result best;
    double best_score = std::numeric_limits<double>::infinity();
    auto ring_tets = [&](long ring, const auto& fn) {
      for (long i = c[0] - ring; i <= c[0] + ring; ++i)
        for (long j = c[1] - ring; j <= c[1] + ring; ++j)
          for (long k = c[2] - ring; k <= c[2] + ring; ++k) {
            if (std::max({std::abs(i - c[0]), std::abs(j - c[1]), std::abs(k - c[2])}) != ring) continue;
            auto it = grid_.find(key(i, j, k));
            if (it == grid_.end()) continue;
            for (int t : it->second) fn(t);
          }
    };
    auto consider = [&](int t) {
      const Vec4 b = cage_.barycentric(t, x);
      const double score = -b.minCoeff();
      if (score < best_score || (score == best_score && t < best.tet)) {
        best_score = score;
        best.tet = t;
        best.barycentric = b;
      }
    };
    for (long ring = 0; ring <= 1; ++ring) {
      ring_tets(ring, consider);
      if (best_score <= 1e-9) {
        best.inside = true;
        return best;
      }
    }
    Result near;
    near.distance = std::numeric_limits<double>::infinity();
    auto consider_near = [&](int t) {
      Vec4 b;
      const double d = closest_in_tet(t, x, b);
      if (d < near.distance || (d == near.distance && t < near.tet)) {
        near.distance = d;
        near.tet = t;
        near.barycentric = b;
      }
    };
    // Anything within `ring` cells is closer than what lies beyond it.
    for (long ring = 0; ring <= 64; ++ring) {
      ring_tets(ring, consider_near);
      if (near.tet >= 0 && near.distance <= static_cast<double>(ring) * cell_) return near;
    }
    for (std::size_t t = 0; t < cage_.tets.size(); ++t) consider_near(static_cast<int>(t));
    return near;
  }

private:
  std::array<long, 3> cell_of(const Vec3& p) const {
    return {static_cast<long>(std::floor(p.x() / cell_)), static_cast<long>(std::floor(p.y() / cell_)),
            static_cast<long>(std::floor(p.z() / cell_))};
  }
  static std::uint64_t key(long i, long j, long k) {
    auto u = [](long v) { return static_cast<std::uint64_t>(v + (1l << 20)) & 0x1fffffu; };
    return (u(i) << 42) | (u(j) << 21) | u(k);
  }

  /// Distance from x to tet t; `bary` receives the closest point's coordinates.
  double closest_in_tet(int t, const Vec3& x, Vec4& bary) const {
    const Vec4 b = cage_.barycentric(t, x);
    if (b.minCoeff() >= 0.0) {
      bary = b;
      return 0.0;
    }
    static constexpr int kFaces[4][3] = {{1, 2, 3}, {0, 2, 3}, {0, 1, 3}, {0, 1, 2}};
    double best = std::numeric_limits<double>::infinity();
    for (int f = 0; f < 4; ++f) {
      Vec3 fb;
      const Vec3 q = closest_point_on_triangle(x, cage_.node(cage_.nodes_canonical, t, kFaces[f][0]),
                                               cage_.node(cage_.nodes_canonical, t, kFaces[f][1]),
                                               cage_.node(cage_.nodes_canonical, t, kFaces[f][2]), &fb);
      const double d = (q - x).norm();
      if (d < best) {
        best = d;
        bary.setZero();
        for (int k = 0; k < 3; ++k) bary[kFaces[f][k]] = fb[k];
      }
    }
    return best;
  }

  const TetCage& cage_;
  double cell_ = 1.0;
  std::unordered_map<std::uint64_t, std::vector<int>> grid_;
};

/// One-off embedding; build a TetLocator directly for many points.
inline std::pair<int, Vec4> embed_point(const TetCage& cage, const Vec3& x) {
  const auto r = TetLocator(cage).locate(x);
  return {r.tet, r.barycentric};
}

/// Canonical skin weights for cage nodes, copied from the nearest template
/// vertex (lowest index wins ties). `candidates`, when given, masks which
/// vertices may be used.
inline void transfer_skin_weights(TetCage& cage, const std::vector<Vec3>& template_vertices,
                                  const std::vector<SkinWeights>& template_weights,
                                  const std::vector<bool>* candidates = nullptr) {
  cage.node_skin_weights.resize(cage.nodes_canonical.size());
  for (std::size_t v = 0; v < cage.nodes_canonical.size(); ++v) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t arg = 0;
    for (std::size_t i = 0; i < template_vertices.size(); ++i) {
      if (candidates && !(*candidates)[i]) continue;
      const double d = (template_vertices[i] - cage.nodes_canonical[v]).squaredNorm();
      if (d < best) {
        best = d;
        arg = i;
      }
    }
    cage.node_skin_weights[v] = template_weights[arg];
  }
}

// ---------------------------------------------------------------------------
// Deformation

/// J = Ê E⁻¹ for one tet.
inline Mat3 deformation_gradient(const TetCage& cage, const std::vector<Vec3>& nodes_posed, int tet) {
  const Mat3 e_hat = edge_matrix(cage.node(nodes_posed, tet, 0), cage.node(nodes_posed, tet, 1),
                                 cage.node(nodes_posed, tet, 2), cage.node(nodes_posed, tet, 3));
  return e_hat * cage.inv_canonical_edges[static_cast<std::size_t>(tet)];
}

inline std::vector<Mat3> deformation_gradients(const TetCage& cage, const std::vector<Vec3>& nodes_posed) {
  std::vector<Mat3> j(cage.tets.size());
  for (std::size_t t = 0; t < j.size(); ++t) j[t] = deformation_gradient(cage, nodes_posed, static_cast<int>(t));
  return j;
}

/// Accumulates dL/dJ of one tet into per-node gradients.
inline void deformation_gradient_backward(const TetCage& cage, int tet, const Mat3& grad_j,
                                          std::vector<Vec3>& grad_nodes) {
  const Mat3 g_edges = grad_j * cage.inv_canonical_edges[static_cast<std::size_t>(tet)].transpose();
  const auto& k = cage.tets[static_cast<std::size_t>(tet)];
  for (int c = 0; c < 3; ++c) {
    grad_nodes[static_cast<std::size_t>(k[static_cast<std::size_t>(c + 1)])] += g_edges.col(c);
    grad_nodes[static_cast<std::size_t>(k[0])] -= g_edges.col(c);
  }
}

/// x̂ = Σ b_j v̂_j.
inline Vec3 deform_point(const TetCage& cage, const std::vector<Vec3>& nodes_posed, int tet,
                         const Vec4& barycentric) {
  Vec3 x = Vec3::Zero();
  for (int k = 0; k < 4; ++k) x += barycentric[k] * cage.node(nodes_posed, tet, k);
  return x;
}

inline Vec4 deform_point_backward(const TetCage& cage, const std::vector<Vec3>& nodes_posed, int tet,
                                  const Vec4& barycentric, const Vec3& grad,
                                  std::vector<Vec3>& grad_nodes) {
  Vec4 gb;
  const auto& k = cage.tets[static_cast<std::size_t>(tet)];
  for (int c = 0; c < 4; ++c) {
    gb[c] = grad.dot(cage.node(nodes_posed, tet, c));
    grad_nodes[static_cast<std::size_t>(k[static_cast<std::size_t>(c)])] += barycentric[c] * grad;
  }
  return gb;
}

struct NeoParams {
  double lambda = 1.0;
  double mu = 1.0;
};

/// (1/N) Σ [ λ/2 (det J − 1)² + μ/2 (tr(JᵀJ) − 3) ].
inline double neo_hookean_energy(const std::vector<Mat3>& j_all, const NeoParams& p) {
  if (j_all.empty()) return 0.0;
  double e = 0.0;
  for (const auto& j : j_all) {
    const double det = j.determinant();
    e += 0.5 * p.lambda * (det - 1.0) * (det - 1.0) + 0.5 * p.mu * (j.squaredNorm() - 3.0);
  }
  return e / static_cast<double>(j_all.size());
}

/// Cofactor matrix; equals det(J)·J⁻ᵀ and stays defined for singular J.
inline Mat3 cofactor(const Mat3& j) {
  Mat3 c;
  c.col(0) = j.col(1).cross(j.col(2));
  c.col(1) = j.col(2).cross(j.col(0));
  c.col(2) = j.col(0).cross(j.col(1));
  return c;
}

inline std::vector<Mat3> neo_hookean_backward(const std::vector<Mat3>& j_all, const NeoParams& p,
                                              double grad = 1.0) {
  std::vector<Mat3> g(j_all.size());
  if (j_all.empty()) return g;
  const double s = grad / static_cast<double>(j_all.size());
  for (std::size_t t = 0; t < j_all.size(); ++t) {
    const double det = j_all[t].determinant();
    g[t] = s * (p.lambda * (det - 1.0) * cofactor(j_all[t]) + p.mu * j_all[t]);
  }
  return g;
}

// ---------------------------------------------------------------------------
// TCAG: "TCAG", u32 version, u32 part, u32 nodes, u32 tets, then f64 xyz per
// node, u32 x4 per tet, and per node u32 influence count + count × (u32, f64).

inline constexpr std::uint32_t kCageFormatVersion = 1;

inline void write_cage(std::ostream& out, const TetCage& cage) {
  bin::put_magic(out, "TCAG");
  bin::put<std::uint32_t>(out, kCageFormatVersion);
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(cage.part_id));
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(cage.nodes_canonical.size()));
  bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(cage.tets.size()));
  for (const auto& p : cage.nodes_canonical)
    for (int a = 0; a < 3; ++a) bin::put<double>(out, p[a]);
  for (const auto& t : cage.tets)
    for (int v : t) bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(v));
  for (std::size_t v = 0; v < cage.nodes_canonical.size(); ++v) {
    const SkinWeights& w = v < cage.node_skin_weights.size() ? cage.node_skin_weights[v] : SkinWeights::single(0);
    bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(w.count));
    for (int k = 0; k < w.count; ++k) {
      bin::put<std::uint32_t>(out, static_cast<std::uint32_t>(w.joint[static_cast<std::size_t>(k)]));
      bin::put<double>(out, w.weight[static_cast<std::size_t>(k)]);
    }
  }
}

inline TetCage read_cage(std::istream& in) {
  bin::expect_magic(in, "TCAG");
  const auto version = bin::get<std::uint32_t>(in);
  if (version != kCageFormatVersion) throw FormatError("unsupported TCAG version " + std::to_string(version));
  TetCage cage;
  const auto part = bin::get<std::uint32_t>(in);
  if (part >= kPartCount) throw FormatError("bad part id in cage");
  cage.part_id = static_cast<Part>(part);
  const auto nn = bin::get<std::uint32_t>(in);
  const auto nt = bin::get<std::uint32_t>(in);
  cage.nodes_canonical.resize(nn);
  for (auto& p : cage.nodes_canonical)
    for (int a = 0; a < 3; ++a) p[a] = bin::get<double>(in);
  cage.tets.resize(nt);
  for (auto& t : cage.tets)
    for (int& v : t) v = static_cast<int>(bin::get<std::uint32_t>(in));
  cage.node_skin_weights.resize(nn);
  for (auto& w : cage.node_skin_weights) {
    const auto count = bin::get<std::uint32_t>(in);
    if (count < 1 || count > SkinWeights::kMaxInfluences) throw FormatError("bad influence count in cage");
    w.count = static_cast<int>(count);
    for (int k = 0; k < w.count; ++k) {
      w.joint[static_cast<std::size_t>(k)] = static_cast<int>(bin::get<std::uint32_t>(in));
      w.weight[static_cast<std::size_t>(k)] = bin::get<double>(in);
    }
  }
  cage.finalize();
  return cage;
}

inline void write_cage(const std::string& path, const TetCage& cage) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path);
  write_cage(out, cage);
  if (!out) throw IoError("write failed: " + path);
}

inline TetCage read_cage(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  return read_cage(in);
}

} // namespace d3ga
