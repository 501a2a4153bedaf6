#pragma once

// Triangle meshes: storage, OBJ I/O, normals, primitive generators and the
// geometric queries the cage builders need.

#include "d3ga/common.hpp"

#include <algorithm>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>
#include <vector>

namespace d3ga {

struct TriMesh {
  std::vector<Vec3> positions;
  std::vector<std::array<int, 3>> faces;
  /// Optional per-face part label; empty means every face is `Part::body`.
  std::vector<Part> face_parts;

  std::size_t vertex_count() const { return positions.size(); }
  std::size_t face_count() const { return faces.size(); }

  Part face_part(std::size_t f) const { return face_parts.empty() ? Part::body : face_parts[f]; }

  Vec3 face_normal_unnormalized(std::size_t f) const {
    const auto& t = faces[f];
    return (positions[t[1]] - positions[t[0]]).cross(positions[t[2]] - positions[t[0]]);
  }

  double face_area(std::size_t f) const { return 0.5 * face_normal_unnormalized(f).norm(); }

  double area() const {
    double a = 0.0;
    for (std::size_t f = 0; f < faces.size(); ++f) a += face_area(f);
    return a;
  }

  /// Area-weighted vertex normals.
  std::vector<Vec3> vertex_normals() const {
    std::vector<Vec3> n(positions.size(), Vec3::Zero());
    for (std::size_t f = 0; f < faces.size(); ++f) {
      const Vec3 fn = face_normal_unnormalized(f);
      for (int k : faces[f]) n[static_cast<std::size_t>(k)] += fn;
    }
    for (auto& v : n) {
      const double len = v.norm();
      if (len > 0.0) v /= len;
    }
    return n;
  }

  void append(const TriMesh& other, Part label) {
    const int base = static_cast<int>(positions.size());
    if (face_parts.empty() && !faces.empty()) face_parts.assign(faces.size(), Part::body);
    positions.insert(positions.end(), other.positions.begin(), other.positions.end());
    for (std::size_t f = 0; f < other.faces.size(); ++f) {
      const auto& t = other.faces[f];
      faces.push_back({t[0] + base, t[1] + base, t[2] + base});
      face_parts.push_back(other.face_parts.empty() ? label : other.face_parts[f]);
    }
  }

  /// Faces matching `label`, with vertices re-indexed compactly.
  /// `vertex_map` (optional) receives the source index of every kept vertex.
  TriMesh submesh(Part label, std::vector<int>* vertex_map = nullptr) const {
    TriMesh out;
    std::vector<int> remap(positions.size(), -1);
    for (std::size_t f = 0; f < faces.size(); ++f) {
      if (face_part(f) != label) continue;
      std::array<int, 3> t{};
      for (int k = 0; k < 3; ++k) {
        const int src = faces[f][static_cast<std::size_t>(k)];
        if (remap[static_cast<std::size_t>(src)] < 0) {
          remap[static_cast<std::size_t>(src)] = static_cast<int>(out.positions.size());
          out.positions.push_back(positions[static_cast<std::size_t>(src)]);
          if (vertex_map) vertex_map->push_back(src);
        }
        t[static_cast<std::size_t>(k)] = remap[static_cast<std::size_t>(src)];
      }
      out.faces.push_back(t);
      out.face_parts.push_back(label);
    }
    return out;
  }

  /// Connected components over shared vertices; returns a component id per face.
  std::vector<int> face_components(int* count = nullptr) const {
    std::vector<int> parent(positions.size());
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](int x) {
      while (parent[static_cast<std::size_t>(x)] != x) {
        parent[static_cast<std::size_t>(x)] =
            parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
        x = parent[static_cast<std::size_t>(x)];
      }
      return x;
    };
    for (const auto& t : faces) {
      const int a = find(t[0]);
      for (int k = 1; k < 3; ++k) {
        const int b = find(t[static_cast<std::size_t>(k)]);
        if (a != b) parent[static_cast<std::size_t>(b)] = a;
      }
    }
    std::vector<int> root_id(positions.size(), -1);
    std::vector<int> comp(faces.size());
    int n = 0;
    for (std::size_t f = 0; f < faces.size(); ++f) {
      const int r = find(faces[f][0]);
      if (root_id[static_cast<std::size_t>(r)] < 0) root_id[static_cast<std::size_t>(r)] = n++;
      comp[f] = root_id[static_cast<std::size_t>(r)];
    }
    if (count) *count = n;
    return comp;
  }
};

// ---------------------------------------------------------------------------
// OBJ: positions and triangular faces only. Group names ("g upper") are used
// as part labels when they match a part name.

inline TriMesh read_obj(std::istream& in) {
  TriMesh mesh;
  Part current = Part::body;
  bool labelled = false;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      Vec3 p;
      if (!(ls >> p.x() >> p.y() >> p.z()))
        throw FormatError("obj line " + std::to_string(line_no) + ": bad vertex");
      mesh.positions.push_back(p);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      while (ls >> tok) {
        const int i = std::stoi(tok.substr(0, tok.find('/')));
        idx.push_back(i > 0 ? i - 1 : static_cast<int>(mesh.positions.size()) + i);
      }
      if (idx.size() < 3)
        throw FormatError("obj line " + std::to_string(line_no) + ": face with < 3 vertices");
      for (std::size_t k = 1; k + 1 < idx.size(); ++k) {
        mesh.faces.push_back({idx[0], idx[k], idx[k + 1]});
        mesh.face_parts.push_back(current);
      }
    } else if (tag == "g" || tag == "o") {
      std::string name;
      ls >> name;
      if (name == "body" || name == "upper" || name == "lower" || name == "face") {
        current = part_from_name(name);
        labelled = true;
      }
    }
  }
  for (const auto& t : mesh.faces)
    for (int i : t)
      if (i < 0 || i >= static_cast<int>(mesh.positions.size()))
        throw FormatError("obj face index out of range");
  if (!labelled) mesh.face_parts.clear();
  return mesh;
}

inline TriMesh read_obj(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  return read_obj(in);
}

inline void write_obj(std::ostream& out, const TriMesh& mesh) {
  out.precision(17);
  for (const auto& p : mesh.positions) out << "v " << p.x() << ' ' << p.y() << ' ' << p.z() << '\n';
  int last = -1;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    if (!mesh.face_parts.empty() && static_cast<int>(mesh.face_parts[f]) != last) {
      last = static_cast<int>(mesh.face_parts[f]);
      out << "g " << part_name(mesh.face_parts[f]) << '\n';
    }
    const auto& t = mesh.faces[f];
    out << "f " << t[0] + 1 << ' ' << t[1] + 1 << ' ' << t[2] + 1 << '\n';
  }
}

inline void write_obj(const std::string& path, const TriMesh& mesh) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  write_obj(out, mesh);
  if (!out) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Primitive generators (all outward-oriented, counter-clockwise from outside).

inline TriMesh make_icosahedron(double radius = 1.0) {
  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  TriMesh m;
  m.positions = {{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                 {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : m.positions) p = p.normalized() * radius;
  m.faces = {{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11}, {1, 5, 9}, {5, 11, 4},
             {11, 10, 2}, {10, 7, 6}, {7, 1, 8},  {3, 9, 4},  {3, 4, 2},   {3, 2, 6}, {3, 6, 8},
             {3, 8, 9},  {4, 9, 5},  {2, 4, 11}, {6, 2, 10}, {8, 6, 7},   {9, 8, 1}};
  return m;
}

/// Axis-aligned box [lo, hi], 12 triangles.
inline TriMesh make_box(const Vec3& lo, const Vec3& hi) {
  TriMesh m;
  for (int i = 0; i < 8; ++i)
    m.positions.emplace_back((i & 1) ? hi.x() : lo.x(), (i & 2) ? hi.y() : lo.y(),
                             (i & 4) ? hi.z() : lo.z());
  m.faces = {{0, 2, 1}, {1, 2, 3}, {4, 5, 6}, {5, 7, 6}, {0, 1, 4}, {1, 5, 4},
             {2, 6, 3}, {3, 6, 7}, {0, 4, 2}, {2, 4, 6}, {1, 3, 5}, {3, 7, 5}};
  return m;
}

/// Unit square in the z = 0 plane split into two triangles, normal +z.
inline TriMesh make_unit_square() {
  TriMesh m;
  m.positions = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}};
  m.faces = {{0, 1, 2}, {0, 2, 3}};
  return m;
}

/// Latitude/longitude sphere.
inline TriMesh make_uv_sphere(const Vec3& center, double radius, int segments, int rings) {
  TriMesh m;
  m.positions.push_back(center + Vec3(0, radius, 0));
  for (int r = 1; r < rings; ++r) {
    const double th = std::numbers::pi * r / rings;
    for (int s = 0; s < segments; ++s) {
      const double ph = 2.0 * std::numbers::pi * s / segments;
      m.positions.push_back(center + radius * Vec3(std::sin(th) * std::cos(ph), std::cos(th),
                                                   -std::sin(th) * std::sin(ph)));
    }
  }
  m.positions.push_back(center - Vec3(0, radius, 0));
  const int south = static_cast<int>(m.positions.size()) - 1;
  auto ring = [&](int r, int s) { return 1 + (r - 1) * segments + (s % segments); };
  for (int s = 0; s < segments; ++s) m.faces.push_back({0, ring(1, s), ring(1, s + 1)});
  for (int r = 1; r + 1 < rings; ++r)
    for (int s = 0; s < segments; ++s) {
      m.faces.push_back({ring(r, s), ring(r + 1, s), ring(r + 1, s + 1)});
      m.faces.push_back({ring(r, s), ring(r + 1, s + 1), ring(r, s + 1)});
    }
  for (int s = 0; s < segments; ++s) m.faces.push_back({south, ring(rings - 1, s + 1), ring(rings - 1, s)});
  return m;
}

/// Capsule around segment a→b with elliptical cross-section (radius, radius·depth_ratio
/// along side × axis). Hemispherical caps get `cap_rings`
/// rings each, the cylinder `body_rings`.
inline TriMesh make_capsule(const Vec3& a, const Vec3& b, double radius, int segments,
                            int cap_rings, int body_rings, double depth_ratio = 1.0) {
  const Vec3 axis = (b - a).normalized();
  Vec3 side = std::abs(axis.z()) < 0.9 ? axis.cross(Vec3::UnitZ()).normalized()
                                       : axis.cross(Vec3::UnitX()).normalized();
  const Vec3 depth = axis.cross(side).normalized();
  const double len = (b - a).norm();
  struct Ring {
    double t;  // position along axis, from a (negative on the a cap)
    double r;  // radius scale
  };
  std::vector<Ring> rings;
  for (int i = 1; i <= cap_rings; ++i) {
    const double th = 0.5 * std::numbers::pi * (1.0 - static_cast<double>(i) / cap_rings);
    rings.push_back({-radius * std::sin(th), std::cos(th)});
  }
  for (int i = 1; i < body_rings; ++i) rings.push_back({len * i / body_rings, 1.0});
  for (int i = 0; i < cap_rings; ++i) {
    const double th = 0.5 * std::numbers::pi * static_cast<double>(i) / cap_rings;
    rings.push_back({len + radius * std::sin(th), std::cos(th)});
  }
  TriMesh m;
  m.positions.push_back(a - axis * radius);
  for (const auto& rg : rings)
    for (int s = 0; s < segments; ++s) {
      const double ph = 2.0 * std::numbers::pi * s / segments;
      m.positions.push_back(a + axis * rg.t +
                            radius * rg.r * (std::cos(ph) * side + depth_ratio * std::sin(ph) * depth));
    }
  m.positions.push_back(b + axis * radius);
  const int n_r = static_cast<int>(rings.size());
  const int tip = static_cast<int>(m.positions.size()) - 1;
  auto at = [&](int r, int s) { return 1 + r * segments + (s % segments); };
  for (int s = 0; s < segments; ++s) m.faces.push_back({0, at(0, s + 1), at(0, s)});
  for (int r = 0; r + 1 < n_r; ++r)
    for (int s = 0; s < segments; ++s) {
      m.faces.push_back({at(r, s), at(r, s + 1), at(r + 1, s + 1)});
      m.faces.push_back({at(r, s), at(r + 1, s + 1), at(r + 1, s)});
    }
  for (int s = 0; s < segments; ++s) m.faces.push_back({tip, at(n_r - 1, s), at(n_r - 1, s + 1)});
  // Orientation depends on the handedness of (side, depth, axis); make it outward.
  double vol = 0.0;
  for (const auto& t : m.faces)
    vol += m.positions[t[0]].dot(m.positions[t[1]].cross(m.positions[t[2]]));
  if (vol < 0.0)
    for (auto& t : m.faces) std::swap(t[1], t[2]);
  return m;
}

// ---------------------------------------------------------------------------
// Queries

/// Closest point on triangle (Ericson, Real-Time Collision Detection 5.1.5).
/// Also returns barycentric weights of the closest point.
inline Vec3 closest_point_on_triangle(const Vec3& p, const Vec3& a, const Vec3& b, const Vec3& c,
                                      Vec3* bary = nullptr) {
  const Vec3 ab = b - a, ac = c - a, ap = p - a;
  auto ret = [&](double u, double v, double w) {
    if (bary) *bary = Vec3(u, v, w);
    return Vec3(u * a + v * b + w * c);
  };
  const double d1 = ab.dot(ap), d2 = ac.dot(ap);
  if (d1 <= 0.0 && d2 <= 0.0) return ret(1, 0, 0);
  const Vec3 bp = p - b;
  const double d3 = ab.dot(bp), d4 = ac.dot(bp);
  if (d3 >= 0.0 && d4 <= d3) return ret(0, 1, 0);
  const double vc = d1 * d4 - d3 * d2;
  if (vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0) {
    const double v = d1 / (d1 - d3);
    return ret(1 - v, v, 0);
  }
  const Vec3 cp = p - c;
  const double d5 = ab.dot(cp), d6 = ac.dot(cp);
  if (d6 >= 0.0 && d5 <= d6) return ret(0, 0, 1);
  const double vb = d5 * d2 - d1 * d6;
  if (vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0) {
    const double w = d2 / (d2 - d6);
    return ret(1 - w, 0, w);
  }
  const double va = d3 * d6 - d5 * d4;
  if (va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0) {
    const double w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
    return ret(0, 1 - w, w);
  }
  const double denom = 1.0 / (va + vb + vc);
  const double v = vb * denom, w = vc * denom;
  return ret(1 - v - w, v, w);
}

/// Möller–Trumbore; returns true for a hit with t > 0.
inline bool ray_hits_triangle(const Vec3& origin, const Vec3& dir, const Vec3& a, const Vec3& b,
                              const Vec3& c) {
  const Vec3 e1 = b - a, e2 = c - a;
  const Vec3 p = dir.cross(e2);
  const double det = e1.dot(p);
  if (std::abs(det) < 1e-18) return false;
  const double inv = 1.0 / det;
  const Vec3 s = origin - a;
  const double u = s.dot(p) * inv;
  if (u < 0.0 || u > 1.0) return false;
  const Vec3 q = s.cross(e1);
  const double v = dir.dot(q) * inv;
  if (v < 0.0 || u + v > 1.0) return false;
  return e2.dot(q) * inv > 0.0;
}

/// Inside test for a union of closed components: a point is inside when the
/// crossing parity along a fixed ray is odd for at least one component.
class InsideTester {
public:
  explicit InsideTester(const TriMesh& mesh) : mesh_(mesh) {
    comp_ = mesh.face_components(&n_comp_);
  }

  bool inside(const Vec3& p) const {
    // Skewed direction avoids grazing edges/vertices of axis-aligned meshes.
    static const Vec3 dir = Vec3(0.5773, 0.6123, 0.5402).normalized();
    std::vector<int> parity(static_cast<std::size_t>(n_comp_), 0);
    for (std::size_t f = 0; f < mesh_.faces.size(); ++f) {
      const auto& t = mesh_.faces[f];
      if (ray_hits_triangle(p, dir, mesh_.positions[t[0]], mesh_.positions[t[1]],
                            mesh_.positions[t[2]]))
        parity[static_cast<std::size_t>(comp_[f])] ^= 1;
    }
    return std::any_of(parity.begin(), parity.end(), [](int x) { return x != 0; });
  }

  /// Same test restricted to components other than `skip`.
  bool inside_other(const Vec3& p, int skip) const {
    static const Vec3 dir = Vec3(0.5773, 0.6123, 0.5402).normalized();
    std::vector<int> parity(static_cast<std::size_t>(n_comp_), 0);
    for (std::size_t f = 0; f < mesh_.faces.size(); ++f) {
      if (comp_[f] == skip) continue;
      const auto& t = mesh_.faces[f];
      if (ray_hits_triangle(p, dir, mesh_.positions[t[0]], mesh_.positions[t[1]],
                            mesh_.positions[t[2]]))
        parity[static_cast<std::size_t>(comp_[f])] ^= 1;
    }
    return std::any_of(parity.begin(), parity.end(), [](int x) { return x != 0; });
  }

  int component_of_face(std::size_t f) const { return comp_[f]; }
  int component_count() const { return n_comp_; }

private:
  const TriMesh& mesh_;
  std::vector<int> comp_;
  int n_comp_ = 0;
};

/// Brute-force nearest surface point.
inline Vec3 closest_point_on_mesh(const TriMesh& mesh, const Vec3& p, std::size_t* face = nullptr,
                                  Vec3* bary = nullptr) {
  double best = std::numeric_limits<double>::infinity();
  Vec3 out = p;
  for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
    const auto& t = mesh.faces[f];
    Vec3 bc;
    const Vec3 q = closest_point_on_triangle(p, mesh.positions[t[0]], mesh.positions[t[1]],
                                             mesh.positions[t[2]], &bc);
    const double d = (q - p).squaredNorm();
    if (d < best) {
      best = d;
      out = q;
      if (face) *face = f;
      if (bary) *bary = bc;
    }
  }
  return out;
}

} // namespace d3ga
