#pragma once

// Finite-difference checks for every hand-written backward. Each registered
// op is wrapped as x ↦ f(x); the analytic gradient of ⟨w, f(x)⟩ for a random
// projection w is compared per input coordinate against central differences.

#include "d3ga/cage.hpp"
#include "d3ga/gauss.hpp"
#include "d3ga/losses.hpp"
#include "d3ga/model.hpp"
#include "d3ga/nets.hpp"
#include "d3ga/rasterizer.hpp"
#include "d3ga/skeleton.hpp"
#include "d3ga/synthetic.hpp"

#include <chrono>
#include <functional>
#include <random>

namespace d3ga::gradcheck {

struct Result {
  std::string op;
  std::string module;
  double worst_rel = 0;
  double tol = 0;
  std::size_t checked = 0;
  bool pass = false;
  double seconds = 0;
};

using Fwd = std::function<VecX(const VecX&)>;
using Bwd = std::function<VecX(const VecX& x, const VecX& w)>;

struct Settings {
  double step = 1e-5;
  /// Floor of the relative-error denominator.
  double abs_floor = 1e-6;
  std::uint64_t seed = 7;
  /// Corrupt the analytic gradient (test fixture for the failure path).
  bool perturb = false;
  /// 0 = check every coordinate.
  std::size_t max_coords = 0;
};

inline Result compare(const Fwd& f, const Bwd& b, const VecX& x, double tol, const Settings& s) {
  std::mt19937_64 rng(s.seed);
  std::normal_distribution<double> n01(0.0, 1.0);
  const VecX y = f(x);
  VecX w(y.size());
  for (Eigen::Index i = 0; i < w.size(); ++i) w[i] = n01(rng);
  VecX g = b(x, w);
  if (g.size() != x.size()) throw DimensionMismatch("gradient size does not match the input");
  if (s.perturb && g.size() > 0) {
    Eigen::Index k;
    g.cwiseAbs().maxCoeff(&k);
    g[k] = g[k] * 1.05 + 1e-3;
  }
  std::vector<Eigen::Index> coords(static_cast<std::size_t>(x.size()));
  std::iota(coords.begin(), coords.end(), 0);
  if (s.max_coords && coords.size() > s.max_coords) {
    std::shuffle(coords.begin(), coords.end(), rng);
    // Always keep the perturbed coordinate in the sample.
    Eigen::Index k;
    g.cwiseAbs().maxCoeff(&k);
    coords.resize(s.max_coords);
    if (std::find(coords.begin(), coords.end(), k) == coords.end()) coords.back() = k;
    std::sort(coords.begin(), coords.end());
  }
  Result r;
  VecX xp = x;
  for (const Eigen::Index i : coords) {
    xp[i] = x[i] + s.step;
    const double lp = w.dot(f(xp));
    xp[i] = x[i] - s.step;
    const double lm = w.dot(f(xp));
    xp[i] = x[i];
    const double num = (lp - lm) / (2.0 * s.step);
    const double rel = std::abs(num - g[i]) / std::max({std::abs(num), std::abs(g[i]), s.abs_floor});
    r.worst_rel = std::max(r.worst_rel, std::isfinite(rel) ? rel : std::numeric_limits<double>::infinity());
    ++r.checked;
  }
  r.tol = tol;
  r.pass = r.worst_rel < tol;
  return r;
}

struct Op {
  std::string name;
  std::string module;
  double tol = 1e-4;
  std::function<Result(const Settings&)> run;
};

namespace detail {

inline VecX random_vec(std::mt19937_64& rng, Eigen::Index n, double scale = 1.0) {
  std::normal_distribution<double> n01(0.0, scale);
  VecX v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = n01(rng);
  return v;
}

inline Covariance3 cov_of(const VecX& x, Eigen::Index at) {
  Covariance3 c;
  for (int k = 0; k < 6; ++k) c[k] = x[at + k];
  return c;
}

inline Covariance3 random_spd(std::mt19937_64& rng, double scale) {
  const VecX a = random_vec(rng, 9);
  Mat3 m = Eigen::Map<const Mat3>(a.data());
  return Covariance3::from_matrix(scale * (m * m.transpose() + Mat3::Identity()));
}

inline Covariance3 cov_from_w(const VecX& w, Eigen::Index at) { return cov_of(w, at); }

inline TetCage single_tet() {
  TetCage c;
  c.nodes_canonical = {{0.1, 0.0, 0.0}, {1.0, 0.2, 0.0}, {0.0, 1.1, 0.1}, {0.2, 0.1, 0.9}};
  c.tets = {{0, 1, 2, 3}};
  c.node_skin_weights.assign(4, SkinWeights::single(0));
  c.finalize();
  return c;
}

/// 16×16 camera looking down +z from the origin.
inline Camera small_camera(int size) {
  Camera cam;
  cam.width = cam.height = size;
  cam.fx = cam.fy = size * 1.2;
  cam.cx = cam.cy = 0.5 * size;
  return cam;
}

/// Tiny avatar scene: a sphere template with a labelled top cap, coarse
/// cages, a handful of Gaussians and small random networks.
struct TinyScene {
  Avatar avatar;
  Pose pose;
  Camera cam;
  Image target, mask;
  int frame = 1;
};

inline TinyScene tiny_scene(int gaussians, int size, bool sh_color = false, bool no_cage = false) {
  TinyScene t;
  const Skeleton skel = make_synthetic_skeleton();
  TriMesh m = make_uv_sphere({0.0, 0.62, 0.0}, 0.12, 10, 6);
  m.face_parts.assign(m.face_count(), Part::body);
  for (std::size_t f = 0; f < m.face_count(); ++f) {
    const auto& tr = m.faces[f];
    const double y = (m.positions[static_cast<std::size_t>(tr[0])].y() + m.positions[static_cast<std::size_t>(tr[1])].y() +
                      m.positions[static_cast<std::size_t>(tr[2])].y()) / 3.0;
    if (y > 0.66) m.face_parts[f] = Part::upper;
  }
  const auto bones = synthetic_bones();
  std::vector<SkinWeights> w;
  for (const auto& p : m.positions) w.push_back(bone_skin_weights(p, bones, skel, 0.03));
  CageBuildOptions co;
  co.solid_step = 0.09;
  co.shell_inner = 0.02;
  co.shell_outer = 0.03;
  const auto cages = no_cage ? std::map<Part, TetCage>{} : build_cages(m, w, co);
  AvatarOptions ao;
  ao.hidden_width = 6;
  ao.hidden_layers = 2;
  ao.pe_octaves = 2;
  ao.frame_embedding_dim = 3;
  ao.sh_color = sh_color;
  ao.no_cage = no_cage;
  InitOptions io;
  io.opacity = 0.6;
  t.avatar = Avatar::create(ao, skel, m, w, cages, gaussians, 3, 11, io);
  std::mt19937_64 rng(3);
  // Non-zero final layers so every path carries gradient.
  for (auto& p : t.avatar.parts) {
    for (Mlp* net : {&p.psi, &p.pi, &p.gamma})
      for (auto& wt : net->weights()) wt = random_vec(rng, wt.size(), 0.4).reshaped(wt.rows(), wt.cols());
    for (Mlp* net : {&p.psi, &p.pi, &p.gamma})
      for (auto& bs : net->biases()) bs = random_vec(rng, bs.size(), 0.1).reshaped(bs.rows(), bs.cols());
  }
  t.avatar.frames.table = random_vec(rng, t.avatar.frames.table.size(), 0.3).reshaped(t.avatar.frames.table.rows(),
                                                                                       t.avatar.frames.table.cols());
  t.avatar.log_scale.array() += 0.8;
  t.pose = Pose::identity(skel.size());
  for (std::size_t j = 0; j < skel.size(); ++j)
    t.pose.joint_rotations[j] = quat_from_axis_angle(Vec3(0.3, 1.0, 0.2).normalized(), 0.15 * static_cast<double>(j % 3));
  t.cam = Camera::look_at({0.05, 0.7, 0.9}, {0.0, 0.62, 0.0}, {0.0, 1.0, 0.0}, 30.0, size, size);
  t.target = Image(size, size);
  t.mask = Image(size, size);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& v : t.target.data) v = u(rng);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) t.mask.set_pixel(x, y, part_color(static_cast<Part>((x + y) % 3)));
  return t;
}

} // namespace detail

/// Total training loss of the tiny scene as a function of every parameter.
inline Result check_avatar(const Settings& s, bool sh_color, bool no_cage, double tol) {
  auto t = std::make_shared<detail::TinyScene>(detail::tiny_scene(4, 8, sh_color, no_cage));
  const LossWeights lw;
  auto set = [t](const VecX& x) {
    const ParamList ps = t->avatar.params();
    Eigen::Index o = 0;
    for (const auto& p : ps) {
      std::copy(x.data() + o, x.data() + o + static_cast<Eigen::Index>(p.size), p.data);
      o += static_cast<Eigen::Index>(p.size);
    }
  };
  auto loss = [t, lw](FrameCache* fc, Image* gc, Image* gp) {
    const auto out = t->avatar.render(t->pose, t->cam, t->frame, {}, fc);
    LossTerms terms;
    terms.color = color_loss(out.color, t->target, 0.2, gc);
    terms.garment = garment_loss(out.part, t->mask, gp);
    terms.neo = fc ? t->avatar.neo_energy(*fc, {}) : 0.0;
    if (!fc) {
      FrameCache tmp;
      t->avatar.render(t->pose, t->cam, t->frame, {}, &tmp);
      terms.neo = t->avatar.neo_energy(tmp, {});
    }
    return total_loss(terms, lw);
  };
  const ParamList ps = t->avatar.params();
  VecX x(static_cast<Eigen::Index>(total_size(ps)));
  {
    Eigen::Index o = 0;
    for (const auto& p : ps) {
      std::copy(p.data, p.data + p.size, x.data() + o);
      o += static_cast<Eigen::Index>(p.size);
    }
  }
  Fwd f = [=](const VecX& xx) {
    set(xx);
    VecX y(1);
    y[0] = loss(nullptr, nullptr, nullptr);
    return y;
  };
  Bwd b = [=](const VecX& xx, const VecX& w) {
    set(xx);
    FrameCache fc;
    Image gc, gp;
    loss(&fc, &gc, &gp);
    for (auto& v : gc.data) v *= lw.nu * w[0];
    for (auto& v : gp.data) v *= lw.nu * w[0];
    const ParamList pl = t->avatar.params();
    zero_grads(pl);
    t->avatar.backward(fc, gc, gp, {}, lw.tau * w[0]);
    VecX g(xx.size());
    Eigen::Index o = 0;
    for (const auto& p : pl) {
      std::copy(p.grad, p.grad + p.size, g.data() + o);
      o += static_cast<Eigen::Index>(p.size);
    }
    return g;
  };
  return compare(f, b, x, tol, s);
}

inline std::vector<Op> registry() {
  using namespace detail;
  std::vector<Op> ops;
  auto add = [&](std::string name, std::string module, double tol, std::function<Result(const Settings&)> fn) {
    ops.push_back({std::move(name), std::move(module), tol, std::move(fn)});
  };

  add("quat_to_rotation", "gauss", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const VecX x = random_vec(rng, 4);
    Fwd f = [](const VecX& v) { return VecX(quat_to_rotation(v.head<4>()).reshaped()); };
    Bwd b = [](const VecX& v, const VecX& w) {
      return VecX(quat_to_rotation_backward(v.head<4>(), Eigen::Map<const Mat3>(w.data())));
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("normalize", "gauss", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const VecX x = random_vec(rng, 4);
    Fwd f = [](const VecX& v) { return VecX(v.head<4>().normalized()); };
    Bwd b = [](const VecX& v, const VecX& w) { return VecX(normalize_backward(Vec4(v.head<4>()), Vec4(w.head<4>()))); };
    return compare(f, b, x, 1e-4, s);
  });
  add("compose_covariance", "gauss", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    VecX x = random_vec(rng, 7);
    x.head<4>().normalize();
    x.tail<3>() = x.tail<3>().cwiseAbs().array() + 0.2;
    Fwd f = [](const VecX& v) {
      const auto c = compose_covariance(v.head<4>(), v.tail<3>());
      return VecX(Eigen::Map<const Eigen::Matrix<double, 6, 1>>(c.v.data()));
    };
    Bwd b = [](const VecX& v, const VecX& w) {
      const auto g = compose_covariance_backward(v.head<4>(), v.tail<3>(), cov_from_w(w, 0));
      VecX o(7);
      o << g.rotation, g.scale;
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("transform_covariance", "gauss", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const Covariance3 c = random_spd(rng, 0.5);
    VecX x(15);
    for (int k = 0; k < 6; ++k) x[k] = c[k];
    x.tail<9>() = random_vec(rng, 9);
    Fwd f = [](const VecX& v) {
      const auto c2 = transform_covariance(cov_of(v, 0), Eigen::Map<const Mat3>(v.data() + 6));
      return VecX(Eigen::Map<const Eigen::Matrix<double, 6, 1>>(c2.v.data()));
    };
    Bwd b = [](const VecX& v, const VecX& w) {
      const auto g = transform_covariance_backward(cov_of(v, 0), Eigen::Map<const Mat3>(v.data() + 6), cov_from_w(w, 0));
      VecX o(15);
      for (int k = 0; k < 6; ++k) o[k] = g.cov[k];
      o.tail<9>() = g.j.reshaped();
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("gaussian_density", "gauss", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const Covariance3 c = random_spd(rng, 0.6);
    VecX x(12);
    x.head<3>() = random_vec(rng, 3, 0.5);
    x.segment<3>(3) = random_vec(rng, 3, 0.5);
    for (int k = 0; k < 6; ++k) x[6 + k] = c[k];
    Fwd f = [](const VecX& v) {
      VecX y(1);
      y[0] = gaussian_density(v.head<3>(), v.segment<3>(3), cov_of(v, 6));
      return y;
    };
    Bwd b = [](const VecX& v, const VecX& w) {
      const auto g = gaussian_density_backward(v.head<3>(), v.segment<3>(3), cov_of(v, 6), w[0]);
      VecX o(12);
      o << g.x, g.mean, Eigen::Map<const Eigen::Matrix<double, 6, 1>>(g.cov.v.data());
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });

  add("forward_kinematics", "skeleton", 1e-4, [](const Settings& s) {
    const Skeleton skel = make_synthetic_skeleton();
    const std::size_t nj = skel.size();
    std::mt19937_64 rng(s.seed);
    VecX x(static_cast<Eigen::Index>(4 * nj + 3));
    for (std::size_t j = 0; j < nj; ++j)
      x.segment<4>(static_cast<Eigen::Index>(4 * j)) = quat_from_axis_angle(random_vec(rng, 3).normalized(), 0.7);
    x.tail<3>() = random_vec(rng, 3, 0.1);
    auto pose_of = [nj](const VecX& v) {
      Pose p = Pose::identity(nj);
      for (std::size_t j = 0; j < nj; ++j) p.joint_rotations[j] = v.segment<4>(static_cast<Eigen::Index>(4 * j));
      p.root_translation = v.tail<3>();
      return p;
    };
    Fwd f = [=](const VecX& v) {
      const auto world = forward_kinematics(skel, pose_of(v));
      VecX y(static_cast<Eigen::Index>(12 * nj));
      for (std::size_t j = 0; j < nj; ++j)
        y.segment<12>(static_cast<Eigen::Index>(12 * j)) = Eigen::Matrix<double, 3, 4>(world[j].topRows<3>()).reshaped();
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      std::vector<Mat4> gw(nj, Mat4::Zero());
      for (std::size_t j = 0; j < nj; ++j)
        gw[j].topRows<3>() = w.segment<12>(static_cast<Eigen::Index>(12 * j)).reshaped(3, 4);
      const auto g = forward_kinematics_backward(skel, pose_of(v), gw);
      VecX o(v.size());
      for (std::size_t j = 0; j < nj; ++j) o.segment<4>(static_cast<Eigen::Index>(4 * j)) = g.joint_rotations[j];
      o.tail<3>() = g.root_translation;
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("lbs", "skeleton", 1e-4, [](const Settings& s) {
    const Skeleton skel = make_synthetic_skeleton();
    const std::size_t nj = skel.size(), np = 5;
    std::mt19937_64 rng(s.seed);
    std::vector<SkinWeights> ws;
    std::uniform_real_distribution<double> u(0.1, 1.0);
    for (std::size_t i = 0; i < np; ++i) {
      std::vector<double> d(nj);
      for (auto& v : d) v = u(rng);
      ws.push_back(SkinWeights::from_dense(d));
    }
    VecX x(static_cast<Eigen::Index>(3 * np + 12 * nj));
    x.head(static_cast<Eigen::Index>(3 * np)) = random_vec(rng, static_cast<Eigen::Index>(3 * np), 0.3);
    x.tail(static_cast<Eigen::Index>(12 * nj)) = random_vec(rng, static_cast<Eigen::Index>(12 * nj));
    auto unpack = [=](const VecX& v, std::vector<Vec3>& pts, std::vector<Mat4>& world) {
      pts.resize(np);
      world.assign(nj, Mat4::Identity());
      for (std::size_t i = 0; i < np; ++i) pts[i] = v.segment<3>(static_cast<Eigen::Index>(3 * i));
      for (std::size_t j = 0; j < nj; ++j)
        world[j].topRows<3>() = v.segment<12>(static_cast<Eigen::Index>(3 * np + 12 * j)).reshaped(3, 4);
    };
    Fwd f = [=](const VecX& v) {
      std::vector<Vec3> pts;
      std::vector<Mat4> world;
      unpack(v, pts, world);
      const auto out = lbs_points(pts, ws, world, skel.inverse_bind());
      VecX y(static_cast<Eigen::Index>(3 * np));
      for (std::size_t i = 0; i < np; ++i) y.segment<3>(static_cast<Eigen::Index>(3 * i)) = out[i];
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      std::vector<Vec3> pts, gout(np);
      std::vector<Mat4> world;
      unpack(v, pts, world);
      for (std::size_t i = 0; i < np; ++i) gout[i] = w.segment<3>(static_cast<Eigen::Index>(3 * i));
      const auto g = lbs_points_backward(pts, ws, world, skel.inverse_bind(), gout);
      VecX o(v.size());
      for (std::size_t i = 0; i < np; ++i) o.segment<3>(static_cast<Eigen::Index>(3 * i)) = g.points[i];
      for (std::size_t j = 0; j < nj; ++j)
        o.segment<12>(static_cast<Eigen::Index>(3 * np + 12 * j)) = Mat34(g.joint_worlds[j].topRows<3>()).reshaped();
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });

  add("deformation_gradient", "cage", 1e-4, [](const Settings& s) {
    const TetCage cage = single_tet();
    std::mt19937_64 rng(s.seed);
    VecX x(12);
    for (int k = 0; k < 4; ++k) x.segment<3>(3 * k) = cage.nodes_canonical[static_cast<std::size_t>(k)];
    x += random_vec(rng, 12, 0.2);
    auto nodes_of = [](const VecX& v) {
      std::vector<Vec3> n(4);
      for (int k = 0; k < 4; ++k) n[static_cast<std::size_t>(k)] = v.segment<3>(3 * k);
      return n;
    };
    Fwd f = [=](const VecX& v) { return VecX(deformation_gradient(cage, nodes_of(v), 0).reshaped()); };
    Bwd b = [=](const VecX& v, const VecX& w) {
      std::vector<Vec3> g(4, Vec3::Zero());
      deformation_gradient_backward(cage, 0, Eigen::Map<const Mat3>(w.data()), g);
      VecX o(12);
      for (int k = 0; k < 4; ++k) o.segment<3>(3 * k) = g[static_cast<std::size_t>(k)];
      (void)v;
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("deform_point", "cage", 1e-4, [](const Settings& s) {
    const TetCage cage = single_tet();
    std::mt19937_64 rng(s.seed);
    VecX x(16);
    x.head<12>() = random_vec(rng, 12);
    x.tail<4>() = Vec4(0.1, 0.2, 0.3, 0.4);
    auto nodes_of = [](const VecX& v) {
      std::vector<Vec3> n(4);
      for (int k = 0; k < 4; ++k) n[static_cast<std::size_t>(k)] = v.segment<3>(3 * k);
      return n;
    };
    Fwd f = [=](const VecX& v) { return VecX(deform_point(cage, nodes_of(v), 0, v.tail<4>())); };
    Bwd b = [=](const VecX& v, const VecX& w) {
      std::vector<Vec3> g(4, Vec3::Zero());
      const Vec4 gb = deform_point_backward(cage, nodes_of(v), 0, v.tail<4>(), w.head<3>(), g);
      VecX o(16);
      for (int k = 0; k < 4; ++k) o.segment<3>(3 * k) = g[static_cast<std::size_t>(k)];
      o.tail<4>() = gb;
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("neo_hookean", "cage", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    VecX x(27);
    for (int t = 0; t < 3; ++t) x.segment<9>(9 * t) = (Mat3::Identity() + 0.3 * Mat3::Random()).reshaped();
    const NeoParams np{1.3, 0.7};
    auto js = [](const VecX& v) {
      std::vector<Mat3> j(3);
      for (int t = 0; t < 3; ++t) j[static_cast<std::size_t>(t)] = Eigen::Map<const Mat3>(v.data() + 9 * t);
      return j;
    };
    (void)rng;
    Fwd f = [=](const VecX& v) {
      VecX y(1);
      y[0] = neo_hookean_energy(js(v), np);
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      const auto g = neo_hookean_backward(js(v), np, w[0]);
      VecX o(27);
      for (int t = 0; t < 3; ++t) o.segment<9>(9 * t) = g[static_cast<std::size_t>(t)].reshaped();
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });

  // Networks: one MLP shape per role, checked through inputs, pose and weights.
  auto mlp_op = [&](const std::string& name, int shared, int cols, int out) {
    add(name, "nets", 1e-4, [=](const Settings& s) {
      std::mt19937_64 rng(s.seed);
      auto net = std::make_shared<Mlp>(shared, cols, std::vector<int>{7, 6}, out);
      net->init_kaiming(rng, false);
      const int batch = 3;
      std::size_t nw = 0;
      for (auto& w : net->weights()) nw += static_cast<std::size_t>(w.size());
      for (auto& b : net->biases()) nw += static_cast<std::size_t>(b.size());
      VecX x(static_cast<Eigen::Index>(shared + cols * batch + static_cast<int>(nw)));
      x.head(shared + cols * batch) = random_vec(rng, shared + cols * batch);
      {
        Eigen::Index o = shared + cols * batch;
        for (auto& w : net->weights()) {
          x.segment(o, w.size()) = w.reshaped();
          o += w.size();
        }
        for (auto& b : net->biases()) {
          x.segment(o, b.size()) = b.reshaped() + random_vec(rng, b.size(), 0.1);
          o += b.size();
        }
      }
      auto load = [=](const VecX& v) {
        Eigen::Index o = shared + cols * batch;
        for (auto& w : net->weights()) {
          w = v.segment(o, w.size()).reshaped(w.rows(), w.cols());
          o += w.size();
        }
        for (auto& b : net->biases()) {
          b = v.segment(o, b.size()).reshaped(b.rows(), b.cols());
          o += b.size();
        }
      };
      Fwd f = [=](const VecX& v) {
        load(v);
        const MatX cx = v.segment(shared, cols * batch).reshaped(cols, batch);
        return VecX(net->forward(v.head(shared), cx).reshaped());
      };
      Bwd b = [=](const VecX& v, const VecX& w) {
        load(v);
        const MatX cx = v.segment(shared, cols * batch).reshaped(cols, batch);
        Mlp::Cache c;
        net->forward(v.head(shared), cx, &c);
        ParamList pl;
        net->collect(pl, "n");
        zero_grads(pl);
        VecX gs;
        const MatX gx = net->backward(c, w.reshaped(out, batch), true, &gs);
        VecX o(v.size());
        o.head(shared) = gs;
        o.segment(shared, cols * batch) = gx.reshaped();
        Eigen::Index k = shared + cols * batch;
        for (std::size_t l = 0; l < net->weights().size(); ++l) {
          const auto& pw = pl[2 * l];
          o.segment(k, static_cast<Eigen::Index>(pw.size)) = Eigen::Map<const VecX>(pw.grad, static_cast<Eigen::Index>(pw.size));
          k += static_cast<Eigen::Index>(pw.size);
        }
        for (std::size_t l = 0; l < net->weights().size(); ++l) {
          const auto& pb = pl[2 * l + 1];
          o.segment(k, static_cast<Eigen::Index>(pb.size)) = Eigen::Map<const VecX>(pb.grad, static_cast<Eigen::Index>(pb.size));
          k += static_cast<Eigen::Index>(pb.size);
        }
        return o;
      };
      return compare(f, b, x, 1e-4, s);
    });
  };
  mlp_op("mlp_psi", 5, positional_encoding_dim(1, true), 3);
  mlp_op("mlp_pi", 5, 11, 11);
  mlp_op("mlp_gamma", 5, 16 + 4, 4);

  add("psi_head", "nets", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const VecX x = random_vec(rng, 12);
    Fwd f = [](const VecX& v) { return VecX(psi_head(v.reshaped(3, 4), 0.05).reshaped()); };
    Bwd b = [](const VecX& v, const VecX& w) {
      return VecX(psi_head_backward(v.reshaped(3, 4), 0.05, w.reshaped(3, 4)).reshaped());
    };
    return compare(f, b, x, 1e-4, s);
  });
  for (const bool mean_mode : {false, true}) {
    add(mean_mode ? "pi_head_mean" : "pi_head", "nets", 1e-4, [mean_mode](const Settings& s) {
      std::mt19937_64 rng(s.seed);
      const int rows = mean_mode ? 10 : 11, nb = mean_mode ? 3 : 4;
      const VecX x = random_vec(rng, rows * 3);
      const HeadScales hs;
      Fwd f = [=](const VecX& v) {
        const auto d = pi_head(v.reshaped(rows, 3), hs, mean_mode);
        MatX y(rows, 3);
        y << d.barycentric, d.log_scale, d.rotation;
        return VecX(y.reshaped());
      };
      Bwd b = [=](const VecX& v, const VecX& w) {
        const MatX wm = w.reshaped(rows, 3);
        PiDeltas g;
        g.barycentric = wm.topRows(nb);
        g.log_scale = wm.middleRows(nb, 3);
        g.rotation = wm.bottomRows(4);
        return VecX(pi_head_backward(v.reshaped(rows, 3), hs, g, mean_mode).reshaped());
      };
      return compare(f, b, x, 1e-4, s);
    });
  }
  add("gamma_head", "nets", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const VecX x = random_vec(rng, 4 * 3 + 3);
    Fwd f = [](const VecX& v) {
      const VecX bias = v.tail<3>();
      const auto o = gamma_head(v.head<12>().reshaped(4, 3), &bias);
      VecX y(12);
      y << o.color.reshaped(), o.opacity;
      return y;
    };
    Bwd b = [](const VecX& v, const VecX& w) {
      const VecX bias = v.tail<3>();
      const auto o = gamma_head(v.head<12>().reshaped(4, 3), &bias);
      const MatX g = gamma_head_backward(o, w.head<9>().reshaped(3, 3), w.tail<3>());
      VecX r(15);
      r << g.reshaped(), g.row(3).transpose();
      return r;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("sh_basis", "nets", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const VecX x = random_vec(rng, 3).normalized();
    Fwd f = [](const VecX& v) { return VecX(sh_basis_unchecked(v.head<3>())); };
    Bwd b = [](const VecX& v, const VecX& w) { return VecX(sh_basis_backward(v.head<3>(), w.head<16>())); };
    return compare(f, b, x, 1e-4, s);
  });
  add("sh_color", "nets", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    VecX x(51);
    x.head<48>() = random_vec(rng, 48, 0.5);
    x.tail<3>() = random_vec(rng, 3).normalized();
    Fwd f = [](const VecX& v) { return VecX(sh_color_eval(v.head<48>(), v.tail<3>())); };
    Bwd b = [](const VecX& v, const VecX& w) {
      const auto g = sh_color_eval_backward(v.head<48>(), v.tail<3>(), w.head<3>());
      VecX o(51);
      o << g.coeffs, g.direction;
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });

  add("project_gaussian", "rasterizer", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    Camera cam = Camera::look_at({0.3, -0.2, -3.0}, {0.0, 0.0, 0.0}, {0.0, -1.0, 0.0}, 40.0, 32, 32);
    const Covariance3 c = random_spd(rng, 0.01);
    VecX x(9);
    x.head<3>() = random_vec(rng, 3, 0.3);
    for (int k = 0; k < 6; ++k) x[3 + k] = c[k];
    Fwd f = [=](const VecX& v) {
      const auto sp = project_gaussian(v.head<3>(), cov_of(v, 3), cam);
      VecX y(6);
      y << sp->mean2d, sp->cov2d.reshaped();
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      const auto g = project_gaussian_backward(v.head<3>(), cov_of(v, 3), cam, w.head<2>(),
                                               Eigen::Map<const Mat2>(w.data() + 2));
      VecX o(9);
      o << g.mean3d, Eigen::Map<const Eigen::Matrix<double, 6, 1>>(g.cov3d.v.data());
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("rasterize", "rasterizer", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    const int size = 16, n = 6;
    const Camera cam = small_camera(size);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<Splat2D> base(static_cast<std::size_t>(n));
    VecX x(n * 9);
    for (int i = 0; i < n; ++i) {
      auto& sp = base[static_cast<std::size_t>(i)];
      sp.depth = 1.0 + i;
      sp.id = i;
      sp.part_color = part_color(static_cast<Part>(i % 3));
      const double a = 3.0 + 6.0 * u(rng), d = 3.0 + 6.0 * u(rng), bxy = (u(rng) - 0.5) * 2.0;
      x.segment<9>(9 * i) << 3.0 + 10.0 * u(rng), 3.0 + 10.0 * u(rng), a, bxy, d, u(rng), u(rng), u(rng),
          0.2 + 0.5 * u(rng);
    }
    auto splats_of = [=](const VecX& v) {
      auto sp = base;
      for (int i = 0; i < n; ++i) {
        const auto seg = v.segment<9>(9 * i);
        auto& p = sp[static_cast<std::size_t>(i)];
        p.mean2d = seg.head<2>();
        p.cov2d << seg[2], seg[3], seg[3], seg[4];
        p.color = seg.segment<3>(5);
        p.alpha_base = seg[8];
      }
      return sp;
    };
    const Vec3 bg(0.1, 0.2, 0.3);
    Fwd f = [=](const VecX& v) {
      const auto out = rasterize(splats_of(v), cam, bg);
      VecX y(static_cast<Eigen::Index>(out.color.data.size() * 2));
      std::copy(out.color.data.begin(), out.color.data.end(), y.data());
      std::copy(out.part.data.begin(), out.part.data.end(), y.data() + out.color.data.size());
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      const auto sp = splats_of(v);
      RenderState st;
      const auto out = rasterize(sp, cam, bg, {}, &st);
      Image gc(size, size), gp(size, size);
      std::copy(w.data(), w.data() + gc.data.size(), gc.data.begin());
      std::copy(w.data() + gc.data.size(), w.data() + 2 * gc.data.size(), gp.data.begin());
      const auto g = rasterize_backward(sp, cam, st, out, gc, gp);
      VecX o(v.size());
      for (int i = 0; i < n; ++i) {
        const auto& gi = g[static_cast<std::size_t>(i)];
        o.segment<9>(9 * i) << gi.mean2d, gi.cov2d(0, 0), gi.cov2d(0, 1) + gi.cov2d(1, 0), gi.cov2d(1, 1), gi.color,
            gi.alpha_base;
      }
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });

  add("ssim", "losses", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image ref(12, 10);
    for (auto& v : ref.data) v = u(rng);
    VecX x(static_cast<Eigen::Index>(ref.data.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = u(rng);
    auto img = [ref](const VecX& v) {
      Image a(ref.width, ref.height);
      std::copy(v.data(), v.data() + v.size(), a.data.begin());
      return a;
    };
    Fwd f = [=](const VecX& v) {
      VecX y(1);
      y[0] = ssim(img(v), ref);
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      Image g;
      ssim(img(v), ref, &g);
      VecX o(v.size());
      for (Eigen::Index i = 0; i < o.size(); ++i) o[i] = w[0] * g.data[static_cast<std::size_t>(i)];
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });
  add("color_loss", "losses", 1e-4, [](const Settings& s) {
    std::mt19937_64 rng(s.seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    Image ref(9, 11);
    for (auto& v : ref.data) v = u(rng);
    VecX x(static_cast<Eigen::Index>(ref.data.size()));
    for (Eigen::Index i = 0; i < x.size(); ++i) x[i] = u(rng);
    auto img = [ref](const VecX& v) {
      Image a(ref.width, ref.height);
      std::copy(v.data(), v.data() + v.size(), a.data.begin());
      return a;
    };
    Fwd f = [=](const VecX& v) {
      VecX y(1);
      y[0] = color_loss(img(v), ref, 0.2);
      return y;
    };
    Bwd b = [=](const VecX& v, const VecX& w) {
      Image g;
      color_loss(img(v), ref, 0.2, &g);
      VecX o(v.size());
      for (Eigen::Index i = 0; i < o.size(); ++i) o[i] = w[0] * g.data[static_cast<std::size_t>(i)];
      return o;
    };
    return compare(f, b, x, 1e-4, s);
  });

  add("avatar", "model", 1e-3, [](const Settings& s) { return check_avatar(s, false, false, 1e-3); });
  add("avatar_sh_color", "model", 1e-3, [](const Settings& s) { return check_avatar(s, true, false, 1e-3); });
  add("avatar_no_cage", "model", 1e-3, [](const Settings& s) { return check_avatar(s, false, true, 1e-3); });
  return ops;
}

inline const std::vector<std::string>& modules() {
  static const std::vector<std::string> m{"gauss", "skeleton", "cage", "nets", "rasterizer", "losses", "model"};
  return m;
}

/// Runs ops whose module matches (`all` runs everything). `perturb` names
/// one op whose analytic gradient is corrupted.
inline std::vector<Result> run(const std::string& module, const std::string& perturb = {}, Settings base = {}) {
  if (module != "all" && std::find(modules().begin(), modules().end(), module) == modules().end())
    throw ConfigError("unknown gradient-check module: " + module);
  const auto ops = registry();
  if (!perturb.empty() &&
      std::none_of(ops.begin(), ops.end(), [&](const Op& o) { return o.name == perturb; }))
    throw ConfigError("unknown op to perturb: " + perturb);
  std::vector<Result> out;
  for (const auto& op : ops) {
    if (module != "all" && op.module != module) continue;
    Settings s = base;
    s.perturb = op.name == perturb;
    const auto t0 = std::chrono::steady_clock::now();
    Result r = op.run(s);
    r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    r.op = op.name;
    r.module = op.module;
    out.push_back(r);
  }
  return out;
}

} // namespace d3ga::gradcheck
