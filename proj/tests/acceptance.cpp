// Acceptance run: one PASS/FAIL line per headline criterion.
// Heavy: trains three desk-scale avatars (about two hours on one core).

#include "d3ga/train.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <fstream>
#include <numeric>
#include <cstdlib>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>
#include <thread>

#include <sys/wait.h>

using namespace d3ga;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Line {
  std::string name;
  bool pass;
  std::string detail;
};

std::vector<Line> lines;

void report(const std::string& name, bool pass, const std::string& detail) {
  lines.push_back({name, pass, detail});
  std::cout << (pass ? "PASS " : "FAIL ") << name << ": " << detail << std::endl;
}

std::string fmt(double v, int prec = 3) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

int shell(const std::string& cmd) {
  std::cerr << "+ " << cmd << std::endl;
  const int rc = std::system(cmd.c_str());
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : 128;
}

std::string quote(const std::string& s) { return "'" + s + "'"; }

Mat3 random_rotation(std::mt19937_64& rng) {
  std::normal_distribution<double> n;
  return quat_to_rotation(Vec4(n(rng), n(rng), n(rng), n(rng)).normalized());
}

// ---------------------------------------------------------------------------

void gradient_suite(const std::string& cli, const std::string& work) {
  const auto t0 = Clock::now();
  const int rc = shell(quote(cli) + " check-grads --module all --report " + quote(work + "/grads.csv") + " > " +
                       quote(work + "/grads.out"));
  const double s = seconds_since(t0);
  report("gradient suite", rc == 0 && s < 300.0,
         "check-grads --module all exit " + std::to_string(rc) + " in " + fmt(s) + " s (limit 300 s)");
}

void geometry_oracles() {
  std::mt19937_64 rng(1);
  const SyntheticBody body = make_synthetic_body();
  const TetCage cage = tetrahedralize_solid(body.template_mesh, 0.03);

  double rigid_j = 0, rigid_neo = 0;
  for (int trial = 0; trial < 5; ++trial) {
    const Mat3 r = random_rotation(rng);
    const Vec3 t = Vec3::Random();
    std::vector<Vec3> posed;
    for (const auto& v : cage.nodes_canonical) posed.push_back(r * v + t);
    const auto js = deformation_gradients(cage, posed);
    for (const auto& j : js) rigid_j = std::max(rigid_j, (j - r).norm());
    rigid_neo = std::max(rigid_neo, std::abs(neo_hookean_energy(js, {1.0, 1.0})));
  }

  double embed = 0;
  std::uniform_int_distribution<int> pick_tet(0, static_cast<int>(cage.tet_count()) - 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int k = 0; k < 2000; ++k) {
    const auto& tet = cage.tets[static_cast<std::size_t>(pick_tet(rng))];
    Vec4 w(u(rng), u(rng), u(rng), u(rng));
    w /= w.sum();
    Vec3 x = Vec3::Zero();
    for (int c = 0; c < 4; ++c) x += w[c] * cage.nodes_canonical[static_cast<std::size_t>(tet[static_cast<std::size_t>(c)])];
    const auto [ti, b] = embed_point(cage, x);
    embed = std::max(embed, (deform_point(cage, cage.nodes_canonical, ti, b) - x).norm());
  }

  double vol = 0;
  std::normal_distribution<double> n(0.0, 0.003);
  std::vector<Vec3> posed;
  const Mat3 a = Mat3::Identity() + 0.2 * Mat3::Random();
  for (const auto& v : cage.nodes_canonical) posed.push_back(a * v + Vec3(n(rng), n(rng), n(rng)));
  const auto js = deformation_gradients(cage, posed);
  for (std::size_t t = 0; t < cage.tet_count(); ++t) {
    const auto& k = cage.tets[t];
    const double vp = signed_tet_volume(posed[static_cast<std::size_t>(k[0])], posed[static_cast<std::size_t>(k[1])],
                                        posed[static_cast<std::size_t>(k[2])], posed[static_cast<std::size_t>(k[3])]);
    vol = std::max(vol, std::abs(js[t].determinant() * cage.canonical_volumes[t] - vp) / std::abs(vp));
  }
  const bool pass = rigid_j < 1e-9 && rigid_neo < 1e-12 && embed < 1e-9 && vol < 1e-9;
  report("geometry oracles", pass,
         "rigid |J-R| " + fmt(rigid_j) + ", rigid Neo " + fmt(rigid_neo) + ", embed->deform " + fmt(embed) +
             ", det(J)V rel " + fmt(vol) + " over " + std::to_string(cage.tet_count()) + " tets");
}

Camera pixel_camera(int w, int h) {
  Camera c;
  c.fx = c.fy = 50.0;
  c.cx = 0.5 * w;
  c.cy = 0.5 * h;
  c.width = w;
  c.height = h;
  return c;
}

// Per-pixel: evaluate every splat, full depth sort, front-to-back composite.
Image naive_color(const std::vector<Splat2D>& splats, int w, int h, const Vec3& bg, const RasterSettings& rs) {
  Image out(w, h);
  std::vector<std::size_t> idx(splats.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return std::tie(splats[a].depth, splats[a].id) < std::tie(splats[b].depth, splats[b].id);
  });
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double t = 1.0;
      Vec3 c = Vec3::Zero();
      for (std::size_t i : idx) {
        const auto& s = splats[i];
        const Vec2 d(x + 0.5 - s.mean2d.x(), y + 0.5 - s.mean2d.y());
        const double q = d.dot(s.cov2d.inverse() * d);
        if (q > rs.cutoff) continue;
        const double al = std::min(rs.alpha_max, s.alpha_base * std::exp(-0.5 * q));
        c += t * al * s.color;
        t *= 1 - al;
        if (t < rs.min_transmittance) break;
      }
      out.set_pixel(x, y, c + t * bg);
    }
  return out;
}

void rasterizer_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> size(8, 64), count(1, 200);
  std::uniform_real_distribution<double> u(0, 1);
  const RasterSettings rs;
  double worst = 0;
  bool alpha_equal = true;
  for (int scene = 0; scene < 20; ++scene) {
    const int w = size(rng), h = size(rng), n = count(rng);
    std::vector<Splat2D> splats(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      auto& s = splats[static_cast<std::size_t>(i)];
      s.mean2d = Vec2(u(rng) * (w + 10) - 5, u(rng) * (h + 10) - 5);
      const double th = 6.3 * u(rng);
      Mat2 r;
      r << std::cos(th), -std::sin(th), std::sin(th), std::cos(th);
      s.cov2d = r * Vec2(0.5 + 20 * u(rng), 0.5 + 20 * u(rng)).asDiagonal() * r.transpose();
      s.depth = 0.5 + 5 * u(rng);
      s.color = Vec3(u(rng), u(rng), u(rng));
      s.alpha_base = u(rng);
      s.id = i;
    }
    const Vec3 bg(0.2, 0.1, 0.7);
    const auto out = rasterize(splats, pixel_camera(w, h), bg, rs);
    const Image ref = naive_color(splats, w, h, bg, rs);
    for (std::size_t i = 0; i < ref.data.size(); ++i) worst = std::max(worst, std::abs(out.color.data[i] - ref.data[i]));
    // White colour and part: both composites must equal the alpha image bit for bit.
    for (auto& s : splats) s.color = s.part_color = Vec3::Ones();
    const auto white = rasterize(splats, pixel_camera(w, h), Vec3::Zero(), rs);
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        for (int c = 0; c < 3; ++c) {
          const double a = white.alpha[static_cast<std::size_t>(y * w + x)];
          alpha_equal = alpha_equal && white.color.pixel(x, y)[c] == a && white.part.pixel(x, y)[c] == a;
        }
  }
  Splat2D front, back;
  front.mean2d = back.mean2d = Vec2(10.5, 6.5);
  front.cov2d = back.cov2d = Mat2::Identity() * 4.0;
  front.depth = 1.0;
  back.depth = 2.0;
  back.id = 1;
  front.color = Vec3(1.0, 0.2, 0.1);
  back.color = Vec3(0.3, 0.9, 0.4);
  front.alpha_base = 0.35;
  back.alpha_base = 0.6;
  const auto two = rasterize({back, front}, pixel_camera(20, 12), Vec3::Zero());
  const double closed =
      (two.color.pixel(10, 6) - (front.color * 0.35 + back.color * 0.6 * 0.65)).cwiseAbs().maxCoeff();
  report("rasterizer oracle", worst < 1e-5 && closed < 1e-7 && alpha_equal,
         "max |tile - naive| " + fmt(worst) + " over 20 scenes, two-splat error " + fmt(closed) +
             ", alpha images bitwise equal: " + (alpha_equal ? "yes" : "no"));
}

void monte_carlo_projection() {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> n;
  const Camera cam = Camera::look_at(Vec3(0.3, 0.2, -2.0), Vec3::Zero(), Vec3(0, 1, 0), 40.0, 128, 128);
  RasterSettings rs;
  rs.dilation = 0.0;
  double worst = 0;
  for (const Vec3& mu : {Vec3(0, 0, 0), Vec3(0.25, -0.2, 0.1), Vec3(-0.3, 0.3, -0.2)}) {
    const auto cov = compose_covariance(Vec4(n(rng), n(rng), n(rng), n(rng)).normalized(), Vec3(0.01, 0.02, 0.005));
    const auto s = project_gaussian(mu, cov, cam, rs);
    if (!s) {
      worst = 1e9;
      continue;
    }
    const Mat3 l = Eigen::LLT<Mat3>(cov.matrix()).matrixL();
    const int samples = 100000;
    std::vector<Vec2> px(samples);
    Vec2 mean = Vec2::Zero();
    for (auto& p : px) {
      const Vec3 t = cam.to_camera(mu + l * Vec3(n(rng), n(rng), n(rng)));
      p = Vec2(cam.fx * t.x() / t.z() + cam.cx, cam.fy * t.y() / t.z() + cam.cy);
      mean += p;
    }
    mean /= samples;
    Mat2 m2 = Mat2::Zero();
    for (const auto& p : px) m2 += (p - mean) * (p - mean).transpose();
    m2 /= samples - 1;
    worst = std::max(worst, (m2 - s->cov2d).norm() / m2.norm());
  }
  report("Monte-Carlo projection", worst < 0.05, "worst relative Frobenius error " + fmt(worst) + " (limit 0.05)");
}

// ---------------------------------------------------------------------------

struct RunResult {
  EvalResult train, heldout;
  double seconds = 0;
  bool ok = false;
};

RunResult train_and_evaluate(const std::string& cli, const std::string& work, const std::string& name,
                             const std::string& sets, int steps, bool reuse) {
  RunResult r;
  const std::string ckpt = work + "/" + name + ".d3gc";
  const auto t0 = Clock::now();
  if (!(reuse && fs::exists(ckpt))) {
    const int rc = shell(quote(cli) + " train --data " + quote(work + "/scene") + " --cages " + quote(work + "/cages") +
                         " --out " + quote(ckpt) + " --set steps=" + std::to_string(steps) + sets + " 2> " +
                         quote(work + "/" + name + ".log"));
    if (rc != 0) return r;
  }
  r.seconds = seconds_since(t0);
  const TrainState st = load_checkpoint(ckpt);
  r.train = evaluate(st.avatar, load_scene(work + "/scene", Split::train));
  r.heldout = evaluate(st.avatar, load_scene(work + "/scene", Split::heldout_poses));
  r.ok = true;
  std::cerr << name << ": train psnr " << r.train.psnr << " held-out psnr " << r.heldout.psnr << " iou "
            << r.heldout.iou << " (" << r.seconds << " s)" << std::endl;
  return r;
}

std::vector<double> flat_params(Avatar& a) {
  std::vector<double> out;
  for (const auto& p : a.params()) out.insert(out.end(), p.data, p.data + p.size);
  return out;
}

void determinism(const std::string& work) {
  const SceneData scene = load_scene(work + "/scene");
  const auto cages = read_cages(work + "/cages");
  TrainConfig c;
  c.steps = 40;
  c.gaussian_count = 1000;
  c.checkpoint_every = 20;
  auto run = [&](const std::string& name, const std::function<void(const StepLog&)>& hook) {
    TrainState st = init_training(c, scene, cages);
    train(st, scene, {work + "/" + name, {}, hook});
  };
  run("det_a.d3gc", {});
  run("det_b.d3gc", {});
  const bool same = files_identical(work + "/det_a.d3gc", work + "/det_b.d3gc");
  struct Stop {};
  try {
    run("det_mid.d3gc", [](const StepLog& l) {
      if (l.step == 20) throw Stop{};
    });
  } catch (const Stop&) {
  }
  TrainState resumed = load_checkpoint(work + "/det_mid.d3gc");
  const int resumed_at = resumed.step;
  train(resumed, scene, {work + "/det_resumed.d3gc", {}, {}});
  const bool resume = resumed_at == 20 && files_identical(work + "/det_a.d3gc", work + "/det_resumed.d3gc");
  report("determinism", same && resume,
         std::string("same-seed checkpoints identical: ") + (same ? "yes" : "no") +
             ", resume from step 20 identical: " + (resume ? "yes" : "no"));
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance run"};
  std::string work = "acceptance_work", cli;
  int steps = 10000;
  bool reuse = false;
  app.add_option("--work", work, "Scratch directory");
  app.add_option("--cli", cli, "d3ga binary")->required();
  app.add_option("--steps", steps, "Training steps per run");
  app.add_flag("--reuse", reuse, "Keep an existing scene and checkpoints");
  CLI11_PARSE(app, argc, argv);
  fs::create_directories(work);
  work = fs::absolute(work).string();

  gradient_suite(cli, work);
  geometry_oracles();
  rasterizer_oracle();
  monte_carlo_projection();

  if (!(reuse && fs::exists(work + "/scene/manifest.json"))) {
    fs::remove_all(work + "/scene");
    if (shell(quote(cli) + " synth-data --out " + quote(work + "/scene") + " --seed 0") != 0) {
      report("end-to-end overfit", false, "synth-data failed");
      return 1;
    }
  }
  if (!(reuse && fs::exists(work + "/cages/body.tcag")))
    shell(quote(cli) + " build-cages --data " + quote(work + "/scene") + " --out " + quote(work + "/cages"));

  const RunResult full = train_and_evaluate(cli, work, "full", "", steps, reuse);
  report("end-to-end overfit", full.ok && full.train.psnr >= 28 && full.heldout.psnr >= 24 && full.seconds <= 4 * 3600,
         "train PSNR " + fmt(full.train.psnr, 4) + " (>= 28), held-out-pose PSNR " + fmt(full.heldout.psnr, 4) +
             " (>= 24), " + std::to_string(steps) + " steps in " + fmt(full.seconds / 60, 3) + " min on " +
             std::to_string(std::thread::hardware_concurrency()) + " core(s)");

  const RunResult no_cage = train_and_evaluate(cli, work, "no_cage", " --set ablation.no_cage=true", steps, reuse);
  const RunResult no_garment =
      train_and_evaluate(cli, work, "no_garment_loss", " --set ablation.no_garment_loss=true", steps, reuse);
  const bool cage_dir = full.ok && no_cage.ok && no_cage.heldout.psnr < full.heldout.psnr;
  const bool garment_dir = full.ok && no_garment.ok && no_garment.heldout.iou < full.heldout.iou;
  report("ablation directionality", cage_dir && garment_dir,
         "held-out PSNR no_cage " + fmt(no_cage.heldout.psnr, 5) + " vs full " + fmt(full.heldout.psnr, 5) +
             (cage_dir ? " (lower)" : " (NOT lower)") + "; held-out IoU no_garment_loss " +
             fmt(no_garment.heldout.iou, 5) + " vs full " + fmt(full.heldout.iou, 5) +
             (garment_dir ? " (lower)" : " (NOT lower)"));

  const int rc = shell(quote(cli) + " bench --checkpoint " + quote(work + "/full.d3gc") +
                       " --gaussians 25000,100000,200000,300000 --frames 10 --check-trend --csv " +
                       quote(work + "/bench.csv"));
  std::ifstream bench(work + "/bench.csv");
  std::string csv((std::istreambuf_iterator<char>(bench)), std::istreambuf_iterator<char>());
  for (auto& ch : csv)
    if (ch == '\n') ch = ' ';
  report("throughput trend", rc == 0, "bench --check-trend exit " + std::to_string(rc) + "; " + csv);

  determinism(work);

  int failed = 0;
  for (const auto& l : lines) failed += !l.pass;
  std::cout << lines.size() - static_cast<std::size_t>(failed) << "/" << lines.size() << " criteria passed"
            << std::endl;
  return failed == 0 ? 0 : 1;
}
