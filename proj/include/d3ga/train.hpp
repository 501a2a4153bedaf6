#pragma once

// Training loop, evaluation over a split, and render-throughput benchmark.

#include "d3ga/checkpoint.hpp"
#include "d3ga/config.hpp"
#include "d3ga/losses.hpp"
#include "d3ga/model.hpp"
#include "d3ga/optim.hpp"
#include "d3ga/synthetic.hpp"

#include <chrono>
#include <functional>
#include <iomanip>
#include <sstream>

namespace d3ga {

struct StepLog {
  int step = 0;
  double loss = 0;
  LossTerms terms;
  double psnr = 0;
  double lr = 0;
};

using LogFn = std::function<void(const std::string&)>;

/// Reads cages/<part>.tcag from `dir`.
inline std::map<Part, TetCage> read_cages(const std::string& dir) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(dir)) throw IoError("cage directory not found: " + dir);
  std::map<Part, TetCage> out;
  for (int p = 0; p < kPartCount; ++p) {
    const std::string path = dir + "/" + std::string(part_name(static_cast<Part>(p))) + ".tcag";
    if (fs::exists(path)) out[static_cast<Part>(p)] = read_cage(path);
  }
  if (out.empty()) throw IoError("no cages in " + dir);
  return out;
}

inline void write_cages(const std::string& dir, const std::map<Part, TetCage>& cages) {
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
  for (const auto& [p, c] : cages) write_cage(dir + "/" + std::string(part_name(p)) + ".tcag", c);
}

/// Fresh run state: builds the avatar from the scene template and cages.
inline TrainState init_training(const TrainConfig& cfg, const SceneData& scene, std::map<Part, TetCage> cages) {
  if (scene.views.empty()) throw ConfigError("scene has no views");
  for (const auto& c : scene.cameras)
    if (c.width != cfg.width || c.height != cfg.height)
      throw ConfigError("config image size " + std::to_string(cfg.width) + "x" + std::to_string(cfg.height) +
                        " does not match the scene cameras");
  TrainState st;
  st.config = cfg;
  st.cameras = scene.cameras;
  st.poses = scene.poses;
  if (cages.empty() && !cfg.model.no_cage)
    cages = build_cages(scene.template_mesh, scene.template_weights, cfg.cages);
  st.cages = cages;
  st.avatar = Avatar::create(cfg.model, scene.skeleton, scene.template_mesh, scene.template_weights, cages,
                             cfg.gaussian_count, static_cast<int>(scene.poses.size()), cfg.seed, cfg.init);
  st.embedding_failures = st.avatar.embedding_failures;
  st.adam = Adam(AdamConfig{cfg.lr, 0.9, 0.999, 1e-8, cfg.group_lr});
  st.adam.bind(st.avatar.params());
  return st;
}

/// splitmix64 of (seed, step): the view drawn at `step` does not depend on history.
inline std::uint64_t step_seed(std::uint64_t seed, std::uint64_t step) {
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ull + step + 0x632BE59BD9B4E019ull;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline std::size_t view_for_step(const TrainConfig& cfg, int step, std::size_t views) {
  return static_cast<std::size_t>(step_seed(cfg.seed, static_cast<std::uint64_t>(step)) % views);
}

inline RenderOptions training_render_options() { return {}; }

/// Keeps Gaussian parameters valid after an update.
inline void project_parameters(TrainState& st) {
  Avatar& a = st.avatar;
  const ParamList params = a.params();
  const int qi = Adam::find(params, "gauss.rotation");
  for (int i = 0; i < a.gaussian_count(); ++i) {
    double* m = qi >= 0 && !st.adam.m.empty() ? st.adam.m[static_cast<std::size_t>(qi)].data() + 4 * i : nullptr;
    canonicalize_quaternion(a.rot.data() + 4 * i, m);
    if (!a.opts.no_cage) project_barycentric(a.bary.data() + 4 * i);
  }
}

/// One optimization step; returns the logged quantities.
inline StepLog train_step(TrainState& st, const SceneData& scene) {
  const TrainConfig& cfg = st.config;
  Avatar& a = st.avatar;
  const std::size_t v = view_for_step(cfg, st.step, scene.views.size());
  const View& view = scene.views[v];
  const Pose& pose = scene.poses[static_cast<std::size_t>(view.frame)];
  const Camera& cam = scene.cameras[static_cast<std::size_t>(view.camera)];
  const RenderOptions ro = training_render_options();
  FrameCache fc;
  const RenderOutput out = a.render(pose, cam, view.frame, ro, &fc);
  const Image target = scene.target(v);
  Image gc, gp;
  LossTerms terms;
  terms.color = color_loss(out.color, target, cfg.omega, &gc);
  const double garment_w = cfg.ablation.no_garment_loss ? 0.0 : cfg.nu;
  if (garment_w != 0.0) terms.garment = garment_loss(out.part, scene.mask(v), &gp);
  const double neo_w = (cfg.ablation.no_neo_loss || cfg.model.no_cage) ? 0.0 : cfg.tau;
  const NeoParams np{cfg.lame_lambda, cfg.lame_mu};
  if (neo_w != 0.0) terms.neo = a.neo_energy(fc, np);
  StepLog log;
  log.step = st.step;
  log.terms = terms;
  log.loss = total_loss(terms, LossWeights{cfg.nu, cfg.tau}, garment_w, neo_w);
  log.psnr = psnr(out.color, target);
  for (auto& g : gc.data) g *= cfg.nu;
  for (auto& g : gp.data) g *= garment_w;
  const ParamList params = a.params();
  zero_grads(params);
  a.backward(fc, gc, gp, ro, neo_w, np);
  MultiStepSchedule sched{cfg.lr, cfg.decay_rate, milestones_from_fractions(cfg.milestones, cfg.steps)};
  log.lr = sched.at(st.step);
  st.adam.step(params, log.lr);
  project_parameters(st);
  ++st.step;
  return log;
}

inline std::string format_step(const StepLog& l) {
  std::ostringstream s;
  s << "step " << l.step << " loss " << std::setprecision(6) << l.loss << " color " << l.terms.color << " garment "
    << l.terms.garment << " neo " << l.terms.neo << " psnr " << std::setprecision(4) << l.psnr << " lr "
    << std::setprecision(3) << l.lr;
  return s.str();
}

struct TrainOptions {
  std::string checkpoint_path;  // final (and periodic) checkpoint; empty: none
  LogFn log;
  std::function<void(const StepLog&)> on_step;
};

/// Runs until `cfg.steps`. A non-finite loss dumps `<checkpoint>.nonfinite`
/// and rethrows.
inline void train(TrainState& st, const SceneData& scene, const TrainOptions& opt = {}) {
  const auto t0 = std::chrono::steady_clock::now();
  while (st.step < st.config.steps) {
    StepLog l;
    try {
      l = train_step(st, scene);
    } catch (const NonFiniteLoss& e) {
      if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path + ".nonfinite", st);
      throw;
    }
    if (opt.on_step) opt.on_step(l);
    if (opt.log && (l.step % st.config.log_every == 0 || st.step == st.config.steps)) {
      const double el = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::ostringstream s;
      s << format_step(l) << " elapsed " << std::fixed << std::setprecision(1) << el << "s";
      opt.log(s.str());
    }
    if (!opt.checkpoint_path.empty() && st.config.checkpoint_every > 0 && st.step % st.config.checkpoint_every == 0 &&
        st.step < st.config.steps)
      save_checkpoint(opt.checkpoint_path, st);
  }
  if (!opt.checkpoint_path.empty()) save_checkpoint(opt.checkpoint_path, st);
}

// ---------------------------------------------------------------------------
// Evaluation

struct EvalRow {
  int frame = 0;
  int camera = 0;
  double psnr = 0, ssim = 0, iou = 0;
};

struct EvalResult {
  std::vector<EvalRow> rows;
  double psnr = 0, ssim = 0, iou = 0;
};

/// Training frames use their own embedding; held-out splits use the mean.
inline EvalResult evaluate(const Avatar& a, const SceneData& scene, std::size_t max_views = 0) {
  EvalResult r;
  const std::size_t n = max_views ? std::min(max_views, scene.views.size()) : scene.views.size();
  for (std::size_t k = 0; k < n; ++k) {
    // Spread a subset evenly over the split.
    const std::size_t v = max_views ? k * scene.views.size() / n : k;
    const View& view = scene.views[v];
    const int frame = scene.split == Split::train ? view.frame : -1;
    const auto out = a.render(scene.poses[static_cast<std::size_t>(view.frame)],
                              scene.cameras[static_cast<std::size_t>(view.camera)], frame);
    EvalRow row;
    row.frame = view.frame;
    row.camera = scene.cameras[static_cast<std::size_t>(view.camera)].id;
    const Image target = scene.target(v);
    row.psnr = psnr(out.color, target);
    row.ssim = ssim(out.color, target);
    row.iou = part_iou(out.part, scene.mask(v)).mean;
    r.psnr += row.psnr;
    r.ssim += row.ssim;
    r.iou += row.iou;
    r.rows.push_back(row);
  }
  if (!r.rows.empty()) {
    r.psnr /= static_cast<double>(r.rows.size());
    r.ssim /= static_cast<double>(r.rows.size());
    r.iou /= static_cast<double>(r.rows.size());
  }
  return r;
}

inline std::string eval_csv(const EvalResult& r) {
  std::ostringstream s;
  s << "frame,camera,psnr,ssim,iou\n" << std::setprecision(8);
  for (const auto& row : r.rows) s << row.frame << "," << row.camera << "," << row.psnr << "," << row.ssim << "," << row.iou << "\n";
  return s.str();
}

// ---------------------------------------------------------------------------
// Benchmark

struct BenchRow {
  int count = 0;
  double ms = 0;
  double splats_per_sec = 0;
};

/// Re-samples the avatar with `count` Gaussians, keeping the trained networks.
inline Avatar resample(const TrainState& st, int count) {
  Avatar b = Avatar::create(st.config.model, st.avatar.skeleton, st.avatar.template_mesh, st.avatar.template_weights,
                            st.cages, count, st.avatar.frames.frames(), st.config.seed, st.config.init);
  for (auto& p : b.parts)
    for (const auto& q : st.avatar.parts)
      if (q.part == p.part) {
        p.psi = q.psi;
        p.pi = q.pi;
        p.gamma = q.gamma;
      }
  b.frames = st.avatar.frames;
  return b;
}

/// Median ms/frame over `frames` renders. The first render is never timed;
/// `warmup` adds further untimed renders before it counts.
inline BenchRow bench_count(const TrainState& st, int count, int frames, int warmup = 0) {
  const Avatar a = resample(st, count);
  warmup += 1;
  const auto cams = st.cameras;
  MotionGenerator gen(a.skeleton.size(), st.config.seed, 1.0);
  std::vector<double> ms;
  for (int k = 0; k < warmup + frames; ++k) {
    const Pose pose = gen.at(static_cast<double>(k) / std::max(1, warmup + frames));
    const Camera& cam = cams[static_cast<std::size_t>(k) % cams.size()];
    const auto t0 = std::chrono::steady_clock::now();
    const auto out = a.render(pose, cam, -1);
    const double t = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    (void)out;
    if (k >= warmup) ms.push_back(t);
  }
  std::sort(ms.begin(), ms.end());
  BenchRow r;
  r.count = count;
  r.ms = ms.empty() ? 0.0 : (ms.size() % 2 ? ms[ms.size() / 2] : 0.5 * (ms[ms.size() / 2 - 1] + ms[ms.size() / 2]));
  r.splats_per_sec = r.ms > 0 ? count / (r.ms / 1000.0) : 0.0;
  return r;
}

inline std::string bench_csv(const std::vector<BenchRow>& rows) {
  std::ostringstream s;
  s << "count,ms,splats_per_sec\n" << std::setprecision(8);
  for (const auto& r : rows) s << r.count << "," << r.ms << "," << r.splats_per_sec << "\n";
  return s.str();
}

} // namespace d3ga
