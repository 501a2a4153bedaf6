// d3ga: command-line entry points for data synthesis, cage building,
// training, rendering, evaluation, benchmarking and gradient checks.

#include "d3ga/gradcheck.hpp"
#include "d3ga/train.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <iostream>

namespace {

using namespace d3ga;
namespace fs = std::filesystem;

// A failed check (exit 1), as opposed to an I/O or config error (exit 2).
struct CheckFailure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void log(const std::string& s) { std::cerr << s << std::endl; }

void log_config(const std::string& cmd, const nlohmann::json& j) { log("[" + cmd + "] config " + j.dump()); }

const char* kFormats = R"(File formats:
  config json           version 1 (training options; --set key=value overrides dotted paths)
  scene spec json       version 1 (synth-data input)
  dataset layout        version 1 (manifest.json with sha256 of every file)
  skeleton json         version 1
  poses jsonl           one pose per line: {frame, rotations[[w,x,y,z]...], root_translation}
  cage TCAG             version 1 (little-endian binary, one file per part)
  checkpoint D3GC       version 1 (little-endian named typed blocks)
  images                8-bit PNG (sRGB colour, linear masks), optional PFM (float, linear)
  eval/bench csv        frame,camera,psnr,ssim,iou / count,ms,splats_per_sec

Exit codes: 0 success, 1 check failure, 2 I/O or config error.)";

std::optional<Part> parse_part(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return part_from_name(s);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << text;
  if (!out) throw IoError("write failed: " + path);
}

void ensure_dir(const std::string& dir) {
  const fs::path p(dir);
  if (!p.parent_path().empty() && !fs::exists(p.parent_path()))
    throw IoError("parent directory does not exist: " + p.parent_path().string());
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw IoError("cannot create " + dir + ": " + ec.message());
}

const Camera& camera_by_id(const std::vector<Camera>& cams, int id) {
  for (const auto& c : cams)
    if (c.id == id) return c;
  throw ConfigError("no camera with id " + std::to_string(id));
}

RenderOptions render_options(const std::vector<double>& bg, const std::string& part) {
  RenderOptions ro;
  if (bg.size() != 3) throw ConfigError("--background takes three values");
  ro.background = Vec3(bg[0], bg[1], bg[2]);
  ro.part_filter = parse_part(part);
  return ro;
}

void save_render(const RenderOutput& out, const std::string& png, const std::string& pfm) {
  write_png(png, out.color, true);
  if (!pfm.empty()) write_pfm(pfm, out.color);
}

// --- subcommands ---------------------------------------------------------

struct SynthArgs {
  std::string spec, out;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> set;
};

int run_synth(const SynthArgs& a) {
  nlohmann::json doc = scene_spec_to_json(SceneSpec{});
  if (!a.spec.empty()) doc.merge_patch(read_json_file(a.spec));
  for (const auto& s : a.set) apply_override(doc, s);
  if (a.seed) doc["seed"] = *a.seed;
  const SceneSpec spec = scene_spec_from_json(doc);
  log_config("synth-data", scene_spec_to_json(spec));
  generate_synthetic_scene(spec, a.out, log);
  const auto bad = verify_manifest(a.out);
  if (!bad.empty()) throw CheckFailure("manifest does not verify: " + bad.front());
  log("wrote " + a.out);
  return 0;
}

struct CageArgs {
  std::string data, out, config;
  std::vector<std::string> set;
};

int run_build_cages(const CageArgs& a) {
  const TrainConfig cfg = load_config(a.config, a.set);
  log_config("build-cages", config_to_json(cfg));
  const SceneData scene = load_scene(a.data, Split::train, false);
  const auto cages = build_cages(scene.template_mesh, scene.template_weights, cfg.cages);
  write_cages(a.out, cages);
  for (const auto& [p, c] : cages)
    log(std::string(part_name(p)) + ": " + std::to_string(c.node_count()) + " nodes, " +
        std::to_string(c.tet_count()) + " tets");
  return 0;
}

struct TrainArgs {
  std::string config, data, out, cages, resume;
  std::vector<std::string> set;
};

int run_train(const TrainArgs& a) {
  TrainState st;
  const SceneData scene = load_scene(a.data, Split::train, true);
  if (!a.resume.empty()) {
    st = load_checkpoint(a.resume);
    if (!a.set.empty()) {
      nlohmann::json doc = config_to_json(st.config);
      for (const auto& s : a.set) apply_override(doc, s);
      const TrainConfig c = config_from_json(doc);
      // Only the step budget and logging may change on resume.
      TrainConfig keep = c;
      keep.model = st.config.model;
      keep.ablation = st.config.ablation;
      keep.gaussian_count = st.config.gaussian_count;
      keep.seed = st.config.seed;
      st.config = keep;
    }
    log("resumed at step " + std::to_string(st.step));
  } else {
    const TrainConfig cfg = load_config(a.config, a.set);
    std::map<Part, TetCage> cages;
    if (!a.cages.empty()) cages = read_cages(a.cages);
    st = init_training(cfg, scene, cages);
  }
  log_config("train", config_to_json(st.config));
  log("gaussians " + std::to_string(st.avatar.gaussian_count()) + ", parameters " +
      std::to_string(total_size(st.avatar.params())) + ", embedding failures " +
      std::to_string(st.embedding_failures));
  TrainOptions o;
  o.checkpoint_path = a.out;
  o.log = log;
  try {
    train(st, scene, o);
  } catch (const NonFiniteLoss& e) {
    log(e.what());
    log("state dumped to " + a.out + ".nonfinite");
    throw CheckFailure("training diverged");
  }
  log("wrote " + a.out);
  return 0;
}

struct RenderArgs {
  std::string checkpoint, out, pfm, part, cameras;
  int camera = 0;
  int frame = 0;
  std::vector<double> background{0, 0, 0};
};

int run_render(const RenderArgs& a) {
  const TrainState st = load_checkpoint(a.checkpoint);
  log_config("render", {{"checkpoint", a.checkpoint}, {"camera", a.camera}, {"frame", a.frame}, {"part", a.part},
                        {"background", a.background}, {"model", config_to_json(st.config)}});
  const auto cams = a.cameras.empty() ? st.cameras : cameras_from_json(read_json_file(a.cameras));
  if (a.frame < 0 || a.frame >= static_cast<int>(st.poses.size()))
    throw ConfigError("frame out of range: " + std::to_string(a.frame));
  const auto out = st.avatar.render(st.poses[static_cast<std::size_t>(a.frame)], camera_by_id(cams, a.camera),
                                    a.frame, render_options(a.background, a.part));
  save_render(out, a.out, a.pfm);
  log("wrote " + a.out);
  return 0;
}

struct AnimateArgs {
  std::string checkpoint, poses, out, cameras;
  int camera = 0;
  std::vector<std::string> parts;
  bool pfm = false;
  std::vector<double> background{0, 0, 0};
};

int run_animate(const AnimateArgs& a) {
  const TrainState st = load_checkpoint(a.checkpoint);
  log_config("animate", {{"checkpoint", a.checkpoint}, {"poses", a.poses}, {"camera", a.camera}, {"parts", a.parts},
                         {"pfm", a.pfm}, {"model", config_to_json(st.config)}});
  const auto poses = read_poses_jsonl(a.poses);
  const auto cams = a.cameras.empty() ? st.cameras : cameras_from_json(read_json_file(a.cameras));
  const Camera& cam = camera_by_id(cams, a.camera);
  std::vector<std::string> parts = a.parts;
  if (parts.size() == 1 && parts[0] == "all") {
    parts.clear();
    for (const auto& p : st.avatar.parts) parts.emplace_back(part_name(p.part));
  }
  ensure_dir(a.out);
  for (const auto& p : parts) ensure_dir(a.out + "/" + p);
  for (std::size_t k = 0; k < poses.size(); ++k) {
    char name[32];
    std::snprintf(name, sizeof name, "%05zu", k);
    const auto full = st.avatar.render(poses[k], cam, -1, render_options(a.background, ""));
    save_render(full, a.out + "/" + name + ".png", a.pfm ? a.out + "/" + name + ".pfm" : "");
    for (const auto& p : parts) {
      const auto layer = st.avatar.render(poses[k], cam, -1, render_options(a.background, p));
      const std::string base = a.out + "/" + p + "/" + name;
      save_render(layer, base + ".png", a.pfm ? base + ".pfm" : "");
    }
  }
  log("rendered " + std::to_string(poses.size()) + " poses to " + a.out);
  return 0;
}

struct EvalArgs {
  std::string checkpoint, data, split = "train", csv;
  std::size_t max_views = 0;
  std::optional<double> min_psnr;
};

int run_evaluate(const EvalArgs& a) {
  const TrainState st = load_checkpoint(a.checkpoint);
  log_config("evaluate", {{"checkpoint", a.checkpoint}, {"data", a.data}, {"split", a.split},
                          {"max_views", a.max_views}, {"model", config_to_json(st.config)}});
  const SceneData scene = load_scene(a.data, split_from_name(a.split), true);
  const EvalResult r = evaluate(st.avatar, scene, a.max_views);
  if (!a.csv.empty()) write_text(a.csv, eval_csv(r));
  std::cout << "split " << a.split << " views " << r.rows.size() << " psnr " << r.psnr << " ssim " << r.ssim
            << " iou " << r.iou << std::endl;
  if (a.min_psnr && !(r.psnr >= *a.min_psnr))
    throw CheckFailure("psnr " + std::to_string(r.psnr) + " below " + std::to_string(*a.min_psnr));
  return 0;
}

struct BenchArgs {
  std::string checkpoint, csv;
  std::vector<int> counts{25000, 100000, 200000, 300000};
  int frames = 50;
  int warmup = 0;
  bool check_trend = false;
};

int run_bench(const BenchArgs& a) {
  const TrainState st = load_checkpoint(a.checkpoint);
  log_config("bench", {{"checkpoint", a.checkpoint}, {"gaussians", a.counts}, {"frames", a.frames},
                       {"warmup", a.warmup}, {"model", config_to_json(st.config)}});
  if (a.frames <= 0 || a.warmup < 0) throw ConfigError("--frames must be > 0 and --warmup >= 0");
  std::vector<BenchRow> rows;
  for (int c : a.counts) {
    if (c <= 0) throw ConfigError("gaussian counts must be positive");
    rows.push_back(bench_count(st, c, a.frames, a.warmup));
    log(std::to_string(c) + " gaussians: " + std::to_string(rows.back().ms) + " ms/frame");
  }
  const std::string csv = bench_csv(rows);
  std::cout << csv;
  if (!a.csv.empty()) write_text(a.csv, csv);
  if (a.check_trend)
    for (std::size_t k = 1; k < rows.size(); ++k)
      if (rows[k].count > rows[k - 1].count && rows[k].ms < rows[k - 1].ms)
        throw CheckFailure("frame time decreased from " + std::to_string(rows[k - 1].count) + " to " +
                           std::to_string(rows[k].count) + " gaussians");
  return 0;
}

struct GradArgs {
  std::string module = "all", perturb, report;
};

int run_check_grads(const GradArgs& a) {
  log_config("check-grads", {{"module", a.module}, {"perturb", a.perturb}});
  const auto t0 = std::chrono::steady_clock::now();
  const auto results = gradcheck::run(a.module, a.perturb);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::ostringstream rep;
  rep << "op,module,worst_rel,tol,checked,pass,seconds\n";
  std::vector<std::string> failed;
  for (const auto& r : results) {
    rep << r.op << "," << r.module << "," << r.worst_rel << "," << r.tol << "," << r.checked << ","
        << (r.pass ? "pass" : "FAIL") << "," << r.seconds << "\n";
    if (!r.pass) failed.push_back(r.op);
  }
  std::cout << rep.str() << results.size() << " ops checked in " << secs << " s\n";
  if (!a.report.empty()) write_text(a.report, rep.str());
  if (!failed.empty()) {
    std::string names;
    for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
    throw CheckFailure("gradient check failed: " + names);
  }
  return 0;
}

} // namespace

int main(int argc, char** argv) {
  CLI::App app{"Drivable 3D Gaussian avatars: data synthesis, training, rendering and evaluation"};
  app.footer(kFormats);
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "Cap on worker threads (0: runtime default)")->check(CLI::NonNegativeNumber);

  SynthArgs sa;
  auto* synth = app.add_subcommand("synth-data", "Generate the synthetic multi-view dataset");
  synth->add_option("--spec", sa.spec, "Scene spec JSON (defaults apply to missing keys)")->check(CLI::ExistingFile);
  synth->add_option("--out", sa.out, "Output directory")->required();
  synth->add_option("--seed", sa.seed, "Override the spec seed");
  synth->add_option("--set", sa.set, "Spec override key=value");

  CageArgs ca;
  auto* cage = app.add_subcommand("build-cages", "Build the tetrahedral cages from the dataset template");
  cage->add_option("--data", ca.data, "Dataset directory")->required();
  cage->add_option("--out", ca.out, "Output directory for <part>.tcag")->required();
  cage->add_option("--config", ca.config, "Training config JSON")->check(CLI::ExistingFile);
  cage->add_option("--set", ca.set, "Config override key=value");

  TrainArgs ta;
  auto* train_cmd = app.add_subcommand("train", "Fit an avatar to a dataset");
  train_cmd->add_option("--config", ta.config, "Training config JSON")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", ta.data, "Dataset directory")->required();
  train_cmd->add_option("--out", ta.out, "Output checkpoint")->required();
  train_cmd->add_option("--cages", ta.cages, "Directory of prebuilt cages (built on the fly otherwise)");
  train_cmd->add_option("--resume", ta.resume, "Continue from a checkpoint")->check(CLI::ExistingFile);
  train_cmd->add_option("--set", ta.set, "Config override key=value");

  RenderArgs ra;
  auto* render = app.add_subcommand("render", "Render one training frame from a camera");
  render->add_option("--checkpoint", ra.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  render->add_option("--camera", ra.camera, "Camera id")->required();
  render->add_option("--frame", ra.frame, "Training frame index")->required();
  render->add_option("--out", ra.out, "Output PNG")->required();
  render->add_option("--pfm", ra.pfm, "Also write a PFM");
  render->add_option("--part", ra.part, "Composite only this layer (body, upper, lower, face)");
  render->add_option("--cameras", ra.cameras, "cameras.json to pick the camera from")->check(CLI::ExistingFile);
  render->add_option("--background", ra.background, "Background colour r g b")->expected(3);

  AnimateArgs aa;
  auto* animate = app.add_subcommand("animate", "Drive the avatar with a pose stream");
  animate->add_option("--checkpoint", aa.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  animate->add_option("--poses", aa.poses, "poses.jsonl")->required()->check(CLI::ExistingFile);
  animate->add_option("--out", aa.out, "Output directory")->required();
  animate->add_option("--camera", aa.camera, "Camera id");
  animate->add_option("--cameras", aa.cameras, "cameras.json to pick the camera from")->check(CLI::ExistingFile);
  animate->add_option("--part", aa.parts, "Also write per-layer renders (repeatable, or 'all')");
  animate->add_flag("--pfm", aa.pfm, "Also write PFM images");
  animate->add_option("--background", aa.background, "Background colour r g b")->expected(3);

  EvalArgs ea;
  auto* eval = app.add_subcommand("evaluate", "PSNR, SSIM and part IoU over a dataset split");
  eval->add_option("--checkpoint", ea.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", ea.data, "Dataset directory")->required();
  eval->add_option("--split", ea.split, "train, heldout_poses or heldout_cameras");
  eval->add_option("--csv", ea.csv, "Per-view CSV output");
  eval->add_option("--max-views", ea.max_views, "Evaluate an evenly spaced subset");
  eval->add_option("--min-psnr", ea.min_psnr, "Exit 1 when the mean PSNR is lower");

  BenchArgs ba;
  auto* bench = app.add_subcommand("bench", "Render time against Gaussian count");
  bench->add_option("--checkpoint", ba.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  bench->add_option("--gaussians", ba.counts, "Gaussian counts")->delimiter(',');
  bench->add_option("--frames", ba.frames, "Timed frames per count (median reported)");
  bench->add_option("--warmup", ba.warmup, "Untimed frames in addition to the first");
  bench->add_option("--csv", ba.csv, "CSV output");
  bench->add_flag("--check-trend", ba.check_trend, "Exit 1 if frame time drops as the count grows");

  GradArgs ga;
  auto* grads = app.add_subcommand("check-grads", "Finite-difference check of every analytic backward");
  grads->add_option("--module", ga.module, "all, gauss, skeleton, cage, nets, rasterizer, losses or model");
  grads->add_option("--perturb", ga.perturb, "Corrupt one op's gradient (exercises the failure path)");
  grads->add_option("--report", ga.report, "CSV report output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  set_thread_count(threads);
  try {
    if (*synth) return run_synth(sa);
    if (*cage) return run_build_cages(ca);
    if (*train_cmd) return run_train(ta);
    if (*render) return run_render(ra);
    if (*animate) return run_animate(aa);
    if (*eval) return run_evaluate(ea);
    if (*bench) return run_bench(ba);
    if (*grads) return run_check_grads(ga);
  } catch (const CheckFailure& e) {
    log(std::string("check failed: ") + e.what());
    return 1;
  } catch (const std::exception& e) {
    log(std::string("error: ") + e.what());
    return 2;
  }
  return 2;
}
