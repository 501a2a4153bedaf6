#pragma once

// Training configuration: JSON on disk, `--set a.b=value` overrides, and
// validation. Unknown keys are errors.

#include "d3ga/common.hpp"
#include "d3ga/model.hpp"
#include "d3ga/optim.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <string>
#include <vector>

namespace d3ga {

inline constexpr int kConfigFormatVersion = 1;

struct Ablation {
  bool no_cage = false;
  bool sh_color = false;
  bool no_garment_loss = false;
  bool no_neo_loss = false;
  bool single_layer = false;
};

struct TrainConfig {
  double omega = 0.2;
  double zeta = 0.0;
  double nu = 10.0;
  double tau = 0.005;
  double lame_lambda = 1.0;
  double lame_mu = 1.0;
  double lr = 5e-4;
  double decay_rate = 0.33;
  std::vector<double> milestones{0.6, 0.8};  // fractions of `steps`
  int steps = 10000;
  int gaussian_count = 5000;
  Ablation ablation;
  int width = 128;
  int height = 128;
  std::uint64_t seed = 0;
  int log_every = 100;
  int checkpoint_every = 0;  // 0: only the final checkpoint
  std::map<std::string, double> group_lr;
  AvatarOptions model;
  InitOptions init;
  CageBuildOptions cages;
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  nlohmann::json groups = nlohmann::json::object();
  for (const auto& [k, v] : c.group_lr) groups[k] = v;
  return {{"version", kConfigFormatVersion},
          {"omega", c.omega},
          {"zeta", c.zeta},
          {"nu", c.nu},
          {"tau", c.tau},
          {"lame", {{"lambda", c.lame_lambda}, {"mu", c.lame_mu}}},
          {"lr", c.lr},
          {"decay_rate", c.decay_rate},
          {"milestones", c.milestones},
          {"steps", c.steps},
          {"gaussian_count", c.gaussian_count},
          {"ablation",
           {{"no_cage", c.ablation.no_cage},
            {"sh_color", c.ablation.sh_color},
            {"no_garment_loss", c.ablation.no_garment_loss},
            {"no_neo_loss", c.ablation.no_neo_loss},
            {"single_layer", c.ablation.single_layer}}},
          {"image", {{"width", c.width}, {"height", c.height}}},
          {"seed", c.seed},
          {"log_every", c.log_every},
          {"checkpoint_every", c.checkpoint_every},
          {"group_lr", groups},
          {"model",
           {{"pe_octaves", c.model.pe_octaves},
            {"frame_embedding_dim", c.model.frame_embedding_dim},
            {"hidden_width", c.model.hidden_width},
            {"hidden_layers", c.model.hidden_layers},
            {"cage_offset", c.model.heads.cage_offset},
            {"barycentric_delta", c.model.heads.barycentric},
            {"log_scale_delta", c.model.heads.log_scale},
            {"rotation_delta", c.model.heads.rotation},
            {"mean_delta", c.model.heads.mean_offset}}},
          {"init", {{"opacity", c.init.opacity}, {"feature_std", c.init.feature_std}, {"min_scale", c.init.min_scale}}},
          {"cages",
           {{"solid_step", c.cages.solid_step}, {"shell_inner", c.cages.shell_inner}, {"shell_outer", c.cages.shell_outer}}}};
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (const auto& [k, v] : j.items()) {
    bool ok = false;
    for (const char* s : keys) ok = ok || k == s;
    if (!ok) throw ConfigError("unknown config key: " + (where.empty() ? k : where + "." + k));
  }
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

} // namespace detail

inline void validate(const TrainConfig& c) {
  if (!(c.omega >= 0.0 && c.omega <= 1.0)) throw ConfigError("omega must lie in [0, 1]");
  if (c.zeta != 0.0) throw ConfigError("zeta must be 0: the perceptual term is not available");
  for (double w : {c.nu, c.tau, c.lame_lambda, c.lame_mu, c.lr})
    if (!(w >= 0.0) || !std::isfinite(w)) throw ConfigError("loss weights, Lame parameters and lr must be >= 0");
  if (!(c.decay_rate > 0.0)) throw ConfigError("decay_rate must be > 0");
  if (c.gaussian_count <= 0) throw ConfigError("gaussian_count must be > 0");
  if (c.steps < 0) throw ConfigError("steps must be >= 0");
  if (c.width <= 0 || c.height <= 0) throw ConfigError("image size must be positive");
  if (c.log_every <= 0) throw ConfigError("log_every must be > 0");
  if (c.checkpoint_every < 0) throw ConfigError("checkpoint_every must be >= 0");
  for (double m : c.milestones)
    if (!(m >= 0.0 && m <= 1.0)) throw ConfigError("milestones are fractions of steps in [0, 1]");
  for (const auto& [k, v] : c.group_lr)
    if (!(v >= 0.0)) throw ConfigError("group_lr." + k + " must be >= 0");
  if (c.model.pe_octaves < 0 || c.model.frame_embedding_dim < 0 || c.model.hidden_width <= 0 ||
      c.model.hidden_layers < 0)
    throw ConfigError("invalid model dimensions");
  if (!(c.init.opacity > 0.0 && c.init.opacity < 1.0)) throw ConfigError("init.opacity must lie in (0, 1)");
  if (!(c.cages.solid_step > 0.0) || !(c.cages.shell_inner + c.cages.shell_outer > 0.0))
    throw ConfigError("cage sizes must be positive");
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  using detail::read;
  using detail::reject_unknown;
  TrainConfig c;
  reject_unknown(j, "", {"version", "omega", "zeta", "nu", "tau", "lame", "lr", "decay_rate", "milestones", "steps",
                         "gaussian_count", "ablation", "image", "seed", "log_every", "checkpoint_every", "group_lr",
                         "model", "init", "cages"});
  try {
    if (j.contains("version") && j.at("version").get<int>() != kConfigFormatVersion)
      throw ConfigError("unsupported config version");
    read(j, "omega", c.omega);
    read(j, "zeta", c.zeta);
    read(j, "nu", c.nu);
    read(j, "tau", c.tau);
    if (j.contains("lame")) {
      const auto& l = j.at("lame");
      reject_unknown(l, "lame", {"lambda", "mu"});
      read(l, "lambda", c.lame_lambda);
      read(l, "mu", c.lame_mu);
    }
    read(j, "lr", c.lr);
    read(j, "decay_rate", c.decay_rate);
    read(j, "milestones", c.milestones);
    read(j, "steps", c.steps);
    read(j, "gaussian_count", c.gaussian_count);
    if (j.contains("ablation")) {
      const auto& a = j.at("ablation");
      reject_unknown(a, "ablation", {"no_cage", "sh_color", "no_garment_loss", "no_neo_loss", "single_layer"});
      read(a, "no_cage", c.ablation.no_cage);
      read(a, "sh_color", c.ablation.sh_color);
      read(a, "no_garment_loss", c.ablation.no_garment_loss);
      read(a, "no_neo_loss", c.ablation.no_neo_loss);
      read(a, "single_layer", c.ablation.single_layer);
    }
    if (j.contains("image")) {
      const auto& im = j.at("image");
      reject_unknown(im, "image", {"width", "height"});
      read(im, "width", c.width);
      read(im, "height", c.height);
    }
    read(j, "seed", c.seed);
    read(j, "log_every", c.log_every);
    read(j, "checkpoint_every", c.checkpoint_every);
    if (j.contains("group_lr")) {
      if (!j.at("group_lr").is_object()) throw ConfigError("group_lr must be an object");
      for (const auto& [k, v] : j.at("group_lr").items()) c.group_lr[k] = v.get<double>();
    }
    if (j.contains("model")) {
      const auto& m = j.at("model");
      reject_unknown(m, "model", {"pe_octaves", "frame_embedding_dim", "hidden_width", "hidden_layers", "cage_offset",
                                  "barycentric_delta", "log_scale_delta", "rotation_delta", "mean_delta"});
      read(m, "pe_octaves", c.model.pe_octaves);
      read(m, "frame_embedding_dim", c.model.frame_embedding_dim);
      read(m, "hidden_width", c.model.hidden_width);
      read(m, "hidden_layers", c.model.hidden_layers);
      read(m, "cage_offset", c.model.heads.cage_offset);
      read(m, "barycentric_delta", c.model.heads.barycentric);
      read(m, "log_scale_delta", c.model.heads.log_scale);
      read(m, "rotation_delta", c.model.heads.rotation);
      read(m, "mean_delta", c.model.heads.mean_offset);
    }
    if (j.contains("init")) {
      const auto& i = j.at("init");
      reject_unknown(i, "init", {"opacity", "feature_std", "min_scale"});
      read(i, "opacity", c.init.opacity);
      read(i, "feature_std", c.init.feature_std);
      read(i, "min_scale", c.init.min_scale);
    }
    if (j.contains("cages")) {
      const auto& g = j.at("cages");
      reject_unknown(g, "cages", {"solid_step", "shell_inner", "shell_outer"});
      read(g, "solid_step", c.cages.solid_step);
      read(g, "shell_inner", c.cages.shell_inner);
      read(g, "shell_outer", c.cages.shell_outer);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  c.model.no_cage = c.ablation.no_cage;
  c.model.sh_color = c.ablation.sh_color;
  c.model.single_layer = c.ablation.single_layer;
  validate(c);
  return c;
}

/// Parses the right-hand side of `key=value` as JSON, falling back to a string.
inline nlohmann::json parse_override_value(const std::string& v) {
  try {
    return nlohmann::json::parse(v);
  } catch (const nlohmann::json::exception&) {
    return v;
  }
}

/// Applies `a.b.c=value` to a config document; the path must already exist.
inline void apply_override(nlohmann::json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override must look like key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  nlohmann::json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const auto dot = path.find('.', start);
    const std::string key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (!node->is_object() || (!node->contains(key) && !(dot == std::string::npos && path.rfind("group_lr.", 0) == 0)))
      throw ConfigError("unknown config key: " + path);
    if (dot == std::string::npos) {
      (*node)[key] = parse_override_value(assignment.substr(eq + 1));
      return;
    }
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline TrainConfig load_config(const std::string& path, const std::vector<std::string>& overrides = {}) {
  nlohmann::json doc = config_to_json(TrainConfig{});
  if (!path.empty()) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path);
    nlohmann::json user;
    try {
      user = nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
    // Validate the file as written before merging onto defaults.
    config_from_json(user);
    doc.merge_patch(user);
  }
  for (const auto& o : overrides) apply_override(doc, o);
  return config_from_json(doc);
}

} // namespace d3ga
