#pragma once

// Run configuration: one JSON document with sections for data synthesis,
// diffusion training, adapters, scorer training, fine-tuning, and metrics.
// Missing keys fall back to the defaults below; unknown keys are rejected by
// their full dotted path so typos never silently revert a value to default.
// The fully resolved tree is what commands echo into the output directory,
// and its hash (minus seed and output directory) identifies the experiment
// in checkpoint provenance.

#include <cstdint>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "acpo/checkpoint.hpp"
#include "acpo/finetune.hpp"
#include "acpo/iqa.hpp"

namespace acpo {

struct RunConfig {
  int schema_version = 1;
  uint64_t seed = 0;
  std::string out_dir = "out";

  // data-synth
  int image_size = 16;
  bool conditional = false;
  int iqa_train_images = 800;
  int iqa_holdout_images = 400;
  int diffusion_images = 64;

  // diffusion (schedule, predictor architecture, base pretraining)
  int T = 100;
  double beta_start = 2e-3;
  double beta_end = 0.1;
  std::vector<int> hidden = {64, 64};
  int t_embed_dim = 16;
  int cond_embed_dim = 0;
  int base_steps = 20000;
  int base_batch = 16;
  double base_lr = 2e-3;

  // adapters
  int rank = 4;
  double adapter_scale = 1.0;

  // iqa (scorer shape and stage-1 training)
  ScorerVariant variant = ScorerVariant::kTwoStream;
  int stream_hidden = 32;
  int stream_feature = 16;
  int fuse_hidden = 16;
  int patch_grid = 4;
  int token_dim = 24;
  int embed_dim = 16;
  std::vector<double> layer_weights = {0.5, 0.5};
  int iqa_epochs = 40;
  double iqa_lr = 3e-3;
  int iqa_batch = 16;

  // acpo (fine-tuning; acpo.seed is filled from the run seed at command time)
  ACPOConfig acpo;

  // metrics
  int eval_pairs = 200;
  bool export_pgm = false;
  int pgm_count = 8;
  int heldout_images = 800;
  int heldout_epochs = 40;
  double heldout_lr = 3e-3;
};

namespace detail {

inline json config_defaults_json() {
  RunConfig d;
  json j;
  j["schema_version"] = d.schema_version;
  j["seed"] = d.seed;
  j["out_dir"] = d.out_dir;
  j["data-synth"] = {{"image_size", d.image_size},
                     {"conditional", d.conditional},
                     {"iqa_train_images", d.iqa_train_images},
                     {"iqa_holdout_images", d.iqa_holdout_images},
                     {"diffusion_images", d.diffusion_images}};
  j["diffusion"] = {{"T", d.T},
                    {"beta_start", d.beta_start},
                    {"beta_end", d.beta_end},
                    {"hidden", d.hidden},
                    {"t_embed_dim", d.t_embed_dim},
                    {"cond_embed_dim", d.cond_embed_dim},
                    {"base_steps", d.base_steps},
                    {"base_batch", d.base_batch},
                    {"base_lr", d.base_lr}};
  j["adapters"] = {{"rank", d.rank}, {"scale", d.adapter_scale}};
  j["iqa"] = {{"variant", "two-stream"},
              {"stream_hidden", d.stream_hidden},
              {"stream_feature", d.stream_feature},
              {"fuse_hidden", d.fuse_hidden},
              {"patch_grid", d.patch_grid},
              {"token_dim", d.token_dim},
              {"embed_dim", d.embed_dim},
              {"layer_weights", d.layer_weights},
              {"epochs", d.iqa_epochs},
              {"lr", d.iqa_lr},
              {"batch", d.iqa_batch}};
  j["acpo"] = {{"lambda1", d.acpo.lambda1},
               {"lambda2", d.acpo.lambda2},
               {"t_late_max", d.acpo.t_late_max},
               {"guided_steps", d.acpo.guided_steps},
               {"mse_batch", d.acpo.mse_batch},
               {"guided_batch", d.acpo.guided_batch},
               {"anchor_batch", d.acpo.anchor_batch},
               {"steps", d.acpo.steps},
               {"lr", d.acpo.lr},
               {"adam_beta1", d.acpo.adam_beta1},
               {"adam_beta2", d.acpo.adam_beta2},
               {"adam_eps", d.acpo.adam_eps},
               {"probe_batch", d.acpo.probe_batch},
               {"probe_seed", d.acpo.probe_seed}};
  j["metrics"] = {{"eval_pairs", d.eval_pairs},
                  {"export_pgm", d.export_pgm},
                  {"pgm_count", d.pgm_count},
                  {"heldout_images", d.heldout_images},
                  {"heldout_epochs", d.heldout_epochs},
                  {"heldout_lr", d.heldout_lr}};
  return j;
}

// Overlays `user` onto `base`, rejecting any key that does not exist in the
// defaults and any value whose JSON type disagrees. Integer defaults demand
// integers; floating defaults accept any number; arrays replace wholesale.
inline void overlay_config(json& base, const json& user, const std::string& prefix) {
  if (!user.is_object())
    throw ConfigError("config: expected an object at '" +
                      (prefix.empty() ? std::string("<top>") : prefix) + "'");
  for (auto it = user.begin(); it != user.end(); ++it) {
    std::string path = prefix.empty() ? it.key() : prefix + "." + it.key();
    if (!base.contains(it.key())) throw ConfigError("config: unknown key '" + path + "'");
    json& slot = base[it.key()];
    const json& v = it.value();
    if (slot.is_object()) {
      overlay_config(slot, v, path);
    } else if (slot.is_boolean()) {
      if (!v.is_boolean()) throw ConfigError("config: '" + path + "' must be a boolean");
      slot = v;
    } else if (slot.is_string()) {
      if (!v.is_string()) throw ConfigError("config: '" + path + "' must be a string");
      slot = v;
    } else if (slot.is_number_integer()) {
      if (!v.is_number_integer())
        throw ConfigError("config: '" + path + "' must be an integer");
      slot = v;
    } else if (slot.is_number()) {
      if (!v.is_number()) throw ConfigError("config: '" + path + "' must be a number");
      slot = v;
    } else if (slot.is_array()) {
      if (!v.is_array()) throw ConfigError("config: '" + path + "' must be an array");
      bool want_int = !slot.empty() && slot[0].is_number_integer();
      for (const json& e : v) {
        if (want_int ? !e.is_number_integer() : !e.is_number())
          throw ConfigError("config: '" + path + "' elements must be " +
                            (want_int ? "integers" : "numbers"));
      }
      slot = v;
    } else {
      throw ConfigError("config: '" + path + "' has unsupported type");
    }
  }
}

inline RunConfig config_from_resolved(const json& j) {
  RunConfig c;
  c.schema_version = j["schema_version"].get<int>();
  if (c.schema_version != 1)
    throw ConfigError("config: schema_version " + std::to_string(c.schema_version) +
                      " is not supported (this build reads 1)");
  if (!j["seed"].is_number_unsigned() && j["seed"].get<int64_t>() < 0)
    throw ConfigError("config: 'seed' must be non-negative");
  c.seed = j["seed"].get<uint64_t>();
  c.out_dir = j["out_dir"].get<std::string>();

  const json& ds = j["data-synth"];
  c.image_size = ds["image_size"].get<int>();
  c.conditional = ds["conditional"].get<bool>();
  c.iqa_train_images = ds["iqa_train_images"].get<int>();
  c.iqa_holdout_images = ds["iqa_holdout_images"].get<int>();
  c.diffusion_images = ds["diffusion_images"].get<int>();

  const json& df = j["diffusion"];
  c.T = df["T"].get<int>();
  c.beta_start = df["beta_start"].get<double>();
  c.beta_end = df["beta_end"].get<double>();
  c.hidden = df["hidden"].get<std::vector<int>>();
  c.t_embed_dim = df["t_embed_dim"].get<int>();
  c.cond_embed_dim = df["cond_embed_dim"].get<int>();
  c.base_steps = df["base_steps"].get<int>();
  c.base_batch = df["base_batch"].get<int>();
  c.base_lr = df["base_lr"].get<double>();

  c.rank = j["adapters"]["rank"].get<int>();
  c.adapter_scale = j["adapters"]["scale"].get<double>();

  const json& iq = j["iqa"];
  std::string variant = iq["variant"].get<std::string>();
  if (variant == "two-stream") {
    c.variant = ScorerVariant::kTwoStream;
  } else if (variant == "conditional") {
    c.variant = ScorerVariant::kConditional;
  } else {
    throw ConfigError("config: 'iqa.variant' must be \"two-stream\" or \"conditional\", got \"" +
                      variant + "\"");
  }
  c.stream_hidden = iq["stream_hidden"].get<int>();
  c.stream_feature = iq["stream_feature"].get<int>();
  c.fuse_hidden = iq["fuse_hidden"].get<int>();
  c.patch_grid = iq["patch_grid"].get<int>();
  c.token_dim = iq["token_dim"].get<int>();
  c.embed_dim = iq["embed_dim"].get<int>();
  c.layer_weights = iq["layer_weights"].get<std::vector<double>>();
  c.iqa_epochs = iq["epochs"].get<int>();
  c.iqa_lr = iq["lr"].get<double>();
  c.iqa_batch = iq["batch"].get<int>();

  const json& ac = j["acpo"];
  c.acpo.lambda1 = ac["lambda1"].get<double>();
  c.acpo.lambda2 = ac["lambda2"].get<double>();
  c.acpo.t_late_max = ac["t_late_max"].get<int>();
  c.acpo.guided_steps = ac["guided_steps"].get<int>();
  c.acpo.mse_batch = ac["mse_batch"].get<int>();
  c.acpo.guided_batch = ac["guided_batch"].get<int>();
  c.acpo.anchor_batch = ac["anchor_batch"].get<int>();
  c.acpo.steps = ac["steps"].get<int>();
  c.acpo.lr = ac["lr"].get<double>();
  c.acpo.adam_beta1 = ac["adam_beta1"].get<double>();
  c.acpo.adam_beta2 = ac["adam_beta2"].get<double>();
  c.acpo.adam_eps = ac["adam_eps"].get<double>();
  c.acpo.probe_batch = ac["probe_batch"].get<int>();
  if (!ac["probe_seed"].is_number_unsigned() && ac["probe_seed"].get<int64_t>() < 0)
    throw ConfigError("config: 'acpo.probe_seed' must be non-negative");
  c.acpo.probe_seed = ac["probe_seed"].get<uint64_t>();
  c.acpo.seed = c.seed;

  const json& mt = j["metrics"];
  c.eval_pairs = mt["eval_pairs"].get<int>();
  c.export_pgm = mt["export_pgm"].get<bool>();
  c.pgm_count = mt["pgm_count"].get<int>();
  c.heldout_images = mt["heldout_images"].get<int>();
  c.heldout_epochs = mt["heldout_epochs"].get<int>();
  c.heldout_lr = mt["heldout_lr"].get<double>();
  return c;
}

}  // namespace detail

// The resolved JSON tree for `cfg`, suitable for snapshots and hashing.
inline nlohmann::json config_to_json(const RunConfig& c) {
  nlohmann::json j = detail::config_defaults_json();
  j["seed"] = c.seed;
  j["out_dir"] = c.out_dir;
  j["data-synth"]["image_size"] = c.image_size;
  j["data-synth"]["conditional"] = c.conditional;
  j["data-synth"]["iqa_train_images"] = c.iqa_train_images;
  j["data-synth"]["iqa_holdout_images"] = c.iqa_holdout_images;
  j["data-synth"]["diffusion_images"] = c.diffusion_images;
  j["diffusion"]["T"] = c.T;
  j["diffusion"]["beta_start"] = c.beta_start;
  j["diffusion"]["beta_end"] = c.beta_end;
  j["diffusion"]["hidden"] = c.hidden;
  j["diffusion"]["t_embed_dim"] = c.t_embed_dim;
  j["diffusion"]["cond_embed_dim"] = c.cond_embed_dim;
  j["diffusion"]["base_steps"] = c.base_steps;
  j["diffusion"]["base_batch"] = c.base_batch;
  j["diffusion"]["base_lr"] = c.base_lr;
  j["adapters"]["rank"] = c.rank;
  j["adapters"]["scale"] = c.adapter_scale;
  j["iqa"]["variant"] = c.variant == ScorerVariant::kTwoStream ? "two-stream" : "conditional";
  j["iqa"]["stream_hidden"] = c.stream_hidden;
  j["iqa"]["stream_feature"] = c.stream_feature;
  j["iqa"]["fuse_hidden"] = c.fuse_hidden;
  j["iqa"]["patch_grid"] = c.patch_grid;
  j["iqa"]["token_dim"] = c.token_dim;
  j["iqa"]["embed_dim"] = c.embed_dim;
  j["iqa"]["layer_weights"] = c.layer_weights;
  j["iqa"]["epochs"] = c.iqa_epochs;
  j["iqa"]["lr"] = c.iqa_lr;
  j["iqa"]["batch"] = c.iqa_batch;
  j["acpo"]["lambda1"] = c.acpo.lambda1;
  j["acpo"]["lambda2"] = c.acpo.lambda2;
  j["acpo"]["t_late_max"] = c.acpo.t_late_max;
  j["acpo"]["guided_steps"] = c.acpo.guided_steps;
  j["acpo"]["mse_batch"] = c.acpo.mse_batch;
  j["acpo"]["guided_batch"] = c.acpo.guided_batch;
  j["acpo"]["anchor_batch"] = c.acpo.anchor_batch;
  j["acpo"]["steps"] = c.acpo.steps;
  j["acpo"]["lr"] = c.acpo.lr;
  j["acpo"]["adam_beta1"] = c.acpo.adam_beta1;
  j["acpo"]["adam_beta2"] = c.acpo.adam_beta2;
  j["acpo"]["adam_eps"] = c.acpo.adam_eps;
  j["acpo"]["probe_batch"] = c.acpo.probe_batch;
  j["acpo"]["probe_seed"] = c.acpo.probe_seed;
  j["metrics"]["eval_pairs"] = c.eval_pairs;
  j["metrics"]["export_pgm"] = c.export_pgm;
  j["metrics"]["pgm_count"] = c.pgm_count;
  j["metrics"]["heldout_images"] = c.heldout_images;
  j["metrics"]["heldout_epochs"] = c.heldout_epochs;
  j["metrics"]["heldout_lr"] = c.heldout_lr;
  return j;
}

// Defaults overlaid with a user document. Unknown keys and type mismatches
// throw ConfigError naming the full dotted path.
inline RunConfig config_from_json(const nlohmann::json& user) {
  nlohmann::json resolved = detail::config_defaults_json();
  detail::overlay_config(resolved, user, "");
  return detail::config_from_resolved(resolved);
}

// Splits "a.b.c=value" and grafts the value into `doc` at that path. Values
// that parse as JSON scalars or arrays are used as such; anything else is
// taken as a bare string, so --set iqa.variant=conditional works unquoted.
inline void apply_override(nlohmann::json& doc, const std::string& expr) {
  size_t eq = expr.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("--set expects KEY=VALUE, got '" + expr + "'");
  std::string key = expr.substr(0, eq);
  std::string raw = expr.substr(eq + 1);
  nlohmann::json value = nlohmann::json::parse(raw, nullptr, /*allow_exceptions=*/false);
  if (value.is_discarded() || value.is_object()) value = raw;

  nlohmann::json* slot = &doc;
  size_t start = 0;
  while (true) {
    size_t dot = key.find('.', start);
    std::string part = key.substr(start, dot == std::string::npos ? dot : dot - start);
    if (part.empty()) throw ConfigError("--set key '" + key + "' has an empty segment");
    if (dot == std::string::npos) {
      (*slot)[part] = value;
      return;
    }
    slot = &(*slot)[part];
    start = dot + 1;
  }
}

// Full resolution pipeline shared by every command: optional config file,
// then --set overrides in order, then the --out and --seed flags.
inline RunConfig resolve_config(const std::optional<std::string>& config_path,
                                const std::vector<std::string>& overrides,
                                const std::optional<std::string>& out_dir,
                                const std::optional<uint64_t>& seed) {
  nlohmann::json user = nlohmann::json::object();
  if (config_path) {
    std::ifstream f(*config_path, std::ios::binary);
    if (!f) throw ConfigError("config: cannot open '" + *config_path + "'");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    user = nlohmann::json::parse(text, nullptr, /*allow_exceptions=*/false);
    if (user.is_discarded())
      throw ConfigError("config: '" + *config_path + "' is not valid JSON");
  }
  for (const std::string& expr : overrides) apply_override(user, expr);
  if (out_dir) user["out_dir"] = *out_dir;
  if (seed) user["seed"] = *seed;
  return config_from_json(user);
}

// Experiment identity: everything except the run seed and the output
// directory, so matched-seed sweeps and relocated runs hash alike.
inline std::string config_hash(const RunConfig& c) {
  nlohmann::json j = config_to_json(c);
  j.erase("seed");
  j.erase("out_dir");
  return detail::hex64(detail::fnv1a64(j.dump()));
}

inline void write_config_snapshot(const RunConfig& c, const std::string& dir) {
  std::filesystem::create_directories(dir);
  std::string path = (std::filesystem::path(dir) / "config_resolved.json").string();
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("config: cannot write '" + path + "'");
  f << config_to_json(c).dump(2) << '\n';
  if (!f.good()) throw ConfigError("config: short write to '" + path + "'");
}

}  // namespace acpo
