#pragma once

// Checkpoint serialization: a JSON envelope carrying a schema version, a kind
// tag (base-model, adapters, scorer), an architecture descriptor, provenance,
// and named parameter arrays encoded as base64 of little-endian 64-bit
// doubles. Encoding raw bytes keeps round trips bit-exact (NaN payloads,
// signed zeros, denormals all survive) and independent of any decimal
// printing. A hash over the semantic sections turns in-place corruption that
// still parses as JSON into a load error instead of silently different
// weights.
//
// Loaded scorers come back frozen (they are artifacts of completed training);
// loaded base models come back trainable, matching the state train_base left
// them in. Loading adapters attaches them to a caller-supplied base model and
// rejects an architecture mismatch with a field-level diff.

#include <array>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "acpo/errors.hpp"
#include "acpo/iqa.hpp"
#include "acpo/predictor.hpp"

namespace acpo {

inline constexpr int kCheckpointSchemaVersion = 1;

// Where an artifact came from: enough to connect it back to the resolved
// config snapshot that produced it.
struct Provenance {
  std::string config_hash;
  uint64_t seed = 0;
  int64_t step_count = 0;
};

namespace detail {

using nlohmann::json;

[[noreturn]] inline void corrupt(const std::string& msg) {
  throw CheckpointError(CheckpointError::Code::kCorrupt, msg);
}

inline constexpr const char* kB64 =
    "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";

inline std::string base64_encode(const std::vector<unsigned char>& in) {
  std::string out;
  out.reserve((in.size() + 2) / 3 * 4);
  size_t i = 0;
  for (; i + 3 <= in.size(); i += 3) {
    uint32_t v = (uint32_t{in[i]} << 16) | (uint32_t{in[i + 1]} << 8) | in[i + 2];
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out.push_back(kB64[v & 63]);
  }
  size_t rest = in.size() - i;
  if (rest == 1) {
    uint32_t v = uint32_t{in[i]} << 16;
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out += "==";
  } else if (rest == 2) {
    uint32_t v = (uint32_t{in[i]} << 16) | (uint32_t{in[i + 1]} << 8);
    out.push_back(kB64[(v >> 18) & 63]);
    out.push_back(kB64[(v >> 12) & 63]);
    out.push_back(kB64[(v >> 6) & 63]);
    out += "=";
  }
  return out;
}

// Strict decoder: no whitespace, padding only at the very end. Anything else
// is treated as corruption.
inline std::vector<unsigned char> base64_decode(const std::string& s) {
  static const std::array<int8_t, 256> table = [] {
    std::array<int8_t, 256> t;
    t.fill(-1);
    for (int i = 0; i < 64; ++i) t[static_cast<unsigned char>(kB64[i])] = static_cast<int8_t>(i);
    return t;
  }();
  if (s.size() % 4 != 0) corrupt("base64 payload length is not a multiple of 4");
  std::vector<unsigned char> out;
  out.reserve(s.size() / 4 * 3);
  for (size_t i = 0; i < s.size(); i += 4) {
    uint32_t v = 0;
    int pad = 0;
    for (int k = 0; k < 4; ++k) {
      char c = s[i + k];
      if (c == '=') {
        if (i + 4 != s.size() || k < 2) corrupt("base64 padding inside the payload");
        ++pad;
        v <<= 6;
      } else {
        if (pad) corrupt("base64 data after padding");
        int8_t d = table[static_cast<unsigned char>(c)];
        if (d < 0) corrupt("invalid base64 character");
        v = (v << 6) | static_cast<uint32_t>(d);
      }
    }
    out.push_back(static_cast<unsigned char>((v >> 16) & 0xff));
    if (pad < 2) out.push_back(static_cast<unsigned char>((v >> 8) & 0xff));
    if (pad < 1) out.push_back(static_cast<unsigned char>(v & 0xff));
  }
  return out;
}

inline std::vector<unsigned char> doubles_to_bytes(std::span<const double> v) {
  std::vector<unsigned char> out;
  out.reserve(v.size() * 8);
  for (double d : v) {
    uint64_t bits;
    std::memcpy(&bits, &d, 8);
    for (int k = 0; k < 8; ++k)
      out.push_back(static_cast<unsigned char>((bits >> (8 * k)) & 0xff));
  }
  return out;
}

inline std::vector<double> bytes_to_doubles(const std::vector<unsigned char>& b) {
  if (b.size() % 8 != 0) corrupt("tensor payload is not a whole number of doubles");
  std::vector<double> out(b.size() / 8);
  for (size_t i = 0; i < out.size(); ++i) {
    uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= uint64_t{b[i * 8 + k]} << (8 * k);
    std::memcpy(&out[i], &bits, 8);
  }
  return out;
}

inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

// Hash over every section whose corruption could change what a successful
// load returns. Key order in dump() is deterministic, so save and load agree.
inline std::string payload_hash(const json& j) {
  std::string text;
  for (const char* key : {"architecture", "provenance", "params", "adapters"})
    if (j.contains(key)) text += j.at(key).dump();
  return hex64(fnv1a64(text));
}

inline int get_int_field(const json& e, const char* key) {
  if (!e.contains(key) || !e[key].is_number_integer())
    corrupt(std::string("checkpoint: missing integer field '") + key + "'");
  return e[key].get<int>();
}

inline double get_double_field(const json& e, const char* key) {
  if (!e.contains(key) || !e[key].is_number())
    corrupt(std::string("checkpoint: missing numeric field '") + key + "'");
  return e[key].get<double>();
}

inline std::string get_string_field(const json& e, const char* key) {
  if (!e.contains(key) || !e[key].is_string())
    corrupt(std::string("checkpoint: missing string field '") + key + "'");
  return e[key].get<std::string>();
}

inline json tensor_to_json(const Tensor& t) {
  json e;
  e["shape"] = t.shape();
  e["data"] = base64_encode(doubles_to_bytes(t.data()));
  return e;
}

inline std::vector<double> tensor_from_json(const json& params, const std::string& name,
                                            const Shape& want) {
  auto it = params.find(name);
  if (it == params.end()) corrupt("checkpoint: missing parameter '" + name + "'");
  const json& e = *it;
  if (!e.is_object() || e.size() != 2 || !e.contains("shape") || !e.contains("data") ||
      !e["shape"].is_array() || !e["data"].is_string())
    corrupt("checkpoint: malformed entry for parameter '" + name + "'");
  Shape got;
  for (const json& s : e["shape"]) {
    if (!s.is_number_integer()) corrupt("checkpoint: non-integer shape for '" + name + "'");
    got.push_back(s.get<int>());
  }
  if (got != want)
    corrupt("checkpoint: parameter '" + name + "' has shape " + shape_str(got) +
            ", expected " + shape_str(want));
  std::vector<double> v = bytes_to_doubles(base64_decode(e["data"].get<std::string>()));
  if (static_cast<int64_t>(v.size()) != shape_numel(want))
    corrupt("checkpoint: parameter '" + name + "' holds " + std::to_string(v.size()) +
            " values, expected " + std::to_string(shape_numel(want)));
  return v;
}

inline json provenance_to_json(const Provenance& p) {
  json e;
  e["config_hash"] = p.config_hash;
  e["seed"] = p.seed;
  e["step_count"] = p.step_count;
  return e;
}

inline Provenance provenance_from_json(const json& j) {
  if (!j.contains("provenance") || !j["provenance"].is_object())
    corrupt("checkpoint: missing provenance section");
  const json& e = j["provenance"];
  Provenance p;
  p.config_hash = get_string_field(e, "config_hash");
  if (!e.contains("seed") || !e["seed"].is_number_integer() ||
      (e["seed"].is_number_integer() && !e["seed"].is_number_unsigned() &&
       e["seed"].get<int64_t>() < 0))
    corrupt("checkpoint: provenance seed must be a non-negative integer");
  p.seed = e["seed"].get<uint64_t>();
  if (!e.contains("step_count") || !e["step_count"].is_number_integer())
    corrupt("checkpoint: provenance step_count must be an integer");
  p.step_count = e["step_count"].get<int64_t>();
  return p;
}

inline json arch_to_json(const PredictorArch& a) {
  json e;
  e["image_size"] = a.image_size;
  e["hidden"] = a.hidden;
  e["t_embed_dim"] = a.t_embed_dim;
  e["t_max"] = a.t_max;
  e["cond_embed_dim"] = a.cond_embed_dim;
  e["num_classes"] = a.num_classes;
  return e;
}

inline PredictorArch arch_from_json(const json& j) {
  if (!j.contains("architecture") || !j["architecture"].is_object() ||
      j["architecture"].size() != 6)
    corrupt("checkpoint: malformed architecture descriptor");
  const json& e = j["architecture"];
  PredictorArch a;
  a.image_size = get_int_field(e, "image_size");
  a.t_embed_dim = get_int_field(e, "t_embed_dim");
  a.t_max = get_int_field(e, "t_max");
  a.cond_embed_dim = get_int_field(e, "cond_embed_dim");
  a.num_classes = get_int_field(e, "num_classes");
  if (!e.contains("hidden") || !e["hidden"].is_array())
    corrupt("checkpoint: architecture hidden widths missing");
  a.hidden.clear();
  for (const json& h : e["hidden"]) {
    if (!h.is_number_integer()) corrupt("checkpoint: non-integer hidden width");
    a.hidden.push_back(h.get<int>());
  }
  return a;
}

inline std::string arch_diff(const PredictorArch& a, const PredictorArch& b) {
  std::string d;
  auto field = [&d](const char* name, const std::string& x, const std::string& y) {
    if (x == y) return;
    if (!d.empty()) d += ", ";
    d += std::string(name) + " " + x + " vs " + y;
  };
  field("image_size", std::to_string(a.image_size), std::to_string(b.image_size));
  field("hidden", shape_str(a.hidden), shape_str(b.hidden));
  field("t_embed_dim", std::to_string(a.t_embed_dim), std::to_string(b.t_embed_dim));
  field("t_max", std::to_string(a.t_max), std::to_string(b.t_max));
  field("cond_embed_dim", std::to_string(a.cond_embed_dim), std::to_string(b.cond_embed_dim));
  field("num_classes", std::to_string(a.num_classes), std::to_string(b.num_classes));
  return d;
}

inline json scorer_config_to_json(const ScorerConfig& c) {
  json e;
  e["variant"] = c.variant == ScorerVariant::kTwoStream ? "two-stream" : "conditional";
  e["image_size"] = c.image_size;
  e["num_classes"] = c.num_classes;
  e["stream_hidden"] = c.stream_hidden;
  e["stream_feature"] = c.stream_feature;
  e["fuse_hidden"] = c.fuse_hidden;
  e["patch_grid"] = c.patch_grid;
  e["token_dim"] = c.token_dim;
  e["embed_dim"] = c.embed_dim;
  e["layer_weights"] = c.layer_weights;
  return e;
}

inline ScorerConfig scorer_config_from_json(const json& j) {
  if (!j.contains("architecture") || !j["architecture"].is_object() ||
      j["architecture"].size() != 10)
    corrupt("checkpoint: malformed scorer descriptor");
  const json& e = j["architecture"];
  ScorerConfig c;
  std::string variant = get_string_field(e, "variant");
  if (variant == "two-stream") {
    c.variant = ScorerVariant::kTwoStream;
  } else if (variant == "conditional") {
    c.variant = ScorerVariant::kConditional;
  } else {
    corrupt("checkpoint: unknown scorer variant '" + variant + "'");
  }
  c.image_size = get_int_field(e, "image_size");
  c.num_classes = get_int_field(e, "num_classes");
  c.stream_hidden = get_int_field(e, "stream_hidden");
  c.stream_feature = get_int_field(e, "stream_feature");
  c.fuse_hidden = get_int_field(e, "fuse_hidden");
  c.patch_grid = get_int_field(e, "patch_grid");
  c.token_dim = get_int_field(e, "token_dim");
  c.embed_dim = get_int_field(e, "embed_dim");
  if (!e.contains("layer_weights") || !e["layer_weights"].is_array())
    corrupt("checkpoint: scorer layer_weights missing");
  c.layer_weights.clear();
  for (const json& w : e["layer_weights"]) {
    if (!w.is_number()) corrupt("checkpoint: non-numeric layer weight");
    c.layer_weights.push_back(w.get<double>());
  }
  return c;
}

inline std::vector<std::string> base_param_names(const PredictorArch& a) {
  std::vector<std::string> names;
  for (int k = 0; k < a.num_layers(); ++k) {
    names.push_back(NoisePredictor::layer_name(k) + ".weight");
    names.push_back(NoisePredictor::layer_name(k) + ".bias");
  }
  if (a.conditional()) names.push_back("cond.embed");
  names.push_back("time.skip");
  names.push_back("time.gain");
  return names;
}

// Writes through a temporary and renames into place so a crash mid-write
// never leaves a half-written file under the final name.
inline void write_envelope(json j, const std::string& path) {
  j["payload_fnv1a"] = payload_hash(j);
  std::filesystem::path target(path);
  std::filesystem::path tmp(path + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw ConfigError("checkpoint: cannot write '" + tmp.string() + "'");
    // No trailing newline: the document ends at the closing brace, so losing
    // even one byte makes the JSON incomplete and the load reports it.
    f << j.dump(2);
    if (!f.good()) throw ConfigError("checkpoint: short write to '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, target, ec);
  if (ec)
    throw ConfigError("checkpoint: cannot move '" + tmp.string() +
                      "' into place: " + ec.message());
}

inline json read_envelope(const std::string& path, const std::string& expected_kind) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DependencyError("checkpoint: cannot open '" + path + "'");
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  json j = json::parse(text, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object())
    corrupt("checkpoint '" + path + "': not a complete JSON object (truncated or corrupt)");
  if (!j.contains("schema_version") || !j["schema_version"].is_number_integer())
    corrupt("checkpoint '" + path + "': missing schema_version");
  int version = j["schema_version"].get<int>();
  if (version != kCheckpointSchemaVersion)
    throw CheckpointError(CheckpointError::Code::kVersionMismatch,
                          "checkpoint '" + path + "': schema_version " +
                              std::to_string(version) + ", this build reads " +
                              std::to_string(kCheckpointSchemaVersion));
  std::string kind = get_string_field(j, "kind");
  if (kind != expected_kind)
    throw CheckpointError(CheckpointError::Code::kKindMismatch,
                          "checkpoint '" + path + "': kind '" + kind + "', expected '" +
                              expected_kind + "'");
  if (!j.contains("payload_fnv1a") || !j["payload_fnv1a"].is_string() ||
      j["payload_fnv1a"].get<std::string>() != payload_hash(j))
    corrupt("checkpoint '" + path + "': payload hash mismatch (corrupt contents)");
  return j;
}

}  // namespace detail

inline void save_base_model(const NoisePredictor& net, const Provenance& prov,
                            const std::string& path) {
  detail::json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["kind"] = "base-model";
  j["architecture"] = detail::arch_to_json(net.arch());
  j["provenance"] = detail::provenance_to_json(prov);
  detail::json params = detail::json::object();
  for (const std::string& name : detail::base_param_names(net.arch()))
    params[name] = detail::tensor_to_json(net.params().get(name));
  j["params"] = std::move(params);
  detail::write_envelope(std::move(j), path);
}

inline NoisePredictor load_base_model(const std::string& path, Provenance* prov = nullptr) {
  detail::json j = detail::read_envelope(path, "base-model");
  PredictorArch arch = detail::arch_from_json(j);
  std::optional<NoisePredictor> net;
  try {
    net.emplace(arch, 0);
  } catch (const ConfigError& e) {
    detail::corrupt("checkpoint '" + path + "': unusable architecture: " + e.what());
  }
  std::vector<std::string> names = detail::base_param_names(arch);
  if (!j.contains("params") || !j["params"].is_object() || j["params"].size() != names.size())
    detail::corrupt("checkpoint '" + path + "': parameter section does not match architecture");
  for (const std::string& name : names) {
    Tensor& t = net->params().get(name);
    t.values() = detail::tensor_from_json(j["params"], name, t.shape());
  }
  if (prov) *prov = detail::provenance_from_json(j);
  return std::move(*net);
}

inline void save_adapters(const NoisePredictor& net, const Provenance& prov,
                          const std::string& path) {
  if (!net.has_adapters()) throw ConfigError("save_adapters: no adapters attached");
  detail::json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["kind"] = "adapters";
  j["architecture"] = detail::arch_to_json(net.arch());
  j["provenance"] = detail::provenance_to_json(prov);
  detail::json params = detail::json::object();
  for (const LoraLayer& l : net.adapters().layers) {
    params[l.name + ".lora_A"] = detail::tensor_to_json(l.A);
    params[l.name + ".lora_B"] = detail::tensor_to_json(l.B);
  }
  detail::json a;
  a["rank"] = net.adapters().rank;
  a["scale"] = net.adapters().scale;
  a["params"] = std::move(params);
  j["adapters"] = std::move(a);
  detail::write_envelope(std::move(j), path);
}

// Attaches the stored adapters to `net` and overwrites their factors with the
// stored values. The base model must match the architecture recorded at save
// time; the mismatch message lists the differing fields.
inline AdapterSet& load_adapters(const std::string& path, NoisePredictor& net,
                                 Provenance* prov = nullptr) {
  if (net.has_adapters()) throw ConfigError("load_adapters: adapters already attached");
  detail::json j = detail::read_envelope(path, "adapters");
  PredictorArch stored = detail::arch_from_json(j);
  if (!(stored == net.arch()))
    throw DependencyError("load_adapters: base architecture mismatch: " +
                          detail::arch_diff(stored, net.arch()));
  if (!j.contains("adapters") || !j["adapters"].is_object())
    detail::corrupt("checkpoint '" + path + "': missing adapters section");
  const detail::json& a = j["adapters"];
  int rank = detail::get_int_field(a, "rank");
  double scale = detail::get_double_field(a, "scale");
  if (!a.contains("params") || !a["params"].is_object() ||
      a["params"].size() != 2 * static_cast<size_t>(net.arch().num_layers()))
    detail::corrupt("checkpoint '" + path + "': adapter section does not match architecture");
  try {
    attach_adapters(net, rank, scale, 0);
  } catch (const ConfigError& e) {
    detail::corrupt("checkpoint '" + path + "': unusable adapter shape: " + e.what());
  }
  for (LoraLayer& l : net.adapters().layers) {
    l.A.values() = detail::tensor_from_json(a["params"], l.name + ".lora_A", l.A.shape());
    l.B.values() = detail::tensor_from_json(a["params"], l.name + ".lora_B", l.B.shape());
  }
  if (prov) *prov = detail::provenance_from_json(j);
  return net.adapters();
}

inline void save_scorer(const Scorer& s, const Provenance& prov, const std::string& path) {
  detail::json j;
  j["schema_version"] = kCheckpointSchemaVersion;
  j["kind"] = "scorer";
  j["architecture"] = detail::scorer_config_to_json(s.config());
  j["provenance"] = detail::provenance_to_json(prov);
  detail::json params = detail::json::object();
  for (const std::string& name : s.params().names())
    params[name] = detail::tensor_to_json(s.params().get(name));
  j["params"] = std::move(params);
  detail::write_envelope(std::move(j), path);
}

inline Scorer load_scorer(const std::string& path, Provenance* prov = nullptr) {
  detail::json j = detail::read_envelope(path, "scorer");
  ScorerConfig cfg = detail::scorer_config_from_json(j);
  std::optional<Scorer> s;
  try {
    s.emplace(cfg, 0);
  } catch (const ConfigError& e) {
    detail::corrupt("checkpoint '" + path + "': unusable scorer descriptor: " + e.what());
  }
  if (!j.contains("params") || !j["params"].is_object() ||
      j["params"].size() != s->params().names().size())
    detail::corrupt("checkpoint '" + path + "': parameter section does not match descriptor");
  for (const std::string& name : s->params().names()) {
    Tensor& t = s->params().get(name);
    t.values() = detail::tensor_from_json(j["params"], name, t.shape());
  }
  s->freeze();
  if (prov) *prov = detail::provenance_from_json(j);
  return std::move(*s);
}

}  // namespace acpo
