#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <string>
#include <vector>

#include "acpo/checkpoint.hpp"

using namespace acpo;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("acpo_ckpt_" + name)).string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  REQUIRE(f.good());
}

// Bitwise equality so NaN payloads and signed zeros count as preserved.
bool same_bits(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (int i = 0; i < a.numel(); ++i)
    if (std::bit_cast<uint64_t>(a.at(i)) != std::bit_cast<uint64_t>(b.at(i))) return false;
  return true;
}

PredictorArch small_arch(bool conditional = false) {
  PredictorArch arch;
  arch.image_size = 8;
  arch.hidden = {12};
  arch.t_embed_dim = 4;
  if (conditional) {
    arch.cond_embed_dim = 4;
    arch.num_classes = 4;
  }
  return arch;
}

Provenance sample_prov() {
  Provenance p;
  p.config_hash = "00ff00ff00ff00ff";
  p.seed = 0xFFFFFFFFFFFFFFFFull;  // full-width values must survive the trip
  p.step_count = 1234567;
  return p;
}

}  // namespace

TEST_CASE("base model round trip is bit exact") {
  NoisePredictor net(small_arch(true), 11);
  // Plant the values decimal printing would mangle; raw-byte encoding keeps
  // them all, including the NaN payload and the sign of zero.
  Tensor& w = net.params().get("layer0.weight");
  w.values()[0] = std::numeric_limits<double>::quiet_NaN();
  w.values()[1] = std::numeric_limits<double>::infinity();
  w.values()[2] = -std::numeric_limits<double>::infinity();
  w.values()[3] = -0.0;
  w.values()[4] = std::numeric_limits<double>::denorm_min();
  w.values()[5] = 0.1 + 0.2;

  std::string path = tmp_path("base_roundtrip.json");
  save_base_model(net, sample_prov(), path);

  Provenance got;
  NoisePredictor back = load_base_model(path, &got);
  REQUIRE(back.arch() == net.arch());
  REQUIRE(back.params().names().size() == net.params().names().size());
  for (const std::string& name : net.params().names())
    REQUIRE(same_bits(back.params().get(name), net.params().get(name)));
  REQUIRE(got.config_hash == "00ff00ff00ff00ff");
  REQUIRE(got.seed == 0xFFFFFFFFFFFFFFFFull);
  REQUIRE(got.step_count == 1234567);
  REQUIRE_FALSE(back.has_adapters());
  // train_base left the source trainable, so the loaded copy must be too.
  REQUIRE(back.params().trainable_count() > 0);
}

TEST_CASE("adapters round trip restores the adapted forward exactly") {
  NoisePredictor net(small_arch(), 21);
  attach_adapters(net, 2, 1.5, 22);
  Rng noise(23);
  for (const std::string& name : net.params().trainable_names()) {
    for (double& v : net.params().get(name).values()) v += 0.1 * noise.normal();
  }

  std::string path = tmp_path("adapters_roundtrip.json");
  save_adapters(net, sample_prov(), path);

  NoisePredictor twin(small_arch(), 21);
  Provenance got;
  AdapterSet& set = load_adapters(path, twin, &got);
  REQUIRE(set.rank == 2);
  REQUIRE(set.scale == 1.5);
  REQUIRE(got.step_count == 1234567);

  for (const std::string& name : net.params().names())
    REQUIRE(same_bits(twin.params().get(name), net.params().get(name)));

  Rng probe(24);
  for (int t : {1, 3, 7}) {
    std::vector<double> v(64);
    for (double& x : v) x = probe.normal();
    Tensor x = Tensor::from({64}, v);
    Tensor a = net.forward(x, t, std::nullopt, true);
    Tensor b = twin.forward(x, t, std::nullopt, true);
    REQUIRE(same_bits(a, b));
  }

  // attach_adapters froze the base on load, exactly like the training path.
  REQUIRE(twin.params().is_frozen("layer0.weight"));
  REQUIRE_FALSE(twin.params().is_frozen("layer0.lora_A"));
}

TEST_CASE("adapters refuse a mismatched base with a field diff") {
  NoisePredictor net(small_arch(), 31);
  attach_adapters(net, 2, 1.0, 32);
  std::string path = tmp_path("adapters_mismatch.json");
  save_adapters(net, sample_prov(), path);

  PredictorArch other = small_arch();
  other.image_size = 16;
  other.hidden = {24};
  NoisePredictor wrong(other, 33);
  try {
    load_adapters(path, wrong);
    FAIL("expected DependencyError");
  } catch (const DependencyError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("image_size 8 vs 16") != std::string::npos);
    REQUIRE(msg.find("hidden") != std::string::npos);
  }

  NoisePredictor taken(small_arch(), 34);
  attach_adapters(taken, 2, 1.0, 35);
  REQUIRE_THROWS_AS(load_adapters(path, taken), ConfigError);
}

TEST_CASE("a reloaded scorer gives identical scores on probe images") {
  IqaDataset ds = build_iqa_dataset(64, 8, false, 41);
  Scorer s = train_evaluator(ScorerVariant::kTwoStream, ds, 2, 3e-3, 42);
  std::string path = tmp_path("scorer_roundtrip.json");
  save_scorer(s, sample_prov(), path);
  Scorer back = load_scorer(path);
  REQUIRE(back.frozen());

  Rng rng(43);
  for (int i = 0; i < 20; ++i) {
    std::vector<double> v(64);
    for (double& x : v) x = rng.uniform(0.0, 1.0);
    Tensor img = Tensor::from({8, 8}, v);
    double a = score_image(s, img, std::nullopt).item();
    double b = score_image(back, img, std::nullopt).item();
    REQUIRE(a == b);
  }
}

TEST_CASE("conditional scorer config round trips including layer weights") {
  ScorerConfig cfg;
  cfg.variant = ScorerVariant::kConditional;
  cfg.image_size = 8;
  cfg.patch_grid = 2;
  cfg.layer_weights = {1.0, 3.0};  // stored normalized as {0.25, 0.75}
  Scorer s(cfg, 51);
  std::string path = tmp_path("scorer_conditional.json");
  save_scorer(s, sample_prov(), path);
  Scorer back = load_scorer(path);
  REQUIRE(back.config().variant == ScorerVariant::kConditional);
  REQUIRE(back.config().layer_weights == std::vector<double>{0.25, 0.75});
  for (const std::string& name : s.params().names())
    REQUIRE(same_bits(back.params().get(name), s.params().get(name)));

  Rng rng(52);
  std::vector<double> v(64);
  for (double& x : v) x = rng.uniform(0.0, 1.0);
  Tensor img = Tensor::from({8, 8}, v);
  REQUIRE(score_image(s, img, 2).item() == score_image(back, img, 2).item());
}

TEST_CASE("kind and version mismatches are distinct errors") {
  IqaDataset ds = build_iqa_dataset(16, 8, false, 61);
  Scorer s = train_evaluator(ScorerVariant::kTwoStream, ds, 1, 3e-3, 62);
  std::string path = tmp_path("kind_mismatch.json");
  save_scorer(s, sample_prov(), path);

  try {
    load_base_model(path);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    REQUIRE(e.code == CheckpointError::Code::kKindMismatch);
    REQUIRE(std::string(e.what()).find("scorer") != std::string::npos);
  }

  nlohmann::json j = nlohmann::json::parse(slurp(path));
  j["schema_version"] = 2;
  std::string vpath = tmp_path("version_mismatch.json");
  spit(vpath, j.dump(2));
  try {
    load_scorer(vpath);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    REQUIRE(e.code == CheckpointError::Code::kVersionMismatch);
  }

  REQUIRE_THROWS_AS(load_scorer(tmp_path("no_such_file.json")), DependencyError);
}

TEST_CASE("corrupting the last byte is reported, not misloaded") {
  NoisePredictor net(small_arch(), 71);
  std::string path = tmp_path("last_byte.json");
  save_base_model(net, sample_prov(), path);
  std::string text = slurp(path);

  std::string clipped = text.substr(0, text.size() - 1);
  std::string cpath = tmp_path("last_byte_clipped.json");
  spit(cpath, clipped);
  try {
    load_base_model(cpath);
    FAIL("expected CheckpointError");
  } catch (const CheckpointError& e) {
    REQUIRE(e.code == CheckpointError::Code::kCorrupt);
  }

  std::string flipped = text;
  flipped.back() = 'X';
  spit(cpath, flipped);
  REQUIRE_THROWS_AS(load_base_model(cpath), CheckpointError);
}

TEST_CASE("truncation fuzz never loads silently") {
  NoisePredictor net(small_arch(true), 81);
  std::string path = tmp_path("trunc_fuzz.json");
  save_base_model(net, sample_prov(), path);
  std::string text = slurp(path);
  std::string fuzz = tmp_path("trunc_fuzz_cut.json");

  Rng rng(82);
  for (int k = 0; k < 100; ++k) {
    size_t len = static_cast<size_t>(rng.uniform_int(static_cast<int>(text.size())));
    spit(fuzz, text.substr(0, len));
    bool threw = false;
    try {
      load_base_model(fuzz);
    } catch (const CheckpointError&) {
      threw = true;
    } catch (const DependencyError&) {
      threw = true;
    }
    REQUIRE(threw);
  }
}

TEST_CASE("byte flip fuzz either errors or loads the exact original") {
  NoisePredictor net(small_arch(), 91);
  std::string path = tmp_path("flip_fuzz.json");
  save_base_model(net, sample_prov(), path);
  std::string text = slurp(path);
  std::string fuzz = tmp_path("flip_fuzz_mut.json");

  Rng rng(92);
  int survived = 0;
  for (int k = 0; k < 100; ++k) {
    std::string mut = text;
    size_t pos = static_cast<size_t>(rng.uniform_int(static_cast<int>(mut.size())));
    char was = mut[pos];
    char now = static_cast<char>(rng.uniform_int(256));
    if (now == was) continue;
    mut[pos] = now;
    spit(fuzz, mut);
    try {
      Provenance got;
      NoisePredictor back = load_base_model(fuzz, &got);
      // A flip in formatting whitespace changes nothing; anything that loads
      // must be indistinguishable from the original artifact.
      ++survived;
      REQUIRE(back.arch() == net.arch());
      for (const std::string& name : net.params().names())
        REQUIRE(same_bits(back.params().get(name), net.params().get(name)));
      REQUIRE(got.seed == sample_prov().seed);
      REQUIRE(got.config_hash == sample_prov().config_hash);
    } catch (const CheckpointError&) {
    } catch (const DependencyError&) {
    }
  }
  // The envelope is mostly base64 payload, so most flips must be caught.
  REQUIRE(survived < 30);
}

TEST_CASE("tampered payloads are caught by the hash even when re-signed base64 breaks") {
  NoisePredictor net(small_arch(), 95);
  std::string path = tmp_path("tamper.json");
  save_base_model(net, sample_prov(), path);
  nlohmann::json j = nlohmann::json::parse(slurp(path));
  std::string tpath = tmp_path("tamper_mut.json");

  SECTION("data edit without fixing the hash") {
    std::string data = j["params"]["layer0.bias"]["data"].get<std::string>();
    data[0] = data[0] == 'A' ? 'B' : 'A';
    j["params"]["layer0.bias"]["data"] = data;
    spit(tpath, j.dump(2));
    try {
      load_base_model(tpath);
      FAIL("expected CheckpointError");
    } catch (const CheckpointError& e) {
      REQUIRE(e.code == CheckpointError::Code::kCorrupt);
      REQUIRE(std::string(e.what()).find("hash") != std::string::npos);
    }
  }

  SECTION("invalid base64 character, hash re-signed") {
    std::string data = j["params"]["layer0.bias"]["data"].get<std::string>();
    data[1] = '!';
    j["params"]["layer0.bias"]["data"] = data;
    j["payload_fnv1a"] = acpo::detail::payload_hash(j);
    spit(tpath, j.dump(2));
    REQUIRE_THROWS_AS(load_base_model(tpath), CheckpointError);
  }

  SECTION("payload length not matching the shape, hash re-signed") {
    j["params"]["layer0.bias"]["data"] = "AAAAAAAAAAA=";  // one double, shape wants 12
    j["payload_fnv1a"] = acpo::detail::payload_hash(j);
    spit(tpath, j.dump(2));
    REQUIRE_THROWS_AS(load_base_model(tpath), CheckpointError);
  }

  SECTION("missing parameter, hash re-signed") {
    j["params"].erase("layer1.bias");
    j["payload_fnv1a"] = acpo::detail::payload_hash(j);
    spit(tpath, j.dump(2));
    REQUIRE_THROWS_AS(load_base_model(tpath), CheckpointError);
  }

  SECTION("extra parameter, hash re-signed") {
    j["params"]["bogus"] = j["params"]["layer0.bias"];
    j["payload_fnv1a"] = acpo::detail::payload_hash(j);
    spit(tpath, j.dump(2));
    REQUIRE_THROWS_AS(load_base_model(tpath), CheckpointError);
  }
}

TEST_CASE("one hundred save load compare round trips") {
  Rng rng(101);
  std::string path = tmp_path("mass_roundtrip.json");
  for (int k = 0; k < 100; ++k) {
    PredictorArch arch;
    arch.image_size = 4 + 4 * rng.uniform_int(2);  // 4 or 8
    arch.hidden = {8 + rng.uniform_int(9)};
    arch.t_embed_dim = 2 + 2 * rng.uniform_int(3);
    if (rng.uniform_int(2) == 1) {
      arch.cond_embed_dim = 2 + rng.uniform_int(3);
      arch.num_classes = 2 + rng.uniform_int(3);
    }
    NoisePredictor net(arch, mix_seed(1000, static_cast<uint64_t>(k)));
    Provenance p;
    p.config_hash = detail::hex64(mix_seed(7, static_cast<uint64_t>(k)));
    p.seed = mix_seed(8, static_cast<uint64_t>(k));
    p.step_count = k;
    save_base_model(net, p, path);
    Provenance got;
    NoisePredictor back = load_base_model(path, &got);
    REQUIRE(back.arch() == net.arch());
    for (const std::string& name : net.params().names())
      REQUIRE(same_bits(back.params().get(name), net.params().get(name)));
    REQUIRE(got.config_hash == p.config_hash);
    REQUIRE(got.seed == p.seed);
    REQUIRE(got.step_count == p.step_count);
  }
}
