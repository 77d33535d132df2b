#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <string>

#include "acpo/config.hpp"
#include "acpo/pgm.hpp"

using namespace acpo;
namespace fs = std::filesystem;

namespace {

std::string tmp_path(const std::string& name) {
  return (fs::temp_directory_path() / ("acpo_cfg_" + name)).string();
}

void spit(const std::string& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  f << text;
  REQUIRE(f.good());
}

}  // namespace

TEST_CASE("an empty document resolves to the documented defaults") {
  RunConfig c = config_from_json(nlohmann::json::object());
  REQUIRE(c.image_size == 16);
  REQUIRE(c.T == 100);
  REQUIRE(c.acpo.t_late_max == 10);
  REQUIRE(c.rank == 4);
  REQUIRE(c.acpo.lambda1 == 1.0);
  REQUIRE(c.acpo.lambda2 == 1.0);
  REQUIRE(c.acpo.steps == 1000);
  REQUIRE(c.variant == ScorerVariant::kTwoStream);
  REQUIRE(c.hidden == std::vector<int>{64, 64});
  REQUIRE(config_to_json(c) == detail::config_defaults_json());
}

TEST_CASE("partial documents override only what they name") {
  nlohmann::json user = {{"acpo", {{"lambda2", 10}}},
                         {"diffusion", {{"hidden", {32, 16}}}}};
  RunConfig c = config_from_json(user);
  REQUIRE(c.acpo.lambda2 == 10.0);  // integer literal accepted for a float knob
  REQUIRE(c.hidden == std::vector<int>{32, 16});
  REQUIRE(c.acpo.lambda1 == 1.0);
  REQUIRE(c.T == 100);
}

TEST_CASE("unknown keys are rejected by their dotted path") {
  try {
    config_from_json({{"bogus", 1}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("'bogus'") != std::string::npos);
  }
  try {
    config_from_json({{"diffusion", {{"TT", 5}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    REQUIRE(std::string(e.what()).find("'diffusion.TT'") != std::string::npos);
  }
}

TEST_CASE("type mismatches name the key and the expected type") {
  try {
    config_from_json({{"diffusion", {{"T", "many"}}}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    std::string msg = e.what();
    REQUIRE(msg.find("'diffusion.T'") != std::string::npos);
    REQUIRE(msg.find("integer") != std::string::npos);
  }
  REQUIRE_THROWS_AS(config_from_json({{"diffusion", {{"T", 1.5}}}}), ConfigError);
  REQUIRE_THROWS_AS(config_from_json({{"data-synth", {{"conditional", 1}}}}), ConfigError);
  REQUIRE_THROWS_AS(config_from_json({{"diffusion", {{"hidden", {32, 1.5}}}}}), ConfigError);
  REQUIRE_THROWS_AS(config_from_json({{"iqa", {{"variant", "fancy"}}}}), ConfigError);
  REQUIRE_THROWS_AS(config_from_json({{"seed", -3}}), ConfigError);
}

TEST_CASE("set expressions parse scalars, arrays, and bare strings") {
  nlohmann::json doc = nlohmann::json::object();
  apply_override(doc, "acpo.lambda2=10");
  apply_override(doc, "iqa.variant=conditional");
  apply_override(doc, "diffusion.hidden=[32,16]");
  apply_override(doc, "data-synth.conditional=true");
  RunConfig c = config_from_json(doc);
  REQUIRE(c.acpo.lambda2 == 10.0);
  REQUIRE(c.variant == ScorerVariant::kConditional);
  REQUIRE(c.hidden == std::vector<int>{32, 16});
  REQUIRE(c.conditional);

  REQUIRE_THROWS_AS(apply_override(doc, "acpo.lambda2"), ConfigError);
  REQUIRE_THROWS_AS(apply_override(doc, "=5"), ConfigError);
  nlohmann::json bad = nlohmann::json::object();
  apply_override(bad, "acpo.nonsense=1");
  REQUIRE_THROWS_AS(config_from_json(bad), ConfigError);
}

TEST_CASE("resolution order is file, then sets, then flags") {
  std::string path = tmp_path("order.json");
  spit(path, R"({"acpo": {"lambda2": 5}, "seed": 7})");
  RunConfig c = resolve_config(path, {"acpo.lambda2=9", "acpo.steps=50"}, "outdir", 42);
  REQUIRE(c.acpo.lambda2 == 9.0);
  REQUIRE(c.acpo.steps == 50);
  REQUIRE(c.seed == 42);
  REQUIRE(c.acpo.seed == 42);  // the run seed feeds the fine-tune stream
  REQUIRE(c.out_dir == "outdir");

  REQUIRE_THROWS_AS(resolve_config(tmp_path("missing.json"), {}, std::nullopt, std::nullopt),
                    ConfigError);
  std::string broken = tmp_path("broken.json");
  spit(broken, "{not json");
  REQUIRE_THROWS_AS(resolve_config(broken, {}, std::nullopt, std::nullopt), ConfigError);
}

TEST_CASE("the config hash identifies the experiment, not the run") {
  RunConfig a = config_from_json(nlohmann::json::object());
  RunConfig b = a;
  b.seed = 999;
  b.out_dir = "elsewhere";
  REQUIRE(config_hash(a) == config_hash(b));
  RunConfig c = a;
  c.acpo.lambda2 = 10.0;
  REQUIRE(config_hash(a) != config_hash(c));
}

TEST_CASE("the snapshot in the output directory reproduces the config") {
  RunConfig c = config_from_json({{"acpo", {{"steps", 77}}}});
  c.seed = 5;
  std::string dir = tmp_path("snapdir");
  write_config_snapshot(c, dir);
  std::ifstream f(fs::path(dir) / "config_resolved.json");
  REQUIRE(f.good());
  nlohmann::json snap = nlohmann::json::parse(f);
  RunConfig back = config_from_json(snap);
  REQUIRE(config_to_json(back) == config_to_json(c));
  REQUIRE(back.seed == 5);
  REQUIRE(back.acpo.steps == 77);
}

TEST_CASE("pgm round trip quantizes to the nearest of 256 levels") {
  std::vector<double> v(15);
  for (int i = 0; i < 15; ++i) v[static_cast<size_t>(i)] = (i - 2) / 10.0;  // includes <0 and >1
  Tensor img = Tensor::from({3, 5}, v);
  std::string path = tmp_path("grad.pgm");
  write_pgm(img, path);
  Tensor back = read_pgm(path);
  REQUIRE(back.shape() == Shape{3, 5});
  for (int i = 0; i < 15; ++i) {
    double clamped = std::min(1.0, std::max(0.0, img.at(i)));
    double want = std::lround(clamped * 255.0) / 255.0;
    REQUIRE(back.at(i) == Catch::Approx(want).margin(1e-15));
  }
}

TEST_CASE("pgm files carry the documented header and exact raster size") {
  Tensor img = Tensor::full({3, 5}, 0.5);
  std::string path = tmp_path("header.pgm");
  write_pgm(img, path);
  std::ifstream f(path, std::ios::binary);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  REQUIRE(text.substr(0, 11) == "P5\n5 3\n255\n");
  REQUIRE(text.size() == 11 + 15);
}

TEST_CASE("pgm reader accepts header comments") {
  std::string path = tmp_path("comment.pgm");
  std::string body = "P5\n# made by hand\n2 2\n# again\n255\n";
  body += std::string("\x00\x7f\x80\xff", 4);
  spit(path, body);
  Tensor img = read_pgm(path);
  REQUIRE(img.shape() == Shape{2, 2});
  REQUIRE(img.at(0) == 0.0);
  REQUIRE(img.at(3) == 1.0);
  REQUIRE(img.at(1) == Catch::Approx(127.0 / 255.0).margin(1e-15));
}

TEST_CASE("pgm reader rejects what it cannot faithfully load") {
  std::string path = tmp_path("bad.pgm");
  spit(path, "P2\n2 2\n255\n0 0 0 0\n");
  REQUIRE_THROWS_AS(read_pgm(path), DependencyError);
  spit(path, "P5\n2 2\n65535\n" + std::string(8, 'x'));
  REQUIRE_THROWS_AS(read_pgm(path), DependencyError);
  spit(path, "P5\n2 2\n255\nab");  // 2 of 4 raster bytes
  REQUIRE_THROWS_AS(read_pgm(path), DependencyError);
  REQUIRE_THROWS_AS(read_pgm(tmp_path("nope.pgm")), DependencyError);
  REQUIRE_THROWS_AS(write_pgm(Tensor::full({4}, 0.5), tmp_path("flat.pgm")), ShapeError);
}
