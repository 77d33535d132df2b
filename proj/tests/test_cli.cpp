#include <cstdint>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <catch2/catch_amalgamated.hpp>

#include "acpo/cli.hpp"
#include "acpo/pgm.hpp"

using namespace acpo;
namespace fs = std::filesystem;

namespace {

struct CliResult {
  int rc;
  std::string out;
  std::string err;
};

CliResult run(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  int rc = run_cli(args, out, err);
  return {rc, out.str(), err.str()};
}

std::string fresh_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("acpo_cli_" + name);
  fs::remove_all(p);
  return p.string();
}

std::string slurp(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  REQUIRE(f.good());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

// Shrunk profile so a full pipeline chain runs in well under a second.
std::vector<std::string> tiny_args(const std::string& sub, const std::string& out,
                                   uint64_t seed,
                                   const std::vector<std::string>& extra = {}) {
  std::vector<std::string> a{sub};
  auto set = [&a](const char* kv) {
    a.emplace_back("--set");
    a.emplace_back(kv);
  };
  set("data-synth.image_size=8");
  set("data-synth.iqa_train_images=64");
  set("data-synth.diffusion_images=16");
  set("diffusion.T=10");
  set("diffusion.hidden=[16]");
  set("diffusion.t_embed_dim=4");
  set("diffusion.base_steps=120");
  set("diffusion.base_batch=8");
  set("adapters.rank=2");
  set("iqa.stream_hidden=12");
  set("iqa.stream_feature=8");
  set("iqa.fuse_hidden=8");
  set("iqa.epochs=4");
  set("iqa.batch=8");
  set("acpo.steps=12");
  set("acpo.t_late_max=3");
  set("acpo.guided_steps=2");
  set("acpo.mse_batch=4");
  set("acpo.guided_batch=2");
  set("acpo.anchor_batch=4");
  set("acpo.probe_batch=2");
  set("metrics.eval_pairs=8");
  set("metrics.heldout_images=64");
  set("metrics.heldout_epochs=4");
  for (const std::string& e : extra) a.push_back(e);
  a.insert(a.end(), {"--out", out, "--seed", std::to_string(seed)});
  return a;
}

void run_chain(const std::string& out, uint64_t seed) {
  for (const char* sub : {"train-iqa", "train-base", "finetune", "evaluate"}) {
    CliResult r = run(tiny_args(sub, out, seed));
    INFO(sub << ": " << r.err);
    REQUIRE(r.rc == 0);
  }
}

int count_lines(const std::string& text) {
  int n = 0;
  for (char c : text)
    if (c == '\n') ++n;
  return n;
}

}  // namespace

TEST_CASE("pipeline chain writes every artifact") {
  std::string out = fresh_dir("chain");
  run_chain(out, 11);

  for (const char* name : {"scorer.json", "base.json", "adapters.json", "steps.csv",
                           "summary.csv", "config_resolved.json"}) {
    INFO(name);
    REQUIRE(fs::exists(fs::path(out) / name));
  }

  std::string steps = slurp(out + "/steps.csv");
  REQUIRE(steps.substr(0, 5) == "step,");
  REQUIRE(count_lines(steps) == 1 + 12);

  std::string summary = slurp(out + "/summary.csv");
  REQUIRE(summary.find("run_id,metric,") == 0);
  REQUIRE(summary.find("\nseed11,heldout_score,") != std::string::npos);
  REQUIRE(count_lines(summary) == 2);

  // The snapshot reflects the overrides, not the defaults.
  auto snap = nlohmann::json::parse(slurp(out + "/config_resolved.json"));
  REQUIRE(snap["diffusion"]["T"].get<int>() == 10);
  REQUIRE(snap["seed"].get<uint64_t>() == 11);
  REQUIRE(snap["out_dir"].get<std::string>() == out);
}

TEST_CASE("evaluate can export sample pairs as PGM") {
  std::string out = fresh_dir("pgm_export");
  for (const char* sub : {"train-iqa", "train-base", "finetune"})
    REQUIRE(run(tiny_args(sub, out, 19)).rc == 0);
  CliResult r = run(tiny_args(
      "evaluate", out, 19,
      {"--set", "metrics.export_pgm=true", "--set", "metrics.pgm_count=2"}));
  REQUIRE(r.rc == 0);
  for (const char* name : {"samples/pair000_baseline.pgm", "samples/pair000_finetuned.pgm",
                           "samples/pair001_baseline.pgm", "samples/pair001_finetuned.pgm"}) {
    Tensor img = read_pgm((fs::path(out) / name).string());
    REQUIRE(img.shape() == Shape{8, 8});
  }
}

TEST_CASE("identical invocations produce byte-identical artifacts") {
  std::string a = fresh_dir("det_a");
  std::string b = fresh_dir("det_b");
  run_chain(a, 7);
  run_chain(b, 7);
  for (const char* name :
       {"scorer.json", "base.json", "adapters.json", "steps.csv", "summary.csv"}) {
    INFO(name);
    REQUIRE(slurp(a + "/" + name) == slurp(b + "/" + name));
  }
  // A different seed changes the run (checked on the cheapest artifact).
  std::string c = fresh_dir("det_c");
  REQUIRE(run(tiny_args("train-iqa", c, 8)).rc == 0);
  REQUIRE(slurp(a + "/scorer.json") != slurp(c + "/scorer.json"));
}

TEST_CASE("conditional variant runs the same chain") {
  std::string out = fresh_dir("cond");
  std::vector<std::string> extra{
      "--set", "data-synth.conditional=true", "--set", "diffusion.cond_embed_dim=4",
      "--set", "iqa.variant=conditional",     "--set", "iqa.patch_grid=2",
      "--set", "iqa.token_dim=8",             "--set", "iqa.embed_dim=6"};
  for (const char* sub : {"train-iqa", "train-base", "finetune", "evaluate"}) {
    CliResult r = run(tiny_args(sub, out, 13, extra));
    INFO(sub << ": " << r.err);
    REQUIRE(r.rc == 0);
  }
  REQUIRE(fs::exists(fs::path(out) / "summary.csv"));

  // A conditional scorer has no class token to go with a bare PGM.
  std::string data = fresh_dir("cond_data");
  REQUIRE(run(tiny_args("export-data", data, 13)).rc == 0);
  CliResult r = run(tiny_args("score", out, 13,
                              {data + "/images/iqa_0000.pgm"}));
  REQUIRE(r.rc == 2);
  REQUIRE(r.err.find("conditional") != std::string::npos);
}

TEST_CASE("config errors exit 2 and name the problem") {
  CliResult unknown = run({"finetune", "--set", "bogus.key=1"});
  REQUIRE(unknown.rc == 2);
  REQUIRE(unknown.err.find("'bogus'") != std::string::npos);

  CliResult typo = run({"finetune", "--set", "diffusion.TT=5"});
  REQUIRE(typo.rc == 2);
  REQUIRE(typo.err.find("'diffusion.TT'") != std::string::npos);

  CliResult noeq = run({"finetune", "--set", "acpo.lambda1"});
  REQUIRE(noeq.rc == 2);

  CliResult nofile = run({"train-iqa", "--config", "/definitely/not/here.json"});
  REQUIRE(nofile.rc == 2);
  REQUIRE(nofile.err.find("not/here.json") != std::string::npos);

  REQUIRE(run({"--badflag"}).rc == 2);
  REQUIRE(run({}).rc == 2);
  REQUIRE(run({"score", "--out", "x"}).rc == 2);  // images are required
  REQUIRE(run({"--help"}).rc == 0);
}

TEST_CASE("missing artifacts exit 3") {
  std::string out = fresh_dir("missing");
  CliResult r = run(tiny_args("finetune", out, 3));
  REQUIRE(r.rc == 3);
  REQUIRE(r.err.find("base.json") != std::string::npos);

  CliResult ev = run(tiny_args("evaluate", out, 3));
  REQUIRE(ev.rc == 3);

  CliResult sc = run(tiny_args("score", out, 3, {"/nope.pgm"}));
  REQUIRE(sc.rc == 3);
}

TEST_CASE("score writes and echoes path,score rows") {
  std::string out = fresh_dir("score");
  REQUIRE(run(tiny_args("train-iqa", out, 11)).rc == 0);
  std::string data = fresh_dir("score_data");
  REQUIRE(run(tiny_args("export-data", data, 11)).rc == 0);

  std::string img0 = data + "/images/iqa_0000.pgm";
  std::string img1 = data + "/images/iqa_0001.pgm";
  CliResult r = run(tiny_args("score", out, 11, {img0, img1}));
  REQUIRE(r.rc == 0);
  REQUIRE(r.out.find("path,score\n") == 0);
  REQUIRE(r.out.find(img0 + ",") != std::string::npos);
  REQUIRE(r.out.find(img1 + ",") != std::string::npos);
  REQUIRE(slurp(out + "/scores.csv") == r.out);

  // Same command again: identical bytes.
  CliResult again = run(tiny_args("score", out, 11, {img0, img1}));
  REQUIRE(again.out == r.out);

  // Wrong-size input is a dependency problem, not a crash.
  std::string big = fresh_dir("score_big");
  REQUIRE(run({"export-data", "--set", "data-synth.iqa_train_images=1", "--out", big,
               "--seed", "1"})
              .rc == 0);
  CliResult wrong = run(tiny_args("score", out, 11, {big + "/images/iqa_0000.pgm"}));
  REQUIRE(wrong.rc == 3);
  REQUIRE(wrong.err.find("8x8") != std::string::npos);
}

TEST_CASE("export-data writes a consistent manifest") {
  std::string out = fresh_dir("export");
  REQUIRE(run(tiny_args("export-data", out, 5)).rc == 0);

  std::string manifest = slurp(out + "/manifest.csv");
  REQUIRE(manifest.find("filename,class,severity,label\n") == 0);
  REQUIRE(count_lines(manifest) == 1 + 64);

  std::istringstream lines(manifest);
  std::string line;
  std::getline(lines, line);  // header
  int checked = 0;
  while (std::getline(lines, line)) {
    size_t c1 = line.find(','), c2 = line.find(',', c1 + 1), c3 = line.find(',', c2 + 1);
    REQUIRE(c3 != std::string::npos);
    std::string file = line.substr(0, c1);
    double severity = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
    double label = std::stod(line.substr(c3 + 1));
    REQUIRE(fs::exists(fs::path(out) / file));
    REQUIRE(label == Catch::Approx(1.0 - severity).margin(1e-12));
    ++checked;
  }
  REQUIRE(checked == 64);

  Tensor img = read_pgm(out + "/images/iqa_0000.pgm");
  REQUIRE(img.shape() == Shape{8, 8});
}

TEST_CASE("ablate merges one row per grid cell") {
  std::string out = fresh_dir("ablate");
  for (const char* sub : {"train-iqa", "train-base"})
    REQUIRE(run(tiny_args(sub, out, 11)).rc == 0);
  CliResult r = run(tiny_args("ablate", out, 11));
  INFO(r.err);
  REQUIRE(r.rc == 0);

  std::string csv = slurp(out + "/ablate.csv");
  REQUIRE(count_lines(csv) == 1 + 9);
  for (const char* id : {"weight_0.1", "weight_1", "weight_10", "window_1", "window_3",
                         "window_5", "window_10", "anchor_on", "anchor_off"}) {
    INFO(id);
    REQUIRE(csv.find(std::string("\n") + id + ",heldout_score,") != std::string::npos);
    REQUIRE(fs::exists(fs::path(out) / "cells" / id / "adapters.json"));
    REQUIRE(fs::exists(fs::path(out) / "cells" / id / "steps.csv"));
    REQUIRE(fs::exists(fs::path(out) / "cells" / id / "config_resolved.json"));
  }

  // Matched baseline: every cell evaluates the same base model with the same
  // judge and noise, so the baseline column is constant across rows.
  std::istringstream lines(csv);
  std::string line, baseline;
  std::getline(lines, line);
  while (std::getline(lines, line)) {
    size_t c1 = line.find(',', line.find(',') + 1);
    std::string b = line.substr(c1 + 1, line.find(',', c1 + 1) - c1 - 1);
    if (baseline.empty()) baseline = b;
    REQUIRE(b == baseline);
  }

  // The window cells actually changed their config.
  auto cell = nlohmann::json::parse(
      slurp(out + "/cells/window_10/config_resolved.json"));
  REQUIRE(cell["acpo"]["t_late_max"].get<int>() == 10);
  REQUIRE(cell["acpo"]["guided_steps"].get<int>() == 5);
  auto off = nlohmann::json::parse(slurp(out + "/cells/anchor_off/config_resolved.json"));
  REQUIRE(off["acpo"]["lambda1"].get<double>() == 0.0);
}
