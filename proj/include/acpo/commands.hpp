#pragma once

// The seven pipeline commands behind the CLI, callable in-process so tests
// drive the same code paths as the binary. Commands chain through one output
// directory: train-iqa writes scorer.json, train-base writes base.json,
// finetune reads both and writes adapters.json plus steps.csv, evaluate reads
// all three and writes summary.csv, ablate fans finetune+evaluate out over a
// grid into cells/ and merges one ablate.csv. Every command snapshots its
// resolved config into the directory it writes.
//
// Exit codes at the run_cli boundary: 0 ok, 2 config error, 3 missing or
// unusable artifact, 4 invariant breach, 1 anything else.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "acpo/checkpoint.hpp"
#include "acpo/config.hpp"
#include "acpo/evaluate.hpp"
#include "acpo/finetune.hpp"
#include "acpo/pgm.hpp"

namespace acpo {

namespace detail {

// Independent seed streams per consumer, all derived from the run seed.
inline constexpr uint64_t kStreamIqaData = 0x69716164;    // "iqad"
inline constexpr uint64_t kStreamIqaTrain = 0x69716174;   // "iqat"
inline constexpr uint64_t kStreamDiffData = 0x64666461;   // "dfda"
inline constexpr uint64_t kStreamBaseInit = 0x62696e69;   // "bini"
inline constexpr uint64_t kStreamBaseTrain = 0x62747261;  // "btra"
inline constexpr uint64_t kStreamAdapters = 0x61646170;   // "adap"
inline constexpr uint64_t kStreamHoldData = 0x686f6464;   // "hodd"
inline constexpr uint64_t kStreamHoldTrain = 0x686f6474;  // "hodt"
inline constexpr uint64_t kStreamEval = 0x6576616c;       // "eval"

inline ScorerConfig scorer_config_from_run(const RunConfig& c) {
  ScorerConfig sc;
  sc.variant = c.variant;
  sc.image_size = c.image_size;
  sc.num_classes = kNumShapeClasses;
  sc.stream_hidden = c.stream_hidden;
  sc.stream_feature = c.stream_feature;
  sc.fuse_hidden = c.fuse_hidden;
  sc.patch_grid = c.patch_grid;
  sc.token_dim = c.token_dim;
  sc.embed_dim = c.embed_dim;
  sc.layer_weights = c.layer_weights;
  return sc;
}

inline PredictorArch arch_from_run(const RunConfig& c) {
  PredictorArch arch;
  arch.image_size = c.image_size;
  arch.hidden = c.hidden;
  arch.t_embed_dim = c.t_embed_dim;
  arch.t_max = c.T;
  arch.cond_embed_dim = c.cond_embed_dim;
  arch.num_classes = c.cond_embed_dim > 0 ? kNumShapeClasses : 0;
  if (c.conditional && c.cond_embed_dim <= 0)
    throw ConfigError(
        "config: 'data-synth.conditional' requires 'diffusion.cond_embed_dim' > 0");
  return arch;
}

inline Provenance make_prov(const RunConfig& c, int64_t steps) {
  Provenance p;
  p.config_hash = config_hash(c);
  p.seed = c.seed;
  p.step_count = steps;
  return p;
}

inline std::string join_path(const std::string& dir, const std::string& name) {
  return (std::filesystem::path(dir) / name).string();
}

inline void write_text_file(const std::string& path, const std::string& text) {
  std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary | std::ios::trunc);
  if (!f) throw ConfigError("cannot write '" + path + "'");
  f << text;
  if (!f.good()) throw ConfigError("short write to '" + path + "'");
}

// Adam steps train_evaluator performs: full batches plus the ragged tail.
inline int64_t iqa_step_count(int items, int batch, int epochs) {
  return int64_t{epochs} * ((items + batch - 1) / batch);
}

// Sampled finals come out as flat latent vectors; PGM wants [H, W].
inline Tensor as_image(const Tensor& flat, int size) {
  return Tensor::from({size, size},
                      std::vector<double>(flat.data().begin(), flat.data().end()));
}

}  // namespace detail

inline void cmd_train_iqa(const RunConfig& cfg) {
  write_config_snapshot(cfg, cfg.out_dir);
  IqaDataset ds = build_iqa_dataset(cfg.iqa_train_images, cfg.image_size, cfg.conditional,
                                    mix_seed(cfg.seed, detail::kStreamIqaData));
  Scorer scorer =
      train_evaluator(detail::scorer_config_from_run(cfg), ds, cfg.iqa_epochs, cfg.iqa_lr,
                      mix_seed(cfg.seed, detail::kStreamIqaTrain), cfg.iqa_batch);
  save_scorer(scorer,
              detail::make_prov(cfg, detail::iqa_step_count(cfg.iqa_train_images,
                                                            cfg.iqa_batch, cfg.iqa_epochs)),
              detail::join_path(cfg.out_dir, "scorer.json"));
}

inline void cmd_train_base(const RunConfig& cfg) {
  write_config_snapshot(cfg, cfg.out_dir);
  DiffusionData data =
      build_diffusion_dataset(cfg.diffusion_images, cfg.image_size, cfg.conditional,
                              mix_seed(cfg.seed, detail::kStreamDiffData));
  NoisePredictor net(detail::arch_from_run(cfg), mix_seed(cfg.seed, detail::kStreamBaseInit));
  NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  train_base(net, sched, data, cfg.base_steps, cfg.base_batch, cfg.base_lr,
             mix_seed(cfg.seed, detail::kStreamBaseTrain));
  save_base_model(net, detail::make_prov(cfg, cfg.base_steps),
                  detail::join_path(cfg.out_dir, "base.json"));
}

// Loads base.json and scorer.json from `artifact_dir`, fine-tunes fresh
// adapters, and writes adapters.json plus steps.csv into cfg.out_dir. Shared
// by the finetune command (artifact_dir == out_dir) and each ablate cell
// (artifacts in the parent directory, results in the cell's own).
inline std::vector<StepReport> run_finetune(const RunConfig& cfg,
                                            const std::string& artifact_dir) {
  write_config_snapshot(cfg, cfg.out_dir);
  NoisePredictor net = load_base_model(detail::join_path(artifact_dir, "base.json"));
  Scorer scorer = load_scorer(detail::join_path(artifact_dir, "scorer.json"));
  attach_adapters(net, cfg.rank, cfg.adapter_scale,
                  mix_seed(cfg.seed, detail::kStreamAdapters));
  DiffusionData data =
      build_diffusion_dataset(cfg.diffusion_images, cfg.image_size, cfg.conditional,
                              mix_seed(cfg.seed, detail::kStreamDiffData));
  NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  std::vector<StepReport> reports = finetune_run(net, scorer, sched, data, cfg.acpo);

  std::string csv = step_report_csv_header() + "\n";
  for (const StepReport& r : reports) csv += step_report_csv_row(r) + "\n";
  detail::write_text_file(detail::join_path(cfg.out_dir, "steps.csv"), csv);
  save_adapters(net, detail::make_prov(cfg, cfg.acpo.steps),
                detail::join_path(cfg.out_dir, "adapters.json"));
  return reports;
}

inline void cmd_finetune(const RunConfig& cfg) { run_finetune(cfg, cfg.out_dir); }

// Trains the held-out judge (same architecture, disjoint seed and data from
// the guiding scorer) and runs the matched-noise paired comparison.
inline EvaluationResult evaluate_with_heldout(const RunConfig& cfg, NoisePredictor& net) {
  IqaDataset hold = build_iqa_dataset(cfg.heldout_images, cfg.image_size, cfg.conditional,
                                      mix_seed(cfg.seed, detail::kStreamHoldData));
  Scorer judge =
      train_evaluator(detail::scorer_config_from_run(cfg), hold, cfg.heldout_epochs,
                      cfg.heldout_lr, mix_seed(cfg.seed, detail::kStreamHoldTrain),
                      cfg.iqa_batch);
  NoiseSchedule sched = make_schedule(cfg.T, cfg.beta_start, cfg.beta_end);
  return evaluate_pairwise(net, score_fn(judge), sched, cfg.eval_pairs,
                           mix_seed(cfg.seed, detail::kStreamEval));
}

inline void cmd_evaluate(const RunConfig& cfg) {
  write_config_snapshot(cfg, cfg.out_dir);
  NoisePredictor net = load_base_model(detail::join_path(cfg.out_dir, "base.json"));
  load_adapters(detail::join_path(cfg.out_dir, "adapters.json"), net);
  EvaluationResult res = evaluate_with_heldout(cfg, net);

  std::string run_id = "seed" + std::to_string(cfg.seed);
  std::string csv = summary_csv_header() + "\n" +
                    summary_csv_row(run_id, "heldout_score", res.summary) + "\n";
  detail::write_text_file(detail::join_path(cfg.out_dir, "summary.csv"), csv);

  if (cfg.export_pgm) {
    int count =
        std::min<int>(cfg.pgm_count, static_cast<int>(res.baseline_images.size()));
    for (int i = 0; i < count; ++i) {
      char name[64];
      std::snprintf(name, sizeof name, "samples/pair%03d_baseline.pgm", i);
      std::string base_path = detail::join_path(cfg.out_dir, name);
      std::filesystem::create_directories(std::filesystem::path(base_path).parent_path());
      write_pgm(detail::as_image(res.baseline_images[static_cast<size_t>(i)],
                                 cfg.image_size),
                base_path);
      std::snprintf(name, sizeof name, "samples/pair%03d_finetuned.pgm", i);
      write_pgm(detail::as_image(res.finetuned_images[static_cast<size_t>(i)],
                                 cfg.image_size),
                detail::join_path(cfg.out_dir, name));
    }
  }
}

inline void cmd_ablate(const RunConfig& cfg) {
  write_config_snapshot(cfg, cfg.out_dir);
  std::vector<std::pair<std::string, RunConfig>> cells;

  for (double w : {0.1, 1.0, 10.0}) {
    RunConfig cell = cfg;
    cell.acpo.lambda2 = w;
    char id[32];
    std::snprintf(id, sizeof id, "weight_%g", w);
    cells.emplace_back(id, cell);
  }
  // Four intervention windows from a tenth of the schedule up to all of it;
  // the rollout gradient tail scales with the window it trains.
  for (int num : {1, 3, 5, 10}) {
    RunConfig cell = cfg;
    cell.acpo.t_late_max = std::max(1, cfg.T * num / 10);
    cell.acpo.guided_steps = std::max(1, cell.acpo.t_late_max / 2);
    cells.emplace_back("window_" + std::to_string(cell.acpo.t_late_max), cell);
  }
  {
    RunConfig on = cfg;
    cells.emplace_back("anchor_on", on);
    RunConfig off = cfg;
    off.acpo.lambda1 = 0.0;
    cells.emplace_back("anchor_off", off);
  }

  std::string csv = summary_csv_header() + "\n";
  for (auto& [id, cell] : cells) {
    cell.out_dir = detail::join_path(cfg.out_dir, "cells/" + id);
    run_finetune(cell, cfg.out_dir);
    NoisePredictor net = load_base_model(detail::join_path(cfg.out_dir, "base.json"));
    load_adapters(detail::join_path(cell.out_dir, "adapters.json"), net);
    EvaluationResult res = evaluate_with_heldout(cell, net);
    csv += summary_csv_row(id, "heldout_score", res.summary) + "\n";
  }
  detail::write_text_file(detail::join_path(cfg.out_dir, "ablate.csv"), csv);
}

inline void cmd_score(const RunConfig& cfg, const std::vector<std::string>& images,
                      std::ostream& out = std::cout) {
  Scorer scorer = load_scorer(detail::join_path(cfg.out_dir, "scorer.json"));
  if (scorer.config().variant == ScorerVariant::kConditional)
    throw ConfigError(
        "score: the stored scorer is conditional and needs a class token; "
        "only two-stream scorers can rate bare images");
  NoGradGuard ng;
  std::string csv = "path,score\n";
  for (const std::string& path : images) {
    Tensor img = read_pgm(path);
    double s;
    try {
      s = score_image(scorer, img, std::nullopt).item();
    } catch (const ShapeError& e) {
      throw DependencyError("score: '" + path + "': " + e.what());
    }
    csv += path + "," + detail::csv_number(s) + "\n";
  }
  detail::write_text_file(detail::join_path(cfg.out_dir, "scores.csv"), csv);
  out << csv;
}

inline void cmd_export_data(const RunConfig& cfg) {
  write_config_snapshot(cfg, cfg.out_dir);
  IqaDataset ds = build_iqa_dataset(cfg.iqa_train_images, cfg.image_size, cfg.conditional,
                                    mix_seed(cfg.seed, detail::kStreamIqaData));
  std::filesystem::create_directories(detail::join_path(cfg.out_dir, "images"));
  std::string manifest = "filename,class,severity,label\n";
  for (size_t i = 0; i < ds.items.size(); ++i) {
    char name[48];
    std::snprintf(name, sizeof name, "images/iqa_%04zu.pgm", i);
    write_pgm(ds.items[i].image, detail::join_path(cfg.out_dir, name));
    manifest += std::string(name) + "," +
                shape_name(static_cast<ShapeClass>(ds.items[i].cls)) + "," +
                detail::csv_number(ds.items[i].degradation.severity) + "," +
                detail::csv_number(ds.items[i].label) + "\n";
  }
  detail::write_text_file(detail::join_path(cfg.out_dir, "manifest.csv"), manifest);
}

}  // namespace acpo
