#pragma once

// Paired evaluation of an adapted model against its own frozen base: the
// same per-sample chain noise is replayed through both modes, a held-out
// scorer grades the two finals, and the pairs feed the paired statistics.

#include <cstdio>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "acpo/diffusion.hpp"
#include "acpo/iqa.hpp"
#include "acpo/predictor.hpp"
#include "acpo/stats.hpp"

namespace acpo {

// Plain-double scoring hook; keeps evaluation independent of which scorer
// variant (or test stub) produces the number.
using ScoreFn = std::function<double(const Tensor& image, std::optional<int> cond)>;

inline ScoreFn score_fn(const Scorer& s) {
  bool wants_condition = s.config().variant == ScorerVariant::kConditional;
  return [&s, wants_condition](const Tensor& img, std::optional<int> cond) {
    NoGradGuard ng;
    return score_image(s, img, wants_condition ? cond : std::optional<int>()).item();
  };
}

struct PairedSummary {
  double baseline_mean = 0.0;
  double finetuned_mean = 0.0;
  double improvement = 0.0;
  double std_diff = 0.0;
  double t_statistic = 0.0;  // NaN when degenerate
  double win = 0.0;
  bool degenerate_t = false;
};

inline PairedSummary summarize_pairs(const PairedSample& pairs) {
  PairedTResult t = paired_t_statistic(pairs);
  PairedSummary s;
  for (double x : pairs.baseline) s.baseline_mean += x;
  s.baseline_mean /= pairs.baseline.size();
  for (double x : pairs.finetuned) s.finetuned_mean += x;
  s.finetuned_mean /= pairs.finetuned.size();
  s.improvement = t.mean_diff;
  s.std_diff = t.std_diff;
  s.t_statistic = t.t;
  s.degenerate_t = t.degenerate;
  s.win = win_rate(pairs);
  return s;
}

struct EvaluationResult {
  PairedSample pairs;
  PairedSummary summary;
  // Clipped finals, kept for feature-distribution comparisons.
  std::vector<Tensor> baseline_images;
  std::vector<Tensor> finetuned_images;
  std::vector<std::optional<int>> conditions;
};

// Replays identical chain noise through base and adapted modes. Sample i
// draws its noise from stream mix_seed(seed, i); conditional models cycle
// through the classes round-robin.
inline EvaluationResult evaluate_pairwise(NoisePredictor& net, const ScoreFn& heldout,
                                          const NoiseSchedule& sched, int n,
                                          uint64_t seed) {
  if (n < 2) throw ConfigError("evaluate_pairwise: needs n >= 2 pairs");
  if (!net.has_adapters())
    throw ConfigError("evaluate_pairwise: model has no adapters to compare");
  NoGradGuard ng;
  AdapterSet::Mode entry_mode = net.adapters().mode;
  int dim = net.arch().latent_dim();

  EvaluationResult out;
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    ChainNoise noise = draw_chain_noise(rng, sched, dim);
    std::optional<int> cond;
    if (net.arch().conditional()) cond = i % net.arch().num_classes;

    net.adapters().set_mode(AdapterSet::Mode::kBase);
    Tensor base_img = clamp01(sample_chain(predict_fn(net), sched, noise, 0, cond));
    net.adapters().set_mode(AdapterSet::Mode::kAdapted);
    Tensor fine_img = clamp01(sample_chain(predict_fn(net), sched, noise, 0, cond));

    out.pairs.baseline.push_back(heldout(base_img, cond));
    out.pairs.finetuned.push_back(heldout(fine_img, cond));
    out.baseline_images.push_back(std::move(base_img));
    out.finetuned_images.push_back(std::move(fine_img));
    out.conditions.push_back(cond);
  }
  net.adapters().set_mode(entry_mode);
  out.summary = summarize_pairs(out.pairs);
  return out;
}

// Gaussian moments of the scorer's feature embedding over a set of images.
inline GaussianMoments feature_moments(const Scorer& s,
                                       const std::vector<Tensor>& images) {
  NoGradGuard ng;
  std::vector<std::vector<double>> rows;
  rows.reserve(images.size());
  for (const Tensor& img : images) {
    Tensor f = scorer_features(s, img);
    rows.emplace_back(f.data().begin(), f.data().end());
  }
  return gaussian_moments(rows);
}

namespace detail {

inline std::string csv_number(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string summary_csv_header() {
  return "run_id,metric,baseline_mean,finetuned_mean,improvement,std,t_statistic,"
         "win_rate";
}

inline std::string summary_csv_row(const std::string& run_id, const std::string& metric,
                                   const PairedSummary& s) {
  return run_id + "," + metric + "," + detail::csv_number(s.baseline_mean) + "," +
         detail::csv_number(s.finetuned_mean) + "," +
         detail::csv_number(s.improvement) + "," + detail::csv_number(s.std_diff) +
         "," + detail::csv_number(s.t_statistic) + "," + detail::csv_number(s.win);
}

}  // namespace acpo
