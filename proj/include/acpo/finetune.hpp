#pragma once

// Stage-2 fine-tuning: the quality and anchor losses, their weighted total,
// and the per-step evaluation-update loop that trains adapter parameters
// against a frozen scorer while staying tethered to the frozen base model.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "acpo/diffusion.hpp"
#include "acpo/iqa.hpp"
#include "acpo/predictor.hpp"

namespace acpo {

struct ACPOConfig {
  double lambda1 = 1.0;  // anchor weight
  double lambda2 = 1.0;  // quality weight
  int t_late_max = 10;   // guidance window: timesteps t < t_late_max
  int guided_steps = 5;  // reverse steps that carry gradients
  int mse_batch = 8;
  int guided_batch = 4;
  int anchor_batch = 8;
  int steps = 1000;
  double lr = 1e-3;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  uint64_t seed = 0;
  // Probe rollouts use their own fixed latents so the reported guided-score
  // trajectory is comparable across steps and across runs.
  int probe_batch = 8;
  uint64_t probe_seed = 0xACB0;
};

inline void validate_acpo_config(const ACPOConfig& cfg, int T) {
  if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0)
    throw ConfigError("acpo: loss weights must be non-negative");
  if (cfg.t_late_max < 1 || cfg.t_late_max > T)
    throw ConfigError("acpo: t_late_max must be in [1," + std::to_string(T) + "]");
  if (cfg.guided_steps < 1 || cfg.guided_steps > cfg.t_late_max)
    throw ConfigError("acpo: guided_steps must be in [1,t_late_max]");
  if (cfg.mse_batch < 1 || cfg.guided_batch < 1 || cfg.anchor_batch < 1 ||
      cfg.probe_batch < 1)
    throw ConfigError("acpo: batch sizes must be >= 1");
  if (cfg.steps < 1) throw ConfigError("acpo: steps must be >= 1");
  if (cfg.lr <= 0.0) throw ConfigError("acpo: lr must be positive");
}

struct StepReport {
  int step = 0;
  double l_mse = 0.0;
  double l_anchor = 0.0;
  double l_quality = 0.0;
  double l_total = 0.0;
  double guided_score = 0.0;  // mean probe score after this step's update
  double anchor_drift = 0.0;  // RMS prediction gap, sqrt(l_anchor)
};

inline std::string step_report_csv_header() {
  return "step,l_mse,l_anchor,l_quality,l_total,guided_score,anchor_drift";
}

inline std::string step_report_csv_row(const StepReport& r) {
  char buf[200];
  std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.step,
                r.l_mse, r.l_anchor, r.l_quality, r.l_total, r.guided_score,
                r.anchor_drift);
  return buf;
}

// Graph-building scoring hook so tests can stub the scorer out.
using GraphScoreFn = std::function<Tensor(const Tensor& image, std::optional<int>)>;

// Mean over the batch of (1 - score). Gradients flow into the images.
inline Tensor quality_loss(const GraphScoreFn& score, const std::vector<Tensor>& images,
                           const std::vector<std::optional<int>>& conditions = {}) {
  if (images.empty()) throw ConfigError("quality_loss: empty image batch");
  if (!conditions.empty() && conditions.size() != images.size())
    throw ShapeError("quality_loss: condition list does not match batch size");
  std::vector<Tensor> scores;
  scores.reserve(images.size());
  for (size_t i = 0; i < images.size(); ++i)
    scores.push_back(score(images[i], conditions.empty() ? std::nullopt : conditions[i]));
  return add_scalar(scale(mean(concat(scores)), -1.0), 1.0);
}

inline Tensor quality_loss(const Scorer& s, const std::vector<Tensor>& images,
                           const std::vector<std::optional<int>>& conditions = {}) {
  if (!s.frozen()) throw ConfigError("quality_loss: scorer must be frozen");
  return quality_loss(
      [&s](const Tensor& img, std::optional<int> c) { return score_image(s, img, c); },
      images, conditions);
}

// Mean squared gap between two noise predictions over a latent batch. The
// anchor is only defined inside the late window, hence the t check.
inline Tensor anchor_loss(const PredictFn& adapted, const PredictFn& anchor,
                          const std::vector<Tensor>& latents,
                          const std::vector<int>& ts,
                          const std::vector<std::optional<int>>& conditions,
                          int t_late_max) {
  if (latents.empty()) throw ConfigError("anchor_loss: empty latent batch");
  if (ts.size() != latents.size() ||
      (!conditions.empty() && conditions.size() != latents.size()))
    throw ShapeError("anchor_loss: batch lists have mismatched lengths");
  std::vector<Tensor> gaps;
  gaps.reserve(latents.size());
  for (size_t i = 0; i < latents.size(); ++i) {
    if (ts[i] < 0 || ts[i] >= t_late_max)
      throw ConfigError("anchor_loss: t=" + std::to_string(ts[i]) +
                        " outside the late window [0," + std::to_string(t_late_max) +
                        ")");
    std::optional<int> cond = conditions.empty() ? std::nullopt : conditions[i];
    gaps.push_back(
        mean(square(sub(adapted(latents[i], ts[i], cond), anchor(latents[i], ts[i], cond)))));
  }
  return mean(concat(gaps));
}

inline Tensor anchor_loss(const NoisePredictor& net, const std::vector<Tensor>& latents,
                          const std::vector<int>& ts,
                          const std::vector<std::optional<int>>& conditions,
                          int t_late_max) {
  if (!net.has_adapters())
    throw ConfigError("anchor_loss: model has no adapters to compare against");
  PredictFn adapted = [&net](const Tensor& x, int t, std::optional<int> c) {
    return net.forward(x, t, c, /*adapted=*/true);
  };
  PredictFn frozen = [&net](const Tensor& x, int t, std::optional<int> c) {
    return base_forward(net, x, t, c);  // detached by construction
  };
  return anchor_loss(adapted, frozen, latents, ts, conditions, t_late_max);
}

// L_total = L_mse + lambda1 * L_anchor + lambda2 * L_quality, with the
// component values recorded in the report.
inline Tensor total_loss(const ACPOConfig& cfg, const Tensor& l_mse,
                         const Tensor& l_anchor, const Tensor& l_quality,
                         StepReport& report) {
  if (cfg.lambda1 < 0.0 || cfg.lambda2 < 0.0)
    throw ConfigError("total_loss: loss weights must be non-negative");
  Tensor total =
      add(l_mse, add(scale(l_anchor, cfg.lambda1), scale(l_quality, cfg.lambda2)));
  report.l_mse = l_mse.item();
  report.l_anchor = l_anchor.item();
  report.l_quality = l_quality.item();
  report.l_total = total.item();
  report.anchor_drift = std::sqrt(report.l_anchor);
  return total;
}

// Uniform minibatch of (clean image, timestep in [0,t_range), fresh noise).
// Also serves the base-model pretraining loop with t_range = T.
inline DiffusionBatch sample_training_batch(const DiffusionData& data, int t_range,
                                            int batch, Rng& rng) {
  if (batch < 1) throw ConfigError("sample_training_batch: batch must be >= 1");
  if (t_range < 1) throw ConfigError("sample_training_batch: empty timestep range");
  if (data.images.empty()) throw ConfigError("sample_training_batch: no images");
  int H = data.image_size, dim = H * H;
  std::vector<double> x0(static_cast<size_t>(batch) * dim);
  std::vector<double> eps(static_cast<size_t>(batch) * dim);
  DiffusionBatch out;
  for (int b = 0; b < batch; ++b) {
    int idx = rng.uniform_int(static_cast<int>(data.images.size()));
    const Tensor& img = data.images[idx];
    std::copy(img.data().begin(), img.data().end(), x0.begin() + b * dim);
    out.t.push_back(rng.uniform_int(t_range));
    for (int i = 0; i < dim; ++i) eps[static_cast<size_t>(b) * dim + i] = rng.normal();
    if (data.conditional) out.condition.push_back(data.classes[idx]);
  }
  out.x0 = Tensor::from({batch, H, H}, std::move(x0));
  out.epsilon = Tensor::from({batch, H, H}, std::move(eps));
  return out;
}

// Stage-0 pretraining: plain denoising MSE with Adam over every unfrozen
// parameter. Runs before adapters are attached; the fine-tuning stage then
// anchors against the weights this produces.
inline std::vector<double> train_base(NoisePredictor& net, const NoiseSchedule& sched,
                                      const DiffusionData& data, int steps, int batch,
                                      double lr, uint64_t seed) {
  if (net.has_adapters())
    throw ConfigError("train_base: base training must precede adapter attachment");
  if (steps < 1) throw ConfigError("train_base: steps must be >= 1");
  if (lr <= 0.0) throw ConfigError("train_base: lr must be positive");
  if (data.image_size != net.arch().image_size)
    throw ConfigError("train_base: data and model image sizes differ");
  if (net.arch().conditional() != data.conditional)
    throw ConfigError("train_base: model and data disagree about conditioning");
  std::vector<double> losses;
  losses.reserve(steps);
  for (int step = 0; step < steps; ++step) {
    Rng rng(mix_seed(mix_seed(seed, static_cast<uint64_t>(step)), 3));
    DiffusionBatch b = sample_training_batch(data, sched.T, batch, rng);
    Tensor loss = denoising_mse(net, b, sched);
    net.params().zero_grads();
    backward(loss);
    adam_step(net.params(), lr, 0.9, 0.999, 1e-8, step + 1);
    losses.push_back(loss.item());
  }
  return losses;
}

// Full no-grad rollouts at the fixed probe latents, scored and averaged.
inline double probe_guided_score(const NoisePredictor& net, const Scorer& scorer,
                                 const NoiseSchedule& sched, const ACPOConfig& cfg) {
  NoGradGuard ng;
  bool cond_scorer = scorer.config().variant == ScorerVariant::kConditional;
  double sum = 0.0;
  for (int b = 0; b < cfg.probe_batch; ++b) {
    Rng r(mix_seed(cfg.probe_seed, static_cast<uint64_t>(b)));
    std::optional<int> cond;
    if (net.arch().conditional()) cond = r.uniform_int(net.arch().num_classes);
    ChainNoise cn = draw_chain_noise(r, sched, net.arch().latent_dim());
    Tensor x = clamp01(sample_chain(predict_fn(net), sched, cn, 0, cond));
    sum += score_image(scorer, x, cond_scorer ? cond : std::optional<int>()).item();
  }
  return sum / cfg.probe_batch;
}

// One fine-tuning run. Per step: (a) denoising MSE over the full timestep
// range, (b) guided rollouts with gradients through the last guided_steps
// reverse steps, clipped and scored, (c) anchor gap at fresh late-window
// latents, (d) one Adam update of the adapter parameters. Every component is
// drawn from its own seed stream, so runs with different loss weights see
// identical batches and latents at matched seeds.
inline std::vector<StepReport> finetune_run(
    NoisePredictor& net, const Scorer& scorer, const NoiseSchedule& sched,
    const DiffusionData& data, const ACPOConfig& cfg,
    const std::function<void(const StepReport&)>& on_step = {}) {
  if (!net.has_adapters()) throw ConfigError("finetune_run: attach adapters first");
  if (!scorer.frozen()) throw ConfigError("finetune_run: scorer must be frozen");
  validate_acpo_config(cfg, sched.T);
  if (data.images.empty()) throw ConfigError("finetune_run: empty training data");
  if (data.image_size != net.arch().image_size)
    throw ConfigError("finetune_run: data and generator image sizes differ");
  if (scorer.config().image_size != net.arch().image_size)
    throw ConfigError("finetune_run: scorer and generator image sizes differ");
  if (net.arch().conditional() != data.conditional)
    throw ConfigError("finetune_run: generator and data disagree about conditioning");
  bool cond_scorer = scorer.config().variant == ScorerVariant::kConditional;
  if (cond_scorer && !net.arch().conditional())
    throw ConfigError("finetune_run: conditional scorer needs a conditional generator");

  uint64_t base_checksum = net.params().checksum_frozen();
  uint64_t scorer_checksum = scorer.params().checksum_frozen();
  net.adapters().set_mode(AdapterSet::Mode::kAdapted);
  int dim = net.arch().latent_dim();
  // grad_tail is capped at T-1 (the whole chain) when t_late_max == T.
  int grad_tail = std::min(cfg.guided_steps, sched.T - 1);

  std::vector<StepReport> reports;
  reports.reserve(cfg.steps);
  for (int step = 0; step < cfg.steps; ++step) {
    uint64_t step_seed = mix_seed(cfg.seed, static_cast<uint64_t>(step));

    Rng mse_rng(mix_seed(step_seed, 1));
    DiffusionBatch mse_batch =
        sample_training_batch(data, sched.T, cfg.mse_batch, mse_rng);
    Tensor l_mse = denoising_mse(net, mse_batch, sched);

    std::vector<Tensor> finals;
    std::vector<std::optional<int>> scorer_conds;
    for (int b = 0; b < cfg.guided_batch; ++b) {
      Rng r(mix_seed(step_seed, 0x100 + static_cast<uint64_t>(b)));
      std::optional<int> cond;
      if (net.arch().conditional()) cond = r.uniform_int(net.arch().num_classes);
      ChainNoise cn = draw_chain_noise(r, sched, dim);
      finals.push_back(clamp01(sample_chain(predict_fn(net), sched, cn, grad_tail, cond)));
      scorer_conds.push_back(cond_scorer ? cond : std::optional<int>());
    }
    Tensor l_quality = quality_loss(scorer, finals, scorer_conds);

    Rng anchor_rng(mix_seed(step_seed, 2));
    DiffusionBatch ab =
        sample_training_batch(data, cfg.t_late_max, cfg.anchor_batch, anchor_rng);
    std::vector<Tensor> latents;
    std::vector<std::optional<int>> anchor_conds;
    for (int b = 0; b < cfg.anchor_batch; ++b) {
      latents.push_back(
          q_sample(slice_sample(ab.x0, b), ab.t[b], slice_sample(ab.epsilon, b), sched));
      anchor_conds.push_back(ab.condition.empty() ? std::optional<int>()
                                                  : ab.condition[b]);
    }
    Tensor l_anchor = anchor_loss(net, latents, ab.t, anchor_conds, cfg.t_late_max);

    StepReport rep;
    rep.step = step;
    Tensor total = total_loss(cfg, l_mse, l_anchor, l_quality, rep);
    net.params().zero_grads();
    backward(total);
    adam_step(net.params(), cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
              step + 1);

    if (net.params().checksum_frozen() != base_checksum)
      throw InvariantBreach("finetune_run: a frozen base parameter changed");
    if (scorer.params().checksum_frozen() != scorer_checksum)
      throw InvariantBreach("finetune_run: a frozen scorer parameter changed");

    rep.guided_score = probe_guided_score(net, scorer, sched, cfg);
    reports.push_back(rep);
    if (on_step) on_step(rep);
  }
  return reports;
}

}  // namespace acpo
