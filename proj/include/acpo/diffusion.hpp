#pragma once

// Forward and reverse diffusion: closed-form noising, the ancestral reverse
// step, full sampling chains with an optional differentiable tail, and the
// denoising MSE objective.
//
// Everything here is written against PredictFn rather than a concrete
// network so tests can substitute closed-form or stub predictors.

#include <functional>
#include <numeric>
#include <optional>
#include <vector>

#include "acpo/ops.hpp"
#include "acpo/predictor.hpp"
#include "acpo/rng.hpp"
#include "acpo/schedule.hpp"

namespace acpo {

using PredictFn =
    std::function<Tensor(const Tensor& x_t, int t, std::optional<int> cond)>;

// Binds a network by reference; the caller keeps it alive.
inline PredictFn predict_fn(const NoisePredictor& net) {
  return [&net](const Tensor& x, int t, std::optional<int> c) {
    return predict_noise(net, x, t, c);
  };
}

struct DiffusionBatch {
  Tensor x0;                   // [B, H, W] clean images
  std::vector<int> t;          // one timestep per sample
  Tensor epsilon;              // [B, H, W] standard normal draws
  std::vector<int> condition;  // empty for unconditional data
};

// Flattened view of sample b of a [B, ...] batch tensor.
inline Tensor slice_sample(const Tensor& batch, int b) {
  int B = batch.shape()[0];
  if (b < 0 || b >= B)
    throw ShapeError("slice_sample: index " + std::to_string(b) + " out of batch " +
                     std::to_string(B));
  int rest = batch.numel() / B;
  std::vector<int> idx(rest);
  std::iota(idx.begin(), idx.end(), b * rest);
  return gather(batch, std::move(idx));
}

// x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * epsilon
inline Tensor q_sample(const Tensor& x0, int t, const Tensor& epsilon,
                       const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T)
    throw ConfigError("q_sample: t=" + std::to_string(t) + " outside [0," +
                      std::to_string(sched.T) + ")");
  detail::require_same_shape("q_sample", x0, epsilon);
  double ab = sched.alpha_bar[t];
  return add(scale(x0, std::sqrt(ab)), scale(epsilon, std::sqrt(1.0 - ab)));
}

// One ancestral reverse step from x_t to x_{t-1}:
//   mu = (x_t - beta_t/sqrt(1-alpha_bar_t) * eps_hat) / sqrt(alpha_t)
//   x_{t-1} = mu + sqrt(beta_t) * noise        (noise only for t > 1)
inline Tensor p_sample_step(const PredictFn& predict, const Tensor& x_t, int t,
                            const NoiseSchedule& sched,
                            const std::optional<Tensor>& noise,
                            std::optional<int> cond = std::nullopt) {
  if (t < 1 || t >= sched.T)
    throw ConfigError("p_sample_step: t=" + std::to_string(t) + " outside [1," +
                      std::to_string(sched.T) + ")");
  if (t > 1 && !noise)
    throw ConfigError("p_sample_step: noise required for t > 1");
  if (t == 1 && noise)
    throw ConfigError("p_sample_step: the final step is deterministic, no noise");
  if (noise) detail::require_same_shape("p_sample_step", x_t, *noise);

  Tensor eps_hat = predict(x_t, t, cond);
  detail::require_same_shape("p_sample_step", x_t, eps_hat);

  double ab = sched.alpha_bar[t];
  double beta = sched.beta[t];
  Tensor mu = scale(sub(x_t, scale(eps_hat, beta / std::sqrt(1.0 - ab))),
                    1.0 / std::sqrt(sched.alpha[t]));
  if (t == 1) return mu;
  return add(mu, scale(*noise, std::sqrt(beta)));
}

// All randomness a reverse chain consumes, drawn up front so base and adapted
// chains can share it exactly.
struct ChainNoise {
  Tensor z;                      // x_{T-1} start point
  std::vector<Tensor> by_t;      // by_t[t] is the step noise, valid for t in [2, T-1]
};

inline ChainNoise draw_chain_noise(Rng& rng, const NoiseSchedule& sched, int dim) {
  auto normal_tensor = [&rng, dim]() {
    std::vector<double> v(dim);
    for (double& x : v) x = rng.normal();
    return Tensor::from({dim}, std::move(v));
  };
  ChainNoise cn;
  cn.z = normal_tensor();
  cn.by_t.resize(sched.T);
  for (int t = 2; t <= sched.T - 1; ++t) cn.by_t[t] = normal_tensor();
  return cn;
}

// Runs the reverse chain from x_{T-1} = z down to x_0. Steps with t greater
// than grad_tail are evaluated without gradient tracking; the final grad_tail
// steps stay on the tape, which is how guided fine-tuning differentiates a
// short late-stage suffix of the chain. Returns the unclipped x_0.
inline Tensor sample_chain(const PredictFn& predict, const NoiseSchedule& sched,
                           const ChainNoise& noise, int grad_tail,
                           std::optional<int> cond = std::nullopt) {
  if (grad_tail < 0 || grad_tail > sched.T - 1)
    throw ConfigError("sample_chain: grad_tail outside [0, T-1]");
  Tensor x = noise.z;
  for (int t = sched.T - 1; t >= 1; --t) {
    std::optional<Tensor> n =
        t > 1 ? std::optional<Tensor>(noise.by_t[t]) : std::nullopt;
    if (t > grad_tail) {
      NoGradGuard ng;
      x = p_sample_step(predict, x, t, sched, n, cond);
    } else {
      x = p_sample_step(predict, x, t, sched, n, cond);
    }
  }
  return x;
}

struct SampleBatch {
  Tensor images;            // [B, dim], clipped to [0,1]
  std::vector<Tensor> raw;  // unclipped finals, kept only when requested
};

// Seeded batch generation; sample b draws its noise from stream (seed, b).
// Outputs are clipped to [0,1], the scoring-boundary convention.
inline SampleBatch sample_loop(const PredictFn& predict, const NoiseSchedule& sched,
                               int batch, uint64_t seed, int dim,
                               std::optional<int> cond = std::nullopt,
                               bool record_final = false) {
  if (batch < 1) throw ConfigError("sample_loop: batch must be >= 1");
  NoGradGuard ng;
  SampleBatch out;
  std::vector<double> values;
  values.reserve(static_cast<size_t>(batch) * dim);
  for (int b = 0; b < batch; ++b) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(b)));
    ChainNoise cn = draw_chain_noise(rng, sched, dim);
    Tensor x0 = sample_chain(predict, sched, cn, 0, cond);
    if (record_final) out.raw.push_back(x0);
    Tensor img = clamp01(x0);
    values.insert(values.end(), img.data().begin(), img.data().end());
  }
  out.images = Tensor::from({batch, dim}, std::move(values));
  return out;
}

inline SampleBatch sample_loop(const NoisePredictor& net, const NoiseSchedule& sched,
                               int batch, uint64_t seed,
                               std::optional<int> cond = std::nullopt,
                               bool record_final = false) {
  return sample_loop(predict_fn(net), sched, batch, seed, net.arch().latent_dim(),
                     cond, record_final);
}

// Mean over the batch of per-sample mean squared error between the true and
// predicted noise, with x_t built by q_sample.
inline Tensor denoising_mse(const PredictFn& predict, const DiffusionBatch& batch,
                            const NoiseSchedule& sched) {
  int B = batch.x0.shape().empty() ? 0 : batch.x0.shape()[0];
  if (B < 1) throw ShapeError("denoising_mse: empty batch");
  detail::require_same_shape("denoising_mse", batch.x0, batch.epsilon);
  if (static_cast<int>(batch.t.size()) != B)
    throw ShapeError("denoising_mse: timestep list does not match batch size");
  if (!batch.condition.empty() && static_cast<int>(batch.condition.size()) != B)
    throw ShapeError("denoising_mse: condition list does not match batch size");

  std::vector<Tensor> losses;
  losses.reserve(B);
  for (int b = 0; b < B; ++b) {
    Tensor x0 = slice_sample(batch.x0, b);
    Tensor eps = slice_sample(batch.epsilon, b);
    Tensor x_t = q_sample(x0, batch.t[b], eps, sched);
    std::optional<int> cond;
    if (!batch.condition.empty()) cond = batch.condition[b];
    Tensor eps_hat = predict(x_t, batch.t[b], cond);
    losses.push_back(mean(square(sub(eps, eps_hat))));
  }
  return mean(concat(losses));
}

inline Tensor denoising_mse(const NoisePredictor& net, const DiffusionBatch& batch,
                            const NoiseSchedule& sched) {
  return denoising_mse(predict_fn(net), batch, sched);
}

}  // namespace acpo
