#pragma once

// The noise-prediction network: a small tanh MLP over the flattened latent
// concatenated with a sinusoidal timestep embedding and (optionally) a
// learned class embedding. Output dimension equals the latent dimension.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "acpo/lora.hpp"
#include "acpo/ops.hpp"
#include "acpo/param_store.hpp"
#include "acpo/rng.hpp"

namespace acpo {

struct PredictorArch {
  int image_size = 16;
  std::vector<int> hidden = {64, 64};
  int t_embed_dim = 16;
  int t_max = 100;  // largest timestep the net serves
  int cond_embed_dim = 0;  // 0 means unconditional
  int num_classes = 0;

  int latent_dim() const { return image_size * image_size; }
  int input_dim() const { return latent_dim() + t_embed_dim + cond_embed_dim; }
  bool conditional() const { return cond_embed_dim > 0; }
  int num_layers() const { return static_cast<int>(hidden.size()) + 1; }

  bool operator==(const PredictorArch&) const = default;
};

// The tanh trunk alone cannot express the sharply t-dependent gain the
// noise-prediction target carries (its sensitivity to x_t scales like
// 1/sqrt(1-alpha_bar_t), huge near t=0), so the output combines the trunk
// with a per-timestep learned skip: eps_hat = skip[t]*x_t + gain[t]*mlp.
// At init skip=0 and gain=1, which is exactly the plain MLP.
class NoisePredictor {
 public:
  NoisePredictor(PredictorArch arch, uint64_t seed) : arch_(std::move(arch)) {
    if (arch_.image_size < 1 || arch_.t_embed_dim < 2 || arch_.t_embed_dim % 2 != 0)
      throw ConfigError("predictor: image_size >= 1 and even t_embed_dim >= 2 required");
    if (arch_.t_max < 1) throw ConfigError("predictor: t_max must be >= 1");
    if (arch_.conditional() && arch_.num_classes < 1)
      throw ConfigError("predictor: conditional arch needs num_classes >= 1");
    Rng rng(mix_seed(seed, 0x70726564));
    int in = arch_.input_dim();
    for (int k = 0; k < arch_.num_layers(); ++k) {
      int out = k < static_cast<int>(arch_.hidden.size()) ? arch_.hidden[k]
                                                          : arch_.latent_dim();
      params_.add(layer_name(k) + ".weight", random_normal({out, in}, rng, 1.0 / std::sqrt(in)));
      params_.add(layer_name(k) + ".bias", Tensor::zeros({out}));
      in = out;
    }
    if (arch_.conditional())
      params_.add("cond.embed",
                  random_normal({arch_.num_classes, arch_.cond_embed_dim}, rng, 1.0));
    params_.add("time.skip", Tensor::zeros({arch_.t_max + 1}));
    params_.add("time.gain",
                Tensor::from({arch_.t_max + 1},
                             std::vector<double>(arch_.t_max + 1, 1.0)));
  }

  const PredictorArch& arch() const { return arch_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  bool has_adapters() const { return adapters_.has_value(); }
  AdapterSet& adapters() {
    if (!adapters_) throw ConfigError("predictor: no adapters attached");
    return *adapters_;
  }
  const AdapterSet& adapters() const {
    return const_cast<NoisePredictor*>(this)->adapters();
  }

  // Full forward pass. `adapted` selects the low-rank delta path and requires
  // attached adapters; the base path reads only the frozen weights.
  Tensor forward(const Tensor& x, int t, std::optional<int> cond, bool adapted) const {
    if (x.numel() != arch_.latent_dim())
      throw ShapeError("predict_noise: latent " + shape_str(x.shape()) +
                       " does not match image_size " + std::to_string(arch_.image_size));
    if (t < 0 || t > arch_.t_max)
      throw ConfigError("predict_noise: timestep " + std::to_string(t) +
                        " outside [0," + std::to_string(arch_.t_max) + "]");
    if (adapted && !adapters_)
      throw ConfigError("predict_noise: adapted mode without attached adapters");

    Tensor x_flat = x.shape().size() == 1 ? x : reshape(x, {x.numel()});
    std::vector<Tensor> parts = {x_flat, t_embedding(t)};
    if (arch_.conditional()) {
      if (!cond)
        throw ShapeError("predict_noise: conditional model needs a condition token");
      parts.push_back(cond_embedding(*cond));
    } else if (cond) {
      throw ShapeError("predict_noise: condition given to an unconditional model");
    }

    Tensor h = concat(parts);
    for (int k = 0; k < arch_.num_layers(); ++k) {
      if (adapted) {
        h = adapted_forward(adapters_->layers[k], h);
      } else {
        h = affine(h, params_.get(layer_name(k) + ".weight"),
                   params_.get(layer_name(k) + ".bias"));
      }
      if (k + 1 < arch_.num_layers()) h = tanh(h);
    }
    Tensor skip = gather(params_.get("time.skip"), {t});
    Tensor gain = gather(params_.get("time.gain"), {t});
    return add(scale_by(x_flat, skip), scale_by(h, gain));
  }

  static std::string layer_name(int k) { return "layer" + std::to_string(k); }

 private:
  static Tensor random_normal(Shape shape, Rng& rng, double stddev) {
    std::vector<double> v(shape_numel(shape));
    for (double& x : v) x = stddev * rng.normal();
    return Tensor::from(std::move(shape), std::move(v));
  }

  Tensor t_embedding(int t) const {
    int E = arch_.t_embed_dim;
    std::vector<double> v(E);
    for (int i = 0; i < E / 2; ++i) {
      double freq = std::exp(-std::log(10000.0) * (2.0 * i) / E);
      v[2 * i] = std::sin(t * freq);
      v[2 * i + 1] = std::cos(t * freq);
    }
    return Tensor::from({E}, std::move(v));
  }

  Tensor cond_embedding(int cond) const {
    if (cond < 0 || cond >= arch_.num_classes)
      throw ShapeError("predict_noise: condition id " + std::to_string(cond) +
                       " outside [0," + std::to_string(arch_.num_classes) + ")");
    std::vector<int> idx(arch_.cond_embed_dim);
    for (int i = 0; i < arch_.cond_embed_dim; ++i)
      idx[i] = cond * arch_.cond_embed_dim + i;
    return gather(params_.get("cond.embed"), std::move(idx));
  }

  PredictorArch arch_;
  ParamStore params_;
  std::optional<AdapterSet> adapters_;

  friend AdapterSet& attach_adapters(NoisePredictor&, int, double, uint64_t);
};

// Adds (A, B) factors to every affine layer and freezes everything that was
// there before, leaving the factors as the only trainable state. A is drawn
// from N(0, 1/in); B starts at zero so the adapted net is initially identical
// to the base net.
inline AdapterSet& attach_adapters(NoisePredictor& net, int rank, double scale,
                                   uint64_t seed) {
  if (rank < 1) throw ConfigError("attach_adapters: rank must be >= 1");
  if (net.adapters_) throw ConfigError("attach_adapters: adapters already attached");

  for (const std::string& name : net.params_.names()) net.params_.freeze(name);

  Rng rng(mix_seed(seed, 0x6c6f7261));
  AdapterSet set;
  set.rank = rank;
  set.scale = scale;
  for (int k = 0; k < net.arch_.num_layers(); ++k) {
    std::string name = NoisePredictor::layer_name(k);
    Tensor& W = net.params_.get(name + ".weight");
    int out = W.shape()[0], in = W.shape()[1];
    if (rank > std::min(out, in))
      throw ConfigError("attach_adapters: rank " + std::to_string(rank) +
                        " exceeds " + name + " dims " + shape_str(W.shape()));
    std::vector<double> av(static_cast<size_t>(rank) * in);
    for (double& x : av) x = rng.normal() / std::sqrt(in);
    LoraLayer layer;
    layer.name = name;
    layer.base_weight = W;
    layer.base_bias = net.params_.get(name + ".bias");
    layer.A = net.params_.add(name + ".lora_A", Tensor::from({rank, in}, std::move(av)));
    layer.B = net.params_.add(name + ".lora_B", Tensor::zeros({out, rank}));
    layer.zero_r = Tensor::zeros({rank});
    layer.zero_out = Tensor::zeros({out});
    layer.rank = rank;
    layer.scale = scale;
    set.layers.push_back(std::move(layer));
  }
  net.adapters_ = std::move(set);
  return *net.adapters_;
}

// The frozen base model's prediction, computed outside any gradient tape.
inline Tensor base_forward(const NoisePredictor& net, const Tensor& x_t, int t,
                           std::optional<int> cond = std::nullopt) {
  NoGradGuard ng;
  return net.forward(x_t, t, cond, /*adapted=*/false);
}

// The trainable prediction: adapted when adapters are attached and in adapted
// mode, otherwise the plain network.
inline Tensor predict_noise(const NoisePredictor& net, const Tensor& x_t, int t,
                            std::optional<int> cond = std::nullopt) {
  bool adapted = net.has_adapters() && net.adapters().mode == AdapterSet::Mode::kAdapted;
  return net.forward(x_t, t, cond, adapted);
}

}  // namespace acpo
