#pragma once

// Differentiable no-reference quality scorers and their supervised training.
//
// Two variants share the Scorer container:
//  - two-stream: parallel encoders over the raw image and its Sobel gradient
//    magnitude map, fused through a small head into sigmoid(score).
//  - conditional: patch tokens on a grid, a semantic cosine between an image
//    embedding and a class embedding, a structural patch-agreement score, and
//    a trained sigmoid combination of the two.

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "acpo/datasets.hpp"
#include "acpo/ops.hpp"
#include "acpo/param_store.hpp"
#include "acpo/rng.hpp"

namespace acpo {

enum class ScorerVariant { kTwoStream = 0, kConditional = 1 };

struct ConditionToken {
  int class_id = 0;
};

struct ScorerConfig {
  ScorerVariant variant = ScorerVariant::kTwoStream;
  int image_size = 16;
  int num_classes = kNumShapeClasses;
  // two-stream widths
  int stream_hidden = 32;
  int stream_feature = 16;
  int fuse_hidden = 16;
  // conditional widths
  int patch_grid = 4;
  int token_dim = 24;
  int embed_dim = 16;
  // weights over the two token layers; normalized to sum 1 at construction
  std::vector<double> layer_weights = {0.5, 0.5};
};

class Scorer {
 public:
  Scorer(ScorerConfig cfg, uint64_t seed) : cfg_(std::move(cfg)) {
    if (cfg_.image_size < 4)
      throw ConfigError("scorer: image_size must be >= 4");
    if (cfg_.layer_weights.size() != 2)
      throw ConfigError("scorer: exactly two token-layer weights expected");
    double wsum = 0.0;
    for (double w : cfg_.layer_weights) {
      if (w < 0.0) throw ConfigError("scorer: negative layer weight");
      wsum += w;
    }
    if (wsum <= 0.0) throw ConfigError("scorer: layer weights sum to zero");
    for (double& w : cfg_.layer_weights) w /= wsum;

    Rng rng(mix_seed(seed, 0x73636f72));
    int D = cfg_.image_size * cfg_.image_size;
    if (cfg_.variant == ScorerVariant::kTwoStream) {
      add_affine("rgb.0", cfg_.stream_hidden, D, rng);
      add_affine("rgb.1", cfg_.stream_feature, cfg_.stream_hidden, rng);
      add_affine("grad.0", cfg_.stream_hidden, D, rng);
      add_affine("grad.1", cfg_.stream_feature, cfg_.stream_hidden, rng);
      add_affine("fuse.0", cfg_.fuse_hidden, 2 * cfg_.stream_feature, rng);
      add_affine("fuse.1", 1, cfg_.fuse_hidden, rng);
    } else {
      if (cfg_.image_size % cfg_.patch_grid != 0)
        throw ConfigError("scorer: image_size must be divisible by patch_grid");
      if (cfg_.num_classes < 2)
        throw ConfigError("scorer: conditional variant needs num_classes >= 2");
      int ps = cfg_.image_size / cfg_.patch_grid;
      add_affine("patch.0", cfg_.token_dim, ps * ps, rng);
      add_affine("patch.1", cfg_.token_dim, cfg_.token_dim, rng);
      add_affine("img_proj", cfg_.embed_dim, cfg_.token_dim, rng);
      std::vector<double> te(static_cast<size_t>(cfg_.num_classes) * cfg_.embed_dim);
      for (double& v : te) v = rng.normal();
      params_.add("text.embed", Tensor::from({cfg_.num_classes, cfg_.embed_dim},
                                             std::move(te)));
      params_.add("combine.beta", Tensor::from({3}, {1.0, 1.0, 0.0}));
    }
  }

  const ScorerConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  void freeze() { params_.freeze_all(); }
  bool frozen() const {
    for (const std::string& n : params_.names())
      if (!params_.is_frozen(n)) return false;
    return true;
  }

 private:
  void add_affine(const std::string& name, int out, int in, Rng& rng) {
    std::vector<double> w(static_cast<size_t>(out) * in);
    for (double& v : w) v = rng.normal() / std::sqrt(in);
    params_.add(name + ".weight", Tensor::from({out, in}, std::move(w)));
    params_.add(name + ".bias", Tensor::zeros({out}));
  }

  ScorerConfig cfg_;
  ParamStore params_;
};

namespace detail {

inline const Tensor& sobel_x() {
  static const Tensor k =
      Tensor::from({3, 3}, {-1, 0, 1, -2, 0, 2, -1, 0, 1});
  return k;
}

inline const Tensor& sobel_y() {
  static const Tensor k =
      Tensor::from({3, 3}, {-1, -2, -1, 0, 0, 0, 1, 2, 1});
  return k;
}

inline Tensor as_image(const Tensor& x, int size, const char* who) {
  if (x.shape() == Shape{size, size}) return x;
  if (x.numel() == size * size) return reshape(x, {size, size});
  throw ShapeError(std::string(who) + ": expected a " + std::to_string(size) + "x" +
                   std::to_string(size) + " image, got " + shape_str(x.shape()));
}

inline Tensor flat(const Tensor& x) {
  return x.shape().size() == 1 ? x : reshape(x, {x.numel()});
}

}  // namespace detail

// Per-pixel Sobel gradient magnitude sqrt(gx^2 + gy^2 + 1e-12); the small
// floor keeps the map differentiable on flat regions.
inline Tensor gradient_map(const Tensor& x) {
  if (x.shape().size() != 2)
    throw ShapeError("gradient_map: image must be [H,W], got " + shape_str(x.shape()));
  Tensor gx = conv2d(x, detail::sobel_x());
  Tensor gy = conv2d(x, detail::sobel_y());
  return sqrt(add_scalar(add(square(gx), square(gy)), 1e-12));
}

inline Tensor two_stream_score(const Scorer& s, const Tensor& x) {
  const ScorerConfig& cfg = s.config();
  if (cfg.variant != ScorerVariant::kTwoStream)
    throw ConfigError("two_stream_score: scorer is the conditional variant");
  const ParamStore& p = s.params();
  Tensor img = detail::as_image(x, cfg.image_size, "two_stream_score");

  auto stream = [&](const std::string& name, const Tensor& in) {
    Tensor h = tanh(affine(in, p.get(name + ".0.weight"), p.get(name + ".0.bias")));
    return tanh(affine(h, p.get(name + ".1.weight"), p.get(name + ".1.bias")));
  };
  Tensor fused = concat({stream("rgb", detail::flat(img)),
                         stream("grad", detail::flat(gradient_map(img)))});
  Tensor h = tanh(affine(fused, p.get("fuse.0.weight"), p.get("fuse.0.bias")));
  return sigmoid(affine(h, p.get("fuse.1.weight"), p.get("fuse.1.bias")));
}

// Patch tokens at both encoder layers plus their mean-pooled globals.
struct ConditionalParts {
  std::vector<Tensor> tokens1, tokens2;
  Tensor g1, g2;
};

inline ConditionalParts conditional_parts(const Scorer& s, const Tensor& x) {
  const ScorerConfig& cfg = s.config();
  if (cfg.variant != ScorerVariant::kConditional)
    throw ConfigError("conditional scorer op called on the two-stream variant");
  const ParamStore& p = s.params();
  Tensor img = detail::as_image(x, cfg.image_size, "conditional_score");

  int g = cfg.patch_grid, ps = cfg.image_size / g, W = cfg.image_size;
  ConditionalParts parts;
  for (int a = 0; a < g; ++a)
    for (int b = 0; b < g; ++b) {
      std::vector<int> idx;
      idx.reserve(ps * ps);
      for (int i = 0; i < ps; ++i)
        for (int j = 0; j < ps; ++j)
          idx.push_back((a * ps + i) * W + (b * ps + j));
      Tensor patch = gather(img, std::move(idx));
      Tensor t1 = tanh(affine(patch, p.get("patch.0.weight"), p.get("patch.0.bias")));
      Tensor t2 = tanh(affine(t1, p.get("patch.1.weight"), p.get("patch.1.bias")));
      parts.tokens1.push_back(std::move(t1));
      parts.tokens2.push_back(std::move(t2));
    }

  auto mean_token = [](const std::vector<Tensor>& tokens) {
    Tensor acc = tokens[0];
    for (size_t i = 1; i < tokens.size(); ++i) acc = add(acc, tokens[i]);
    return scale(acc, 1.0 / tokens.size());
  };
  parts.g1 = mean_token(parts.tokens1);
  parts.g2 = mean_token(parts.tokens2);
  return parts;
}

// Mean cosine agreement between patch tokens and a global token. Exposed as
// a building block so the averaging can be tested with explicit globals.
inline Tensor patch_agreement(const std::vector<Tensor>& tokens, const Tensor& global) {
  if (tokens.empty()) throw ShapeError("patch_agreement: no tokens");
  std::vector<Tensor> cosines;
  cosines.reserve(tokens.size());
  for (const Tensor& t : tokens) cosines.push_back(cosine_similarity(t, global));
  return mean(concat(cosines));
}

namespace detail {

inline Tensor text_embedding(const Scorer& s, ConditionToken c) {
  const ScorerConfig& cfg = s.config();
  if (c.class_id < 0 || c.class_id >= cfg.num_classes)
    throw ShapeError("condition class id " + std::to_string(c.class_id) +
                     " outside [0," + std::to_string(cfg.num_classes) + ")");
  std::vector<int> idx(cfg.embed_dim);
  for (int i = 0; i < cfg.embed_dim; ++i) idx[i] = c.class_id * cfg.embed_dim + i;
  return gather(s.params().get("text.embed"), std::move(idx));
}

inline Tensor semantic_from_parts(const Scorer& s, const ConditionalParts& parts,
                                  ConditionToken c) {
  Tensor f_img = affine(parts.g2, s.params().get("img_proj.weight"),
                        s.params().get("img_proj.bias"));
  return cosine_similarity(f_img, text_embedding(s, c));
}

inline Tensor structural_from_parts(const Scorer& s, const ConditionalParts& parts) {
  const std::vector<double>& alpha = s.config().layer_weights;
  return add(scale(patch_agreement(parts.tokens1, parts.g1), alpha[0]),
             scale(patch_agreement(parts.tokens2, parts.g2), alpha[1]));
}

}  // namespace detail

// Cosine similarity between the projected image embedding and the class
// embedding; in [-1, 1].
inline Tensor semantic_score(const Scorer& s, const Tensor& x, ConditionToken c) {
  return detail::semantic_from_parts(s, conditional_parts(s, x), c);
}

// Layer-weighted mean patch-to-global agreement; in [-1, 1].
inline Tensor structural_score(const Scorer& s, const Tensor& x) {
  return detail::structural_from_parts(s, conditional_parts(s, x));
}

// sigmoid(beta1 * semantic + beta2 * structural + beta3) with trained betas.
inline Tensor combine_scores(const Scorer& s, const Tensor& sem, const Tensor& str) {
  const Tensor& beta = s.params().get("combine.beta");
  Tensor b1 = gather(beta, {0});
  Tensor b2 = gather(beta, {1});
  Tensor b3 = gather(beta, {2});
  return sigmoid(add(add(mul(b1, sem), mul(b2, str)), b3));
}

inline Tensor conditional_score(const Scorer& s, const Tensor& x, ConditionToken c) {
  ConditionalParts parts = conditional_parts(s, x);
  return combine_scores(s, detail::semantic_from_parts(s, parts, c),
                        detail::structural_from_parts(s, parts));
}

// Variant-dispatching entry point used by the fine-tuning loop.
inline Tensor score_image(const Scorer& s, const Tensor& x,
                          std::optional<int> condition = std::nullopt) {
  if (s.config().variant == ScorerVariant::kTwoStream) {
    if (condition)
      throw ConfigError("score_image: condition passed to the two-stream scorer");
    return two_stream_score(s, x);
  }
  if (!condition)
    throw ConfigError("score_image: conditional scorer needs a condition");
  return conditional_score(s, x, ConditionToken{*condition});
}

// Feature vector for distribution comparisons: the fused stream features
// (two-stream) or the final global token (conditional). At most 32-dim.
inline Tensor scorer_features(const Scorer& s, const Tensor& x) {
  const ScorerConfig& cfg = s.config();
  const ParamStore& p = s.params();
  if (cfg.variant == ScorerVariant::kTwoStream) {
    Tensor img = detail::as_image(x, cfg.image_size, "scorer_features");
    auto stream = [&](const std::string& name, const Tensor& in) {
      Tensor h = tanh(affine(in, p.get(name + ".0.weight"), p.get(name + ".0.bias")));
      return tanh(affine(h, p.get(name + ".1.weight"), p.get(name + ".1.bias")));
    };
    return concat({stream("rgb", detail::flat(img)),
                   stream("grad", detail::flat(gradient_map(img)))});
  }
  return conditional_parts(s, x).g2;
}

// Stage-1 supervised training: mean squared error between scores and the
// construction labels, Adam updates, everything frozen on return.
inline Scorer train_evaluator(const ScorerConfig& scorer_cfg, const IqaDataset& ds,
                              int epochs, double lr, uint64_t seed, int batch_size = 16) {
  ScorerVariant variant = scorer_cfg.variant;
  if (ds.items.empty()) throw ConfigError("train_evaluator: empty dataset");
  if (scorer_cfg.image_size != ds.image_size)
    throw ConfigError("train_evaluator: scorer image_size " +
                      std::to_string(scorer_cfg.image_size) + " does not match dataset " +
                      std::to_string(ds.image_size));
  if (variant == ScorerVariant::kConditional && !ds.conditional)
    throw ConfigError("train_evaluator: conditional variant needs conditional data");
  if (epochs < 1) throw ConfigError("train_evaluator: epochs must be >= 1");

  Scorer s(scorer_cfg, mix_seed(seed, 1));

  Rng shuffle_rng(mix_seed(seed, 2));
  std::vector<int> order(ds.items.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);

  int step = 0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(i + 1)]);
    for (size_t start = 0; start < order.size(); start += batch_size) {
      size_t stop = std::min(order.size(), start + batch_size);
      std::vector<Tensor> sq;
      sq.reserve(stop - start);
      for (size_t k = start; k < stop; ++k) {
        const IqaItem& item = ds.items[order[k]];
        Tensor q = variant == ScorerVariant::kTwoStream
                       ? two_stream_score(s, item.image)
                       : conditional_score(s, item.image,
                                           ConditionToken{item.condition});
        sq.push_back(square(add_scalar(q, -item.label)));
      }
      Tensor loss = mean(concat(sq));
      s.params().zero_grads();
      backward(loss);
      adam_step(s.params(), lr, 0.9, 0.999, 1e-8, ++step);
    }
  }
  s.freeze();
  return s;
}

// Default widths, image size taken from the dataset.
inline Scorer train_evaluator(ScorerVariant variant, const IqaDataset& ds, int epochs,
                              double lr, uint64_t seed, int batch_size = 16) {
  ScorerConfig cfg;
  cfg.variant = variant;
  cfg.image_size = ds.items.empty() ? cfg.image_size : ds.image_size;
  return train_evaluator(cfg, ds, epochs, lr, seed, batch_size);
}

}  // namespace acpo
