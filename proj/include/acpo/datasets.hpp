#pragma once

// Procedural toy data: antialiased shape renders with seeded jitter, graded
// degradations with known severity (the ground-truth quality ordering), and
// the labeled / clean corpora built from them.

#include <cmath>
#include <string>
#include <vector>

#include "acpo/rng.hpp"
#include "acpo/tensor.hpp"

namespace acpo {

enum class ShapeClass { kCircle = 0, kSquare = 1, kCross = 2, kStripes = 3 };

constexpr int kNumShapeClasses = 4;

inline const char* shape_name(ShapeClass c) {
  switch (c) {
    case ShapeClass::kCircle: return "circle";
    case ShapeClass::kSquare: return "square";
    case ShapeClass::kCross: return "cross";
    case ShapeClass::kStripes: return "stripes";
  }
  throw ConfigError("shape_name: invalid class id");
}

enum class DegradationKind { kBlur = 0, kNoise = 1, kContrastCrush = 2 };

struct DegradationSpec {
  DegradationKind kind = DegradationKind::kBlur;
  double severity = 0.0;  // in [0,1]; 0 is the exact identity
};

struct RenderInfo {
  Tensor image;  // [size, size], values in [0,1]
  double cx = 0.0, cy = 0.0;  // shape center in pixel coordinates
  double scale = 1.0;         // jittered size factor
};

// Renders one shape on a 0.1 background with 0.9 foreground, antialiased by
// linear coverage of the signed distance. The center lands on a pixel center
// (integer jitter), which keeps the renders exactly mirror-symmetric.
inline RenderInfo render_clean_info(ShapeClass cls, int size, uint64_t seed) {
  if (size < 8) throw ConfigError("render_clean: size must be >= 8");
  Rng rng(mix_seed(seed, 0x73686170));
  int jx = rng.uniform_int(5) - 2;
  int jy = rng.uniform_int(5) - 2;
  double cx = size / 2 + jx + 0.5;
  double cy = size / 2 + jy + 0.5;
  double f = rng.uniform(0.8, 1.1);

  auto sdf = [&](double px, double py) {
    switch (cls) {
      case ShapeClass::kCircle:
        return std::sqrt(px * px + py * py) - 0.30 * size * f;
      case ShapeClass::kSquare:
        return std::max(std::abs(px), std::abs(py)) - 0.27 * size * f;
      case ShapeClass::kCross: {
        double w = 0.12 * size * f, arm = 0.34 * size * f;
        double horiz = std::max(std::abs(px) - arm, std::abs(py) - w);
        double vert = std::max(std::abs(px) - w, std::abs(py) - arm);
        return std::min(horiz, vert);
      }
      case ShapeClass::kStripes: {
        double period = size / 4.0, width = 0.30 * period;
        double md = std::fmod(px, period);
        if (md < 0) md += period;
        return std::abs(md - period / 2.0) - width;
      }
    }
    throw ConfigError("render_clean: invalid class id");
  };

  std::vector<double> v(static_cast<size_t>(size) * size);
  for (int i = 0; i < size; ++i)
    for (int j = 0; j < size; ++j) {
      double d = sdf(j + 0.5 - cx, i + 0.5 - cy);
      double cov = std::min(1.0, std::max(0.0, 0.5 - d));
      v[static_cast<size_t>(i) * size + j] = 0.1 + 0.8 * cov;
    }

  RenderInfo info;
  info.image = Tensor::from({size, size}, std::move(v));
  info.cx = cx;
  info.cy = cy;
  info.scale = f;
  return info;
}

inline Tensor render_clean(ShapeClass cls, int size, uint64_t seed) {
  return render_clean_info(cls, size, seed).image;
}

namespace detail {

// 3x3 box mean with edge-replicate padding; used only for data preparation,
// never differentiated.
inline void box_blur_inplace(std::vector<double>& v, int H, int W) {
  std::vector<double> out(v.size());
  auto at = [&](int i, int j) {
    i = std::min(std::max(i, 0), H - 1);
    j = std::min(std::max(j, 0), W - 1);
    return v[static_cast<size_t>(i) * W + j];
  };
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double s = 0.0;
      for (int u = -1; u <= 1; ++u)
        for (int w = -1; w <= 1; ++w) s += at(i + u, j + w);
      out[static_cast<size_t>(i) * W + j] = s / 9.0;
    }
  v.swap(out);
}

}  // namespace detail

// Severity-graded corruption. Severity 0 returns the input exactly; every
// output stays in [0,1].
inline Tensor apply_degradation(const Tensor& x, const DegradationSpec& spec,
                                uint64_t seed) {
  if (spec.severity < 0.0 || spec.severity > 1.0)
    throw ConfigError("apply_degradation: severity outside [0,1]");
  if (x.shape().size() != 2)
    throw ShapeError("apply_degradation: image must be [H,W], got " +
                     shape_str(x.shape()));
  std::vector<double> v(x.data().begin(), x.data().end());
  if (spec.severity == 0.0) return Tensor::from(x.shape(), std::move(v));

  int H = x.shape()[0], W = x.shape()[1];
  switch (spec.kind) {
    case DegradationKind::kBlur: {
      int k = static_cast<int>(std::lround(spec.severity * 4.0));
      for (int pass = 0; pass < k; ++pass) detail::box_blur_inplace(v, H, W);
      break;
    }
    case DegradationKind::kNoise: {
      Rng rng(mix_seed(seed, 0x6e6f6973));
      for (double& p : v) {
        p += spec.severity * 0.5 * rng.normal();
        p = std::min(1.0, std::max(0.0, p));
      }
      break;
    }
    case DegradationKind::kContrastCrush: {
      for (double& p : v) p = (1.0 - spec.severity) * p + spec.severity * 0.5;
      break;
    }
  }
  return Tensor::from(x.shape(), std::move(v));
}

struct IqaItem {
  Tensor image;  // [size, size]
  double label = 0.0;
  int cls = 0;        // true shape class
  int condition = 0;  // hinted class; equals cls iff matched
  bool matched = true;
  DegradationSpec degradation;
};

struct IqaDataset {
  std::vector<IqaItem> items;
  int image_size = 0;
  bool conditional = false;
};

// Labeled scorer-training data: label = 1 - severity, and in the conditional
// variant a mismatched class hint zeroes the label (quality times alignment).
inline IqaDataset build_iqa_dataset(int n, int size, bool conditional, uint64_t seed) {
  if (n < 1) throw ConfigError("build_iqa_dataset: n must be >= 1");
  IqaDataset ds;
  ds.image_size = size;
  ds.conditional = conditional;
  ds.items.reserve(n);
  for (int i = 0; i < n; ++i) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    IqaItem item;
    item.cls = rng.uniform_int(kNumShapeClasses);
    Tensor clean = render_clean(static_cast<ShapeClass>(item.cls), size, rng.next_u64());
    item.degradation.kind = static_cast<DegradationKind>(rng.uniform_int(3));
    item.degradation.severity = rng.uniform();
    item.image = apply_degradation(clean, item.degradation, rng.next_u64());
    item.label = 1.0 - item.degradation.severity;
    if (conditional) {
      item.matched = rng.uniform() < 0.5;
      if (item.matched) {
        item.condition = item.cls;
      } else {
        item.condition = (item.cls + 1 + rng.uniform_int(kNumShapeClasses - 1)) %
                         kNumShapeClasses;
        item.label = 0.0;
      }
    } else {
      item.condition = item.cls;
    }
    ds.items.push_back(std::move(item));
  }
  return ds;
}

struct DiffusionData {
  std::vector<Tensor> images;  // clean [size, size] renders
  std::vector<int> classes;
  int image_size = 0;
  bool conditional = false;
};

// Clean corpus for diffusion training; classes are assigned round-robin so
// the per-class counts differ by at most one.
inline DiffusionData build_diffusion_dataset(int n, int size, bool conditional,
                                             uint64_t seed) {
  if (n < 1) throw ConfigError("build_diffusion_dataset: n must be >= 1");
  DiffusionData ds;
  ds.image_size = size;
  ds.conditional = conditional;
  ds.images.reserve(n);
  for (int i = 0; i < n; ++i) {
    int cls = i % kNumShapeClasses;
    Rng rng(mix_seed(seed, static_cast<uint64_t>(i)));
    ds.images.push_back(render_clean(static_cast<ShapeClass>(cls), size, rng.next_u64()));
    ds.classes.push_back(cls);
  }
  return ds;
}

}  // namespace acpo
