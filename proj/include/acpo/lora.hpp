#pragma once

// Low-rank adaptation of affine layers: the frozen base pair (W, b) plus
// trainable factors A [r,in] and B [out,r]. The adapted map is
//   y = W·x + b + (scale/r)·B·(A·x)
// and because B starts at zero, a freshly attached adapter computes exactly
// the base map, bit for bit.

#include <string>
#include <vector>

#include "acpo/ops.hpp"
#include "acpo/tensor.hpp"

namespace acpo {

struct LoraLayer {
  std::string name;
  Tensor base_weight;  // [out,in], frozen
  Tensor base_bias;    // [out], frozen
  Tensor A;            // [r,in], trainable
  Tensor B;            // [out,r], trainable
  Tensor zero_r;       // constant zero bias for the A stage
  Tensor zero_out;     // constant zero bias for the B stage
  int rank = 0;
  double scale = 1.0;

  int in_dim() const { return base_weight.shape()[1]; }
  int out_dim() const { return base_weight.shape()[0]; }
};

inline Tensor base_forward(const LoraLayer& l, const Tensor& x) {
  return affine(x, l.base_weight, l.base_bias);
}

inline Tensor adapted_forward(const LoraLayer& l, const Tensor& x) {
  Tensor y = affine(x, l.base_weight, l.base_bias);
  Tensor u = affine(x, l.A, l.zero_r);
  Tensor v = affine(u, l.B, l.zero_out);
  return add(y, scale(v, l.scale / l.rank));
}

struct AdapterSet {
  enum class Mode { kBase, kAdapted };

  std::vector<LoraLayer> layers;
  int rank = 0;
  double scale = 1.0;
  Mode mode = Mode::kAdapted;

  // Flipping the mode only changes which forward path is taken; no parameter
  // is ever touched.
  void set_mode(Mode m) { mode = m; }

  int64_t trainable_count() const {
    int64_t c = 0;
    for (const LoraLayer& l : layers) c += int64_t{l.rank} * (l.in_dim() + l.out_dim());
    return c;
  }
};

}  // namespace acpo
