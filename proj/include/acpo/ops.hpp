#pragma once

// Differentiable primitives over Tensor. Each op validates shapes, computes
// the forward value eagerly, checks the result for NaN/Inf, and (when grad
// mode is on and a parent tracks gradients) records a backprop closure.
//
// Ops that can be evaluated at a non-differentiable point (relu at 0, the
// norms at the zero vector, clamp01 at a boundary) bump a thread-local kink
// counter so finite-difference checks can tell "wrong gradient" apart from
// "no gradient exists here".

#include <cmath>
#include <initializer_list>
#include <vector>

#include "acpo/tensor.hpp"

namespace acpo {

namespace detail {

constexpr double kKinkEps = 1e-9;

inline uint64_t& kink_counter() {
  thread_local uint64_t n = 0;
  return n;
}

inline void note_kink(TensorNode* node) {
  ++kink_counter();
  if (node) node->kink = true;
}

inline void check_finite(const char* op, const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x))
      throw NumericError(std::string(op) + ": non-finite output value");
}

// Assembles the output node. `parents` are recorded and `bp` installed only
// when grad mode is on and at least one parent requires grad; otherwise the
// result is a plain constant.
inline Tensor op_result(const char* op, Shape shape, std::vector<double> value,
                        const std::vector<Tensor>& parents,
                        std::function<void(TensorNode&)> bp) {
  check_finite(op, value);
  Tensor out = Tensor::from(std::move(shape), std::move(value), false);
  TensorNode* n = out.node();
  n->op = op;
  if (grad_enabled()) {
    bool track = false;
    for (const Tensor& p : parents) track = track || p.requires_grad();
    if (track) {
      out.set_requires_grad(true);
      for (const Tensor& p : parents) n->parents.push_back(p.node_ptr());
      n->backprop = std::move(bp);
    }
  }
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
}

}  // namespace detail

// ---- elementwise binary ----

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> v(a.data().begin(), a.data().end());
  for (int i = 0; i < b.numel(); ++i) v[i] += b.at(i);
  return detail::op_result("add", a.shape(), std::move(v), {a, b},
      [a, b](detail::TensorNode& n) {
        if (a.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i) a.node()->grad[i] += n.grad[i];
        if (b.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i) b.node()->grad[i] += n.grad[i];
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> v(a.data().begin(), a.data().end());
  for (int i = 0; i < b.numel(); ++i) v[i] -= b.at(i);
  return detail::op_result("sub", a.shape(), std::move(v), {a, b},
      [a, b](detail::TensorNode& n) {
        if (a.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i) a.node()->grad[i] += n.grad[i];
        if (b.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i) b.node()->grad[i] -= n.grad[i];
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> v(a.numel());
  for (int i = 0; i < a.numel(); ++i) v[i] = a.at(i) * b.at(i);
  return detail::op_result("mul", a.shape(), std::move(v), {a, b},
      [a, b](detail::TensorNode& n) {
        if (a.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i)
            a.node()->grad[i] += n.grad[i] * b.at(static_cast<int>(i));
        if (b.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i)
            b.node()->grad[i] += n.grad[i] * a.at(static_cast<int>(i));
      });
}

// x * s with s a one-element tensor; gradients reach both factors. The
// broadcast lets a learned scalar (e.g. a per-timestep gain) multiply a
// whole vector without materializing the repeated factor.
inline Tensor scale_by(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1)
    throw ShapeError("scale_by: scale must have one element, got " + shape_str(s.shape()));
  double c = s.at(0);
  std::vector<double> v(x.numel());
  for (int i = 0; i < x.numel(); ++i) v[i] = c * x.at(i);
  return detail::op_result("scale_by", x.shape(), std::move(v), {x, s},
      [x, s, c](detail::TensorNode& n) {
        if (x.requires_grad())
          for (size_t i = 0; i < n.grad.size(); ++i) x.node()->grad[i] += c * n.grad[i];
        if (s.requires_grad()) {
          double acc = 0.0;
          for (size_t i = 0; i < n.grad.size(); ++i)
            acc += n.grad[i] * x.at(static_cast<int>(i));
          s.node()->grad[0] += acc;
        }
      });
}

// ---- elementwise unary ----

inline Tensor scale(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  for (int i = 0; i < x.numel(); ++i) v[i] = c * x.at(i);
  return detail::op_result("scale", x.shape(), std::move(v), {x},
      [x, c](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) x.node()->grad[i] += c * n.grad[i];
      });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> v(x.numel());
  for (int i = 0; i < x.numel(); ++i) v[i] = x.at(i) + c;
  return detail::op_result("add_scalar", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) x.node()->grad[i] += n.grad[i];
      });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (int i = 0; i < x.numel(); ++i) {
    double z = x.at(i);
    if (z >= 0.0) {
      v[i] = 1.0 / (1.0 + std::exp(-z));
    } else {
      double e = std::exp(z);
      v[i] = e / (1.0 + e);
    }
  }
  return detail::op_result("sigmoid", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double y = n.value[i];
          x.node()->grad[i] += n.grad[i] * y * (1.0 - y);
        }
      });
}

inline Tensor tanh(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (int i = 0; i < x.numel(); ++i) v[i] = std::tanh(x.at(i));
  return detail::op_result("tanh", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double y = n.value[i];
          x.node()->grad[i] += n.grad[i] * (1.0 - y * y);
        }
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> v(x.numel());
  bool kink = false;
  for (int i = 0; i < x.numel(); ++i) {
    double z = x.at(i);
    if (std::abs(z) < detail::kKinkEps) kink = true;
    v[i] = z > 0.0 ? z : 0.0;
  }
  Tensor out = detail::op_result("relu", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i)
          if (x.at(static_cast<int>(i)) > 0.0) x.node()->grad[i] += n.grad[i];
      });
  if (kink) detail::note_kink(out.node());
  return out;
}

inline Tensor square(const Tensor& x) {
  std::vector<double> v(x.numel());
  for (int i = 0; i < x.numel(); ++i) v[i] = x.at(i) * x.at(i);
  return detail::op_result("square", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i)
          x.node()->grad[i] += n.grad[i] * 2.0 * x.at(static_cast<int>(i));
      });
}

inline Tensor sqrt(const Tensor& x) {
  std::vector<double> v(x.numel());
  bool kink = false;
  for (int i = 0; i < x.numel(); ++i) {
    double z = x.at(i);
    if (z < 0.0)
      throw NumericError("sqrt: negative input value");
    if (z == 0.0) kink = true;  // derivative unbounded at 0
    v[i] = std::sqrt(z);
  }
  Tensor out = detail::op_result("sqrt", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double y = n.value[i];
          if (y > 0.0) x.node()->grad[i] += n.grad[i] * 0.5 / y;
        }
      });
  if (kink) detail::note_kink(out.node());
  return out;
}

inline Tensor clamp01(const Tensor& x) {
  std::vector<double> v(x.numel());
  bool kink = false;
  for (int i = 0; i < x.numel(); ++i) {
    double z = x.at(i);
    if (std::abs(z) < detail::kKinkEps || std::abs(z - 1.0) < detail::kKinkEps)
      kink = true;
    v[i] = z < 0.0 ? 0.0 : (z > 1.0 ? 1.0 : z);
  }
  Tensor out = detail::op_result("clamp01", x.shape(), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) {
          double z = x.at(static_cast<int>(i));
          if (z > 0.0 && z < 1.0) x.node()->grad[i] += n.grad[i];
        }
      });
  if (kink) detail::note_kink(out.node());
  return out;
}

// ---- reductions ----

inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (int i = 0; i < x.numel(); ++i) s += x.at(i);
  return detail::op_result("sum", {1}, {s}, {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (double& g : x.node()->grad) g += n.grad[0];
      });
}

inline Tensor mean(const Tensor& x) {
  double s = 0.0;
  for (int i = 0; i < x.numel(); ++i) s += x.at(i);
  double inv = 1.0 / x.numel();
  return detail::op_result("mean", {1}, {s * inv}, {x},
      [x, inv](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (double& g : x.node()->grad) g += n.grad[0] * inv;
      });
}

inline Tensor l2_norm(const Tensor& x) {
  double s = 0.0;
  for (int i = 0; i < x.numel(); ++i) s += x.at(i) * x.at(i);
  double norm = std::sqrt(s);
  Tensor out = detail::op_result("l2_norm", {1}, {norm}, {x},
      [x, norm](detail::TensorNode& n) {
        if (!x.requires_grad() || norm <= 0.0) return;
        for (size_t i = 0; i < x.node()->grad.size(); ++i)
          x.node()->grad[i] += n.grad[0] * x.at(static_cast<int>(i)) / norm;
      });
  if (norm < detail::kKinkEps) detail::note_kink(out.node());
  return out;
}

// ---- shape / selection ----

// Flattens every part and joins them into one 1-D tensor.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: empty input list");
  int total = 0;
  for (const Tensor& p : parts) total += p.numel();
  std::vector<double> v;
  v.reserve(total);
  for (const Tensor& p : parts) v.insert(v.end(), p.data().begin(), p.data().end());
  return detail::op_result("concat", {total}, std::move(v), parts,
      [parts](detail::TensorNode& n) {
        size_t off = 0;
        for (const Tensor& p : parts) {
          if (p.requires_grad())
            for (int i = 0; i < p.numel(); ++i)
              p.node()->grad[i] += n.grad[off + i];
          off += p.numel();
        }
      });
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(shape));
  std::vector<double> v(x.data().begin(), x.data().end());
  return detail::op_result("reshape", std::move(shape), std::move(v), {x},
      [x](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t i = 0; i < n.grad.size(); ++i) x.node()->grad[i] += n.grad[i];
      });
}

// Picks elements by flat index; the backward pass scatter-adds. Used for
// patch extraction and embedding-row lookup.
inline Tensor gather(const Tensor& x, std::vector<int> idx) {
  std::vector<double> v(idx.size());
  for (size_t k = 0; k < idx.size(); ++k) {
    if (idx[k] < 0 || idx[k] >= x.numel())
      throw ShapeError("gather: index " + std::to_string(idx[k]) +
                       " out of range for " + shape_str(x.shape()));
    v[k] = x.at(idx[k]);
  }
  int n_out = static_cast<int>(idx.size());
  return detail::op_result("gather", {n_out}, std::move(v), {x},
      [x, idx = std::move(idx)](detail::TensorNode& n) {
        if (!x.requires_grad()) return;
        for (size_t k = 0; k < idx.size(); ++k)
          x.node()->grad[idx[k]] += n.grad[k];
      });
}

// ---- linear / convolution ----

// y = W·x + b with W [out,in], b [out]; x may be [in] or a batch [N,in].
inline Tensor affine(const Tensor& x, const Tensor& W, const Tensor& b) {
  if (W.shape().size() != 2)
    throw ShapeError("affine: weight must be [out,in], got " + shape_str(W.shape()));
  int out_dim = W.shape()[0], in_dim = W.shape()[1];
  if (b.shape() != Shape{out_dim})
    throw ShapeError("affine: bias " + shape_str(b.shape()) + " does not match weight " +
                     shape_str(W.shape()));
  int batch;
  Shape out_shape;
  if (x.shape().size() == 1 && x.shape()[0] == in_dim) {
    batch = 1;
    out_shape = {out_dim};
  } else if (x.shape().size() == 2 && x.shape()[1] == in_dim) {
    batch = x.shape()[0];
    out_shape = {batch, out_dim};
  } else {
    throw ShapeError("affine: input " + shape_str(x.shape()) + " does not match weight " +
                     shape_str(W.shape()));
  }

  std::vector<double> v(static_cast<size_t>(batch) * out_dim);
  for (int n = 0; n < batch; ++n) {
    const double* xr = x.data().data() + static_cast<size_t>(n) * in_dim;
    for (int o = 0; o < out_dim; ++o) {
      const double* wr = W.data().data() + static_cast<size_t>(o) * in_dim;
      double s = b.at(o);
      for (int i = 0; i < in_dim; ++i) s += wr[i] * xr[i];
      v[static_cast<size_t>(n) * out_dim + o] = s;
    }
  }

  return detail::op_result("affine", std::move(out_shape), std::move(v), {x, W, b},
      [x, W, b, batch, in_dim, out_dim](detail::TensorNode& n) {
        for (int s = 0; s < batch; ++s) {
          const double* gy = n.grad.data() + static_cast<size_t>(s) * out_dim;
          const double* xr = x.data().data() + static_cast<size_t>(s) * in_dim;
          if (x.requires_grad()) {
            double* gx = x.node()->grad.data() + static_cast<size_t>(s) * in_dim;
            for (int o = 0; o < out_dim; ++o) {
              const double* wr = W.data().data() + static_cast<size_t>(o) * in_dim;
              for (int i = 0; i < in_dim; ++i) gx[i] += gy[o] * wr[i];
            }
          }
          if (W.requires_grad()) {
            for (int o = 0; o < out_dim; ++o) {
              double* gw = W.node()->grad.data() + static_cast<size_t>(o) * in_dim;
              for (int i = 0; i < in_dim; ++i) gw[i] += gy[o] * xr[i];
            }
          }
          if (b.requires_grad())
            for (int o = 0; o < out_dim; ++o) b.node()->grad[o] += gy[o];
        }
      });
}

// 2-D cross-correlation with zero "same" padding; kernel dims must be odd so
// the output shape equals the input shape.
inline Tensor conv2d(const Tensor& x, const Tensor& k) {
  if (x.shape().size() != 2)
    throw ShapeError("conv2d: input must be [H,W], got " + shape_str(x.shape()));
  if (k.shape().size() != 2 || k.shape()[0] % 2 == 0 || k.shape()[1] % 2 == 0)
    throw ShapeError("conv2d: kernel must be [odd,odd], got " + shape_str(k.shape()));
  int H = x.shape()[0], W = x.shape()[1];
  int kh = k.shape()[0], kw = k.shape()[1];
  int ch = kh / 2, cw = kw / 2;

  std::vector<double> v(static_cast<size_t>(H) * W, 0.0);
  for (int i = 0; i < H; ++i)
    for (int j = 0; j < W; ++j) {
      double s = 0.0;
      for (int u = 0; u < kh; ++u) {
        int ii = i + u - ch;
        if (ii < 0 || ii >= H) continue;
        for (int g = 0; g < kw; ++g) {
          int jj = j + g - cw;
          if (jj < 0 || jj >= W) continue;
          s += x.at(ii * W + jj) * k.at(u * kw + g);
        }
      }
      v[static_cast<size_t>(i) * W + j] = s;
    }

  return detail::op_result("conv2d", {H, W}, std::move(v), {x, k},
      [x, k, H, W, kh, kw, ch, cw](detail::TensorNode& n) {
        for (int i = 0; i < H; ++i)
          for (int j = 0; j < W; ++j) {
            double g0 = n.grad[static_cast<size_t>(i) * W + j];
            if (g0 == 0.0) continue;
            for (int u = 0; u < kh; ++u) {
              int ii = i + u - ch;
              if (ii < 0 || ii >= H) continue;
              for (int g = 0; g < kw; ++g) {
                int jj = j + g - cw;
                if (jj < 0 || jj >= W) continue;
                if (x.requires_grad())
                  x.node()->grad[ii * W + jj] += g0 * k.at(u * kw + g);
                if (k.requires_grad())
                  k.node()->grad[u * kw + g] += g0 * x.at(ii * W + jj);
              }
            }
          }
      });
}

// ---- vector similarity ----

inline Tensor cosine_similarity(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("cosine_similarity", a, b);
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (int i = 0; i < a.numel(); ++i) {
    dot += a.at(i) * b.at(i);
    na2 += a.at(i) * a.at(i);
    nb2 += b.at(i) * b.at(i);
  }
  double na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (na < 1e-12 || nb < 1e-12)
    throw NumericError("cosine_similarity: zero-norm input vector");
  double y = dot / (na * nb);
  return detail::op_result("cosine_similarity", {1}, {y}, {a, b},
      [a, b, na, nb, y](detail::TensorNode& n) {
        double g = n.grad[0];
        for (int i = 0; i < a.numel(); ++i) {
          if (a.requires_grad())
            a.node()->grad[i] += g * (b.at(i) / (na * nb) - y * a.at(i) / (na * na));
          if (b.requires_grad())
            b.node()->grad[i] += g * (a.at(i) / (na * nb) - y * b.at(i) / (nb * nb));
        }
      });
}

}  // namespace acpo
