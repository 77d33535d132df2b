#pragma once

// Central-difference verification of reverse-mode gradients.
//
// The program under test must be a pure function of its inputs (captured
// state is fine as long as it is constant across calls); it is re-evaluated
// twice per input coordinate with that coordinate nudged by ±epsilon.

#include <functional>
#include <string>
#include <vector>

#include "acpo/ops.hpp"
#include "acpo/tensor.hpp"

namespace acpo {

// A scalar-valued differentiable program over a fixed list of leaf tensors.
using Program = std::function<Tensor(const std::vector<Tensor>&)>;

struct LeafGradReport {
  int leaf_index = 0;
  double max_rel_error = 0.0;
  int checked = 0;   // coordinates compared against finite differences
  int excluded = 0;  // coordinates skipped: a ±epsilon probe hit a kink
  bool pass = true;
};

struct GradCheckReport {
  std::vector<LeafGradReport> leaves;
  double max_rel_error = 0.0;
  int total_checked = 0;
  int total_excluded = 0;
  // The unperturbed forward pass landed on a non-differentiable point
  // (e.g. a norm at the zero vector); no comparison is meaningful there.
  bool excluded_point = false;
  bool pass = true;
};

// Compares backward() gradients of `f` against (f(x+ε)−f(x−ε))/(2ε) for every
// coordinate of every requires_grad input. Relative error uses denominator
// max(|analytic|, |numeric|, 1e-8); pass means every checked coordinate is
// within `tolerance`.
inline GradCheckReport grad_check(const Program& f, std::vector<Tensor> inputs,
                                  double epsilon, double tolerance) {
  if (!(epsilon > 0.0) || epsilon > 1e-2)
    throw ConfigError("grad_check: epsilon must be in (0, 1e-2]");

  GradCheckReport report;

  detail::kink_counter() = 0;
  Tensor out = f(inputs);
  if (out.numel() != 1)
    throw ShapeError("grad_check: program output must be a scalar, got shape " +
                     shape_str(out.shape()));
  if (detail::kink_counter() > 0) {
    report.excluded_point = true;
    return report;
  }

  for (Tensor& leaf : inputs)
    if (leaf.requires_grad()) leaf.zero_grad();
  backward(out);

  auto probe = [&](Tensor& leaf, int i, double delta, bool& kink) {
    double saved = leaf.values()[i];
    leaf.values()[i] = saved + delta;
    double y;
    {
      NoGradGuard ng;
      detail::kink_counter() = 0;
      y = f(inputs).item();
      kink = kink || detail::kink_counter() > 0;
    }
    leaf.values()[i] = saved;
    return y;
  };

  for (size_t li = 0; li < inputs.size(); ++li) {
    Tensor& leaf = inputs[li];
    if (!leaf.requires_grad()) continue;
    LeafGradReport lr;
    lr.leaf_index = static_cast<int>(li);
    for (int i = 0; i < leaf.numel(); ++i) {
      bool kink = false;
      double f_plus = probe(leaf, i, epsilon, kink);
      double f_minus = probe(leaf, i, -epsilon, kink);
      if (kink) {
        ++lr.excluded;
        continue;
      }
      double fd = (f_plus - f_minus) / (2.0 * epsilon);
      double an = leaf.grad()[i];
      double denom = std::max({std::abs(fd), std::abs(an), 1e-8});
      double rel = std::abs(fd - an) / denom;
      lr.max_rel_error = std::max(lr.max_rel_error, rel);
      ++lr.checked;
    }
    lr.pass = lr.max_rel_error <= tolerance;
    report.max_rel_error = std::max(report.max_rel_error, lr.max_rel_error);
    report.total_checked += lr.checked;
    report.total_excluded += lr.excluded;
    report.pass = report.pass && lr.pass;
    report.leaves.push_back(std::move(lr));
  }
  return report;
}

}  // namespace acpo
