#pragma once

// Evaluation statistics over plain doubles: paired t, win rate, Spearman
// rank correlation, and the Gaussian Fréchet distance used as the toy FID.
// Everything here is pure and deliberately free of the autodiff machinery so
// the brute-force test oracles exercise the same inputs.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "acpo/errors.hpp"

namespace acpo {

// Index-aligned score pairs: entry i of both arrays came from the same
// latent noise.
struct PairedSample {
  std::vector<double> baseline;
  std::vector<double> finetuned;
};

namespace detail {

inline void require_paired(const PairedSample& s, size_t min_n, const char* who) {
  if (s.baseline.size() != s.finetuned.size())
    throw ShapeError(std::string(who) + ": baseline and finetuned lengths differ");
  if (s.baseline.size() < min_n)
    throw ConfigError(std::string(who) + ": needs at least " +
                      std::to_string(min_n) + " pairs");
}

}  // namespace detail

struct PairedTResult {
  double mean_diff = 0.0;
  double std_diff = 0.0;  // sample standard deviation, n-1 denominator
  double t = 0.0;
  bool degenerate = false;  // all differences identical; t is NaN then
};

inline PairedTResult paired_t_statistic(const PairedSample& s) {
  detail::require_paired(s, 2, "paired_t_statistic");
  size_t n = s.baseline.size();
  std::vector<double> d(n);
  for (size_t i = 0; i < n; ++i) d[i] = s.finetuned[i] - s.baseline[i];
  PairedTResult r;
  r.mean_diff = std::accumulate(d.begin(), d.end(), 0.0) / n;
  double ss = 0.0;
  for (double x : d) ss += (x - r.mean_diff) * (x - r.mean_diff);
  r.std_diff = std::sqrt(ss / (n - 1));
  if (r.std_diff == 0.0) {
    r.degenerate = true;
    r.t = std::numeric_limits<double>::quiet_NaN();
  } else {
    r.t = r.mean_diff / (r.std_diff / std::sqrt(static_cast<double>(n)));
  }
  return r;
}

// Fraction of pairs the fine-tuned score wins, ties counted half. The
// half-credit makes win_rate(s) + win_rate(swapped s) == 1 hold exactly.
inline double win_rate(const PairedSample& s) {
  detail::require_paired(s, 1, "win_rate");
  double credit = 0.0;
  for (size_t i = 0; i < s.baseline.size(); ++i) {
    if (s.finetuned[i] > s.baseline[i])
      credit += 1.0;
    else if (s.finetuned[i] == s.baseline[i])
      credit += 0.5;
  }
  return credit / s.baseline.size();
}

// Positions 1..n with tied values sharing their mean rank.
inline std::vector<double> average_ranks(const std::vector<double>& v) {
  size_t n = v.size();
  std::vector<int> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) { return v[a] < v[b]; });
  std::vector<double> ranks(n);
  size_t i = 0;
  while (i < n) {
    size_t j = i;
    while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
    double shared = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (size_t k = i; k <= j; ++k) ranks[idx[k]] = shared;
    i = j + 1;
  }
  return ranks;
}

struct SpearmanResult {
  double rho = 0.0;
  bool degenerate = false;  // a constant array has no rank ordering
};

inline SpearmanResult spearman(const std::vector<double>& a,
                               const std::vector<double>& b) {
  if (a.size() != b.size()) throw ShapeError("spearman: array lengths differ");
  if (a.size() < 3) throw ConfigError("spearman: needs at least 3 points");
  std::vector<double> ra = average_ranks(a), rb = average_ranks(b);
  size_t n = a.size();
  double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < n; ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  SpearmanResult r;
  if (saa == 0.0 || sbb == 0.0) {
    r.degenerate = true;
    r.rho = std::numeric_limits<double>::quiet_NaN();
  } else {
    r.rho = sab / std::sqrt(saa * sbb);
  }
  return r;
}

struct GaussianMoments {
  std::vector<double> mean;
  std::vector<double> covariance;  // row-major d x d
  int dim() const { return static_cast<int>(mean.size()); }
};

// Sample mean and unbiased (n-1) covariance of feature rows.
inline GaussianMoments gaussian_moments(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2)
    throw ConfigError("gaussian_moments: needs at least 2 samples");
  size_t n = rows.size(), d = rows[0].size();
  for (const auto& r : rows)
    if (r.size() != d) throw ShapeError("gaussian_moments: ragged feature rows");
  GaussianMoments m;
  m.mean.assign(d, 0.0);
  for (const auto& r : rows)
    for (size_t j = 0; j < d; ++j) m.mean[j] += r[j];
  for (double& x : m.mean) x /= n;
  m.covariance.assign(d * d, 0.0);
  for (const auto& r : rows)
    for (size_t i = 0; i < d; ++i)
      for (size_t j = 0; j < d; ++j)
        m.covariance[i * d + j] += (r[i] - m.mean[i]) * (r[j] - m.mean[j]);
  for (double& x : m.covariance) x /= (n - 1);
  return m;
}

namespace detail {

inline void require_symmetric(const std::vector<double>& a, int d, const char* who) {
  if (a.size() != static_cast<size_t>(d) * d)
    throw ShapeError(std::string(who) + ": covariance is not d x d");
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j)
      if (std::abs(a[i * d + j] - a[j * d + i]) > 1e-10)
        throw NumericError(std::string(who) + ": covariance not symmetric");
}

inline std::vector<double> mat_mul(const std::vector<double>& a,
                                   const std::vector<double>& b, int d) {
  std::vector<double> c(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int k = 0; k < d; ++k) {
      double aik = a[i * d + k];
      if (aik == 0.0) continue;
      for (int j = 0; j < d; ++j) c[i * d + j] += aik * b[k * d + j];
    }
  return c;
}

// Cyclic Jacobi diagonalization of a symmetric matrix. Fine for d <= 64:
// convergence is quadratic and each sweep is O(d^3).
inline void jacobi_eigen(std::vector<double> a, int d, std::vector<double>& evals,
                         std::vector<double>& evecs) {
  evecs.assign(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) evecs[i * d + i] = 1.0;
  double total = 0.0;
  for (double x : a) total += x * x;
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) off += a[p * d + q] * a[p * d + q];
    if (off <= 1e-30 * std::max(total, 1e-300)) break;
    for (int p = 0; p < d; ++p)
      for (int q = p + 1; q < d; ++q) {
        double apq = a[p * d + q];
        if (apq == 0.0) continue;
        double theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
        double t = (theta >= 0.0 ? 1.0 : -1.0) /
                   (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        double c = 1.0 / std::sqrt(t * t + 1.0), s = t * c;
        for (int k = 0; k < d; ++k) {
          if (k != p && k != q) {
            double akp = a[k * d + p], akq = a[k * d + q];
            a[k * d + p] = a[p * d + k] = c * akp - s * akq;
            a[k * d + q] = a[q * d + k] = s * akp + c * akq;
          }
          double vkp = evecs[k * d + p], vkq = evecs[k * d + q];
          evecs[k * d + p] = c * vkp - s * vkq;
          evecs[k * d + q] = s * vkp + c * vkq;
        }
        a[p * d + p] -= t * apq;
        a[q * d + q] += t * apq;
        a[p * d + q] = a[q * d + p] = 0.0;
      }
  }
  evals.resize(d);
  for (int i = 0; i < d; ++i) evals[i] = a[i * d + i];
}

// V f(L) V^T for a symmetric PSD matrix; eigenvalues below -1e-10 mean the
// input was not a covariance and are a hard failure, tiny negatives are
// rounding and clamp to zero.
template <class F>
inline std::vector<double> psd_transform(const std::vector<double>& a, int d, F f,
                                         const char* who) {
  std::vector<double> evals, v;
  jacobi_eigen(a, d, evals, v);
  for (double& l : evals) {
    if (l < -1e-10)
      throw NumericError(std::string(who) + ": matrix not PSD (eigenvalue " +
                         std::to_string(l) + ")");
    l = f(std::max(l, 0.0));
  }
  std::vector<double> out(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += v[i * d + k] * evals[k] * v[j * d + k];
      out[i * d + j] = s;
    }
  return out;
}

}  // namespace detail

// Squared 2-Wasserstein distance between Gaussians:
// ||mu_p - mu_q||^2 + tr(Sp + Sq - 2 (Sp^1/2 Sq Sp^1/2)^1/2).
inline double frechet_gaussian(const GaussianMoments& p, const GaussianMoments& q) {
  int d = p.dim();
  if (q.dim() != d) throw ShapeError("frechet_gaussian: dimension mismatch");
  if (d < 1 || d > 64)
    throw ConfigError("frechet_gaussian: dimension must be in [1,64]");
  detail::require_symmetric(p.covariance, d, "frechet_gaussian");
  detail::require_symmetric(q.covariance, d, "frechet_gaussian");

  auto sqrt_f = [](double x) { return std::sqrt(x); };
  std::vector<double> sp =
      detail::psd_transform(p.covariance, d, sqrt_f, "frechet_gaussian");
  std::vector<double> inner =
      detail::mat_mul(detail::mat_mul(sp, q.covariance, d), sp, d);
  // Symmetrize away the rounding skew before the second eigensolve.
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) {
      double m = 0.5 * (inner[i * d + j] + inner[j * d + i]);
      inner[i * d + j] = inner[j * d + i] = m;
    }
  std::vector<double> evals, v;
  detail::jacobi_eigen(inner, d, evals, v);
  double tr_sqrt = 0.0;
  for (double l : evals) {
    if (l < -1e-10)
      throw NumericError("frechet_gaussian: cross term not PSD (eigenvalue " +
                         std::to_string(l) + ")");
    tr_sqrt += std::sqrt(std::max(l, 0.0));
  }
  double dist = 0.0;
  for (int i = 0; i < d; ++i) {
    double dm = p.mean[i] - q.mean[i];
    dist += dm * dm;
    dist += p.covariance[i * d + i] + q.covariance[i * d + i];
  }
  dist -= 2.0 * tr_sqrt;
  return std::max(dist, 0.0);
}

}  // namespace acpo
