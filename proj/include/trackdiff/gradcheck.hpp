#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <vector>

#include "trackdiff/tensor.hpp"

namespace trackdiff {

/// Relative discrepancy used by every gradient check:
/// |analytic - fd| / max(1, |fd|).
inline double grad_rel_error(double analytic, double fd) {
  return std::abs(analytic - fd) / std::max(1.0, std::abs(fd));
}

/// Central finite-difference check of d f / d x for a scalar-valued f.
/// Returns the maximum relative error over all coordinates of x.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double h = 1e-5) {
  Tensor leaf = Tensor::parameter(x.shape(), std::vector<double>(x.values().begin(), x.values().end()));
  Tensor y = f(leaf);
  if (y.size() != 1) {
    throw ContractError("grad_check: function must return a scalar, got shape " + shape_str(y.shape()));
  }
  y.backward();
  std::vector<double> analytic(leaf.size(), 0.0);
  if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());

  NoGradGuard no_grad;
  double worst = 0.0;
  std::vector<double> probe(x.values().begin(), x.values().end());
  for (std::size_t j = 0; j < probe.size(); ++j) {
    const double orig = probe[j];
    probe[j] = orig + h;
    const double up = f(Tensor::from(x.shape(), probe)).item();
    probe[j] = orig - h;
    const double down = f(Tensor::from(x.shape(), probe)).item();
    probe[j] = orig;
    worst = std::max(worst, grad_rel_error(analytic[j], (up - down) / (2.0 * h)));
  }
  return worst;
}

struct ParamCheckOptions {
  double h = 1e-5;
  /// 0 checks every coordinate; otherwise a seeded random subset per tensor.
  std::size_t max_coords_per_tensor = 0;
  std::uint64_t seed = 0;
};

/// Finite-difference check of a scalar closure with respect to leaf tensors
/// it reads. Leaves are perturbed between evaluations and restored exactly.
inline double grad_check_params(const std::function<Tensor()>& f, std::vector<Tensor> params,
                                const ParamCheckOptions& opt = {}) {
  for (auto& p : params) p.zero_grad();
  Tensor y = f();
  if (y.size() != 1) {
    throw ContractError("grad_check: function must return a scalar, got shape " + shape_str(y.shape()));
  }
  y.backward();

  Rng rng(opt.seed);
  NoGradGuard no_grad;
  double worst = 0.0;
  for (auto& p : params) {
    std::vector<double> analytic(p.size(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    std::vector<std::size_t> coords;
    if (opt.max_coords_per_tensor == 0 || opt.max_coords_per_tensor >= p.size()) {
      coords.resize(p.size());
      std::iota(coords.begin(), coords.end(), std::size_t{0});
    } else {
      for (std::size_t i = 0; i < opt.max_coords_per_tensor; ++i) coords.push_back(rng.below(p.size()));
    }
    auto vals = p.mutable_values();
    for (auto j : coords) {
      const double orig = vals[j];
      vals[j] = orig + opt.h;
      const double up = f().item();
      vals[j] = orig - opt.h;
      const double down = f().item();
      vals[j] = orig;
      worst = std::max(worst, grad_rel_error(analytic[j], (up - down) / (2.0 * opt.h)));
    }
    p.zero_grad();
  }
  return worst;
}

}  // namespace trackdiff
