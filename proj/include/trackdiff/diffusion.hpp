#pragma once

// Gaussian forward process, epsilon-prediction loss, ancestral sampling and
// classifier-free guidance. Step indices are 0-based: step t of an n-step
// schedule uses beta[t], and step 0 is the final, noise-free update.

#include <cmath>
#include <string>
#include <vector>

#include "trackdiff/rng.hpp"
#include "trackdiff/tensor.hpp"

namespace trackdiff {

inline constexpr std::size_t kTrainSteps = 1000;
inline constexpr std::size_t kSampleSteps = 50;
inline constexpr double kBetaStart = 1e-4;
inline constexpr double kBetaEnd = 0.02;

struct NoiseSchedule {
  std::vector<double> beta;
  std::vector<double> alpha;
  std::vector<double> alpha_bar;
  /// Index into the training schedule that each step corresponds to; the
  /// model is always conditioned on these.
  std::vector<std::size_t> timestep;

  std::size_t n_steps() const { return beta.size(); }
};

namespace detail {

inline NoiseSchedule schedule_from_betas(std::vector<double> beta, std::vector<std::size_t> timestep) {
  NoiseSchedule s;
  s.beta = std::move(beta);
  s.timestep = std::move(timestep);
  double acc = 1.0;
  for (double b : s.beta) {
    s.alpha.push_back(1.0 - b);
    acc *= 1.0 - b;
    s.alpha_bar.push_back(acc);
  }
  return s;
}

}  // namespace detail

inline NoiseSchedule make_schedule(std::size_t n_steps = kTrainSteps, double beta_start = kBetaStart,
                                   double beta_end = kBetaEnd) {
  if (n_steps == 0) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0)) {
    throw ConfigError("noise schedule needs 0 < beta_start <= beta_end < 1, got " + std::to_string(beta_start) +
                      ", " + std::to_string(beta_end));
  }
  std::vector<double> beta(n_steps);
  std::vector<std::size_t> ts(n_steps);
  for (std::size_t t = 0; t < n_steps; ++t) {
    const double u = n_steps == 1 ? 0.0 : static_cast<double>(t) / static_cast<double>(n_steps - 1);
    beta[t] = beta_start + u * (beta_end - beta_start);
    ts[t] = t;
  }
  return detail::schedule_from_betas(std::move(beta), std::move(ts));
}

/// Strided sub-schedule of `n` steps spanning the first to the last training
/// step, with betas chosen so the kept alpha_bar values are unchanged.
inline NoiseSchedule respace(const NoiseSchedule& base, std::size_t n) {
  const auto T = base.n_steps();
  if (n == 0 || n > T) throw ConfigError("respace: need 1 <= steps <= " + std::to_string(T));
  std::vector<std::size_t> ts(n);
  for (std::size_t k = 0; k < n; ++k) {
    ts[k] = n == 1 ? T - 1
                   : static_cast<std::size_t>(std::llround(static_cast<double>(k) * static_cast<double>(T - 1) /
                                                           static_cast<double>(n - 1)));
  }
  std::vector<double> beta(n);
  double prev = 1.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double ab = base.alpha_bar[ts[k]];
    beta[k] = 1.0 - ab / prev;
    prev = ab;
  }
  std::vector<std::size_t> orig(n);
  for (std::size_t k = 0; k < n; ++k) orig[k] = base.timestep[ts[k]];
  auto s = detail::schedule_from_betas(std::move(beta), std::move(orig));
  s.alpha_bar.clear();
  for (std::size_t k = 0; k < n; ++k) s.alpha_bar.push_back(base.alpha_bar[ts[k]]);
  return s;
}

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
inline Tensor q_sample(const Tensor& z0, std::size_t t, const Tensor& eps, const NoiseSchedule& s) {
  if (t >= s.n_steps()) {
    throw IndexError("q_sample: step " + std::to_string(t) + " outside schedule of " + std::to_string(s.n_steps()));
  }
  if (z0.shape() != eps.shape()) {
    throw DimensionError("q_sample: noise " + shape_str(eps.shape()) + " vs latent " + shape_str(z0.shape()));
  }
  const double a = std::sqrt(s.alpha_bar[t]), b = std::sqrt(1.0 - s.alpha_bar[t]);
  return add(scale(z0, a), scale(eps, b));
}

/// Draws t uniformly and eps ~ N(0, I) from `rng`, then returns
/// mean((eps - model(z_t, t))^2). `model` receives the training-schedule step.
template <class Model>
Tensor training_loss(Model&& model, const Tensor& z0, const NoiseSchedule& s, Rng& rng) {
  const auto t = static_cast<std::size_t>(rng.below(s.n_steps()));
  Tensor eps = Tensor::randn(z0.shape(), rng);
  Tensor zt = q_sample(z0, t, eps, s);
  Tensor eps_hat = model(zt, s.timestep[t]);
  return mse(eps_hat, eps);
}

/// Ancestral update z_t -> z_{t-1}; noise sqrt(beta_t) * N(0, I) is added
/// for every step except step 0.
inline Tensor ddpm_step(const Tensor& zt, std::size_t t, const Tensor& eps_hat, const NoiseSchedule& s, Rng& rng) {
  if (t >= s.n_steps()) throw IndexError("ddpm_step: step " + std::to_string(t) + " outside schedule");
  if (zt.shape() != eps_hat.shape()) {
    throw DimensionError("ddpm_step: prediction " + shape_str(eps_hat.shape()) + " vs latent " + shape_str(zt.shape()));
  }
  const double coef = s.beta[t] / std::sqrt(1.0 - s.alpha_bar[t]);
  const double inv = 1.0 / std::sqrt(s.alpha[t]);
  const double sigma = std::sqrt(s.beta[t]);
  std::vector<double> out(zt.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (zt[i] - coef * eps_hat[i]) * inv;
    if (t > 0) out[i] += sigma * rng.normal();
  }
  return Tensor::from(zt.shape(), std::move(out));
}

/// eps_uncond + scale (eps_cond - eps_uncond); exact at scale 0 and 1.
inline Tensor cfg_combine(const Tensor& eps_cond, const Tensor& eps_uncond, double scale) {
  if (eps_cond.shape() != eps_uncond.shape()) {
    throw DimensionError("cfg_combine: " + shape_str(eps_cond.shape()) + " vs " + shape_str(eps_uncond.shape()));
  }
  if (scale == 1.0) return eps_cond.detach();
  if (scale == 0.0) return eps_uncond.detach();
  std::vector<double> out(eps_cond.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = eps_uncond[i] + scale * (eps_cond[i] - eps_uncond[i]);
  return Tensor::from(eps_cond.shape(), std::move(out));
}

}  // namespace trackdiff
