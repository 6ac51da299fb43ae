#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "bridgekit/rng.hpp"
#include "bridgekit/tensor.hpp"

namespace bridgekit {

// Discrete bridge schedule with zero drift: beta[t] are per-step noise
// increments (1-based, beta[0] unused), sigma2[t] the variance accumulated
// from the 0 end, sigma2_b[t] the variance accumulated from the T end.
// Invariants: sigma2[0]=0, sigma2_b[T]=0, sigma2[t]+sigma2_b[t]=sigma2[T].
struct BridgeSchedule {
  int T = 0;
  std::vector<double> beta;      // size T+1
  std::vector<double> sigma2;    // size T+1
  std::vector<double> sigma2_b;  // size T+1

  double sigma(int t) const { return std::sqrt(sigma2[static_cast<std::size_t>(t)]); }
  double sigma2_total() const { return sigma2[static_cast<std::size_t>(T)]; }
};

// Symmetric triangular schedule: beta rises linearly from beta_min to
// beta_max at mid-schedule, then mirrors down (beta_t == beta_{T+1-t}).
// beta_min defaults to beta_max/100.
inline BridgeSchedule make_schedule(int T, double beta_max, double beta_min = -1.0) {
  if (T < 2) throw std::invalid_argument("make_schedule: T must be >= 2");
  if (beta_max <= 0.0) throw std::invalid_argument("make_schedule: beta_max must be positive");
  if (beta_min < 0.0) beta_min = beta_max * 0.01;
  if (beta_min <= 0.0 || beta_min > beta_max)
    throw std::invalid_argument("make_schedule: beta_min must be in (0, beta_max]");

  BridgeSchedule s;
  s.T = T;
  s.beta.assign(static_cast<std::size_t>(T) + 1, 0.0);
  const int half = (T + 1) / 2;
  for (int t = 1; t <= T; ++t) {
    const int u = std::min(t, T + 1 - t);  // 1..half
    const double frac = (half > 1) ? static_cast<double>(u - 1) / static_cast<double>(half - 1) : 1.0;
    s.beta[static_cast<std::size_t>(t)] = beta_min + (beta_max - beta_min) * frac;
  }
  s.sigma2.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 1; t <= T; ++t)
    s.sigma2[static_cast<std::size_t>(t)] = s.sigma2[static_cast<std::size_t>(t) - 1] + s.beta[static_cast<std::size_t>(t)];
  s.sigma2_b.assign(static_cast<std::size_t>(T) + 1, 0.0);
  for (int t = 0; t <= T; ++t)
    s.sigma2_b[static_cast<std::size_t>(t)] = s.sigma2[static_cast<std::size_t>(T)] - s.sigma2[static_cast<std::size_t>(t)];
  return s;
}

struct PosteriorCoeffs {
  double w0 = 0.0;   // weight on z0
  double wT = 0.0;   // weight on zT
  double var = 0.0;  // isotropic bridge variance
};

// Gaussian posterior of z_t pinned at (z0, zT):
//   mu_t   = sigma2_b/(sigma2_b+sigma2) z0 + sigma2/(sigma2_b+sigma2) zT
//   Sigma_t = sigma2 sigma2_b / (sigma2 + sigma2_b)
inline PosteriorCoeffs posterior_coeffs(const BridgeSchedule& s, int t) {
  if (t < 0 || t > s.T) throw std::invalid_argument("posterior_coeffs: t out of range");
  const double s2 = s.sigma2[static_cast<std::size_t>(t)];
  const double s2b = s.sigma2_b[static_cast<std::size_t>(t)];
  const double total = s2 + s2b;
  if (total <= 0.0) throw std::invalid_argument("posterior_coeffs: degenerate schedule (zero total variance)");
  return {s2b / total, s2 / total, s2 * s2b / total};
}

namespace detail_bridge {

template <typename S>
ad::Tensor<S> noise_like(const ad::Tensor<S>& ref, Rng& rng) {
  return ad::Tensor<S>::randn(ref.shape(), rng);
}

}  // namespace detail_bridge

// mu_t as a tape-connected tensor plus the scalar bridge variance. Gradients
// flow into z0/zT through the convex combination.
template <typename S>
std::pair<ad::Tensor<S>, double> posterior_params(const ad::Tensor<S>& z0, const ad::Tensor<S>& zT, int t,
                                                  const BridgeSchedule& sched) {
  ad::detail::check_same_shape(z0.shape(), zT.shape(), "posterior_params");
  const PosteriorCoeffs c = posterior_coeffs(sched, t);
  ad::Tensor<S> mu = ad::add(ad::scale(z0, c.w0), ad::scale(zT, c.wT));
  return {mu, c.var};
}

// z_t = mu_t + sqrt(Sigma_t) eps with eps ~ N(0, I); reparameterized, so the
// draw stays differentiable w.r.t. the endpoints.
template <typename S>
ad::Tensor<S> sample_zt(const ad::Tensor<S>& z0, const ad::Tensor<S>& zT, int t, const BridgeSchedule& sched,
                        Rng& rng) {
  auto [mu, var] = posterior_params(z0, zT, t, sched);
  if (var == 0.0) return mu;
  ad::Tensor<S> eps = detail_bridge::noise_like(z0, rng);
  return ad::add(mu, ad::scale(eps, std::sqrt(var)));
}

// The regression target (z_t - z0) / sigma_t.
template <typename S>
ad::Tensor<S> eps_target(const ad::Tensor<S>& z_t, const ad::Tensor<S>& z0, int t, const BridgeSchedule& sched) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("eps_target: t must be in [1, T]");
  const double sig = sched.sigma(t);
  return ad::scale(ad::sub(z_t, z0), 1.0 / sig);
}

// zT + scale * eps: hedges uncertainty of the incomplete-shape endpoint
// before the transport process is constructed.
template <typename S>
ad::Tensor<S> inject_stochasticity(const ad::Tensor<S>& zT, double scale, Rng& rng) {
  if (scale < 0.0) throw std::invalid_argument("inject_stochasticity: scale must be >= 0");
  if (scale == 0.0) return zT;
  ad::Tensor<S> eps = detail_bridge::noise_like(zT, rng);
  return ad::add(zT, ad::scale(eps, scale));
}

// zhat0 = z_t - sigma_t * eps_hat (inverse of the target definition).
template <typename S>
ad::Tensor<S> predict_z0(const ad::Tensor<S>& z_t, const ad::Tensor<S>& eps_hat, int t,
                         const BridgeSchedule& sched) {
  if (t < 1 || t > sched.T) throw std::invalid_argument("predict_z0: t must be in [1, T]");
  return ad::sub(z_t, ad::scale(eps_hat, sched.sigma(t)));
}

// One reverse jump t_from -> t_to: the bridge posterior pinned between zhat0
// (at time 0) and the current iterate (at t_from), with the schedule
// restricted to [0, t_from]. sigma2 of the gap (a -> b) is sigma2[b]-sigma2[a].
// t_to == 0 returns zhat0 deterministically.
template <typename S>
ad::Tensor<S> reverse_step(const ad::Tensor<S>& z_t, const ad::Tensor<S>& z0_hat, int t_from, int t_to,
                           const BridgeSchedule& sched, Rng& rng, bool noise_free = false) {
  if (!(0 <= t_to && t_to < t_from && t_from <= sched.T))
    throw std::invalid_argument("reverse_step: need 0 <= t_to < t_from <= T");
  if (t_to == 0) return z0_hat;
  const double s2_lo = sched.sigma2[static_cast<std::size_t>(t_to)];
  const double s2_gap = sched.sigma2[static_cast<std::size_t>(t_from)] - s2_lo;
  const double total = s2_lo + s2_gap;
  const double w0 = s2_gap / total;
  const double wt = s2_lo / total;
  const double var = s2_lo * s2_gap / total;
  ad::Tensor<S> mu = ad::add(ad::scale(z0_hat, w0), ad::scale(z_t, wt));
  if (noise_free || var == 0.0) return mu;
  ad::Tensor<S> eps = detail_bridge::noise_like(z_t, rng);
  return ad::add(mu, ad::scale(eps, std::sqrt(var)));
}

// Timesteps for few-step inference, uniformly spaced in cumulative variance
// sigma_t^2, from T down to 0 inclusive (n_steps+1 entries, strictly
// decreasing).
inline std::vector<int> select_timesteps(const BridgeSchedule& sched, int n_steps) {
  if (n_steps < 1 || n_steps > sched.T) throw std::invalid_argument("select_timesteps: n_steps out of range");
  std::vector<int> ts;
  ts.push_back(sched.T);
  for (int k = n_steps - 1; k >= 1; --k) {
    const double target = sched.sigma2_total() * static_cast<double>(k) / static_cast<double>(n_steps);
    int best = 1;
    double best_err = std::numeric_limits<double>::infinity();
    for (int t = 1; t < sched.T; ++t) {
      const double err = std::fabs(sched.sigma2[static_cast<std::size_t>(t)] - target);
      if (err < best_err) {
        best_err = err;
        best = t;
      }
    }
    best = std::min(best, ts.back() - 1);  // enforce strict decrease
    if (best >= 1) ts.push_back(best);     // drop colliding steps near the floor
  }
  ts.push_back(0);
  return ts;
}

template <typename S>
using DenoiseFn = std::function<ad::Tensor<S>(const ad::Tensor<S>& z_t, int t)>;

// Few-step reverse sampler: iterate predict_z0 / reverse_step along the
// variance-uniform timestep ladder; returns the final zhat0. With
// `deterministic` the per-step noise draws are suppressed, making the result
// a pure function of (weights, zT, seed, config).
template <typename S>
ad::Tensor<S> sample_completion(const DenoiseFn<S>& denoiser, const ad::Tensor<S>& zT, int n_steps,
                                const BridgeSchedule& sched, Rng& rng, bool deterministic = false) {
  const std::vector<int> ts = select_timesteps(sched, n_steps);
  ad::Tensor<S> z = zT;
  for (std::size_t i = 0; i + 1 < ts.size(); ++i) {
    const int t_from = ts[i];
    const int t_to = ts[i + 1];
    ad::Tensor<S> eps_hat = denoiser(z, t_from);
    ad::Tensor<S> z0_hat = predict_z0(z, eps_hat, t_from, sched);
    z = reverse_step(z, z0_hat, t_from, t_to, sched, rng, deterministic);
  }
  return z;
}

}  // namespace bridgekit
