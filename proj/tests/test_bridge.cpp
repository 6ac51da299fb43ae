#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bridgekit/bridge.hpp"

using namespace bridgekit;
using ad::Tensor;

namespace {

// Forward pinned-bridge simulation: z_{s+1} | z_s, zT for the zero-drift
// discrete bridge. Independent of the closed-form posterior code path.
double simulate_pinned_path(const BridgeSchedule& s, double z0, double zT, int t_stop, Rng& rng) {
  double z = z0;
  for (int t = 1; t <= t_stop; ++t) {
    const double remain_prev = s.sigma2_total() - s.sigma2[static_cast<std::size_t>(t - 1)];
    const double remain = s.sigma2_total() - s.sigma2[static_cast<std::size_t>(t)];
    const double beta = s.beta[static_cast<std::size_t>(t)];
    const double mean = z + (beta / remain_prev) * (zT - z);
    const double var = beta * remain / remain_prev;
    z = mean + std::sqrt(std::max(0.0, var)) * rng.normal();
  }
  return z;
}

}  // namespace

TEST_CASE("schedule invariants: symmetry, telescoping, boundaries") {
  const BridgeSchedule s = make_schedule(50, 0.04);
  CHECK(s.sigma2[0] == 0.0);
  CHECK(s.sigma2_b[50] == 0.0);
  for (int t = 0; t <= 50; ++t)
    CHECK(s.sigma2[t] + s.sigma2_b[t] == doctest::Approx(s.sigma2_total()).epsilon(1e-12));
  for (int t = 1; t <= 50; ++t) CHECK(s.beta[t] == doctest::Approx(s.beta[51 - t]));
  CHECK(s.beta[1] == doctest::Approx(s.beta[50]));
  // desk default lands near unit total std
  CHECK(std::sqrt(s.sigma2_total()) == doctest::Approx(1.0).epsilon(0.05));

  CHECK_THROWS_AS(make_schedule(1, 0.04), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, 0.0), std::invalid_argument);
  CHECK_THROWS_AS(make_schedule(10, -1.0), std::invalid_argument);
}

TEST_CASE("degenerate constant schedule: hand-summed cumulative variances") {
  const BridgeSchedule s = make_schedule(4, 0.25, 0.25);
  for (int t = 1; t <= 4; ++t) CHECK(s.beta[t] == doctest::Approx(0.25));
  CHECK(s.sigma2[2] == doctest::Approx(0.5));
  CHECK(s.sigma2_b[2] == doctest::Approx(0.5));
  CHECK(s.sigma2_total() == doctest::Approx(1.0));
}

TEST_CASE("posterior boundaries pin the endpoints exactly") {
  const BridgeSchedule s = make_schedule(4, 0.25, 0.25);
  auto z0 = Tensor<double>::from_data({3}, {1.0, -2.0, 0.5});
  auto zT = Tensor<double>::from_data({3}, {-1.0, 4.0, 2.5});

  auto [mu0, var0] = posterior_params(z0, zT, 0, s);
  CHECK(var0 == 0.0);
  for (int i = 0; i < 3; ++i) CHECK(mu0.array()[i] == z0.array()[i]);

  auto [muT, varT] = posterior_params(z0, zT, 4, s);
  CHECK(varT == 0.0);
  for (int i = 0; i < 3; ++i) CHECK(muT.array()[i] == zT.array()[i]);

  // symmetry point: equal accumulated variances -> midpoint, half variance
  auto [mu2, var2] = posterior_params(z0, zT, 2, s);
  for (int i = 0; i < 3; ++i) CHECK(mu2.array()[i] == doctest::Approx((z0.array()[i] + zT.array()[i]) / 2));
  CHECK(var2 == doctest::Approx(s.sigma2[2] / 2));

  CHECK_THROWS_AS(posterior_params(z0, zT, 5, s), std::invalid_argument);
}

TEST_CASE("posterior coefficients are convex and the variance vanishes only at the ends") {
  const BridgeSchedule s = make_schedule(50, 0.04);
  for (int t = 0; t <= 50; ++t) {
    const PosteriorCoeffs c = posterior_coeffs(s, t);
    CHECK(c.w0 + c.wT == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(c.w0 >= 0.0);
    CHECK(c.wT >= 0.0);
    CHECK(c.var >= 0.0);
    if (t > 0 && t < 50) CHECK(c.var > 0.0);
  }
  CHECK(posterior_coeffs(s, 0).var == 0.0);
  CHECK(posterior_coeffs(s, 50).var == 0.0);
}

TEST_CASE("scalar posterior example verified against a pinned Brownian-bridge Monte Carlo") {
  const BridgeSchedule s = make_schedule(4, 0.25, 0.25);
  const PosteriorCoeffs c = posterior_coeffs(s, 1);
  // z0=0, zT=1: mu = 0.75*0 + 0.25*1, Sigma = 0.25*0.75/1.0
  CHECK(c.w0 == doctest::Approx(0.75));
  CHECK(c.wT == doctest::Approx(0.25));
  CHECK(c.var == doctest::Approx(0.1875));

  const int n_paths = 1000000;
  Rng rng(42);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n_paths; ++i) {
    const double z = simulate_pinned_path(s, 0.0, 1.0, 1, rng);
    sum += z;
    sum_sq += z * z;
  }
  const double mean = sum / n_paths;
  const double var = sum_sq / n_paths - mean * mean;
  const double se_mean = std::sqrt(0.1875 / n_paths);
  const double se_var = 0.1875 * std::sqrt(2.0 / (n_paths - 1));
  CHECK(std::fabs(mean - 0.25) < 3 * se_mean);
  CHECK(std::fabs(var - 0.1875) < 3 * se_var);
}

TEST_CASE("sample_zt: pinned at t=0, deterministic under a seed, moments match") {
  const BridgeSchedule s = make_schedule(8, 0.1, 0.1);
  auto z0 = Tensor<double>::from_data({2}, {0.2, -1.0});
  auto zT = Tensor<double>::from_data({2}, {1.2, 3.0});

  Rng rng0(1);
  auto at0 = sample_zt(z0, zT, 0, s, rng0);
  CHECK(at0.array()[0] == z0.array()[0]);
  CHECK(at0.array()[1] == z0.array()[1]);

  Rng ra(5), rb(5);
  auto sa = sample_zt(z0, zT, 3, s, ra);
  auto sb = sample_zt(z0, zT, 3, s, rb);
  for (int i = 0; i < 2; ++i) CHECK(sa.array()[i] == sb.array()[i]);

  const int draws = 100000;
  const PosteriorCoeffs c = posterior_coeffs(s, 3);
  const double expect_mean = c.w0 * 0.2 + c.wT * 1.2;
  Rng rng(7);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const double v = sample_zt(z0, zT, 3, s, rng).array()[0];
    sum += v;
    sum_sq += v * v;
  }
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  CHECK(std::fabs(mean - expect_mean) < 3 * std::sqrt(c.var / draws));
  CHECK(std::fabs(var - c.var) < 3 * c.var * std::sqrt(2.0 / (draws - 1)));
}

TEST_CASE("eps_target: zeros, arithmetic, and the exact recovery identity") {
  const BridgeSchedule s = make_schedule(4, 0.25, 0.25);
  auto z0 = Tensor<double>::from_data({1}, {0.0});

  auto zero_target = eps_target(z0, z0, 2, s);
  CHECK(zero_target.array()[0] == 0.0);

  // sigma_1 = 0.5: (0.5 - 0)/0.5 = 1
  auto z_t = Tensor<double>::from_data({1}, {0.5});
  CHECK(eps_target(z_t, z0, 1, s).array()[0] == doctest::Approx(1.0));

  CHECK_THROWS_AS(eps_target(z_t, z0, 0, s), std::invalid_argument);

  Rng rng(3);
  auto za = Tensor<double>::randn({16}, rng);
  auto zb = Tensor<double>::randn({16}, rng);
  for (int t = 1; t <= 4; ++t) {
    auto target = eps_target(za, zb, t, s);
    auto recovered = predict_z0(za, target, t, s);
    for (int i = 0; i < 16; ++i) CHECK(recovered.array()[i] == doctest::Approx(zb.array()[i]).epsilon(1e-12));
  }
}

TEST_CASE("stochasticity injection: identity at zero scale, calibrated variance") {
  const auto zT = Tensor<double>::from_data({2}, {1.0, -2.0});
  Rng rng(11);
  auto same = inject_stochasticity(zT, 0.0, rng);
  CHECK(same.array()[0] == 1.0);
  CHECK(same.array()[1] == -2.0);
  CHECK_THROWS_AS(inject_stochasticity(zT, -0.1, rng), std::invalid_argument);

  const int draws = 100000;
  const double scale = 0.7;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    const double diff = inject_stochasticity(zT, scale, rng).array()[0] - 1.0;
    sum += diff;
    sum_sq += diff * diff;
  }
  const double var = sum_sq / draws - (sum / draws) * (sum / draws);
  CHECK(std::fabs(var - scale * scale) < 3 * scale * scale * std::sqrt(2.0 / (draws - 1)));
}

TEST_CASE("predict_z0 special cases") {
  const BridgeSchedule s = make_schedule(4, 0.25, 0.25);
  Rng rng(4);
  auto z_t = Tensor<double>::randn({8}, rng);
  auto zeros = Tensor<double>::zeros({8});
  auto same = predict_z0(z_t, zeros, 2, s);
  for (int i = 0; i < 8; ++i) CHECK(same.array()[i] == z_t.array()[i]);
  CHECK_THROWS_AS(predict_z0(z_t, zeros, 0, s), std::invalid_argument);
}

TEST_CASE("reverse_step: endpoint behavior, ordering checks, marginal consistency") {
  const BridgeSchedule s = make_schedule(8, 0.1, 0.1);
  Rng rng(6);
  auto z0 = Tensor<double>::from_data({1}, {-0.4});
  auto zT = Tensor<double>::from_data({1}, {1.6});

  auto z_t = sample_zt(z0, zT, 5, s, rng);
  auto back = reverse_step(z_t, z0, 5, 0, s, rng);
  CHECK(back.array()[0] == z0.array()[0]);

  CHECK_THROWS_AS(reverse_step(z_t, z0, 3, 3, s, rng), std::invalid_argument);
  CHECK_THROWS_AS(reverse_step(z_t, z0, 3, 5, s, rng), std::invalid_argument);

  // marginal check: z_5 ~ q(.|z0,zT), then one reverse jump to t=2 with the
  // oracle zhat0=z0 must reproduce the closed-form q(z_2|z0,zT) moments
  const int draws = 100000;
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < draws; ++i) {
    auto z5 = sample_zt(z0, zT, 5, s, rng);
    auto z2 = reverse_step(z5, z0, 5, 2, s, rng);
    const double v = z2.array()[0];
    sum += v;
    sum_sq += v * v;
  }
  const PosteriorCoeffs c = posterior_coeffs(s, 2);
  const double expect_mean = c.w0 * z0.array()[0] + c.wT * zT.array()[0];
  const double mean = sum / draws;
  const double var = sum_sq / draws - mean * mean;
  CHECK(std::fabs(mean - expect_mean) < 3 * std::sqrt(c.var / draws) + 1e-12);
  CHECK(std::fabs(var - c.var) < 3 * c.var * std::sqrt(2.0 / (draws - 1)));
}

TEST_CASE("two-ways agreement: sequential pinned increments match the closed form") {
  const BridgeSchedule s = make_schedule(6, 0.2, 0.05);
  const double z0 = 0.3, zT = -1.7;
  const int t_probe = 4;
  const int n_paths = 200000;
  Rng rng(13);
  double sum = 0.0, sum_sq = 0.0;
  for (int i = 0; i < n_paths; ++i) {
    const double z = simulate_pinned_path(s, z0, zT, t_probe, rng);
    sum += z;
    sum_sq += z * z;
  }
  const PosteriorCoeffs c = posterior_coeffs(s, t_probe);
  const double expect_mean = c.w0 * z0 + c.wT * zT;
  const double mean = sum / n_paths;
  const double var = sum_sq / n_paths - mean * mean;
  CHECK(std::fabs(mean - expect_mean) < 3 * std::sqrt(c.var / n_paths));
  CHECK(std::fabs(var - c.var) < 3 * c.var * std::sqrt(2.0 / (n_paths - 1)));
}

TEST_CASE("timestep selection is variance-uniform and strictly decreasing") {
  const BridgeSchedule s = make_schedule(50, 0.04);
  const auto one = select_timesteps(s, 1);
  REQUIRE(one.size() == 2);
  CHECK(one[0] == 50);
  CHECK(one[1] == 0);

  const auto three = select_timesteps(s, 3);
  REQUIRE(three.size() == 4);
  CHECK(three.front() == 50);
  CHECK(three.back() == 0);
  for (std::size_t i = 1; i < three.size(); ++i) CHECK(three[i] < three[i - 1]);
  // interior points sit near the requested variance fractions
  for (std::size_t i = 1; i + 1 < three.size(); ++i) {
    const double target = s.sigma2_total() * static_cast<double>(three.size() - 1 - i) / 3.0;
    CHECK(std::fabs(s.sigma2[static_cast<std::size_t>(three[i])] - target) < s.sigma2_total() * 0.08);
  }
  CHECK_THROWS_AS(select_timesteps(s, 0), std::invalid_argument);
  CHECK_THROWS_AS(select_timesteps(s, 51), std::invalid_argument);
}

TEST_CASE("oracle denoiser: loss is zero and the sampler reproduces z0") {
  const BridgeSchedule s = make_schedule(12, 0.15, 0.05);
  Rng rng(21);
  auto z0 = Tensor<double>::randn({2, 2, 2}, rng);
  auto zT = Tensor<double>::randn({2, 2, 2}, rng);

  DenoiseFn<double> oracle = [&](const Tensor<double>& z_t, int t) { return eps_target(z_t, z0, t, s); };

  // oracle loss is zero to round-off
  auto z_t = sample_zt(z0, zT, 6, s, rng);
  auto loss = ad::mse(oracle(z_t, 6), eps_target(z_t, z0, 6, s));
  CHECK(std::fabs(loss.item()) < 1e-14);

  // noise-free reversal recovers z0 exactly for any number of steps
  for (int n_steps : {1, 3, 12}) {
    Rng r(33);
    auto out = sample_completion(oracle, zT, n_steps, s, r, /*deterministic=*/true);
    for (int i = 0; i < 8; ++i) CHECK(out.array()[i] == doctest::Approx(z0.array()[i]).epsilon(1e-10));
  }

  // n_steps=1 is exactly predict_z0 at T
  Rng r1(33);
  auto single = sample_completion(oracle, zT, 1, s, r1, true);
  auto direct = predict_z0(zT, oracle(zT, s.T), s.T, s);
  for (int i = 0; i < 8; ++i) CHECK(single.array()[i] == direct.array()[i]);

  // pure function of (zT, seed): stochastic runs repeat under the same seed
  Rng ra(77), rb(77);
  auto sa = sample_completion(oracle, zT, 3, s, ra, false);
  auto sb = sample_completion(oracle, zT, 3, s, rb, false);
  for (int i = 0; i < 8; ++i) CHECK(sa.array()[i] == sb.array()[i]);
}

TEST_CASE("gradients flow through the bridge ops into the endpoints") {
  // reparameterized sampling keeps zT on the tape: the eps-loss gradient
  // reaches zT both through z_t and through the target
  const BridgeSchedule s = make_schedule(6, 0.2, 0.05);
  auto z0 = Tensor<double>::from_data({2}, {0.5, -0.5});
  auto zT = Tensor<double>::from_data({2}, {1.0, 1.0});
  zT.set_requires_grad(true);
  Rng rng(9);
  auto z_t = sample_zt(z0, zT, 3, s, rng);
  auto target = eps_target(z_t, z0, 3, s);
  auto loss = ad::mse(target, Tensor<double>::zeros({2}));
  loss.backward();
  double norm = 0.0;
  for (int i = 0; i < 2; ++i) norm += std::fabs(zT.grad()[i]);
  CHECK(norm > 0.0);
}
