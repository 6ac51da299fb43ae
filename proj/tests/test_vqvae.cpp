#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "bridgekit/metrics.hpp"
#include "bridgekit/vqvae.hpp"

using namespace bridgekit;
using ad::Tensor;

namespace {

VqVaeConfig desk_config() {
  VqVaeConfig cfg;
  cfg.grid_dim = 16;
  cfg.latent_dim = 4;
  cfg.latent_channels = 2;
  cfg.codebook_size = 64;
  cfg.base_width = 8;
  cfg.attn_dim = 8;
  cfg.feature_tokens = 16;
  return cfg;
}

std::vector<VoxelGrid> tiny_corpus(int n, int dim = 16) {
  std::vector<VoxelGrid> grids;
  Rng rng(123);
  for (int i = 0; i < n; ++i) {
    for (int attempt = 0;; ++attempt) {
      ShapeSpec spec = random_shape_spec({dim, dim, dim}, rng);
      try {
        grids.push_back(to_tudf(sdf_from_spec(spec, {dim, dim, dim}, 3.0f)));
        break;
      } catch (const std::invalid_argument&) {
        if (attempt > 20) throw;
      }
    }
  }
  return grids;
}

ViewFeatures feats_of(const VoxelGrid& g) {
  PatchDescriptorExtractor ex({4});
  return render_and_aggregate(g, {View::Front, View::Top, View::Left}, ex);
}

}  // namespace

TEST_CASE("quantize: nearest entry, exact-row zero losses, brute-force agreement, idempotence") {
  SUBCASE("codebook {0,1}: token 0.2 snaps to entry 0") {
    Codebook<float> cb;
    cb.entries = Tensor<float>::from_data({2, 1}, {0.0f, 1.0f});
    cb.entries.set_requires_grad(true);
    cb.last_used = {0, 0};
    auto z = Tensor<float>::from_data({1, 1}, {0.2f});
    const VqResult<float> res = quantize(z, cb);
    CHECK(res.indices == std::vector<int>{0});
    CHECK(res.quantized.array()[0] == 0.0f);
  }

  SUBCASE("token equal to an entry: codebook and commitment losses vanish") {
    Codebook<float> cb;
    cb.entries = Tensor<float>::from_data({2, 2}, {0.5f, -0.5f, 2.0f, 1.0f});
    cb.entries.set_requires_grad(true);
    cb.last_used = {0, 0};
    auto z = Tensor<float>::from_data({1, 2}, {2.0f, 1.0f});
    const VqResult<float> res = quantize(z, cb);
    CHECK(res.indices == std::vector<int>{1});
    CHECK(res.codebook_loss.item() == 0.0f);
    CHECK(res.commitment_loss.item() == 0.0f);
  }

  SUBCASE("indices match an exhaustive argmin over K=64 random entries") {
    Rng rng(31);
    Codebook<float> cb = Codebook<float>::make(64, 4, rng);
    auto z = Tensor<float>::randn({50, 4}, rng);
    const VqResult<float> res = quantize(z, cb);
    for (int i = 0; i < 50; ++i) {
      double best = 1e300;
      int best_k = -1;
      for (int k = 0; k < 64; ++k) {
        double d2 = 0;
        for (int c = 0; c < 4; ++c) {
          const double diff = z.array()[i * 4 + c] - cb.entries.array()[k * 4 + c];
          d2 += diff * diff;
        }
        if (d2 < best) {
          best = d2;
          best_k = k;
        }
      }
      CHECK(res.indices[static_cast<std::size_t>(i)] == best_k);
    }

    // idempotence: re-quantizing the quantized tokens returns the same ids
    const VqResult<float> again = quantize(res.quantized, cb);
    CHECK(again.indices == res.indices);
    // quantized tokens are exact codebook rows
    for (int i = 0; i < 50; ++i)
      for (int c = 0; c < 4; ++c)
        CHECK(res.quantized.array()[i * 4 + c] == cb.entries.array()[res.indices[static_cast<std::size_t>(i)] * 4 + c]);
  }

  SUBCASE("empty codebook is an error") {
    Codebook<float> cb;
    cb.entries = Tensor<float>::zeros({0, 2});
    auto z = Tensor<float>::zeros({1, 2});
    CHECK_THROWS_AS(quantize(z, cb), std::invalid_argument);
  }
}

TEST_CASE("straight-through gradient identity on a 2-token toy") {
  // d(loss)/dz through the quantizer equals d(loss)/d(z_q) evaluated at z_q
  Codebook<double> cb;
  cb.entries = Tensor<double>::from_data({3, 1}, {-1.0, 0.0, 1.0});
  cb.last_used = {0, 0, 0};
  auto z = Tensor<double>::from_data({2, 1}, {0.3, -0.8});
  z.set_requires_grad(true);
  const VqResult<double> res = quantize(z, cb);
  auto target = Tensor<double>::from_data({2, 1}, {0.5, 0.5});
  auto loss = ad::mse(res.quantized, target);
  loss.backward();
  // analytic d(loss)/d(z_q) at z_q = [0, -1]
  const double g0 = 2.0 * (0.0 - 0.5) / 2.0;
  const double g1 = 2.0 * (-1.0 - 0.5) / 2.0;
  CHECK(z.grad()[0] == doctest::Approx(g0).epsilon(1e-12));
  CHECK(z.grad()[1] == doctest::Approx(g1).epsilon(1e-12));

  // finite differences on z confirm the straight-through rule: perturbations
  // small enough not to flip the assignment act exactly like moving z_q
  const double h = 1e-4;
  for (int i = 0; i < 2; ++i) {
    const double orig = z.data()[i];
    z.data()[i] = orig + h;
    const double up = ad::mse(quantize(z, cb).quantized, target).item();
    z.data()[i] = orig - h;
    const double down = ad::mse(quantize(z, cb).quantized, target).item();
    z.data()[i] = orig;
    // value is locally constant in z (plateau), so the FD of the ST path is 0;
    // the straight-through estimator intentionally reports the decoder slope
    CHECK(std::fabs((up - down) / (2 * h)) < 1e-12);
  }
}

TEST_CASE("encoders produce the latent contract and share the decoder") {
  const VqVaeConfig cfg = desk_config();
  VqVae<float> model = VqVae<float>::init(cfg, 7);
  const auto grids = tiny_corpus(3);
  const VoxelGrid partial = [&] {
    Rng rng(55);
    ShapeSpec spec = random_shape_spec({16, 16, 16}, rng);
    return simulate_partial_scan(sdf_from_spec(spec, {16, 16, 16}, 3.0f), {CameraDir::PosZ});
  }();

  auto zc = model.encode_complete(grids[0], nullptr, false);
  CHECK(zc.shape() == ad::Shape({2, 4, 4, 4}));
  auto zp = model.encode_partial(partial);
  CHECK(zp.shape() == ad::Shape({2, 4, 4, 4}));

  // the decoder accepts latents from either encoder
  const VoxelGrid from_c = model.decode(zc, 3.0f);
  const VoxelGrid from_p = model.decode(zp, 3.0f);
  CHECK(from_c.dims().nx == 16);
  CHECK(from_p.dims().nx == 16);
  CHECK(from_c.kind() == FieldKind::UDF);

  // decoder output respects [0, truncation] for random latents
  Rng rng(77);
  auto z_rand = Tensor<float>::randn({2, 4, 4, 4}, rng, 3.0);
  const VoxelGrid decoded = model.decode(z_rand, 3.0f);
  for (float v : decoded.values()) {
    CHECK(v >= 0.0f);
    CHECK(v <= 3.0f);
  }

  // different shapes get different latents under a random encoder
  auto za = model.encode_complete(grids[0], nullptr, false);
  auto zb = model.encode_complete(grids[1], nullptr, false);
  auto zc2 = model.encode_complete(grids[2], nullptr, false);
  const auto differs = [](const Tensor<float>& a, const Tensor<float>& b) {
    double d = 0;
    for (std::int64_t i = 0; i < a.size(); ++i) d += std::fabs(a.array()[i] - b.array()[i]);
    return d > 1e-4;
  };
  CHECK(differs(za, zb));
  CHECK(differs(za, zc2));
  CHECK(differs(zb, zc2));

  // wrong input dims rejected
  std::vector<float> small(8, 1.0f);
  const VoxelGrid tiny({2, 2, 2}, 1.0f, 3.0f, FieldKind::UDF, small);
  CHECK_THROWS_AS(model.encode_complete(tiny, nullptr, false), std::invalid_argument);
}

TEST_CASE("depth fusion: zero output projection is the identity, absence of features is an error") {
  const VqVaeConfig cfg = desk_config();
  VqVae<float> model = VqVae<float>::init(cfg, 11);
  const auto grids = tiny_corpus(1);
  const ViewFeatures feats = feats_of(grids[0]);

  // fresh fusion has a zero output projection: enabled == disabled
  auto plain = model.encode_complete(grids[0], nullptr, false);
  auto fused = model.encode_complete(grids[0], &feats, true);
  for (std::int64_t i = 0; i < plain.size(); ++i)
    CHECK(fused.array()[i] == doctest::Approx(plain.array()[i]).epsilon(1e-6));

  // a non-zero projection makes fusion live
  Rng rng(3);
  model.fusion.wo = Tensor<float>::randn({cfg.latent_channels, cfg.attn_dim}, rng, 0.5);
  model.fusion.wo.set_requires_grad(true);
  auto fused2 = model.encode_complete(grids[0], &feats, true);
  double diff = 0;
  for (std::int64_t i = 0; i < plain.size(); ++i) diff += std::fabs(fused2.array()[i] - plain.array()[i]);
  CHECK(diff > 1e-3);

  CHECK_THROWS_AS(model.encode_complete(grids[0], nullptr, true), std::invalid_argument);
}

TEST_CASE("training step: finite non-negative loss, component sum, smoke descent") {
  const VqVaeConfig cfg = desk_config();
  VqVae<float> model = VqVae<float>::init(cfg, 19);
  auto grids = tiny_corpus(4);
  std::vector<const VoxelGrid*> batch;
  for (const auto& g : grids) batch.push_back(&g);
  std::vector<const ViewFeatures*> no_feats(batch.size(), nullptr);

  ad::Optimizer<float>::Hyper hyper;
  hyper.lr = 2e-3;
  ad::Optimizer<float> opt(hyper);
  opt.add_params(model.params_stage(1));

  Rng rng(5);
  double first = 0.0, last = 0.0;
  const int steps = 200;
  for (int step = 0; step < steps; ++step) {
    const VqLossRecord rec = vq_training_step(model, opt, batch, no_feats, 1, step, rng);
    CHECK(std::isfinite(rec.total));
    CHECK(rec.total >= 0.0);
    CHECK(rec.total == doctest::Approx(rec.reconstruction + rec.codebook + rec.commitment).epsilon(1e-6));
    if (step < 10) first += rec.total;
    if (step >= steps - 10) last += rec.total;
  }
  CHECK(last < first);  // loss decreases over the smoke run

  // stage 2 without features is an error
  CHECK_THROWS_AS(vq_training_step(model, opt, batch, {}, 2, 0, rng), std::invalid_argument);
}

TEST_CASE("single-shape overfit drives reconstruction below the plateau threshold") {
  VqVaeConfig cfg = desk_config();
  cfg.base_width = 12;
  VqVae<float> model = VqVae<float>::init(cfg, 23);
  auto grids = tiny_corpus(1);
  std::vector<const VoxelGrid*> batch = {&grids[0]};
  std::vector<const ViewFeatures*> no_feats = {nullptr};

  ad::Optimizer<float>::Hyper hyper;
  hyper.lr = 4e-3;
  ad::Optimizer<float> opt(hyper);
  opt.add_params(model.params_stage(1));

  Rng rng(1);
  for (int step = 0; step < 500; ++step) vq_training_step(model, opt, batch, no_feats, 1, step, rng);

  const VoxelGrid rec = model.reconstruct(grids[0], nullptr, false);
  CHECK(l1_error(rec, grids[0]) < 0.05);  // measured desk plateau, voxel units
}

TEST_CASE("dead codebook entries are re-seeded from batch tokens") {
  VqVaeConfig cfg = desk_config();
  cfg.dead_reseed_steps = 2;
  cfg.codebook_size = 8;
  VqVae<float> model = VqVae<float>::init(cfg, 29);
  // park entries far away so only the nearest one gets used
  for (std::int64_t i = 0; i < model.codebook.entries.size(); ++i)
    model.codebook.entries.data()[i] = 100.0f + static_cast<float>(i);
  model.codebook.entries.data()[0] = 0.0f;
  model.codebook.entries.data()[1] = 0.0f;

  auto grids = tiny_corpus(2);
  std::vector<const VoxelGrid*> batch = {&grids[0], &grids[1]};
  std::vector<const ViewFeatures*> no_feats = {nullptr, nullptr};
  ad::Optimizer<float>::Hyper hyper;
  hyper.lr = 1e-3;
  ad::Optimizer<float> opt(hyper);
  opt.add_params(model.params_stage(1));

  Rng rng(2);
  for (int step = 0; step < 4; ++step) vq_training_step(model, opt, batch, no_feats, 1, step, rng);

  // far-away entries must have been re-seeded into the data range
  int reseeded = 0;
  for (int k = 1; k < 8; ++k) {
    const float v = model.codebook.entries.array()[k * 2];
    if (std::fabs(v) < 50.0f) ++reseeded;
  }
  CHECK(reseeded > 0);
  for (const auto s : model.codebook.last_used) CHECK(s >= 2);
}
