#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgekit/bridge.hpp"
#include "bridgekit/layers.hpp"
#include "bridgekit/optimizer.hpp"
#include "bridgekit/vqvae.hpp"

namespace bridgekit {

struct DenoiserConfig {
  int in_channels = 2;
  int base_width = 32;
  std::vector<int> channel_mult = {1, 2};
  int time_dim = 64;
  bool mid_attention = true;

  int levels() const { return static_cast<int>(channel_mult.size()); }
  int width(int level) const { return base_width * channel_mult[static_cast<std::size_t>(level)]; }

  void validate(int latent_dim) const {
    if (base_width < 1 || channel_mult.empty()) throw std::invalid_argument("denoiser config: widths must be positive");
    if (time_dim < 2 || time_dim % 2 != 0) throw std::invalid_argument("denoiser config: time_dim must be even");
    for (int m : channel_mult)
      if (m < 1) throw std::invalid_argument("denoiser config: channel multipliers must be positive");
    if (latent_dim % (1 << (levels() - 1)) != 0)
      throw std::invalid_argument("denoiser config: latent dim must be divisible by 2^(levels-1)");
  }
};

// ResBlock with the timestep embedding added per channel after the first
// normalization.
template <typename S>
struct ResBlock {
  GroupNormLayer<S> norm1, norm2;
  Conv3dLayer<S> conv1, conv2;
  LinearLayer<S> time_proj;  // time_dim -> cin
  Conv3dLayer<S> skip;       // 1x1, only when cin != cout
  bool has_skip = false;

  static ResBlock make(int cin, int cout, int time_dim, Rng& rng) {
    ResBlock b;
    b.norm1 = GroupNormLayer<S>::make(cin);
    b.time_proj = LinearLayer<S>::make(time_dim, cin, rng);
    b.conv1 = Conv3dLayer<S>::make(cin, cout, 3, 1, 1, rng);
    b.norm2 = GroupNormLayer<S>::make(cout);
    b.conv2 = Conv3dLayer<S>::make(cout, cout, 3, 1, 1, rng);
    b.has_skip = (cin != cout);
    if (b.has_skip) b.skip = Conv3dLayer<S>::make(cin, cout, 1, 1, 0, rng);
    return b;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& x, const ad::Tensor<S>& temb) const {
    ad::Tensor<S> h = ad::add_channel_bias(norm1(x), time_proj.vec(temb));
    h = conv1(ad::silu(h));
    h = conv2(ad::silu(norm2(h)));
    return ad::add(h, has_skip ? skip(x) : x);
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    norm1.collect(prefix + ".norm1", out);
    time_proj.collect(prefix + ".time", out);
    conv1.collect(prefix + ".conv1", out);
    norm2.collect(prefix + ".norm2", out);
    conv2.collect(prefix + ".conv2", out);
    if (has_skip) skip.collect(prefix + ".skip", out);
  }
};

// The eps-prediction network: ResBlock encoder with stride-2 downsampling,
// two middle ResBlocks around a self-attention block, mirrored decoder with
// nearest-upsample + conv and channel-concat skip connections.
template <typename S>
struct Denoiser {
  DenoiserConfig cfg;
  int latent_dim = 4;
  LinearLayer<S> time_mlp1, time_mlp2;
  Conv3dLayer<S> stem;
  std::vector<ResBlock<S>> down_blocks;
  std::vector<Conv3dLayer<S>> down_convs;
  ResBlock<S> mid1, mid2;
  SelfAttention<S> mid_attn;
  std::vector<ResBlock<S>> up_blocks;
  std::vector<Conv3dLayer<S>> up_convs;
  GroupNormLayer<S> out_norm;
  Conv3dLayer<S> out_conv;

  static Denoiser init(const DenoiserConfig& cfg, int latent_dim, std::uint64_t seed) {
    cfg.validate(latent_dim);
    Rng rng(Rng::mix(seed, 0x64656e6f69736572ULL));
    Denoiser m;
    m.cfg = cfg;
    m.latent_dim = latent_dim;
    const int L = cfg.levels();
    m.time_mlp1 = LinearLayer<S>::make(cfg.time_dim, cfg.time_dim, rng);
    m.time_mlp2 = LinearLayer<S>::make(cfg.time_dim, cfg.time_dim, rng);
    m.stem = Conv3dLayer<S>::make(cfg.in_channels, cfg.width(0), 3, 1, 1, rng);
    for (int l = 0; l < L; ++l) {
      m.down_blocks.push_back(ResBlock<S>::make(cfg.width(l), cfg.width(l), cfg.time_dim, rng));
      if (l + 1 < L) m.down_convs.push_back(Conv3dLayer<S>::make(cfg.width(l), cfg.width(l + 1), 3, 2, 1, rng));
    }
    m.mid1 = ResBlock<S>::make(cfg.width(L - 1), cfg.width(L - 1), cfg.time_dim, rng);
    m.mid_attn = SelfAttention<S>::make(cfg.width(L - 1), cfg.width(L - 1), rng);
    m.mid2 = ResBlock<S>::make(cfg.width(L - 1), cfg.width(L - 1), cfg.time_dim, rng);
    for (int l = L - 1; l >= 0; --l) {
      m.up_blocks.push_back(ResBlock<S>::make(2 * cfg.width(l), cfg.width(l), cfg.time_dim, rng));
      if (l > 0) m.up_convs.push_back(Conv3dLayer<S>::make(cfg.width(l), cfg.width(l - 1), 3, 1, 1, rng));
    }
    m.out_norm = GroupNormLayer<S>::make(cfg.width(0));
    m.out_conv = Conv3dLayer<S>::make(cfg.width(0), cfg.in_channels, 3, 1, 1, rng);
    return m;
  }

  ad::Tensor<S> forward(const ad::Tensor<S>& z_t, int t) const {
    if (z_t.ndim() != 4 || z_t.dim(0) != cfg.in_channels)
      throw std::invalid_argument("denoiser: input must be (C,d,d,d) with configured channels");
    ad::Tensor<S> temb = time_mlp2.vec(ad::silu(time_mlp1.vec(ad::time_embedding<S>(static_cast<double>(t), cfg.time_dim))));

    const int L = cfg.levels();
    ad::Tensor<S> h = stem(z_t);
    std::vector<ad::Tensor<S>> skips;
    for (int l = 0; l < L; ++l) {
      h = down_blocks[static_cast<std::size_t>(l)](h, temb);
      skips.push_back(h);
      if (l + 1 < L) h = down_convs[static_cast<std::size_t>(l)](h);
    }
    h = mid1(h, temb);
    if (cfg.mid_attention) h = mid_attn(h);
    h = mid2(h, temb);
    for (int l = L - 1; l >= 0; --l) {
      h = ad::concat<S>({h, skips[static_cast<std::size_t>(l)]}, 0);
      h = up_blocks[static_cast<std::size_t>(L - 1 - l)](h, temb);
      if (l > 0) h = up_convs[static_cast<std::size_t>(L - 1 - l)](ad::nearest_upsample2(h));
    }
    return out_conv(ad::silu(out_norm(h)));
  }

  NamedParams<S> named_params() const {
    NamedParams<S> out;
    time_mlp1.collect("den/time1", out);
    time_mlp2.collect("den/time2", out);
    stem.collect("den/stem", out);
    for (std::size_t l = 0; l < down_blocks.size(); ++l) down_blocks[l].collect("den/down" + std::to_string(l), out);
    for (std::size_t l = 0; l < down_convs.size(); ++l) down_convs[l].collect("den/downconv" + std::to_string(l), out);
    mid1.collect("den/mid1", out);
    if (cfg.mid_attention) mid_attn.collect("den/mid_attn", out);
    mid2.collect("den/mid2", out);
    for (std::size_t l = 0; l < up_blocks.size(); ++l) up_blocks[l].collect("den/up" + std::to_string(l), out);
    for (std::size_t l = 0; l < up_convs.size(); ++l) up_convs[l].collect("den/upconv" + std::to_string(l), out);
    out_norm.collect("den/out_norm", out);
    out_conv.collect("den/out", out);
    return out;
  }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, p] : named_params()) n += p.size();
    return n;
  }
};

// One bridge-training step (Eq.-style pipeline): z0 from the frozen
// depth-enhanced encoder, zT from the co-trained partial encoder with
// stochasticity injected, t uniform in {1..T-1}, eps regression loss.
// Gradients reach the denoiser and E_p only.
template <typename S>
double train_bridge_step(VqVae<S>& vq, Denoiser<S>& den, const BridgeSchedule& sched, ad::Optimizer<S>& opt,
                         const std::vector<const VoxelGrid*>& partials,
                         const std::vector<const VoxelGrid*>& completes,
                         const std::vector<const ViewFeatures*>& feats, double noise_scale, Rng& rng) {
  if (partials.empty() || partials.size() != completes.size())
    throw std::invalid_argument("train_bridge_step: batch must pair partial and complete grids");
  ad::Tensor<S> total;
  for (std::size_t i = 0; i < partials.size(); ++i) {
    const ViewFeatures* f = feats.empty() ? nullptr : feats[i];
    ad::Tensor<S> z0 = vq.encode_complete(*completes[i], f, true);
    ad::Tensor<S> zT = inject_stochasticity(vq.encode_partial(*partials[i]), noise_scale, rng);
    const int t = rng.uniform_int(1, sched.T - 1);
    ad::Tensor<S> z_t = sample_zt(z0, zT, t, sched, rng);
    ad::Tensor<S> target = eps_target(z_t, z0, t, sched);
    ad::Tensor<S> item = ad::mse(den.forward(z_t, t), target);
    total = total.defined() ? ad::add(total, item) : item;
  }
  total = ad::scale(total, 1.0 / static_cast<double>(partials.size()));
  opt.zero_grad();
  total.backward();
  opt.step();
  return static_cast<double>(total.item());
}

// Loss of the current model on a fixed, seeded evaluation pass; used to
// compare against the freshly initialized model without optimizer noise.
template <typename S>
double bridge_eval_loss(const VqVae<S>& vq, const Denoiser<S>& den, const BridgeSchedule& sched,
                        const std::vector<const VoxelGrid*>& partials,
                        const std::vector<const VoxelGrid*>& completes,
                        const std::vector<const ViewFeatures*>& feats, double noise_scale, std::uint64_t seed,
                        int draws_per_shape = 4) {
  double acc = 0.0;
  std::int64_t count = 0;
  for (std::size_t i = 0; i < partials.size(); ++i) {
    Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(i)));
    const ViewFeatures* f = feats.empty() ? nullptr : feats[i];
    ad::Tensor<S> z0 = vq.encode_complete(*completes[i], f, true);
    ad::Tensor<S> zT = inject_stochasticity(vq.encode_partial(*partials[i]), noise_scale, rng);
    for (int k = 0; k < draws_per_shape; ++k) {
      const int t = rng.uniform_int(1, sched.T - 1);
      ad::Tensor<S> z_t = sample_zt(z0, zT, t, sched, rng);
      ad::Tensor<S> target = eps_target(z_t, z0, t, sched);
      acc += static_cast<double>(ad::mse(den.forward(z_t, t), target).item());
      ++count;
    }
  }
  return acc / static_cast<double>(count);
}

}  // namespace bridgekit
