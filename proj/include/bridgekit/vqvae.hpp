#pragma once

#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "bridgekit/layers.hpp"
#include "bridgekit/optimizer.hpp"
#include "bridgekit/views.hpp"
#include "bridgekit/voxel_grid.hpp"

namespace bridgekit {

struct VqVaeConfig {
  int grid_dim = 16;      // D
  int latent_dim = 4;     // d
  int latent_channels = 2;  // C
  int codebook_size = 64;   // K
  double beta_c = 0.25;
  bool fusion_enabled = true;
  std::vector<View> views = {View::Front, View::Top, View::Left};
  int base_width = 16;
  int attn_dim = 16;
  int feature_channels = 5;
  int feature_tokens = 16;  // (D/patch)^2 for the built-in extractor
  std::int64_t dead_reseed_steps = 2000;

  int n_down() const {
    int down = 0, dd = grid_dim;
    while (dd > latent_dim) {
      dd /= 2;
      ++down;
    }
    if (latent_dim << down != grid_dim)
      throw std::invalid_argument("vqvae config: grid dim must be latent dim times a power of two");
    return down;
  }
};

// Grid values normalized by truncation; shape (1, nz, ny, nx). The z-major
// grid flattening and the tensor's row-major layout agree by construction.
template <typename S>
ad::Tensor<S> grid_to_tensor(const VoxelGrid& g) {
  std::vector<S> data(g.values().size());
  const float inv = 1.0f / g.truncation();
  for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<S>(g.values()[i] * inv);
  return ad::Tensor<S>::from_data({1, g.dims().nz, g.dims().ny, g.dims().nx}, std::move(data));
}

// Strided conv stack D^3 -> d^3 x C.
template <typename S>
struct ShapeEncoder {
  Conv3dLayer<S> stem;
  std::vector<GroupNormLayer<S>> norms;
  std::vector<Conv3dLayer<S>> downs;
  GroupNormLayer<S> head_norm;
  Conv3dLayer<S> head;

  static ShapeEncoder make(const VqVaeConfig& cfg, Rng& rng) {
    ShapeEncoder e;
    const int n_down = cfg.n_down();
    int w = cfg.base_width;
    e.stem = Conv3dLayer<S>::make(1, w, 3, 1, 1, rng);
    for (int i = 0; i < n_down; ++i) {
      const int w_next = (i + 1 == n_down) ? 2 * cfg.base_width : w * 2;
      e.norms.push_back(GroupNormLayer<S>::make(w));
      e.downs.push_back(Conv3dLayer<S>::make(w, w_next, 3, 2, 1, rng));
      w = w_next;
    }
    e.head_norm = GroupNormLayer<S>::make(w);
    e.head = Conv3dLayer<S>::make(w, cfg.latent_channels, 3, 1, 1, rng);
    return e;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& x) const {
    ad::Tensor<S> h = stem(x);
    for (std::size_t i = 0; i < downs.size(); ++i) h = downs[i](ad::silu(norms[i](h)));
    return head(ad::silu(head_norm(h)));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    stem.collect(prefix + "stem", out);
    for (std::size_t i = 0; i < downs.size(); ++i) {
      norms[i].collect(prefix + "norm" + std::to_string(i), out);
      downs[i].collect(prefix + "down" + std::to_string(i), out);
    }
    head_norm.collect(prefix + "head_norm", out);
    head.collect(prefix + "head", out);
  }
};

// Cross-attention at the encoder tail: latent tokens are the queries, the
// aggregated depth-feature patches (plus a learned positional bias and a
// per-view-type embedding averaged over the active views) are keys/values.
// The output projection starts at zero, so enabling fusion is initially the
// identity.
template <typename S>
struct DepthFusion {
  ad::Tensor<S> wq, wk, wv, wo;
  ad::Tensor<S> pos_bias;    // (n_tokens, C_f)
  ad::Tensor<S> view_embed;  // (3, C_f), one row per canonical view type

  static DepthFusion make(const VqVaeConfig& cfg, Rng& rng) {
    DepthFusion f;
    const double std_q = std::sqrt(1.0 / cfg.latent_channels);
    const double std_kv = std::sqrt(1.0 / cfg.feature_channels);
    f.wq = ad::Tensor<S>::randn({cfg.attn_dim, cfg.latent_channels}, rng, std_q);
    f.wk = ad::Tensor<S>::randn({cfg.attn_dim, cfg.feature_channels}, rng, std_kv);
    f.wv = ad::Tensor<S>::randn({cfg.attn_dim, cfg.feature_channels}, rng, std_kv);
    f.wo = ad::Tensor<S>::zeros({cfg.latent_channels, cfg.attn_dim});
    f.pos_bias = ad::Tensor<S>::zeros({cfg.feature_tokens, cfg.feature_channels});
    f.view_embed = ad::Tensor<S>::zeros({3, cfg.feature_channels});
    for (auto* t : {&f.wq, &f.wk, &f.wv, &f.wo, &f.pos_bias, &f.view_embed}) t->set_requires_grad(true);
    return f;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& latent, const ViewFeatures& feats,
                           const std::vector<View>& active_views) const {
    if (feats.channels * feats.h * feats.w != pos_bias.size())
      throw std::invalid_argument("depth fusion: feature map shape does not match the configured token layout");
    std::vector<S> fv(feats.values.size());
    for (std::size_t i = 0; i < fv.size(); ++i) fv[i] = static_cast<S>(feats.values[i]);
    ad::Tensor<S> fmap = ad::Tensor<S>::from_data({feats.channels, feats.h, feats.w}, std::move(fv));
    ad::Tensor<S> tokens = ad::channels_to_tokens(fmap);  // (n_tok, C_f)

    std::vector<int> view_ids;
    view_ids.reserve(active_views.size());
    for (View v : active_views) view_ids.push_back(static_cast<int>(v));
    ad::Tensor<S> ones = ad::Tensor<S>::full({1, static_cast<int>(view_ids.size())},
                                             S(1.0 / static_cast<double>(view_ids.size())));
    ad::Tensor<S> view_bias =
        ad::reshape(ad::matmul(ones, ad::gather_rows(view_embed, view_ids)), {view_embed.dim(1)});

    ad::Tensor<S> kv = ad::add_row_bias(ad::add(tokens, pos_bias), view_bias);
    ad::Tensor<S> lat_tok = ad::channels_to_tokens(latent);  // (d^3, C)
    ad::Tensor<S> att = ad::attention(ad::matmul_nt(lat_tok, wq), ad::matmul_nt(kv, wk), ad::matmul_nt(kv, wv));
    ad::Tensor<S> proj = ad::matmul_nt(att, wo);  // (d^3, C)
    ad::Shape spatial(latent.shape().begin() + 1, latent.shape().end());
    return ad::add(latent, ad::tokens_to_channels(proj, spatial));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + "wq", wq);
    out.emplace_back(prefix + "wk", wk);
    out.emplace_back(prefix + "wv", wv);
    out.emplace_back(prefix + "wo", wo);
    out.emplace_back(prefix + "pos_bias", pos_bias);
    out.emplace_back(prefix + "view_embed", view_embed);
  }
};

// Upsampling decoder d^3 x C -> D^3, sigmoid-squashed to [0,1] (the
// truncation-normalized TUDF range).
template <typename S>
struct ShapeDecoder {
  Conv3dLayer<S> stem;
  std::vector<GroupNormLayer<S>> norms;
  std::vector<Conv3dLayer<S>> ups;
  GroupNormLayer<S> head_norm;
  Conv3dLayer<S> head;

  static ShapeDecoder make(const VqVaeConfig& cfg, Rng& rng) {
    ShapeDecoder dec;
    const int n_up = cfg.n_down();
    int w = 2 * cfg.base_width;
    dec.stem = Conv3dLayer<S>::make(cfg.latent_channels, w, 3, 1, 1, rng);
    for (int i = 0; i < n_up; ++i) {
      const int w_next = (i + 1 == n_up) ? cfg.base_width : w;
      dec.norms.push_back(GroupNormLayer<S>::make(w));
      dec.ups.push_back(Conv3dLayer<S>::make(w, w_next, 3, 1, 1, rng));
      w = w_next;
    }
    dec.head_norm = GroupNormLayer<S>::make(w);
    dec.head = Conv3dLayer<S>::make(w, 1, 3, 1, 1, rng);
    return dec;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& zq) const {
    ad::Tensor<S> h = stem(zq);
    for (std::size_t i = 0; i < ups.size(); ++i)
      h = ups[i](ad::nearest_upsample2(ad::silu(norms[i](h))));
    return ad::sigmoid(head(ad::silu(head_norm(h))));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    stem.collect(prefix + "stem", out);
    for (std::size_t i = 0; i < ups.size(); ++i) {
      norms[i].collect(prefix + "norm" + std::to_string(i), out);
      ups[i].collect(prefix + "up" + std::to_string(i), out);
    }
    head_norm.collect(prefix + "head_norm", out);
    head.collect(prefix + "head", out);
  }
};

template <typename S>
struct Codebook {
  ad::Tensor<S> entries;                 // (K, C)
  std::vector<std::int64_t> last_used;   // training step of last assignment

  static Codebook make(int k, int c, Rng& rng) {
    Codebook cb;
    cb.entries = ad::Tensor<S>::randn({k, c}, rng, 0.5);
    cb.entries.set_requires_grad(true);
    cb.last_used.assign(static_cast<std::size_t>(k), 0);
    return cb;
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + "entries", entries);
  }
};

template <typename S>
struct VqResult {
  ad::Tensor<S> quantized;        // (n,C), exact codebook rows, straight-through
  std::vector<int> indices;
  ad::Tensor<S> codebook_loss;    // ||zhat - sg[z]||^2 term (mean over elements)
  ad::Tensor<S> commitment_loss;  // ||sg[zhat] - z||^2 term, unweighted
};

// Nearest codebook entry per token under L2; decoder gradients pass straight
// through to z, codebook entries receive gradient only via the codebook loss.
template <typename S>
VqResult<S> quantize(const ad::Tensor<S>& z_tokens, const Codebook<S>& cb) {
  if (z_tokens.ndim() != 2 || z_tokens.dim(1) != cb.entries.dim(1))
    throw std::invalid_argument("quantize: token channel mismatch with codebook");
  const int n = z_tokens.dim(0), c = z_tokens.dim(1), k = cb.entries.dim(0);
  if (k < 1) throw std::invalid_argument("quantize: empty codebook");

  VqResult<S> res;
  res.indices.resize(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    double best = std::numeric_limits<double>::infinity();
    int best_k = 0;
    for (int j = 0; j < k; ++j) {
      double d2 = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double diff = static_cast<double>(z_tokens.array()[static_cast<std::int64_t>(i) * c + ch]) -
                            cb.entries.array()[static_cast<std::int64_t>(j) * c + ch];
        d2 += diff * diff;
      }
      if (d2 < best) {
        best = d2;
        best_k = j;
      }
    }
    res.indices[static_cast<std::size_t>(i)] = best_k;
  }

  ad::Tensor<S> selected = ad::gather_rows(cb.entries, res.indices);

  // straight-through: value is the selected entries, gradient is identity to z
  auto node = ad::detail::make_result<S>(z_tokens.shape(), z_tokens.requires_grad());
  node->value = selected.array();
  if (node->requires_grad) {
    node->parents = {z_tokens.node()};
    node->backward = [](ad::Node<S>& self) { ad::detail::accumulate(self.parents[0], self.grad); };
  }
  res.quantized = ad::Tensor<S>(node);

  res.codebook_loss = ad::mse(selected, ad::detach(z_tokens));
  res.commitment_loss = ad::mse(z_tokens, ad::detach(selected));
  return res;
}

template <typename S>
struct VqVae {
  VqVaeConfig cfg;
  ShapeEncoder<S> enc_c;
  ShapeEncoder<S> enc_p;
  DepthFusion<S> fusion;
  ShapeDecoder<S> dec;
  Codebook<S> codebook;

  static VqVae init(const VqVaeConfig& cfg, std::uint64_t seed) {
    Rng rng(Rng::mix(seed, 0x7671616576616575ULL));
    VqVae m;
    m.cfg = cfg;
    m.enc_c = ShapeEncoder<S>::make(cfg, rng);
    m.enc_p = ShapeEncoder<S>::make(cfg, rng);
    m.fusion = DepthFusion<S>::make(cfg, rng);
    m.dec = ShapeDecoder<S>::make(cfg, rng);
    m.codebook = Codebook<S>::make(cfg.codebook_size, cfg.latent_channels, rng);
    return m;
  }

  // E_c with optional depth fusion. `fusion_active` is stage dependent:
  // stage 1 trains without the cross-attention layer.
  ad::Tensor<S> encode_complete(const VoxelGrid& x, const ViewFeatures* feats, bool fusion_active) const {
    if (x.dims().nx != cfg.grid_dim || x.dims().ny != cfg.grid_dim || x.dims().nz != cfg.grid_dim)
      throw std::invalid_argument("encode_complete: grid dims do not match the configured D^3");
    ad::Tensor<S> latent = enc_c(grid_to_tensor<S>(x));
    if (fusion_active && cfg.fusion_enabled) {
      if (feats == nullptr) throw std::invalid_argument("encode_complete: fusion enabled but depth features absent");
      latent = fusion(latent, *feats, cfg.views);
    }
    return latent;
  }

  ad::Tensor<S> encode_partial(const VoxelGrid& xp) const {
    if (xp.dims().nx != cfg.grid_dim || xp.dims().ny != cfg.grid_dim || xp.dims().nz != cfg.grid_dim)
      throw std::invalid_argument("encode_partial: grid dims do not match the configured D^3");
    return enc_p(grid_to_tensor<S>(xp));
  }

  // Quantized latent -> TUDF grid in voxel units.
  VoxelGrid decode(const ad::Tensor<S>& zq, float truncation, float voxel_size = 1.0f) const {
    ad::Tensor<S> out = dec(zq);  // (1, D, D, D) in [0,1]
    std::vector<float> values(static_cast<std::size_t>(out.size()));
    for (std::int64_t i = 0; i < out.size(); ++i)
      values[static_cast<std::size_t>(i)] =
          std::clamp(static_cast<float>(out.array()[i]) * truncation, 0.0f, truncation);
    const int dd = cfg.grid_dim;
    return VoxelGrid({dd, dd, dd}, voxel_size, truncation, FieldKind::UDF, std::move(values));
  }

  // Encode -> quantize -> decode, the full reconstruction path.
  VoxelGrid reconstruct(const VoxelGrid& x, const ViewFeatures* feats, bool fusion_active) const {
    ad::Tensor<S> z = encode_complete(x, feats, fusion_active);
    VqResult<S> vq = quantize(ad::channels_to_tokens(z), codebook);
    ad::Tensor<S> zq = ad::tokens_to_channels(vq.quantized, {cfg.latent_dim, cfg.latent_dim, cfg.latent_dim});
    return decode(zq, x.truncation(), x.voxel_size());
  }

  NamedParams<S> params_enc_c() const {
    NamedParams<S> out;
    enc_c.collect("e_c/", out);
    return out;
  }
  NamedParams<S> params_enc_p() const {
    NamedParams<S> out;
    enc_p.collect("e_p/", out);
    return out;
  }
  NamedParams<S> params_fusion() const {
    NamedParams<S> out;
    fusion.collect("fuse/", out);
    return out;
  }
  NamedParams<S> params_dec() const {
    NamedParams<S> out;
    dec.collect("dec/", out);
    return out;
  }
  NamedParams<S> params_codebook() const {
    NamedParams<S> out;
    codebook.collect("cb/", out);
    return out;
  }

  // Everything the two-stage pretraining touches (E_p is trained later,
  // jointly with the bridge denoiser).
  NamedParams<S> params_stage(int stage) const {
    NamedParams<S> out;
    enc_c.collect("e_c/", out);
    dec.collect("dec/", out);
    codebook.collect("cb/", out);
    if (stage == 2 && cfg.fusion_enabled) fusion.collect("fuse/", out);
    return out;
  }
};

struct VqLossRecord {
  double total = 0.0;
  double reconstruction = 0.0;
  double codebook = 0.0;
  double commitment = 0.0;  // already weighted by beta_c
};

// One optimization step of the two-stage VQ-VAE pretraining. Stage 1 runs
// without the cross-attention layer; stage 2 requires rendered views for the
// batch. Reported components sum to the reported total.
template <typename S>
VqLossRecord vq_training_step(VqVae<S>& model, ad::Optimizer<S>& opt,
                              const std::vector<const VoxelGrid*>& completes,
                              const std::vector<const ViewFeatures*>& feats, int stage, std::int64_t step,
                              Rng& rng) {
  if (stage != 1 && stage != 2) throw std::invalid_argument("vq_training_step: stage must be 1 or 2");
  if (completes.empty()) throw std::invalid_argument("vq_training_step: empty batch");
  const bool fusion_active = (stage == 2) && model.cfg.fusion_enabled;
  if (fusion_active && feats.size() != completes.size())
    throw std::invalid_argument("vq_training_step: stage 2 requires view features for every batch item");

  const int d = model.cfg.latent_dim;
  ad::Tensor<S> total;
  VqLossRecord rec;
  std::vector<ad::Tensor<S>> batch_tokens;
  for (std::size_t i = 0; i < completes.size(); ++i) {
    ad::Tensor<S> x = grid_to_tensor<S>(*completes[i]);
    ad::Tensor<S> z = model.encode_complete(*completes[i], fusion_active ? feats[i] : nullptr, fusion_active);
    ad::Tensor<S> tokens = ad::channels_to_tokens(z);
    VqResult<S> vq = quantize(tokens, model.codebook);
    ad::Tensor<S> zq = ad::tokens_to_channels(vq.quantized, {d, d, d});
    ad::Tensor<S> recon = ad::mse(model.dec(zq), x);
    ad::Tensor<S> item = ad::add(recon, ad::add(vq.codebook_loss, ad::scale(vq.commitment_loss, model.cfg.beta_c)));
    total = total.defined() ? ad::add(total, item) : item;

    rec.reconstruction += recon.item();
    rec.codebook += vq.codebook_loss.item();
    rec.commitment += model.cfg.beta_c * vq.commitment_loss.item();
    for (int idx : vq.indices) model.codebook.last_used[static_cast<std::size_t>(idx)] = step;
    batch_tokens.push_back(tokens);
  }
  const double inv_b = 1.0 / static_cast<double>(completes.size());
  total = ad::scale(total, inv_b);
  rec.reconstruction *= inv_b;
  rec.codebook *= inv_b;
  rec.commitment *= inv_b;
  rec.total = rec.reconstruction + rec.codebook + rec.commitment;

  opt.zero_grad();
  total.backward();
  opt.step();

  // Re-seed entries that have not been assigned for the configured window:
  // copy a random token from the current batch and reset the counter.
  const int c = model.cfg.latent_channels;
  for (int j = 0; j < model.cfg.codebook_size; ++j) {
    if (step - model.codebook.last_used[static_cast<std::size_t>(j)] >= model.cfg.dead_reseed_steps) {
      const auto& tok = batch_tokens[static_cast<std::size_t>(rng.uniform_int(0, static_cast<int>(batch_tokens.size()) - 1))];
      const int row = rng.uniform_int(0, tok.dim(0) - 1);
      for (int ch = 0; ch < c; ++ch)
        model.codebook.entries.data()[static_cast<std::int64_t>(j) * c + ch] =
            tok.array()[static_cast<std::int64_t>(row) * c + ch];
      model.codebook.last_used[static_cast<std::size_t>(j)] = step;
    }
  }
  return rec;
}

}  // namespace bridgekit
