#pragma once

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "bridgekit/nn_ops.hpp"
#include "bridgekit/tensor.hpp"

namespace bridgekit {

template <typename S>
using NamedParams = std::vector<std::pair<std::string, ad::Tensor<S>>>;

// Largest divisor of `channels` that is <= 8; keeps group_norm valid for any
// width that shows up in the configs.
inline int norm_groups(int channels) {
  for (int g = std::min(8, channels); g >= 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <typename S>
struct Conv3dLayer {
  ad::Tensor<S> w, b;
  int stride = 1;
  int pad = 1;

  static Conv3dLayer make(int cin, int cout, int k, int stride, int pad, Rng& rng, bool zero_init = false) {
    Conv3dLayer layer;
    layer.stride = stride;
    layer.pad = pad;
    const double std = std::sqrt(2.0 / (static_cast<double>(cin) * k * k * k));
    layer.w = zero_init ? ad::Tensor<S>::zeros({cout, cin, k, k, k})
                        : ad::Tensor<S>::randn({cout, cin, k, k, k}, rng, std);
    layer.b = ad::Tensor<S>::zeros({cout});
    layer.w.set_requires_grad(true);
    layer.b.set_requires_grad(true);
    return layer;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& x) const { return ad::conv3d(x, w, b, stride, pad); }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

template <typename S>
struct GroupNormLayer {
  ad::Tensor<S> gamma, beta;
  int groups = 1;

  static GroupNormLayer make(int channels) {
    GroupNormLayer layer;
    layer.groups = norm_groups(channels);
    layer.gamma = ad::Tensor<S>::full({channels}, S(1));
    layer.beta = ad::Tensor<S>::zeros({channels});
    layer.gamma.set_requires_grad(true);
    layer.beta.set_requires_grad(true);
    return layer;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& x) const { return ad::group_norm(x, groups, gamma, beta); }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".gamma", gamma);
    out.emplace_back(prefix + ".beta", beta);
  }
};

template <typename S>
struct LinearLayer {
  ad::Tensor<S> w, b;

  static LinearLayer make(int in, int out, Rng& rng, bool zero_init = false) {
    LinearLayer layer;
    const double std = std::sqrt(2.0 / static_cast<double>(in));
    layer.w = zero_init ? ad::Tensor<S>::zeros({out, in}) : ad::Tensor<S>::randn({out, in}, rng, std);
    layer.b = ad::Tensor<S>::zeros({out});
    layer.w.set_requires_grad(true);
    layer.b.set_requires_grad(true);
    return layer;
  }

  // x (n,in) -> (n,out)
  ad::Tensor<S> operator()(const ad::Tensor<S>& x) const { return ad::linear(x, w, b); }

  // vector (in) -> (out)
  ad::Tensor<S> vec(const ad::Tensor<S>& x) const {
    return ad::reshape(ad::linear(ad::reshape(x, {1, x.dim(0)}), w, b), {w.dim(0)});
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    out.emplace_back(prefix + ".w", w);
    out.emplace_back(prefix + ".b", b);
  }
};

// Pre-norm self-attention over the spatial positions of a (C,D,H,W) feature
// map, with a residual connection. Output projection starts at zero so the
// block begins as the identity.
template <typename S>
struct SelfAttention {
  GroupNormLayer<S> norm;
  ad::Tensor<S> wq, wk, wv, wo;
  int attn_dim = 0;

  static SelfAttention make(int channels, int attn_dim, Rng& rng) {
    SelfAttention a;
    a.attn_dim = attn_dim;
    a.norm = GroupNormLayer<S>::make(channels);
    const double std = std::sqrt(1.0 / channels);
    a.wq = ad::Tensor<S>::randn({attn_dim, channels}, rng, std);
    a.wk = ad::Tensor<S>::randn({attn_dim, channels}, rng, std);
    a.wv = ad::Tensor<S>::randn({attn_dim, channels}, rng, std);
    a.wo = ad::Tensor<S>::zeros({channels, attn_dim});
    for (auto* t : {&a.wq, &a.wk, &a.wv, &a.wo}) t->set_requires_grad(true);
    return a;
  }

  ad::Tensor<S> operator()(const ad::Tensor<S>& x) const {
    ad::Tensor<S> tok = ad::channels_to_tokens(norm(x));  // (n, C)
    ad::Tensor<S> q = ad::matmul_nt(tok, wq);
    ad::Tensor<S> k = ad::matmul_nt(tok, wk);
    ad::Tensor<S> v = ad::matmul_nt(tok, wv);
    ad::Tensor<S> att = ad::attention(q, k, v);                 // (n, attn)
    ad::Tensor<S> proj = ad::matmul_nt(att, wo);                // (n, C)
    ad::Shape spatial(x.shape().begin() + 1, x.shape().end());
    return ad::add(x, ad::tokens_to_channels(proj, spatial));
  }

  void collect(const std::string& prefix, NamedParams<S>& out) const {
    norm.collect(prefix + ".norm", out);
    out.emplace_back(prefix + ".wq", wq);
    out.emplace_back(prefix + ".wk", wk);
    out.emplace_back(prefix + ".wv", wv);
    out.emplace_back(prefix + ".wo", wo);
  }
};

// Tensors share their node across copies, so flipping the flag on a copy
// affects the parameter itself.
template <typename S>
void set_requires_grad(const NamedParams<S>& params, bool value) {
  for (auto [name, p] : params) p.set_requires_grad(value);
}

}  // namespace bridgekit
