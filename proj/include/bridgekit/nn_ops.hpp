#pragma once

#include <cmath>

#include "bridgekit/tensor.hpp"

namespace bridgekit::ad {

namespace detail {

// Unpacks the receptive field of every output voxel into a (Cin*k^3, n_out)
// column-major matrix so the convolution reduces to one GEMM.
template <typename S>
void im2col3d(const S* x, int cin, int d, int h, int w, int k, int stride, int pad, int od, int oh, int ow,
              Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& cols) {
  const std::int64_t n_out = static_cast<std::int64_t>(od) * oh * ow;
  cols.setZero(static_cast<std::int64_t>(cin) * k * k * k, n_out);
  std::int64_t col = 0;
  for (int zo = 0; zo < od; ++zo) {
    for (int yo = 0; yo < oh; ++yo) {
      for (int xo = 0; xo < ow; ++xo, ++col) {
        const int z0 = zo * stride - pad, y0 = yo * stride - pad, x0 = xo * stride - pad;
        std::int64_t row = 0;
        for (int c = 0; c < cin; ++c) {
          const S* xc = x + static_cast<std::int64_t>(c) * d * h * w;
          for (int kz = 0; kz < k; ++kz) {
            const int z = z0 + kz;
            for (int ky = 0; ky < k; ++ky) {
              const int y = y0 + ky;
              for (int kx = 0; kx < k; ++kx, ++row) {
                const int xx = x0 + kx;
                if (z >= 0 && z < d && y >= 0 && y < h && xx >= 0 && xx < w)
                  cols(row, col) = xc[(static_cast<std::int64_t>(z) * h + y) * w + xx];
              }
            }
          }
        }
      }
    }
  }
}

template <typename S>
void col2im3d(const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic>& cols, int cin, int d, int h, int w, int k,
              int stride, int pad, int od, int oh, int ow, S* dx) {
  std::int64_t col = 0;
  for (int zo = 0; zo < od; ++zo) {
    for (int yo = 0; yo < oh; ++yo) {
      for (int xo = 0; xo < ow; ++xo, ++col) {
        const int z0 = zo * stride - pad, y0 = yo * stride - pad, x0 = xo * stride - pad;
        std::int64_t row = 0;
        for (int c = 0; c < cin; ++c) {
          S* xc = dx + static_cast<std::int64_t>(c) * d * h * w;
          for (int kz = 0; kz < k; ++kz) {
            const int z = z0 + kz;
            for (int ky = 0; ky < k; ++ky) {
              const int y = y0 + ky;
              for (int kx = 0; kx < k; ++kx, ++row) {
                const int xx = x0 + kx;
                if (z >= 0 && z < d && y >= 0 && y < h && xx >= 0 && xx < w)
                  xc[(static_cast<std::int64_t>(z) * h + y) * w + xx] += cols(row, col);
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace detail

// x (Cin,D,H,W), w (Cout,Cin,k,k,k), b (Cout). Zero padding, floor output
// dims. Backward rebuilds the column matrix instead of caching it.
template <typename S>
Tensor<S> conv3d(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b, int stride = 1, int pad = 0) {
  if (x.ndim() != 4 || w.ndim() != 5) throw std::invalid_argument("conv3d: x must be (C,D,H,W), w (Co,Ci,k,k,k)");
  if (w.dim(1) != x.dim(0)) throw std::invalid_argument("conv3d: channel mismatch");
  if (w.dim(2) != w.dim(3) || w.dim(2) != w.dim(4)) throw std::invalid_argument("conv3d: kernel must be cubic");
  if (b.ndim() != 1 || b.dim(0) != w.dim(0)) throw std::invalid_argument("conv3d: bias must be (Cout)");
  if (stride < 1) throw std::invalid_argument("conv3d: stride must be >= 1");
  const int cin = x.dim(0), d = x.dim(1), h = x.dim(2), ww = x.dim(3);
  const int cout = w.dim(0), k = w.dim(2);
  const int od = (d + 2 * pad - k) / stride + 1;
  const int oh = (h + 2 * pad - k) / stride + 1;
  const int ow = (ww + 2 * pad - k) / stride + 1;
  if (od < 1 || oh < 1 || ow < 1) throw std::invalid_argument("conv3d: output would be empty");
  const std::int64_t n_out = static_cast<std::int64_t>(od) * oh * ow;
  const std::int64_t ck = static_cast<std::int64_t>(cin) * k * k * k;

  auto n = detail::make_result<S>({cout, od, oh, ow},
                                  x.requires_grad() || w.requires_grad() || b.requires_grad());
  n->value.resize(cout * n_out);

  Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> cols;
  detail::im2col3d(x.data(), cin, d, h, ww, k, stride, pad, od, oh, ow, cols);
  MatMap<S> y(n->value.data(), cout, n_out);
  y.noalias() = ConstMatMap<S>(w.data(), cout, ck) * cols;
  for (int c = 0; c < cout; ++c) n->value.segment(c * n_out, n_out) += b.array()[c];

  if (n->requires_grad) {
    n->parents = {x.node(), w.node(), b.node()};
    n->backward = [cin, d, h, ww, k, stride, pad, od, oh, ow, cout, n_out, ck](Node<S>& self) {
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto& pb = self.parents[2];
      ConstMatMap<S> g(self.grad.data(), cout, n_out);
      if (pb->requires_grad) {
        pb->ensure_grad();
        for (int c = 0; c < cout; ++c) pb->grad[c] += self.grad.segment(c * n_out, n_out).sum();
      }
      if (pw->requires_grad) {
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> cols;
        detail::im2col3d(px->value.data(), cin, d, h, ww, k, stride, pad, od, oh, ow, cols);
        pw->ensure_grad();
        MatMap<S>(pw->grad.data(), cout, ck).noalias() += g * cols.transpose();
      }
      if (px->requires_grad) {
        Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic> dcols(ck, n_out);
        dcols.noalias() = ConstMatMap<S>(pw->value.data(), cout, ck).transpose() * g;
        px->ensure_grad();
        detail::col2im3d(dcols, cin, d, h, ww, k, stride, pad, od, oh, ow, px->grad.data());
      }
    };
  }
  return Tensor<S>(n);
}

// (C,D,H,W) -> (C,2D,2H,2W), each output voxel copies its nearest input voxel.
template <typename S>
Tensor<S> nearest_upsample2(const Tensor<S>& x) {
  if (x.ndim() != 4) throw std::invalid_argument("nearest_upsample2: expected (C,D,H,W)");
  const int c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  auto n = detail::make_result<S>({c, 2 * d, 2 * h, 2 * w}, x.requires_grad());
  n->value.resize(x.size() * 8);
  const auto idx_in = [d, h, w](int ch, int z, int y, int xx) {
    return ((static_cast<std::int64_t>(ch) * d + z) * h + y) * w + xx;
  };
  std::int64_t o = 0;
  for (int ch = 0; ch < c; ++ch)
    for (int z = 0; z < 2 * d; ++z)
      for (int y = 0; y < 2 * h; ++y)
        for (int xx = 0; xx < 2 * w; ++xx, ++o) n->value[o] = x.array()[idx_in(ch, z / 2, y / 2, xx / 2)];
  if (n->requires_grad) {
    n->parents = {x.node()};
    n->backward = [c, d, h, w, idx_in](Node<S>& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      std::int64_t o = 0;
      for (int ch = 0; ch < c; ++ch)
        for (int z = 0; z < 2 * d; ++z)
          for (int y = 0; y < 2 * h; ++y)
            for (int xx = 0; xx < 2 * w; ++xx, ++o) p->grad[idx_in(ch, z / 2, y / 2, xx / 2)] += self.grad[o];
    };
  }
  return Tensor<S>(n);
}

// Group normalization over (C, spatial...): per group, normalize across the
// group's channels and all spatial positions, then apply the per-channel
// affine. Population variance, like the usual deep-learning definition.
template <typename S>
Tensor<S> group_norm(const Tensor<S>& x, int groups, const Tensor<S>& gamma, const Tensor<S>& beta,
                     double eps = 1e-5) {
  if (x.ndim() < 2) throw std::invalid_argument("group_norm: rank must be >= 2");
  const int c = x.dim(0);
  if (groups < 1 || c % groups != 0) throw std::invalid_argument("group_norm: groups must divide channels");
  if (gamma.ndim() != 1 || gamma.dim(0) != c || beta.ndim() != 1 || beta.dim(0) != c)
    throw std::invalid_argument("group_norm: affine params must be (C)");
  const std::int64_t sp = x.size() / c;
  const int cg = c / groups;
  const std::int64_t m = cg * sp;

  auto n = detail::make_result<S>(x.shape(), x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  n->value.resize(x.size());
  for (int g = 0; g < groups; ++g) {
    auto seg = x.array().segment(static_cast<std::int64_t>(g) * m, m);
    const S mean = seg.mean();
    const S var = (seg - mean).square().sum() / static_cast<S>(m);
    const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
    for (int j = 0; j < cg; ++j) {
      const int ch = g * cg + j;
      n->value.segment(static_cast<std::int64_t>(ch) * sp, sp) =
          (x.array().segment(static_cast<std::int64_t>(ch) * sp, sp) - mean) * inv * gamma.array()[ch] +
          beta.array()[ch];
    }
  }
  if (n->requires_grad) {
    n->parents = {x.node(), gamma.node(), beta.node()};
    n->backward = [groups, c, cg, sp, m, eps](Node<S>& self) {
      auto& px = self.parents[0];
      auto& pg = self.parents[1];
      auto& pb = self.parents[2];
      const ArrayX<S>& xv = px->value;
      const ArrayX<S>& gv = pg->value;
      for (int g = 0; g < groups; ++g) {
        auto seg = xv.segment(static_cast<std::int64_t>(g) * m, m);
        const S mean = seg.mean();
        const S var = (seg - mean).square().sum() / static_cast<S>(m);
        const S inv = S(1) / std::sqrt(var + static_cast<S>(eps));
        // dxhat for the whole group, with per-channel gamma folded in
        ArrayX<S> xhat(m), dxhat(m);
        for (int j = 0; j < cg; ++j) {
          const int ch = g * cg + j;
          auto xc = xv.segment(static_cast<std::int64_t>(ch) * sp, sp);
          auto gc = self.grad.segment(static_cast<std::int64_t>(ch) * sp, sp);
          xhat.segment(static_cast<std::int64_t>(j) * sp, sp) = (xc - mean) * inv;
          dxhat.segment(static_cast<std::int64_t>(j) * sp, sp) = gc * gv[ch];
        }
        if (pg->requires_grad || pb->requires_grad) {
          pg->ensure_grad();
          pb->ensure_grad();
          for (int j = 0; j < cg; ++j) {
            const int ch = g * cg + j;
            auto gc = self.grad.segment(static_cast<std::int64_t>(ch) * sp, sp);
            if (pg->requires_grad)
              pg->grad[ch] += (gc * xhat.segment(static_cast<std::int64_t>(j) * sp, sp)).sum();
            if (pb->requires_grad) pb->grad[ch] += gc.sum();
          }
        }
        if (px->requires_grad) {
          px->ensure_grad();
          const S sum_dxhat = dxhat.sum();
          const S sum_dxhat_xhat = (dxhat * xhat).sum();
          for (int j = 0; j < cg; ++j) {
            const int ch = g * cg + j;
            px->grad.segment(static_cast<std::int64_t>(ch) * sp, sp) +=
                inv * (dxhat.segment(static_cast<std::int64_t>(j) * sp, sp) -
                       (sum_dxhat + xhat.segment(static_cast<std::int64_t>(j) * sp, sp) * sum_dxhat_xhat) /
                           static_cast<S>(m));
          }
        }
      }
    };
  }
  return Tensor<S>(n);
}

// Scaled dot-product attention: softmax(Q K^T / sqrt(d_k)) V.
// Q (n_q,d_k), K (n_kv,d_k), V (n_kv,d_v) -> (n_q,d_v).
template <typename S>
Tensor<S> attention(const Tensor<S>& q, const Tensor<S>& k, const Tensor<S>& v) {
  if (q.ndim() != 2 || k.ndim() != 2 || v.ndim() != 2)
    throw std::invalid_argument("attention: Q, K, V must be 2-d");
  if (q.dim(1) != k.dim(1)) throw std::invalid_argument("attention: d_k mismatch between Q and K");
  if (k.dim(0) != v.dim(0)) throw std::invalid_argument("attention: K and V row count mismatch");
  Tensor<S> logits = scale(matmul_nt(q, k), 1.0 / std::sqrt(static_cast<double>(q.dim(1))));
  return matmul(softmax_rows(logits), v);
}

// Sinusoidal timestep embedding: first half sin, second half cos over a
// geometric frequency ladder from 1 down to 1/10000. Constant w.r.t. the
// tape (timesteps are data, not parameters).
template <typename S>
Tensor<S> time_embedding(double t, int dim) {
  if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be positive and even");
  const int half = dim / 2;
  std::vector<S> v(static_cast<std::size_t>(dim));
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(10000.0) * static_cast<double>(i) / static_cast<double>(half));
    v[static_cast<std::size_t>(i)] = static_cast<S>(std::sin(t * freq));
    v[static_cast<std::size_t>(half + i)] = static_cast<S>(std::cos(t * freq));
  }
  return Tensor<S>::from_data({dim}, std::move(v));
}

}  // namespace bridgekit::ad
