#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "bridgekit/rng.hpp"

namespace bridgekit::ad {

using Shape = std::vector<int>;

inline std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

template <typename S>
using ArrayX = Eigen::Array<S, Eigen::Dynamic, 1>;

template <typename S>
using MatMap = Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename S>
using ConstMatMap = Eigen::Map<const Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

// One node of the reverse-mode tape. `backward` reads this node's grad and
// accumulates into the parents' grads; parents are held by shared_ptr so the
// graph stays alive as long as any downstream tensor does.
template <typename S>
struct Node {
  Shape shape;
  ArrayX<S> value;
  ArrayX<S> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad = ArrayX<S>::Zero(value.size());
  }
};

// Dense multi-dimensional array with reverse-mode autodiff. Value semantics:
// copies share the underlying node, matching how parameters are held by both
// a model and its optimizer. Data is stored flat in row-major (C) order.
template <typename S>
class Tensor {
 public:
  using Scalar = S;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    auto n = std::make_shared<Node<S>>();
    n->value = ArrayX<S>::Zero(numel(shape));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor full(Shape shape, S v) {
    auto n = std::make_shared<Node<S>>();
    n->value = ArrayX<S>::Constant(numel(shape), v);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor scalar(S v) { return full({1}, v); }

  static Tensor from_data(Shape shape, std::vector<S> data) {
    if (static_cast<std::int64_t>(data.size()) != numel(shape))
      throw std::invalid_argument("Tensor::from_data: size mismatch for shape " + shape_str(shape));
    auto n = std::make_shared<Node<S>>();
    n->value = Eigen::Map<const ArrayX<S>>(data.data(), static_cast<Eigen::Index>(data.size()));
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0) {
    auto n = std::make_shared<Node<S>>();
    const std::int64_t count = numel(shape);
    n->value.resize(count);
    for (std::int64_t i = 0; i < count; ++i) n->value[i] = static_cast<S>(rng.normal() * stddev);
    n->shape = std::move(shape);
    return Tensor(std::move(n));
  }

  bool defined() const { return static_cast<bool>(n_); }
  const Shape& shape() const { return n_->shape; }
  std::int64_t size() const { return n_->value.size(); }
  int dim(int i) const { return n_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(n_->shape.size()); }

  const ArrayX<S>& array() const { return n_->value; }
  ArrayX<S>& array() { return n_->value; }
  S* data() { return n_->value.data(); }
  const S* data() const { return n_->value.data(); }
  S item() const {
    if (size() != 1) throw std::invalid_argument("Tensor::item: tensor is not scalar");
    return n_->value[0];
  }

  bool requires_grad() const { return n_->requires_grad; }
  Tensor& set_requires_grad(bool b) {
    n_->requires_grad = b;
    if (b) n_->ensure_grad();
    return *this;
  }

  const ArrayX<S>& grad() const { return n_->grad; }
  void zero_grad() {
    if (n_->requires_grad) n_->grad = ArrayX<S>::Zero(n_->value.size());
  }

  bool all_finite() const { return n_->value.isFinite().all(); }

  // Reverse pass from a scalar root: seeds d(root)/d(root)=1 and walks the
  // tape in reverse topological order, accumulating into every
  // requires_grad node reachable from here.
  void backward() const {
    if (size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!n_->requires_grad) return;

    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<std::pair<Node<S>*, std::size_t>> stack;
    stack.emplace_back(n_.get(), 0);
    seen.insert(n_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<S>* p = node->parents[next++].get();
        if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    n_->ensure_grad();
    n_->grad[0] += S(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

  std::shared_ptr<Node<S>> node() const { return n_; }
  explicit Tensor(std::shared_ptr<Node<S>> n) : n_(std::move(n)) {}

 private:
  std::shared_ptr<Node<S>> n_;
};

namespace detail {

template <typename S>
std::shared_ptr<Node<S>> make_result(Shape shape, bool requires_grad) {
  auto n = std::make_shared<Node<S>>();
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return n;
}

template <typename S>
void accumulate(const std::shared_ptr<Node<S>>& p, const ArrayX<S>& g) {
  if (!p->requires_grad) return;
  p->ensure_grad();
  p->grad += g;
}

inline void check_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b)
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "add");
  auto n = detail::make_result<S>(a.shape(), a.requires_grad() || b.requires_grad());
  n->value = a.array() + b.array();
  if (n->requires_grad) {
    n->parents = {a.node(), b.node()};
    n->backward = [](Node<S>& self) {
      detail::accumulate(self.parents[0], self.grad);
      detail::accumulate(self.parents[1], self.grad);
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "sub");
  auto n = detail::make_result<S>(a.shape(), a.requires_grad() || b.requires_grad());
  n->value = a.array() - b.array();
  if (n->requires_grad) {
    n->parents = {a.node(), b.node()};
    n->backward = [](Node<S>& self) {
      detail::accumulate(self.parents[0], self.grad);
      detail::accumulate(self.parents[1], ArrayX<S>(-self.grad));
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mul");
  auto n = detail::make_result<S>(a.shape(), a.requires_grad() || b.requires_grad());
  n->value = a.array() * b.array();
  if (n->requires_grad) {
    n->parents = {a.node(), b.node()};
    n->backward = [](Node<S>& self) {
      detail::accumulate(self.parents[0], ArrayX<S>(self.grad * self.parents[1]->value));
      detail::accumulate(self.parents[1], ArrayX<S>(self.grad * self.parents[0]->value));
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> scale(const Tensor<S>& a, double c) {
  auto n = detail::make_result<S>(a.shape(), a.requires_grad());
  n->value = a.array() * static_cast<S>(c);
  if (n->requires_grad) {
    n->parents = {a.node()};
    n->backward = [c](Node<S>& self) {
      detail::accumulate(self.parents[0], ArrayX<S>(self.grad * static_cast<S>(c)));
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> add_const(const Tensor<S>& a, double c) {
  auto n = detail::make_result<S>(a.shape(), a.requires_grad());
  n->value = a.array() + static_cast<S>(c);
  if (n->requires_grad) {
    n->parents = {a.node()};
    n->backward = [](Node<S>& self) { detail::accumulate(self.parents[0], self.grad); };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> silu(const Tensor<S>& a) {
  auto n = detail::make_result<S>(a.shape(), a.requires_grad());
  ArrayX<S> sig = (S(1) / (S(1) + (-a.array()).exp()));
  n->value = a.array() * sig;
  if (n->requires_grad) {
    n->parents = {a.node()};
    n->backward = [sig](Node<S>& self) {
      const ArrayX<S>& x = self.parents[0]->value;
      ArrayX<S> d = sig * (S(1) + x * (S(1) - sig));
      detail::accumulate(self.parents[0], ArrayX<S>(self.grad * d));
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  auto n = detail::make_result<S>(a.shape(), a.requires_grad());
  n->value = S(1) / (S(1) + (-a.array()).exp());
  if (n->requires_grad) {
    n->parents = {a.node()};
    ArrayX<S> y = n->value;
    n->backward = [y](Node<S>& self) {
      detail::accumulate(self.parents[0], ArrayX<S>(self.grad * y * (S(1) - y)));
    };
  }
  return Tensor<S>(n);
}

// Stops gradient flow; the value is shared, the tape edge is cut.
template <typename S>
Tensor<S> detach(const Tensor<S>& a) {
  auto n = detail::make_result<S>(a.shape(), false);
  n->value = a.array();
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  if (numel(shape) != a.size())
    throw std::invalid_argument("reshape: element count mismatch " + shape_str(a.shape()) + " -> " + shape_str(shape));
  auto n = detail::make_result<S>(std::move(shape), a.requires_grad());
  n->value = a.array();
  if (n->requires_grad) {
    n->parents = {a.node()};
    n->backward = [](Node<S>& self) { detail::accumulate(self.parents[0], self.grad); };
  }
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Reductions / losses
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum(const Tensor<S>& a) {
  auto n = detail::make_result<S>({1}, a.requires_grad());
  n->value = ArrayX<S>::Constant(1, a.array().sum());
  if (n->requires_grad) {
    n->parents = {a.node()};
    n->backward = [](Node<S>& self) {
      detail::accumulate(self.parents[0],
                         ArrayX<S>(ArrayX<S>::Constant(self.parents[0]->value.size(), self.grad[0])));
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> mse(const Tensor<S>& a, const Tensor<S>& b) {
  detail::check_same_shape(a.shape(), b.shape(), "mse");
  auto n = detail::make_result<S>({1}, a.requires_grad() || b.requires_grad());
  ArrayX<S> diff = a.array() - b.array();
  n->value = ArrayX<S>::Constant(1, diff.square().sum() / static_cast<S>(diff.size()));
  if (n->requires_grad) {
    n->parents = {a.node(), b.node()};
    n->backward = [](Node<S>& self) {
      const ArrayX<S>& av = self.parents[0]->value;
      const ArrayX<S>& bv = self.parents[1]->value;
      const S c = S(2) * self.grad[0] / static_cast<S>(av.size());
      ArrayX<S> d = c * (av - bv);
      detail::accumulate(self.parents[0], d);
      detail::accumulate(self.parents[1], ArrayX<S>(-d));
    };
  }
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

// (m,k) x (k,n) -> (m,n)
template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto n = detail::make_result<S>({m, nn}, a.requires_grad() || b.requires_grad());
  n->value.resize(static_cast<std::int64_t>(m) * nn);
  MatMap<S>(n->value.data(), m, nn).noalias() =
      ConstMatMap<S>(a.data(), m, k) * ConstMatMap<S>(b.data(), k, nn);
  if (n->requires_grad) {
    n->parents = {a.node(), b.node()};
    n->backward = [m, k, nn](Node<S>& self) {
      ConstMatMap<S> g(self.grad.data(), m, nn);
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        MatMap<S>(pa->grad.data(), m, k).noalias() += g * ConstMatMap<S>(pb->value.data(), k, nn).transpose();
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        MatMap<S>(pb->grad.data(), k, nn).noalias() += ConstMatMap<S>(pa->value.data(), m, k).transpose() * g;
      }
    };
  }
  return Tensor<S>(n);
}

// (m,k) x (n,k)^T -> (m,n)
template <typename S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(1))
    throw std::invalid_argument("matmul_nt: incompatible shapes " + shape_str(a.shape()) + " x " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(0);
  auto n = detail::make_result<S>({m, nn}, a.requires_grad() || b.requires_grad());
  n->value.resize(static_cast<std::int64_t>(m) * nn);
  MatMap<S>(n->value.data(), m, nn).noalias() =
      ConstMatMap<S>(a.data(), m, k) * ConstMatMap<S>(b.data(), nn, k).transpose();
  if (n->requires_grad) {
    n->parents = {a.node(), b.node()};
    n->backward = [m, k, nn](Node<S>& self) {
      ConstMatMap<S> g(self.grad.data(), m, nn);
      auto& pa = self.parents[0];
      auto& pb = self.parents[1];
      if (pa->requires_grad) {
        pa->ensure_grad();
        MatMap<S>(pa->grad.data(), m, k).noalias() += g * ConstMatMap<S>(pb->value.data(), nn, k);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        MatMap<S>(pb->grad.data(), nn, k).noalias() += g.transpose() * ConstMatMap<S>(pa->value.data(), m, k);
      }
    };
  }
  return Tensor<S>(n);
}

// x (n,in), w (out,in), b (out) -> (n,out)
template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  if (x.ndim() != 2 || w.ndim() != 2 || x.dim(1) != w.dim(1) || b.ndim() != 1 || b.dim(0) != w.dim(0))
    throw std::invalid_argument("linear: incompatible shapes");
  const int rows = x.dim(0), in = x.dim(1), out = w.dim(0);
  auto n = detail::make_result<S>({rows, out}, x.requires_grad() || w.requires_grad() || b.requires_grad());
  n->value.resize(static_cast<std::int64_t>(rows) * out);
  MatMap<S> y(n->value.data(), rows, out);
  y.noalias() = ConstMatMap<S>(x.data(), rows, in) * ConstMatMap<S>(w.data(), out, in).transpose();
  y.rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(b.data(), out);
  if (n->requires_grad) {
    n->parents = {x.node(), w.node(), b.node()};
    n->backward = [rows, in, out](Node<S>& self) {
      ConstMatMap<S> g(self.grad.data(), rows, out);
      auto& px = self.parents[0];
      auto& pw = self.parents[1];
      auto& pb = self.parents[2];
      if (px->requires_grad) {
        px->ensure_grad();
        MatMap<S>(px->grad.data(), rows, in).noalias() += g * ConstMatMap<S>(pw->value.data(), out, in);
      }
      if (pw->requires_grad) {
        pw->ensure_grad();
        MatMap<S>(pw->grad.data(), out, in).noalias() += g.transpose() * ConstMatMap<S>(px->value.data(), rows, in);
      }
      if (pb->requires_grad) {
        pb->ensure_grad();
        Eigen::Map<Eigen::Matrix<S, Eigen::Dynamic, 1>>(pb->grad.data(), out) += g.colwise().sum().transpose();
      }
    };
  }
  return Tensor<S>(n);
}

// Row-wise softmax of a (n,m) tensor; numerically stabilized.
template <typename S>
Tensor<S> softmax_rows(const Tensor<S>& x) {
  if (x.ndim() != 2) throw std::invalid_argument("softmax_rows: expected 2-d tensor");
  const int rows = x.dim(0), cols = x.dim(1);
  auto n = detail::make_result<S>(x.shape(), x.requires_grad());
  n->value.resize(x.size());
  for (int r = 0; r < rows; ++r) {
    auto row = x.array().segment(static_cast<std::int64_t>(r) * cols, cols);
    ArrayX<S> e = (row - row.maxCoeff()).exp();
    n->value.segment(static_cast<std::int64_t>(r) * cols, cols) = e / e.sum();
  }
  if (n->requires_grad) {
    n->parents = {x.node()};
    ArrayX<S> p = n->value;
    n->backward = [rows, cols, p](Node<S>& self) {
      ArrayX<S> dx(p.size());
      for (int r = 0; r < rows; ++r) {
        auto pr = p.segment(static_cast<std::int64_t>(r) * cols, cols);
        auto gr = self.grad.segment(static_cast<std::int64_t>(r) * cols, cols);
        const S dot = (gr * pr).sum();
        dx.segment(static_cast<std::int64_t>(r) * cols, cols) = pr * (gr - dot);
      }
      detail::accumulate(self.parents[0], dx);
    };
  }
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Shape manipulation beyond reshape
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis < 0 || axis >= static_cast<int>(s0.size())) throw std::invalid_argument("concat: bad axis");
  Shape out = s0;
  bool rg = false;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (static_cast<int>(i) != axis && s[i] != s0[i]) throw std::invalid_argument("concat: shape mismatch");
    rg = rg || p.requires_grad();
  }
  out[static_cast<std::size_t>(axis)] = 0;
  for (const auto& p : parts) out[static_cast<std::size_t>(axis)] += p.dim(axis);

  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s0[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s0.size(); ++i) inner *= s0[i];

  auto n = detail::make_result<S>(out, rg);
  n->value.resize(numel(out));
  const std::int64_t out_axis = out[static_cast<std::size_t>(axis)];
  std::int64_t offset = 0;
  for (const auto& p : parts) {
    const std::int64_t ax = p.dim(axis);
    for (std::int64_t o = 0; o < outer; ++o)
      n->value.segment((o * out_axis + offset) * inner, ax * inner) =
          p.array().segment(o * ax * inner, ax * inner);
    offset += ax;
  }
  if (rg) {
    for (const auto& p : parts) n->parents.push_back(p.node());
    n->backward = [outer, inner, out_axis](Node<S>& self) {
      std::int64_t offset = 0;
      for (auto& p : self.parents) {
        const std::int64_t ax = static_cast<std::int64_t>(p->value.size()) / (outer * inner);
        if (p->requires_grad) {
          p->ensure_grad();
          for (std::int64_t o = 0; o < outer; ++o)
            p->grad.segment(o * ax * inner, ax * inner) +=
                self.grad.segment((o * out_axis + offset) * inner, ax * inner);
        }
        offset += ax;
      }
    };
  }
  return Tensor<S>(n);
}

// (C, spatial...) -> (n_tokens, C) where tokens run over spatial positions in
// row-major order. Inverse of tokens_to_channels.
template <typename S>
Tensor<S> channels_to_tokens(const Tensor<S>& x) {
  if (x.ndim() < 2) throw std::invalid_argument("channels_to_tokens: rank must be >= 2");
  const int c = x.dim(0);
  const std::int64_t sp = x.size() / c;
  auto n = detail::make_result<S>({static_cast<int>(sp), c}, x.requires_grad());
  n->value.resize(x.size());
  for (int ch = 0; ch < c; ++ch)
    for (std::int64_t t = 0; t < sp; ++t) n->value[t * c + ch] = x.array()[ch * sp + t];
  if (n->requires_grad) {
    n->parents = {x.node()};
    n->backward = [c, sp](Node<S>& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (std::int64_t t = 0; t < sp; ++t) p->grad[ch * sp + t] += self.grad[t * c + ch];
    };
  }
  return Tensor<S>(n);
}

template <typename S>
Tensor<S> tokens_to_channels(const Tensor<S>& tok, Shape spatial) {
  if (tok.ndim() != 2) throw std::invalid_argument("tokens_to_channels: expected (n,c)");
  const int c = tok.dim(1);
  const std::int64_t sp = numel(spatial);
  if (sp != tok.dim(0)) throw std::invalid_argument("tokens_to_channels: token count mismatch");
  Shape out;
  out.push_back(c);
  for (int d : spatial) out.push_back(d);
  auto n = detail::make_result<S>(out, tok.requires_grad());
  n->value.resize(tok.size());
  for (int ch = 0; ch < c; ++ch)
    for (std::int64_t t = 0; t < sp; ++t) n->value[ch * sp + t] = tok.array()[t * c + ch];
  if (n->requires_grad) {
    n->parents = {tok.node()};
    n->backward = [c, sp](Node<S>& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (int ch = 0; ch < c; ++ch)
        for (std::int64_t t = 0; t < sp; ++t) p->grad[t * c + ch] += self.grad[ch * sp + t];
    };
  }
  return Tensor<S>(n);
}

// Rows of `table` (K,C) selected by indices -> (n,C). Gradient scatter-adds
// into the selected rows.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& table, const std::vector<int>& indices) {
  if (table.ndim() != 2) throw std::invalid_argument("gather_rows: table must be (K,C)");
  const int k = table.dim(0), c = table.dim(1);
  for (int i : indices)
    if (i < 0 || i >= k) throw std::invalid_argument("gather_rows: index out of range");
  auto n = detail::make_result<S>({static_cast<int>(indices.size()), c}, table.requires_grad());
  n->value.resize(static_cast<std::int64_t>(indices.size()) * c);
  for (std::size_t r = 0; r < indices.size(); ++r)
    n->value.segment(static_cast<std::int64_t>(r) * c, c) =
        table.array().segment(static_cast<std::int64_t>(indices[r]) * c, c);
  if (n->requires_grad) {
    n->parents = {table.node()};
    n->backward = [indices, c](Node<S>& self) {
      auto& p = self.parents[0];
      if (!p->requires_grad) return;
      p->ensure_grad();
      for (std::size_t r = 0; r < indices.size(); ++r)
        p->grad.segment(static_cast<std::int64_t>(indices[r]) * c, c) +=
            self.grad.segment(static_cast<std::int64_t>(r) * c, c);
    };
  }
  return Tensor<S>(n);
}

// ---------------------------------------------------------------------------
// Broadcast bias additions (the only broadcasting in the library)
// ---------------------------------------------------------------------------

// x (C, spatial...) + v (C): v broadcast across all spatial positions.
template <typename S>
Tensor<S> add_channel_bias(const Tensor<S>& x, const Tensor<S>& v) {
  if (v.ndim() != 1 || v.dim(0) != x.dim(0))
    throw std::invalid_argument("add_channel_bias: bias must be (C)");
  const int c = x.dim(0);
  const std::int64_t sp = x.size() / c;
  auto n = detail::make_result<S>(x.shape(), x.requires_grad() || v.requires_grad());
  n->value.resize(x.size());
  for (int ch = 0; ch < c; ++ch)
    n->value.segment(ch * sp, sp) = x.array().segment(ch * sp, sp) + v.array()[ch];
  if (n->requires_grad) {
    n->parents = {x.node(), v.node()};
    n->backward = [c, sp](Node<S>& self) {
      auto& px = self.parents[0];
      auto& pv = self.parents[1];
      if (px->requires_grad) {
        px->ensure_grad();
        px->grad += self.grad;
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int ch = 0; ch < c; ++ch) pv->grad[ch] += self.grad.segment(ch * sp, sp).sum();
      }
    };
  }
  return Tensor<S>(n);
}

// tok (n,C) + v (C): v broadcast across rows.
template <typename S>
Tensor<S> add_row_bias(const Tensor<S>& tok, const Tensor<S>& v) {
  if (tok.ndim() != 2 || v.ndim() != 1 || v.dim(0) != tok.dim(1))
    throw std::invalid_argument("add_row_bias: bias must be (C)");
  const int rows = tok.dim(0), c = tok.dim(1);
  auto n = detail::make_result<S>(tok.shape(), tok.requires_grad() || v.requires_grad());
  n->value.resize(tok.size());
  for (int r = 0; r < rows; ++r)
    n->value.segment(static_cast<std::int64_t>(r) * c, c) =
        tok.array().segment(static_cast<std::int64_t>(r) * c, c) + v.array();
  if (n->requires_grad) {
    n->parents = {tok.node(), v.node()};
    n->backward = [rows, c](Node<S>& self) {
      auto& pt = self.parents[0];
      auto& pv = self.parents[1];
      if (pt->requires_grad) {
        pt->ensure_grad();
        pt->grad += self.grad;
      }
      if (pv->requires_grad) {
        pv->ensure_grad();
        for (int r = 0; r < rows; ++r) pv->grad += self.grad.segment(static_cast<std::int64_t>(r) * c, c);
      }
    };
  }
  return Tensor<S>(n);
}

}  // namespace bridgekit::ad
