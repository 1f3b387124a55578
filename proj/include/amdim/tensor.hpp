#pragma once

// Dense tensors with tape-based reverse-mode autodiff. Nodes record their
// construction order; backward() visits reachable nodes in exact reverse
// construction order. Graphs are rebuilt every step and freed by shared_ptr
// once the step's tensors go out of scope.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <vector>

#include <Eigen/Core>

#include "amdim/common.hpp"
#include "amdim/rng.hpp"

namespace amdim {

namespace detail {
inline std::atomic<std::uint64_t>& node_counter() {
  static std::atomic<std::uint64_t> c{0};
  return c;
}
}  // namespace detail

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // allocated on first backward touch
  bool requires_grad = false;
  std::uint64_t id = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> parents;
  std::function<void(TensorNode<T>&)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using Node = TensorNode<T>;

  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  static Tensor full(Shape shape, T value) {
    auto n = fresh_node(std::move(shape));
    std::fill(n->data.begin(), n->data.end(), value);
    return Tensor(std::move(n));
  }

  static Tensor from_data(Shape shape, std::vector<T> data) {
    AMDIM_CHECK(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
                "data length " << data.size() << " does not match shape " << shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->id = detail::node_counter()++;
    return Tensor(std::move(n));
  }

  static Tensor scalar(T value) { return full({1}, value); }

  // fan-in scaled uniform init: U(-b, b) with b = sqrt(6 / fan_in)
  static Tensor he_uniform(Shape shape, std::int64_t fan_in, CounterRng& rng) {
    auto n = fresh_node(std::move(shape));
    const double b = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : n->data) v = static_cast<T>(rng.uniform(-b, b));
    return Tensor(std::move(n));
  }

  Tensor& set_requires_grad(bool flag = true) {
    node_->requires_grad = flag;
    return *this;
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::vector<T>& data() { return node_->data; }
  const std::vector<T>& data() const { return node_->data; }
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }

  T item() const {
    AMDIM_CHECK(numel() == 1, "item() on tensor of shape " << shape_str(shape()));
    return node_->data[0];
  }

  void zero_grad() { node_->grad.assign(node_->data.size(), T(0)); }

  // Fresh leaf carrying the same values, cut off from the graph.
  Tensor detach() const {
    auto n = fresh_node(node_->shape);
    n->data = node_->data;
    return Tensor(std::move(n));
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  static std::shared_ptr<Node> fresh_node(Shape shape) {
    auto n = std::make_shared<Node>();
    n->data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
    n->shape = std::move(shape);
    n->id = detail::node_counter()++;
    return n;
  }

  std::shared_ptr<Node> node_;
};

namespace detail {

template <typename T>
std::shared_ptr<TensorNode<T>> make_result(Shape shape,
                                           std::initializer_list<Tensor<T>> inputs) {
  auto n = std::make_shared<TensorNode<T>>();
  n->data.assign(static_cast<size_t>(shape_numel(shape)), T(0));
  n->shape = std::move(shape);
  n->id = node_counter()++;
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  n->requires_grad = needs;
  if (needs)
    for (const auto& in : inputs) n->parents.push_back(in.node());
  return n;
}

template <typename T>
void accumulate(TensorNode<T>& dst, const std::vector<T>& g) {
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

template <typename T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using EMap = Eigen::Map<EMat<T>>;
template <typename T>
using ECMap = Eigen::Map<const EMat<T>>;

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise ops (broadcast: equal shapes, or one operand is a scalar tensor)
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { Add, Mul };

template <typename T>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, BinKind kind) {
  const bool a_scalar = a.numel() == 1;
  const bool b_scalar = b.numel() == 1;
  AMDIM_CHECK(a.shape() == b.shape() || a_scalar || b_scalar,
              "incompatible shapes " << shape_str(a.shape()) << " and "
                                     << shape_str(b.shape()));
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  auto n = make_result<T>(out_shape, {a, b});
  const auto& ad = a.data();
  const auto& bd = b.data();
  const size_t sz = n->data.size();
  for (size_t i = 0; i < sz; ++i) {
    const T x = ad[a_scalar ? 0 : i];
    const T y = bd[b_scalar ? 0 : i];
    n->data[i] = kind == BinKind::Add ? x + y : x * y;
  }
  if (n->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    n->backprop = [an, bn, a_scalar, b_scalar, kind](TensorNode<T>& self) {
      const size_t sz = self.data.size();
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < sz; ++i) {
          const T g = kind == BinKind::Add ? self.grad[i]
                                           : self.grad[i] * bn->data[b_scalar ? 0 : i];
          an->grad[a_scalar ? 0 : i] += g;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < sz; ++i) {
          const T g = kind == BinKind::Add ? self.grad[i]
                                           : self.grad[i] * an->data[a_scalar ? 0 : i];
          bn->grad[b_scalar ? 0 : i] += g;
        }
      }
    };
  }
  return Tensor<T>(std::move(n));
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Add);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(a, b, detail::BinKind::Mul);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, double c) {
  auto n = detail::make_result<T>(a.shape(), {a});
  const T cc = static_cast<T>(c);
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] * cc;
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, cc](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i) an->grad[i] += self.grad[i] * cc;
    };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, double c) {
  auto n = detail::make_result<T>(a.shape(), {a});
  const T cc = static_cast<T>(c);
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = a.data()[i] + cc;
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](TensorNode<T>& self) { detail::accumulate(*an, self.grad); };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return add(a, scale(b, -1.0));
}

// ReLU; subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  auto n = detail::make_result<T>(a.shape(), {a});
  for (size_t i = 0; i < n->data.size(); ++i)
    n->data[i] = a.data()[i] > T(0) ? a.data()[i] : T(0);
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i)
        if (an->data[i] > T(0)) an->grad[i] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  auto n = detail::make_result<T>(a.shape(), {a});
  for (size_t i = 0; i < n->data.size(); ++i) n->data[i] = std::tanh(a.data()[i]);
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < self.data.size(); ++i) {
        const T y = self.data[i];
        an->grad[i] += self.grad[i] * (T(1) - y * y);
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// shape ops
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  AMDIM_CHECK(shape_numel(shape) == a.numel(),
              "cannot reshape " << shape_str(a.shape()) << " to " << shape_str(shape));
  auto n = detail::make_result<T>(std::move(shape), {a});
  n->data = a.data();
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](TensorNode<T>& self) { detail::accumulate(*an, self.grad); };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  AMDIM_CHECK(a.ndim() == 2, "transpose expects a matrix, got " << shape_str(a.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1);
  auto n = detail::make_result<T>({k, m}, {a});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < k; ++j) n->data[j * m + i] = a.data()[i * k + j];
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, m, k](TensorNode<T>& self) {
      an->ensure_grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < k; ++j) an->grad[i * k + j] += self.grad[j * m + i];
    };
  }
  return Tensor<T>(std::move(n));
}

// Arbitrary axis permutation, e.g. {0,2,3,1} maps BCHW -> BHWC.
template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<int>& dims) {
  const int nd = a.ndim();
  AMDIM_CHECK(static_cast<int>(dims.size()) == nd, "permute rank mismatch");
  Shape out_shape(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i) out_shape[static_cast<size_t>(i)] = a.dim(dims[static_cast<size_t>(i)]);
  std::vector<std::int64_t> in_strides(static_cast<size_t>(nd), 1);
  for (int i = nd - 2; i >= 0; --i)
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * a.dim(i + 1);
  std::vector<std::int64_t> src_strides(static_cast<size_t>(nd));
  for (int i = 0; i < nd; ++i)
    src_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(dims[static_cast<size_t>(i)])];
  auto n = detail::make_result<T>(out_shape, {a});
  const std::int64_t total = a.numel();
  std::vector<std::int64_t> mapping(static_cast<size_t>(total));
  {
    std::vector<std::int64_t> idx(static_cast<size_t>(nd), 0);
    for (std::int64_t o = 0; o < total; ++o) {
      std::int64_t src = 0;
      for (int i = 0; i < nd; ++i) src += idx[static_cast<size_t>(i)] * src_strides[static_cast<size_t>(i)];
      mapping[static_cast<size_t>(o)] = src;
      n->data[static_cast<size_t>(o)] = a.data()[static_cast<size_t>(src)];
      for (int i = nd - 1; i >= 0; --i) {
        if (++idx[static_cast<size_t>(i)] < out_shape[static_cast<size_t>(i)]) break;
        idx[static_cast<size_t>(i)] = 0;
      }
    }
  }
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, mapping = std::move(mapping)](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t o = 0; o < self.grad.size(); ++o)
        an->grad[static_cast<size_t>(mapping[o])] += self.grad[o];
    };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  AMDIM_CHECK(!parts.empty(), "concat_rows of nothing");
  const std::int64_t cols = parts[0].dim(1);
  std::int64_t rows = 0;
  for (const auto& p : parts) {
    AMDIM_CHECK(p.ndim() == 2 && p.dim(1) == cols, "concat_rows column mismatch");
    rows += p.dim(0);
  }
  auto n = std::make_shared<TensorNode<T>>();
  n->shape = {rows, cols};
  n->data.assign(static_cast<size_t>(rows * cols), T(0));
  n->id = detail::node_counter()++;
  for (const auto& p : parts) n->requires_grad = n->requires_grad || p.requires_grad();
  std::int64_t off = 0;
  std::vector<std::shared_ptr<TensorNode<T>>> srcs;
  for (const auto& p : parts) {
    std::copy(p.data().begin(), p.data().end(), n->data.begin() + off);
    off += p.numel();
    srcs.push_back(p.node());
    if (n->requires_grad) n->parents.push_back(p.node());
  }
  if (n->requires_grad) {
    n->backprop = [srcs](TensorNode<T>& self) {
      std::int64_t off = 0;
      for (const auto& s : srcs) {
        if (s->requires_grad) {
          s->ensure_grad();
          for (std::int64_t i = 0; i < s->numel(); ++i)
            s->grad[static_cast<size_t>(i)] += self.grad[static_cast<size_t>(off + i)];
        }
        off += s->numel();
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// out[i] = x[indices[i]]; backward scatter-adds.
template <typename T>
Tensor<T> gather(const Tensor<T>& a, std::vector<std::int64_t> indices, Shape out_shape) {
  AMDIM_CHECK(shape_numel(out_shape) == static_cast<std::int64_t>(indices.size()),
              "gather index count does not match output shape");
  auto n = detail::make_result<T>(std::move(out_shape), {a});
  const std::int64_t limit = a.numel();
  for (size_t i = 0; i < indices.size(); ++i) {
    AMDIM_CHECK(indices[i] >= 0 && indices[i] < limit, "gather index out of range");
    n->data[i] = a.data()[static_cast<size_t>(indices[i])];
  }
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, indices = std::move(indices)](TensorNode<T>& self) {
      an->ensure_grad();
      for (size_t i = 0; i < indices.size(); ++i)
        an->grad[static_cast<size_t>(indices[i])] += self.grad[i];
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto n = detail::make_result<T>({1}, {a});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  n->data[0] = acc;
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an](TensorNode<T>& self) {
      an->ensure_grad();
      const T g = self.grad[0];
      for (auto& v : an->grad) v += g;
    };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  const T inv = T(1) / static_cast<T>(a.numel());
  auto n = detail::make_result<T>({1}, {a});
  T acc = T(0);
  for (T v : a.data()) acc += v;
  n->data[0] = acc * inv;
  if (n->requires_grad) {
    auto an = a.node();
    n->backprop = [an, inv](TensorNode<T>& self) {
      an->ensure_grad();
      const T g = self.grad[0] * inv;
      for (auto& v : an->grad) v += g;
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// matmul / bias
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  AMDIM_CHECK(a.ndim() == 2 && b.ndim() == 2,
              "matmul expects matrices, got " << shape_str(a.shape()) << " and "
                                              << shape_str(b.shape()));
  AMDIM_CHECK(a.dim(1) == b.dim(0), "matmul inner extent mismatch: "
                                        << shape_str(a.shape()) << " x "
                                        << shape_str(b.shape()));
  const std::int64_t m = a.dim(0), k = a.dim(1), p = b.dim(1);
  auto n = detail::make_result<T>({m, p}, {a, b});
  detail::ECMap<T> A(a.data().data(), m, k);
  detail::ECMap<T> B(b.data().data(), k, p);
  detail::EMap<T> C(n->data.data(), m, p);
  C.noalias() = A * B;
  if (n->requires_grad) {
    auto an = a.node();
    auto bn = b.node();
    n->backprop = [an, bn, m, k, p](TensorNode<T>& self) {
      detail::ECMap<T> G(self.grad.data(), m, p);
      if (an->requires_grad) {
        an->ensure_grad();
        detail::ECMap<T> B(bn->data.data(), k, p);
        detail::EMap<T> GA(an->grad.data(), m, k);
        GA.noalias() += G * B.transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        detail::ECMap<T> A(an->data.data(), m, k);
        detail::EMap<T> GB(bn->grad.data(), k, p);
        GB.noalias() += A.transpose() * G;
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// x[M,N] + b[N], broadcast over rows
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  AMDIM_CHECK(x.ndim() == 2 && b.ndim() == 1 && b.dim(0) == x.dim(1),
              "add_bias shape mismatch: " << shape_str(x.shape()) << " + "
                                          << shape_str(b.shape()));
  const std::int64_t m = x.dim(0), c = x.dim(1);
  auto n = detail::make_result<T>(x.shape(), {x, b});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      n->data[static_cast<size_t>(i * c + j)] =
          x.data()[static_cast<size_t>(i * c + j)] + b.data()[static_cast<size_t>(j)];
  if (n->requires_grad) {
    auto xn = x.node();
    auto bn = b.node();
    n->backprop = [xn, bn, m, c](TensorNode<T>& self) {
      if (xn->requires_grad) detail::accumulate(*xn, self.grad);
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::int64_t i = 0; i < m; ++i)
          for (std::int64_t j = 0; j < c; ++j)
            bn->grad[static_cast<size_t>(j)] += self.grad[static_cast<size_t>(i * c + j)];
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// x[B,C,H,W] + b[C], broadcast per channel
template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  AMDIM_CHECK(x.ndim() == 4 && b.ndim() == 1 && b.dim(0) == x.dim(1),
              "add_channel_bias shape mismatch");
  const std::int64_t B = x.dim(0), C = x.dim(1), HW = x.dim(2) * x.dim(3);
  auto n = detail::make_result<T>(x.shape(), {x, b});
  for (std::int64_t i = 0; i < B; ++i)
    for (std::int64_t ch = 0; ch < C; ++ch) {
      const T bias = b.data()[static_cast<size_t>(ch)];
      const std::int64_t base = (i * C + ch) * HW;
      for (std::int64_t k = 0; k < HW; ++k)
        n->data[static_cast<size_t>(base + k)] = x.data()[static_cast<size_t>(base + k)] + bias;
    }
  if (n->requires_grad) {
    auto xn = x.node();
    auto bn = b.node();
    n->backprop = [xn, bn, B, C, HW](TensorNode<T>& self) {
      if (xn->requires_grad) detail::accumulate(*xn, self.grad);
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (std::int64_t i = 0; i < B; ++i)
          for (std::int64_t ch = 0; ch < C; ++ch) {
            const std::int64_t base = (i * C + ch) * HW;
            T acc = T(0);
            for (std::int64_t k = 0; k < HW; ++k) acc += self.grad[static_cast<size_t>(base + k)];
            bn->grad[static_cast<size_t>(ch)] += acc;
          }
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// conv2d (cross-correlation, no padding) and mean_pool
// ---------------------------------------------------------------------------

namespace detail {

// cols is [Cin*kh*kw, Ho*Wo] for one image, row-major
template <typename T>
void im2col(const T* img, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t Ho, std::int64_t Wo, T* cols) {
  const std::int64_t owo = Ho * Wo;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        T* dst = cols + ((c * kh + ki) * kw + kj) * owo;
        for (std::int64_t oi = 0; oi < Ho; ++oi) {
          const T* src = img + c * H * W + (oi * stride + ki) * W + kj;
          for (std::int64_t oj = 0; oj < Wo; ++oj) dst[oi * Wo + oj] = src[oj * stride];
        }
      }
}

template <typename T>
void col2im_add(const T* cols, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
                std::int64_t kw, std::int64_t stride, std::int64_t Ho, std::int64_t Wo, T* img) {
  const std::int64_t owo = Ho * Wo;
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ki = 0; ki < kh; ++ki)
      for (std::int64_t kj = 0; kj < kw; ++kj) {
        const T* src = cols + ((c * kh + ki) * kw + kj) * owo;
        for (std::int64_t oi = 0; oi < Ho; ++oi) {
          T* dst = img + c * H * W + (oi * stride + ki) * W + kj;
          for (std::int64_t oj = 0; oj < Wo; ++oj) dst[oj * stride] += src[oi * Wo + oj];
        }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::int64_t stride) {
  AMDIM_CHECK(input.ndim() == 4 && kernel.ndim() == 4,
              "conv2d expects 4-d input and kernel, got " << shape_str(input.shape())
                                                          << " and " << shape_str(kernel.shape()));
  AMDIM_CHECK(stride >= 1, "conv2d stride must be positive");
  const std::int64_t B = input.dim(0), Cin = input.dim(1), H = input.dim(2), W = input.dim(3);
  const std::int64_t Cout = kernel.dim(0), kh = kernel.dim(2), kw = kernel.dim(3);
  AMDIM_CHECK(kernel.dim(1) == Cin, "conv2d channel mismatch: input has " << Cin
                                        << ", kernel expects " << kernel.dim(1));
  AMDIM_CHECK(kh <= H && kw <= W, "conv2d kernel larger than input");
  AMDIM_CHECK((H - kh) % stride == 0 && (W - kw) % stride == 0,
              "conv2d non-integral output extent for input " << H << "x" << W << " kernel "
                                                             << kh << "x" << kw << " stride "
                                                             << stride << " (no padding)");
  const std::int64_t Ho = (H - kh) / stride + 1;
  const std::int64_t Wo = (W - kw) / stride + 1;
  auto n = detail::make_result<T>({B, Cout, Ho, Wo}, {input, kernel});
  const std::int64_t patch = Cin * kh * kw;
  std::vector<T> cols(static_cast<size_t>(patch * Ho * Wo));
  detail::ECMap<T> K(kernel.data().data(), Cout, patch);
  for (std::int64_t b = 0; b < B; ++b) {
    detail::im2col(input.data().data() + b * Cin * H * W, Cin, H, W, kh, kw, stride, Ho, Wo,
                   cols.data());
    detail::ECMap<T> Cm(cols.data(), patch, Ho * Wo);
    detail::EMap<T> Om(n->data.data() + b * Cout * Ho * Wo, Cout, Ho * Wo);
    Om.noalias() = K * Cm;
  }
  if (n->requires_grad) {
    auto in = input.node();
    auto kn = kernel.node();
    n->backprop = [in, kn, B, Cin, H, W, Cout, kh, kw, stride, Ho, Wo](TensorNode<T>& self) {
      const std::int64_t patch = Cin * kh * kw;
      std::vector<T> cols(static_cast<size_t>(patch * Ho * Wo));
      if (in->requires_grad) in->ensure_grad();
      if (kn->requires_grad) kn->ensure_grad();
      detail::ECMap<T> K(kn->data.data(), Cout, patch);
      for (std::int64_t b = 0; b < B; ++b) {
        detail::ECMap<T> G(self.grad.data() + b * Cout * Ho * Wo, Cout, Ho * Wo);
        if (kn->requires_grad) {
          detail::im2col(in->data.data() + b * Cin * H * W, Cin, H, W, kh, kw, stride, Ho, Wo,
                         cols.data());
          detail::ECMap<T> Cm(cols.data(), patch, Ho * Wo);
          detail::EMap<T> GK(kn->grad.data(), Cout, patch);
          GK.noalias() += G * Cm.transpose();
        }
        if (in->requires_grad) {
          detail::EMap<T> GC(cols.data(), patch, Ho * Wo);
          GC.noalias() = K.transpose() * G;
          detail::col2im_add(cols.data(), Cin, H, W, kh, kw, stride, Ho, Wo,
                             in->grad.data() + b * Cin * H * W);
        }
      }
    };
  }
  return Tensor<T>(std::move(n));
}

template <typename T>
Tensor<T> mean_pool(const Tensor<T>& input, std::int64_t kernel, std::int64_t stride) {
  AMDIM_CHECK(input.ndim() == 4, "mean_pool expects 4-d input");
  AMDIM_CHECK(kernel >= 1 && stride >= 1, "mean_pool kernel and stride must be positive");
  const std::int64_t B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  AMDIM_CHECK(kernel <= H && kernel <= W, "mean_pool kernel larger than input");
  AMDIM_CHECK((H - kernel) % stride == 0 && (W - kernel) % stride == 0,
              "mean_pool non-integral output extent (no padding)");
  const std::int64_t Ho = (H - kernel) / stride + 1;
  const std::int64_t Wo = (W - kernel) / stride + 1;
  auto n = detail::make_result<T>({B, C, Ho, Wo}, {input});
  const T inv = T(1) / static_cast<T>(kernel * kernel);
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const T* src = input.data().data() + bc * H * W;
    T* dst = n->data.data() + bc * Ho * Wo;
    for (std::int64_t oi = 0; oi < Ho; ++oi)
      for (std::int64_t oj = 0; oj < Wo; ++oj) {
        T acc = T(0);
        for (std::int64_t ki = 0; ki < kernel; ++ki)
          for (std::int64_t kj = 0; kj < kernel; ++kj)
            acc += src[(oi * stride + ki) * W + (oj * stride + kj)];
        dst[oi * Wo + oj] = acc * inv;
      }
  }
  if (n->requires_grad) {
    auto in = input.node();
    n->backprop = [in, B, C, H, W, kernel, stride, Ho, Wo, inv](TensorNode<T>& self) {
      in->ensure_grad();
      for (std::int64_t bc = 0; bc < B * C; ++bc) {
        T* gsrc = in->grad.data() + bc * H * W;
        const T* gdst = self.grad.data() + bc * Ho * Wo;
        for (std::int64_t oi = 0; oi < Ho; ++oi)
          for (std::int64_t oj = 0; oj < Wo; ++oj) {
            const T g = gdst[oi * Wo + oj] * inv;
            for (std::int64_t ki = 0; ki < kernel; ++ki)
              for (std::int64_t kj = 0; kj < kernel; ++kj)
                gsrc[(oi * stride + ki) * W + (oj * stride + kj)] += g;
          }
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// log_softmax
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x, int axis = -1) {
  const int nd = x.ndim();
  if (axis < 0) axis += nd;
  AMDIM_CHECK(axis >= 0 && axis < nd, "log_softmax axis out of range");
  for (T v : x.data()) AMDIM_CHECK(std::isfinite(static_cast<double>(v)), "log_softmax on non-finite input");
  const std::int64_t K = x.dim(axis);
  std::int64_t inner = 1, outer = 1;
  for (int i = axis + 1; i < nd; ++i) inner *= x.dim(i);
  for (int i = 0; i < axis; ++i) outer *= x.dim(i);
  auto n = detail::make_result<T>(x.shape(), {x});
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t in_i = 0; in_i < inner; ++in_i) {
      const std::int64_t base = o * K * inner + in_i;
      T m = x.data()[static_cast<size_t>(base)];
      for (std::int64_t k = 1; k < K; ++k)
        m = std::max(m, x.data()[static_cast<size_t>(base + k * inner)]);
      T z = T(0);
      for (std::int64_t k = 0; k < K; ++k)
        z += std::exp(x.data()[static_cast<size_t>(base + k * inner)] - m);
      const T lz = m + std::log(z);
      for (std::int64_t k = 0; k < K; ++k)
        n->data[static_cast<size_t>(base + k * inner)] =
            x.data()[static_cast<size_t>(base + k * inner)] - lz;
    }
  if (n->requires_grad) {
    auto xn = x.node();
    n->backprop = [xn, K, inner, outer](TensorNode<T>& self) {
      xn->ensure_grad();
      for (std::int64_t o = 0; o < outer; ++o)
        for (std::int64_t in_i = 0; in_i < inner; ++in_i) {
          const std::int64_t base = o * K * inner + in_i;
          T gsum = T(0);
          for (std::int64_t k = 0; k < K; ++k) gsum += self.grad[static_cast<size_t>(base + k * inner)];
          for (std::int64_t k = 0; k < K; ++k) {
            const size_t idx = static_cast<size_t>(base + k * inner);
            xn->grad[idx] += self.grad[idx] - std::exp(self.data[idx]) * gsum;
          }
        }
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// batch norm (2d, per channel over B*H*W)
// ---------------------------------------------------------------------------

template <typename T>
struct BatchNormState {
  std::vector<T> running_mean;
  std::vector<T> running_var;
};

template <typename T>
Tensor<T> batch_norm2d(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                       BatchNormState<T>* state, bool training, double momentum = 0.1,
                       double eps = 1e-5) {
  AMDIM_CHECK(x.ndim() == 4, "batch_norm2d expects 4-d input");
  const std::int64_t B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  AMDIM_CHECK(gamma.numel() == C && beta.numel() == C, "batch_norm2d parameter size mismatch");
  AMDIM_CHECK(state != nullptr && static_cast<std::int64_t>(state->running_mean.size()) == C &&
                  static_cast<std::int64_t>(state->running_var.size()) == C,
              "batch_norm2d state size mismatch");
  const std::int64_t HW = H * W;
  const std::int64_t N = B * HW;
  auto n = detail::make_result<T>(x.shape(), {x, gamma, beta});
  std::vector<T> xhat(static_cast<size_t>(x.numel()));
  std::vector<T> inv_std(static_cast<size_t>(C));
  for (std::int64_t c = 0; c < C; ++c) {
    T mu, var;
    if (training) {
      T acc = T(0);
      for (std::int64_t b = 0; b < B; ++b) {
        const T* src = x.data().data() + (b * C + c) * HW;
        for (std::int64_t k = 0; k < HW; ++k) acc += src[k];
      }
      mu = acc / static_cast<T>(N);
      T vacc = T(0);
      for (std::int64_t b = 0; b < B; ++b) {
        const T* src = x.data().data() + (b * C + c) * HW;
        for (std::int64_t k = 0; k < HW; ++k) {
          const T d = src[k] - mu;
          vacc += d * d;
        }
      }
      var = vacc / static_cast<T>(N);
      state->running_mean[static_cast<size_t>(c)] =
          static_cast<T>((1.0 - momentum)) * state->running_mean[static_cast<size_t>(c)] +
          static_cast<T>(momentum) * mu;
      state->running_var[static_cast<size_t>(c)] =
          static_cast<T>((1.0 - momentum)) * state->running_var[static_cast<size_t>(c)] +
          static_cast<T>(momentum) * var;
    } else {
      mu = state->running_mean[static_cast<size_t>(c)];
      var = state->running_var[static_cast<size_t>(c)];
    }
    const T istd = T(1) / std::sqrt(var + static_cast<T>(eps));
    inv_std[static_cast<size_t>(c)] = istd;
    const T g = gamma.data()[static_cast<size_t>(c)];
    const T bta = beta.data()[static_cast<size_t>(c)];
    for (std::int64_t b = 0; b < B; ++b) {
      const T* src = x.data().data() + (b * C + c) * HW;
      T* xh = xhat.data() + (b * C + c) * HW;
      T* dst = n->data.data() + (b * C + c) * HW;
      for (std::int64_t k = 0; k < HW; ++k) {
        xh[k] = (src[k] - mu) * istd;
        dst[k] = g * xh[k] + bta;
      }
    }
  }
  if (n->requires_grad) {
    auto xn = x.node();
    auto gn = gamma.node();
    auto bn = beta.node();
    n->backprop = [xn, gn, bn, B, C, HW, N, training, xhat = std::move(xhat),
                   inv_std = std::move(inv_std)](TensorNode<T>& self) {
      for (std::int64_t c = 0; c < C; ++c) {
        T gsum = T(0), gxsum = T(0);
        for (std::int64_t b = 0; b < B; ++b) {
          const T* g = self.grad.data() + (b * C + c) * HW;
          const T* xh = xhat.data() + (b * C + c) * HW;
          for (std::int64_t k = 0; k < HW; ++k) {
            gsum += g[k];
            gxsum += g[k] * xh[k];
          }
        }
        if (gn->requires_grad) {
          gn->ensure_grad();
          gn->grad[static_cast<size_t>(c)] += gxsum;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[static_cast<size_t>(c)] += gsum;
        }
        if (xn->requires_grad) {
          xn->ensure_grad();
          const T gm = gn->data[static_cast<size_t>(c)];
          const T istd = inv_std[static_cast<size_t>(c)];
          const T mean_g = gsum / static_cast<T>(N);
          const T mean_gx = gxsum / static_cast<T>(N);
          for (std::int64_t b = 0; b < B; ++b) {
            const T* g = self.grad.data() + (b * C + c) * HW;
            const T* xh = xhat.data() + (b * C + c) * HW;
            T* gx = xn->grad.data() + (b * C + c) * HW;
            for (std::int64_t k = 0; k < HW; ++k) {
              if (training)
                gx[k] += gm * istd * (g[k] - mean_g - xh[k] * mean_gx);
              else
                gx[k] += gm * istd * g[k];
            }
          }
        }
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// NCE log-softmax terms
// ---------------------------------------------------------------------------

// scores: [nA, nB, nC]; owner[a] in [0, nB) names the source image of
// antecedent a. For each positive (a, owner[a], c) the candidate set is that
// positive plus every consequent of the other images; the image's own other
// consequents are excluded. Returns the log-softmax term (positive
// log-probability) per positive, shape [nA, nC]. The per-antecedent negative
// normalization is computed once and shared across the antecedent's positives.
template <typename T>
Tensor<T> nce_log_softmax_terms(const Tensor<T>& scores, const std::vector<std::int64_t>& owner) {
  AMDIM_CHECK(scores.ndim() == 3, "nce terms expect scores of shape [nA, nB, nC]");
  const std::int64_t nA = scores.dim(0), nB = scores.dim(1), nC = scores.dim(2);
  AMDIM_CHECK(nB >= 2, "NCE needs at least 2 images (no negatives exist otherwise)");
  AMDIM_CHECK(static_cast<std::int64_t>(owner.size()) == nA, "owner list size mismatch");
  for (auto o : owner) AMDIM_CHECK(o >= 0 && o < nB, "owner index out of range");
  auto n = detail::make_result<T>({nA, nC}, {scores});
  // per (a, c): log denominator relative to the per-antecedent max
  std::vector<T> log_denom(static_cast<size_t>(nA * nC));
  std::vector<T> max_all(static_cast<size_t>(nA));
  const T* s = scores.data().data();
  for (std::int64_t a = 0; a < nA; ++a) {
    const std::int64_t own = owner[static_cast<size_t>(a)];
    const T* row = s + a * nB * nC;
    // the own block holds exactly the positives, so this maxes over all candidates
    T m = row[0];
    for (std::int64_t i = 1; i < nB * nC; ++i) m = std::max(m, row[i]);
    max_all[static_cast<size_t>(a)] = m;
    T neg_sum = T(0);
    for (std::int64_t b = 0; b < nB; ++b) {
      if (b == own) continue;
      for (std::int64_t c = 0; c < nC; ++c) neg_sum += std::exp(row[b * nC + c] - m);
    }
    for (std::int64_t c = 0; c < nC; ++c) {
      const T pos = row[own * nC + c];
      const T denom = neg_sum + std::exp(pos - m);
      log_denom[static_cast<size_t>(a * nC + c)] = std::log(denom);
      n->data[static_cast<size_t>(a * nC + c)] = (pos - m) - std::log(denom);
    }
  }
  if (n->requires_grad) {
    auto sn = scores.node();
    std::vector<std::int64_t> own_copy = owner;
    n->backprop = [sn, nA, nB, nC, own_copy = std::move(own_copy), log_denom = std::move(log_denom),
                   max_all = std::move(max_all)](TensorNode<T>& self) {
      sn->ensure_grad();
      const T* s = sn->data.data();
      for (std::int64_t a = 0; a < nA; ++a) {
        const std::int64_t own = own_copy[static_cast<size_t>(a)];
        const T m = max_all[static_cast<size_t>(a)];
        const T* row = s + a * nB * nC;
        T* grow = sn->grad.data() + a * nB * nC;
        // weight for negatives: sum_c g_c / denom_c
        T wneg = T(0);
        for (std::int64_t c = 0; c < nC; ++c)
          wneg += self.grad[static_cast<size_t>(a * nC + c)] *
                  std::exp(-log_denom[static_cast<size_t>(a * nC + c)]);
        for (std::int64_t b = 0; b < nB; ++b) {
          if (b == own) continue;
          for (std::int64_t c = 0; c < nC; ++c)
            grow[b * nC + c] -= std::exp(row[b * nC + c] - m) * wneg;
        }
        for (std::int64_t c = 0; c < nC; ++c) {
          const T g = self.grad[static_cast<size_t>(a * nC + c)];
          const T p_pos = std::exp(row[own * nC + c] - m - log_denom[static_cast<size_t>(a * nC + c)]);
          grow[own * nC + c] += g * (T(1) - p_pos);
        }
      }
    };
  }
  return Tensor<T>(std::move(n));
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

template <typename T>
void backward(const Tensor<T>& loss) {
  AMDIM_CHECK(loss.numel() == 1, "backward expects a scalar loss, got "
                                     << shape_str(loss.shape()));
  using NodeT = TensorNode<T>;
  std::vector<NodeT*> order;
  std::vector<NodeT*> stack;
  // reachable requires_grad subgraph
  {
    std::vector<NodeT*> seen;
    auto mark = [&](NodeT* n) {
      if (!n->requires_grad) return false;
      auto it = std::lower_bound(seen.begin(), seen.end(), n);
      if (it != seen.end() && *it == n) return false;
      seen.insert(it, n);
      return true;
    };
    NodeT* root = loss.node().get();
    if (!root->requires_grad) return;
    mark(root);
    stack.push_back(root);
    order.push_back(root);
    while (!stack.empty()) {
      NodeT* cur = stack.back();
      stack.pop_back();
      for (auto& p : cur->parents)
        if (mark(p.get())) {
          stack.push_back(p.get());
          order.push_back(p.get());
        }
    }
  }
  std::sort(order.begin(), order.end(),
            [](const NodeT* a, const NodeT* b) { return a->id > b->id; });
  // interior grads are scratch per backward call; only leaf grads accumulate
  for (NodeT* n : order)
    if (n->backprop) n->grad.assign(n->data.size(), T(0));
  auto* root = loss.node().get();
  root->ensure_grad();
  root->grad[0] += T(1);
  for (NodeT* n : order)
    if (n->backprop) n->backprop(*n);
}

}  // namespace amdim
