#pragma once

// Dense row-major tensors with a dynamic reverse-mode tape.
//
// Every op returns a new tensor. When any input requires a gradient the
// result keeps references to its inputs plus a backward rule; calling
// backward() on a scalar walks that graph once in reverse topological order.
// Parameters are leaf tensors whose data may be updated in place by an
// optimizer; everything else is immutable after construction.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bltlab/common.hpp"

namespace bltlab {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void()> backward;

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::Node<T>;
  using value_type = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    for (std::size_t i = 0; i < shape.size(); ++i)
      if (shape[i] == 0)
        throw Error("shape", "tensor extent on axis " + std::to_string(i) + " must be positive");
    if (numel(shape) != data.size())
      throw Error("shape", "tensor shape " + shape_str(shape) + " does not match " +
                               std::to_string(data.size()) + " values");
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<T> data(numel(shape), T(0));
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor filled(Shape shape, T value, bool requires_grad = false) {
    std::vector<T> data(numel(shape), value);
    return Tensor(std::move(shape), std::move(data), requires_grad);
  }

  // Used by ops to hand out freshly built graph nodes.
  static Tensor from_node(std::shared_ptr<Node> node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->data.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const T> data() const { return node_->data; }
  // Only meaningful for leaves (parameters, inputs).
  std::span<T> mutable_data() { return node_->data; }
  T item() const {
    if (size() != 1) throw Error("shape", "item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  /// Gradient buffer; zeros if nothing has been accumulated yet.
  std::span<const T> grad() const { return node_->ensure_grad(); }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), T(0)); }

  bool has_nonfinite() const {
    return std::any_of(node_->data.begin(), node_->data.end(),
                       [](T x) { return !std::isfinite(x); });
  }

  /// A constant copy cut from the graph.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

// Creates the result of an op; the graph is wired only when some input
// requires a gradient. `rule` receives (output node) and must accumulate
// into the inputs' grad buffers.
template <typename T, typename Rule>
Tensor<T> make_result(Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs, Rule&& rule) {
  auto out = std::make_shared<Node<T>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  for (const Tensor<T>* in : inputs)
    if (in && in->defined() && in->requires_grad()) out->requires_grad = true;
  if (out->requires_grad) {
    for (const Tensor<T>* in : inputs)
      if (in && in->defined()) out->inputs.push_back(in->node_ptr());
    Node<T>* self = out.get();
    out->backward = [self, rule = std::forward<Rule>(rule)]() mutable { rule(*self); };
  }
  return Tensor<T>::from_node(std::move(out));
}

template <typename T>
bool wants_grad(const Tensor<T>& t) {
  return t.defined() && t.requires_grad();
}

inline void require_rank(const Shape& shape, std::size_t rank, const char* op) {
  if (shape.size() != rank)
    throw Error("shape", std::string(op) + ": expected rank " + std::to_string(rank) +
                             " input, got shape " + shape_str(shape));
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a.size() != b.size())
    throw Error("shape", std::string(op) + ": rank mismatch " + shape_str(a) + " vs " +
                             shape_str(b));
  for (std::size_t i = 0; i < a.size(); ++i)
    if (a[i] != b[i])
      throw Error("shape", std::string(op) + ": extent mismatch on axis " + std::to_string(i) +
                               " (" + std::to_string(a[i]) + " vs " + std::to_string(b[i]) +
                               ")");
}

// C[m,n] (+)= A[m,k] * B[k,n], all row-major. The i-k-j order keeps the inner
// loop contiguous and the reduction order fixed.
template <typename T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c,
             bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

// C[m,n] += A[m,k] * B[n,k]^T. Dot products use eight partial sums so that
// the compiler can vectorize without reassociating.
template <typename T>
void gemm_nt_acc(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const T* brow = b + j * k;
      T acc[8] = {};
      std::size_t p = 0;
      for (; p + 8 <= k; p += 8)
        for (std::size_t l = 0; l < 8; ++l) acc[l] += arow[p + l] * brow[p + l];
      T tail = 0;
      for (; p < k; ++p) tail += arow[p] * brow[p];
      c[i * n + j] +=
          ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
    }
  }
}

// C[k,n] = A[m,k]^T * B[m,n].
template <typename T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c) {
  std::fill(c, c + k * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    const T* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T aip = a[i * k + p];
      if (aip == T(0)) continue;
      T* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += aip * brow[j];
    }
  }
}

struct ConvGeometry {
  std::size_t channels, height, width, kernel, stride, pad, out_h, out_w;
};

template <typename T>
void im2col(const ConvGeometry& g, const T* image, T* col) {
  const std::size_t out_hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * out_hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool inside = iy >= 0 && iy < static_cast<long>(g.height) && ix >= 0 &&
                                ix < static_cast<long>(g.width);
            row[oy * g.out_w + ox] =
                inside ? image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                               static_cast<std::size_t>(ix)]
                       : T(0);
          }
        }
      }
}

template <typename T>
void col2im_acc(const ConvGeometry& g, const T* col, T* image) {
  const std::size_t out_hw = g.out_h * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const T* row = col + ((c * g.kernel + ky) * g.kernel + kx) * out_hw;
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.width)) continue;
            image[(c * g.height + static_cast<std::size_t>(iy)) * g.width +
                  static_cast<std::size_t>(ix)] += row[oy * g.out_w + ox];
          }
        }
      }
}

}  // namespace detail

enum class Padding { same, valid };

/// 2D cross-correlation. input [N,C_in,H,W], kernel [C_out,C_in,k,k], k odd.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride = 1,
                 Padding padding = Padding::same) {
  detail::require_rank(input.shape(), 4, "conv2d input");
  detail::require_rank(kernel.shape(), 4, "conv2d kernel");
  if (stride == 0) throw Error("shape", "conv2d: stride must be positive");
  const std::size_t n = input.dim(0), c_in = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t c_out = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != c_in)
    throw Error("shape", "conv2d: input channels (axis 1) = " + std::to_string(c_in) +
                             " but kernel axis 1 = " + std::to_string(kernel.dim(1)));
  if (kernel.dim(3) != k)
    throw Error("shape", "conv2d: kernel axes 2 and 3 differ (" + std::to_string(k) + " vs " +
                             std::to_string(kernel.dim(3)) + ")");
  if (k % 2 == 0) throw Error("shape", "conv2d: kernel extent (axis 2) must be odd");
  const std::size_t pad = padding == Padding::same ? k / 2 : 0;
  if (h + 2 * pad < k || w + 2 * pad < k)
    throw Error("shape", "conv2d: spatial extent smaller than kernel (axis 2/3)");
  detail::ConvGeometry g{c_in, h, w, k, stride, pad, (h + 2 * pad - k) / stride + 1,
                         (w + 2 * pad - k) / stride + 1};
  const std::size_t ckk = c_in * k * k, out_hw = g.out_h * g.out_w;

  std::vector<T> out(n * c_out * out_hw);
  std::vector<T> col(ckk * out_hw);
  const T* x = input.data().data();
  const T* kw = kernel.data().data();
  for (std::size_t s = 0; s < n; ++s) {
    detail::im2col(g, x + s * c_in * h * w, col.data());
    detail::gemm_nn(c_out, out_hw, ckk, kw, col.data(), out.data() + s * c_out * out_hw, false);
  }

  Tensor<T> in_ref = input, k_ref = kernel;
  return detail::make_result<T>(
      {n, c_out, g.out_h, g.out_w}, std::move(out), {&input, &kernel},
      [in_ref, k_ref, g, n, c_out, ckk, out_hw](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        std::vector<T> col(ckk * out_hw);
        T* dk = detail::wants_grad(k_ref) ? k_ref.node()->ensure_grad().data() : nullptr;
        T* dx = detail::wants_grad(in_ref) ? in_ref.node()->ensure_grad().data() : nullptr;
        const std::size_t in_size = g.channels * g.height * g.width;
        for (std::size_t s = 0; s < n; ++s) {
          const T* dys = dy + s * c_out * out_hw;
          if (dk) {
            detail::im2col(g, in_ref.data().data() + s * in_size, col.data());
            detail::gemm_nt_acc(c_out, ckk, out_hw, dys, col.data(), dk);
          }
          if (dx) {
            detail::gemm_tn(c_out, out_hw, ckk, k_ref.data().data(), dys, col.data());
            detail::col2im_acc(g, col.data(), dx + s * in_size);
          }
        }
      });
}

/// 2x2 max pooling with stride 2; ties resolve to the first cell in row-major order.
template <typename T>
Tensor<T> maxpool2d(const Tensor<T>& input, std::size_t window = 2) {
  detail::require_rank(input.shape(), 4, "maxpool2d");
  if (window != 2) throw Error("shape", "maxpool2d: only window 2 is supported");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  if (h % 2) throw Error("shape", "maxpool2d: odd extent on axis 2 (" + std::to_string(h) + ")");
  if (w % 2) throw Error("shape", "maxpool2d: odd extent on axis 3 (" + std::to_string(w) + ")");
  const std::size_t oh = h / 2, ow = w / 2;
  std::vector<T> out(n * c * oh * ow);
  std::vector<std::size_t> argmax(out.size());
  const T* x = input.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (plane * h + 2 * oy) * w + 2 * ox;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (plane * h + 2 * oy + dy) * w + 2 * ox + dx;
            if (x[idx] > x[best]) best = idx;
          }
        const std::size_t o = (plane * oh + oy) * ow + ox;
        out[o] = x[best];
        argmax[o] = best;
      }
  Tensor<T> in_ref = input;
  return detail::make_result<T>({n, c, oh, ow}, std::move(out), {&input},
                                [in_ref, argmax = std::move(argmax)](detail::Node<T>& self) {
                                  auto& dx = in_ref.node()->ensure_grad();
                                  for (std::size_t o = 0; o < argmax.size(); ++o)
                                    dx[argmax[o]] += self.grad[o];
                                });
}

/// Per-channel spatial mean: [N,C,H,W] -> [N,C].
template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "global_avg_pool");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  std::vector<T> out(n * c);
  const T* x = input.data().data();
  for (std::size_t plane = 0; plane < n * c; ++plane) {
    T acc = 0;
    for (std::size_t i = 0; i < hw; ++i) acc += x[plane * hw + i];
    out[plane] = acc / static_cast<T>(hw);
  }
  Tensor<T> in_ref = input;
  return detail::make_result<T>({n, c}, std::move(out), {&input},
                                [in_ref, hw](detail::Node<T>& self) {
                                  auto& dx = in_ref.node()->ensure_grad();
                                  const T inv = T(1) / static_cast<T>(hw);
                                  for (std::size_t plane = 0; plane < self.grad.size(); ++plane)
                                    for (std::size_t i = 0; i < hw; ++i)
                                      dx[plane * hw + i] += self.grad[plane] * inv;
                                });
}

/// output[n,i] = sum_j weight[i,j] * input[n,j] (+ bias[i]).
template <typename T>
Tensor<T> affine(const Tensor<T>& input, const Tensor<T>& weight,
                 const Tensor<T>& bias = Tensor<T>()) {
  detail::require_rank(input.shape(), 2, "affine input");
  detail::require_rank(weight.shape(), 2, "affine weight");
  const std::size_t n = input.dim(0), d_in = input.dim(1), d_out = weight.dim(0);
  if (weight.dim(1) != d_in)
    throw Error("shape", "affine: input axis 1 = " + std::to_string(d_in) +
                             " but weight axis 1 = " + std::to_string(weight.dim(1)));
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != d_out))
    throw Error("shape", "affine: bias axis 0 must equal weight axis 0 = " + std::to_string(d_out));
  std::vector<T> out(n * d_out);
  const T* x = input.data().data();
  const T* wt = weight.data().data();
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t i = 0; i < d_out; ++i) {
      T acc = 0;
      for (std::size_t j = 0; j < d_in; ++j) acc += wt[i * d_in + j] * x[s * d_in + j];
      out[s * d_out + i] = bias.defined() ? acc + bias[i] : acc;
    }
  Tensor<T> in_ref = input, w_ref = weight, b_ref = bias;
  return detail::make_result<T>(
      {n, d_out}, std::move(out), {&input, &weight, &bias},
      [in_ref, w_ref, b_ref, n, d_in, d_out](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (detail::wants_grad(w_ref)) {
          auto& dw = w_ref.node()->ensure_grad();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < d_out; ++i)
              for (std::size_t j = 0; j < d_in; ++j)
                dw[i * d_in + j] += dy[s * d_out + i] * in_ref[s * d_in + j];
        }
        if (detail::wants_grad(in_ref)) {
          auto& dx = in_ref.node()->ensure_grad();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < d_out; ++i)
              for (std::size_t j = 0; j < d_in; ++j)
                dx[s * d_in + j] += dy[s * d_out + i] * w_ref[i * d_in + j];
        }
        if (detail::wants_grad(b_ref)) {
          auto& db = b_ref.node()->ensure_grad();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t i = 0; i < d_out; ++i) db[i] += dy[s * d_out + i];
        }
      });
}

/// Elementwise max(x, 0); the derivative at exactly 0 is 0.
template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  Tensor<T> in_ref = input;
  return detail::make_result<T>(input.shape(), std::move(out), {&input},
                                [in_ref](detail::Node<T>& self) {
                                  auto& dx = in_ref.node()->ensure_grad();
                                  for (std::size_t i = 0; i < dx.size(); ++i)
                                    if (in_ref[i] > T(0)) dx[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  Tensor<T> a_ref = a, b_ref = b;
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [a_ref, b_ref](detail::Node<T>& self) {
                                  for (const Tensor<T>* t : {&a_ref, &b_ref}) {
                                    if (!detail::wants_grad(*t)) continue;
                                    auto& d = t->node()->ensure_grad();
                                    for (std::size_t i = 0; i < d.size(); ++i)
                                      d[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  Tensor<T> a_ref = a, b_ref = b;
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b},
                                [a_ref, b_ref](detail::Node<T>& self) {
                                  if (detail::wants_grad(a_ref)) {
                                    auto& d = a_ref.node()->ensure_grad();
                                    for (std::size_t i = 0; i < d.size(); ++i)
                                      d[i] += self.grad[i] * b_ref[i];
                                  }
                                  if (detail::wants_grad(b_ref)) {
                                    auto& d = b_ref.node()->ensure_grad();
                                    for (std::size_t i = 0; i < d.size(); ++i)
                                      d[i] += self.grad[i] * a_ref[i];
                                  }
                                });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T value) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v += value;
  Tensor<T> a_ref = a;
  return detail::make_result<T>(a.shape(), std::move(out), {&a},
                                [a_ref](detail::Node<T>& self) {
                                  auto& d = a_ref.node()->ensure_grad();
                                  for (std::size_t i = 0; i < d.size(); ++i) d[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  Tensor<T> a_ref = a;
  return detail::make_result<T>(a.shape(), std::move(out), {&a},
                                [a_ref, factor](detail::Node<T>& self) {
                                  auto& d = a_ref.node()->ensure_grad();
                                  for (std::size_t i = 0; i < d.size(); ++i)
                                    d[i] += self.grad[i] * factor;
                                });
}

/// Sum of all elements as a [1] tensor.
template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = 0;
  for (T v : a.data()) acc += v;
  Tensor<T> a_ref = a;
  return detail::make_result<T>({1}, {acc}, {&a}, [a_ref](detail::Node<T>& self) {
    auto& d = a_ref.node()->ensure_grad();
    for (T& v : d) v += self.grad[0];
  });
}

/// Nearest-neighbour 2x upsampling of [N,C,H,W] to [N,C,2H,2W].
template <typename T>
Tensor<T> upsample_nearest2x(const Tensor<T>& input) {
  detail::require_rank(input.shape(), 4, "upsample_nearest2x");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  std::vector<T> out(n * c * 4 * h * w);
  for (std::size_t plane = 0; plane < n * c; ++plane)
    for (std::size_t y = 0; y < 2 * h; ++y)
      for (std::size_t x = 0; x < 2 * w; ++x)
        out[(plane * 2 * h + y) * 2 * w + x] = input[(plane * h + y / 2) * w + x / 2];
  Tensor<T> in_ref = input;
  return detail::make_result<T>({n, c, 2 * h, 2 * w}, std::move(out), {&input},
                                [in_ref, n, c, h, w](detail::Node<T>& self) {
                                  auto& d = in_ref.node()->ensure_grad();
                                  for (std::size_t plane = 0; plane < n * c; ++plane)
                                    for (std::size_t y = 0; y < 2 * h; ++y)
                                      for (std::size_t x = 0; x < 2 * w; ++x)
                                        d[(plane * h + y / 2) * w + x / 2] +=
                                            self.grad[(plane * 2 * h + y) * 2 * w + x];
                                });
}

/// Standardizes the channel vector at every (n,h,w) position, then applies a
/// per-channel gain and shift.
template <typename T>
Tensor<T> channel_norm(const Tensor<T>& input, const Tensor<T>& gain, const Tensor<T>& shift,
                       T eps = T(1e-5)) {
  detail::require_rank(input.shape(), 4, "channel_norm");
  const std::size_t n = input.dim(0), c = input.dim(1), hw = input.dim(2) * input.dim(3);
  if (gain.rank() != 1 || gain.dim(0) != c)
    throw Error("shape", "channel_norm: gain extent must equal input axis 1 = " + std::to_string(c));
  if (shift.rank() != 1 || shift.dim(0) != c)
    throw Error("shape",
                "channel_norm: shift extent must equal input axis 1 = " + std::to_string(c));
  std::vector<T> out(input.size()), xhat(input.size()), inv_std(n * hw);
  const T* x = input.data().data();
  const T inv_c = T(1) / static_cast<T>(c);
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t base = s * c * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      T mean = 0;
      for (std::size_t ch = 0; ch < c; ++ch) mean += x[base + ch * hw + p];
      mean *= inv_c;
      T var = 0;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const T d = x[base + ch * hw + p] - mean;
        var += d * d;
      }
      var *= inv_c;
      const T is = T(1) / std::sqrt(var + eps);
      inv_std[s * hw + p] = is;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const std::size_t idx = base + ch * hw + p;
        xhat[idx] = (x[idx] - mean) * is;
        out[idx] = gain[ch] * xhat[idx] + shift[ch];
      }
    }
  }
  Tensor<T> in_ref = input, g_ref = gain, b_ref = shift;
  return detail::make_result<T>(
      input.shape(), std::move(out), {&input, &gain, &shift},
      [in_ref, g_ref, b_ref, xhat = std::move(xhat), inv_std = std::move(inv_std), n, c, hw,
       inv_c](detail::Node<T>& self) {
        const T* dy = self.grad.data();
        if (detail::wants_grad(g_ref)) {
          auto& dg = g_ref.node()->ensure_grad();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < hw; ++p) {
                const std::size_t idx = (s * c + ch) * hw + p;
                dg[ch] += dy[idx] * xhat[idx];
              }
        }
        if (detail::wants_grad(b_ref)) {
          auto& db = b_ref.node()->ensure_grad();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t ch = 0; ch < c; ++ch)
              for (std::size_t p = 0; p < hw; ++p) db[ch] += dy[(s * c + ch) * hw + p];
        }
        if (detail::wants_grad(in_ref)) {
          auto& dx = in_ref.node()->ensure_grad();
          for (std::size_t s = 0; s < n; ++s)
            for (std::size_t p = 0; p < hw; ++p) {
              T mean_d = 0, mean_dx = 0;
              for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t idx = (s * c + ch) * hw + p;
                const T d = dy[idx] * g_ref[ch];
                mean_d += d;
                mean_dx += d * xhat[idx];
              }
              mean_d *= inv_c;
              mean_dx *= inv_c;
              const T is = inv_std[s * hw + p];
              for (std::size_t ch = 0; ch < c; ++ch) {
                const std::size_t idx = (s * c + ch) * hw + p;
                const T d = dy[idx] * g_ref[ch];
                dx[idx] += is * (d - mean_d - xhat[idx] * mean_dx);
              }
            }
        }
      });
}

template <typename T>
struct CrossEntropyResult {
  Tensor<T> loss;            // [1], mean over the batch
  std::vector<T> probs;      // [N, d_o] row-major
};

/// Max-subtracted softmax followed by the mean negative log-likelihood.
template <typename T>
CrossEntropyResult<T> softmax_cross_entropy(const Tensor<T>& logits,
                                            std::span<const std::size_t> labels) {
  detail::require_rank(logits.shape(), 2, "softmax_cross_entropy");
  const std::size_t n = logits.dim(0), d = logits.dim(1);
  if (labels.size() != n)
    throw Error("shape", "softmax_cross_entropy: " + std::to_string(labels.size()) +
                             " labels for batch axis 0 = " + std::to_string(n));
  std::vector<T> probs(n * d);
  T total = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (labels[s] >= d)
      throw Error("label", "softmax_cross_entropy: label " + std::to_string(labels[s]) +
                               " out of range for " + std::to_string(d) + " classes");
    const T* z = logits.data().data() + s * d;
    const std::size_t top = static_cast<std::size_t>(std::max_element(z, z + d) - z);
    T others = 0;
    for (std::size_t i = 0; i < d; ++i)
      if (i != top) others += std::exp(z[i] - z[top]);
    const T lse = std::log1p(others);  // log of the shifted partition function
    for (std::size_t i = 0; i < d; ++i) probs[s * d + i] = std::exp(z[i] - z[top] - lse);
    total += lse - (z[labels[s]] - z[top]);
  }
  std::vector<std::size_t> label_copy(labels.begin(), labels.end());
  Tensor<T> z_ref = logits;
  CrossEntropyResult<T> result;
  result.probs = probs;
  result.loss = detail::make_result<T>(
      {1}, {total / static_cast<T>(n)}, {&logits},
      [z_ref, probs = std::move(probs), label_copy = std::move(label_copy), n,
       d](detail::Node<T>& self) {
        auto& dz = z_ref.node()->ensure_grad();
        const T g = self.grad[0] / static_cast<T>(n);
        for (std::size_t s = 0; s < n; ++s)
          for (std::size_t i = 0; i < d; ++i) {
            const T onehot = i == label_copy[s] ? T(1) : T(0);
            dz[s * d + i] += g * (probs[s * d + i] - onehot);
          }
      });
  return result;
}

/// Populates gradients of every requires-grad tensor reachable from `loss`.
/// The graph is consumed: backward rules are released after they run.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1)
    throw Error("shape", "backward: loss must be a scalar, got shape " +
                             (loss.defined() ? shape_str(loss.shape()) : std::string("<none>")));
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS; the state map doubles as cycle detection.
  using Node = detail::Node<T>;
  std::vector<std::shared_ptr<Node>> order;  // owning, so release below is safe
  std::unordered_map<Node*, int> state;  // 1 = on stack, 2 = done
  std::vector<std::pair<std::shared_ptr<Node>, std::size_t>> stack{{loss.node_ptr(), 0}};
  state[loss.node()] = 1;
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      std::shared_ptr<Node> child = node->inputs[next++];
      if (!child->requires_grad) continue;
      auto it = state.find(child.get());
      if (it == state.end()) {
        state[child.get()] = 1;
        stack.emplace_back(std::move(child), 0);
      } else if (it->second == 1) {
        throw Error("graph", "backward: cycle detected in compute graph");
      }
    } else {
      state[node.get()] = 2;
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = it->get();
    if (node->backward) {
      node->ensure_grad();
      node->backward();
      node->backward = nullptr;
      node->inputs.clear();
    }
  }
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::uint64_t step = 0;

  static AdamState for_params(std::span<const Tensor<T>> params) {
    AdamState st;
    for (const auto& p : params) {
      st.m.emplace_back(p.size(), T(0));
      st.v.emplace_back(p.size(), T(0));
    }
    return st;
  }
};

/// One bias-corrected Adam update using each parameter's accumulated grad.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state, const AdamOptions& opt) {
  if (state.m.size() != params.size() || state.v.size() != params.size())
    throw Error("shape", "adam_step: optimizer state does not match parameter count");
  ++state.step;
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(opt.beta1), b2 = static_cast<T>(opt.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto data = params[k].mutable_data();
    auto grad = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    if (m.size() != data.size() || v.size() != data.size())
      throw Error("shape", "adam_step: state shape mismatch for parameter " + std::to_string(k));
    for (std::size_t i = 0; i < data.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      const T mhat = m[i] / static_cast<T>(bc1);
      const T vhat = v[i] / static_cast<T>(bc2);
      data[i] -= static_cast<T>(opt.lr) * mhat / (std::sqrt(vhat) + static_cast<T>(opt.eps));
    }
  }
}

}  // namespace bltlab
