#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "wsdesc/errors.hpp"

/// Minimal reverse-mode automatic differentiation over dense tensors. Only the
/// operations needed by the descriptor network and the training losses exist.
namespace wsdesc::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

template <typename T>
struct Node {
  Shape shape;
  std::shared_ptr<std::vector<T>> storage;  // may be shared between aliases
  std::vector<T> grad;                      // empty until first accumulation
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != storage->size()) grad.assign(storage->size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size()) {
      throw InvalidArgument("tensor shape " + shape_string(shape) + " does not match " +
                            std::to_string(values.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->storage = std::make_shared<std::vector<T>>(std::move(values));
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor scalar(T v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->storage->size(); }

  std::span<const T> values() const { return *node_->storage; }
  std::span<T> mutable_values() const { return *node_->storage; }
  const T* data() const { return node_->storage->data(); }
  T operator[](std::size_t i) const { return (*node_->storage)[i]; }
  T item() const {
    if (size() != 1) throw InvalidArgument("item() on a tensor with " + std::to_string(size()) + " values");
    return (*node_->storage)[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool flag) const { node_->requires_grad = flag; }
  bool has_grad() const { return node_->grad.size() == size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() const { node_->grad.clear(); }

  /// New node over the same value storage with its own gradient buffer.
  Tensor alias() const {
    Tensor t;
    t.node_ = std::make_shared<Node<T>>();
    t.node_->shape = node_->shape;
    t.node_->storage = node_->storage;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  /// Deep copy of the values, detached from any graph.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(node_->shape, *node_->storage, requires_grad);
  }

  template <typename U>
  Tensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(size());
    for (std::size_t i = 0; i < size(); ++i) out[i] = static_cast<U>((*node_->storage)[i]);
    return Tensor<U>(node_->shape, std::move(out), requires_grad);
  }

  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of executed operations. backward() replays the recorded
/// closures once, in reverse execution order.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> backward_fn) { ops_.push_back(std::move(backward_fn)); }
  std::size_t size() const { return ops_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(root)/d(root) = 1 for a single-element root.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1) throw InvalidArgument("backward() needs a scalar root");
    const std::vector<T> one{T(1)};
    backward(root, one);
  }

  /// Seeds an arbitrary upstream gradient for root.
  void backward(const Tensor<T>& root, std::span<const T> seed) {
    if (seed.size() != root.size()) throw InvalidArgument("backward seed size mismatch");
    auto g = root.mutable_grad();
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
    run();
  }

 private:
  void run() {
    if (consumed_) throw Error("tape already replayed");
    consumed_ = true;
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

  std::vector<std::function<void()>> ops_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename... Ts>
bool any_requires_grad(const Ts&... ts) {
  return ((ts.defined() && ts.requires_grad()) || ...);
}

template <typename T>
Tensor<T> make_output(Shape shape, std::vector<T> values, bool requires_grad) {
  return Tensor<T>(std::move(shape), std::move(values), requires_grad);
}

struct ConvGeometry {
  std::size_t channels, depth, height, width;
  std::size_t out_channels, kernel, stride, padding;
  std::size_t out_depth, out_height, out_width;

  std::size_t patch() const { return channels * kernel * kernel * kernel; }
  std::size_t positions() const { return out_depth * out_height * out_width; }
};

/// Output columns [lo, hi) whose input column ow * stride - pad + kw is in range.
inline std::pair<std::size_t, std::size_t> valid_range(const ConvGeometry& g, std::size_t kw) {
  std::size_t lo = 0;
  while (lo < g.out_width && lo * g.stride + kw < g.padding) ++lo;
  std::size_t hi = lo;
  while (hi < g.out_width && hi * g.stride + kw < g.padding + g.width) ++hi;
  return {lo, hi};
}

/// Columns for output depth slices [d0, d1): row (ci, kd, kh, kw), one column
/// per output position of the slab.
template <typename T>
void im2col(const T* in, const ConvGeometry& g, std::size_t d0, std::size_t d1, T* col) {
  const std::size_t k = g.kernel, P = (d1 - d0) * g.out_height * g.out_width;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t ci = 0; ci < g.channels; ++ci)
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw) {
          T* dst = col + (((ci * k + kd) * k + kh) * k + kw) * P;
          const auto [lo, hi] = valid_range(g, kw);
          for (std::size_t od = d0; od < d1; ++od) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od) * s - pad + static_cast<std::ptrdiff_t>(kd);
            for (std::size_t oh = 0; oh < g.out_height; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * s - pad + static_cast<std::ptrdiff_t>(kh);
              T* row = dst + ((od - d0) * g.out_height + oh) * g.out_width;
              if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.depth) || ih < 0 ||
                  ih >= static_cast<std::ptrdiff_t>(g.height)) {
                std::fill(row, row + g.out_width, T(0));
                continue;
              }
              const T* src = in + ((ci * g.depth + static_cast<std::size_t>(id)) * g.height +
                                   static_cast<std::size_t>(ih)) * g.width;
              std::fill(row, row + lo, T(0));
              if (g.stride == 1) {
                std::copy(src + (lo + kw - g.padding), src + (hi + kw - g.padding), row + lo);
              } else {
                for (std::size_t ow = lo; ow < hi; ++ow) row[ow] = src[ow * g.stride + kw - g.padding];
              }
              std::fill(row + hi, row + g.out_width, T(0));
            }
          }
        }
}

template <typename T>
void col2im_add(const T* col, const ConvGeometry& g, std::size_t d0, std::size_t d1, T* in_grad) {
  const std::size_t k = g.kernel, P = (d1 - d0) * g.out_height * g.out_width;
  const auto pad = static_cast<std::ptrdiff_t>(g.padding);
  const auto s = static_cast<std::ptrdiff_t>(g.stride);
  for (std::size_t ci = 0; ci < g.channels; ++ci)
    for (std::size_t kd = 0; kd < k; ++kd)
      for (std::size_t kh = 0; kh < k; ++kh)
        for (std::size_t kw = 0; kw < k; ++kw) {
          const T* srcrow = col + (((ci * k + kd) * k + kh) * k + kw) * P;
          const auto [lo, hi] = valid_range(g, kw);
          for (std::size_t od = d0; od < d1; ++od) {
            const std::ptrdiff_t id = static_cast<std::ptrdiff_t>(od) * s - pad + static_cast<std::ptrdiff_t>(kd);
            if (id < 0 || id >= static_cast<std::ptrdiff_t>(g.depth)) continue;
            for (std::size_t oh = 0; oh < g.out_height; ++oh) {
              const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh) * s - pad + static_cast<std::ptrdiff_t>(kh);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
              const T* row = srcrow + ((od - d0) * g.out_height + oh) * g.out_width;
              T* dst = in_grad + ((ci * g.depth + static_cast<std::size_t>(id)) * g.height +
                                  static_cast<std::size_t>(ih)) * g.width;
              for (std::size_t ow = lo; ow < hi; ++ow) dst[ow * g.stride + kw - g.padding] += row[ow];
            }
          }
        }
}

/// Output depth slices per tile, keeping a column block near 256 KiB.
template <typename T>
std::size_t conv_slab_depth(const ConvGeometry& g) {
  const std::size_t per_slice = g.patch() * g.out_height * g.out_width * sizeof(T);
  return std::clamp<std::size_t>((std::size_t{512} << 10) / std::max<std::size_t>(per_slice, 1), 1, g.out_depth);
}

template <typename T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

}  // namespace detail

/// 3D cross-correlation. input [C, D, H, W], kernel [Co, C, k, k, k], bias [Co]
/// or undefined. Output spatial size is floor((D + 2 pad - k) / stride) + 1.
template <typename T>
Tensor<T> conv3d(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || kernel.rank() != 5) throw InvalidArgument("conv3d expects [C,D,H,W] and [Co,C,k,k,k]");
  if (kernel.dim(1) != input.dim(0)) {
    throw InvalidArgument("conv3d channel mismatch: input " + shape_string(input.shape()) + ", kernel " +
                          shape_string(kernel.shape()));
  }
  const std::size_t k = kernel.dim(2);
  if (kernel.dim(3) != k || kernel.dim(4) != k) throw InvalidArgument("conv3d kernel must be cubic");
  if (stride < 1) throw InvalidArgument("conv3d stride must be >= 1");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != kernel.dim(0))) {
    throw InvalidArgument("conv3d bias shape mismatch");
  }
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), k, stride, padding,
                         0, 0, 0};
  auto out_extent = [&](std::size_t n) -> std::size_t {
    if (n + 2 * padding < k) throw InvalidArgument("conv3d input smaller than kernel");
    return (n + 2 * padding - k) / stride + 1;
  };
  g.out_depth = out_extent(g.depth);
  g.out_height = out_extent(g.height);
  g.out_width = out_extent(g.width);
  const std::size_t P = g.positions(), K = g.patch(), Co = g.out_channels;

  std::vector<T> out(Co * P);
  {
    const std::size_t slab = detail::conv_slab_depth<T>(g);
    const std::size_t plane = g.out_height * g.out_width;
    std::vector<T> col(K * slab * plane);
    detail::ConstMatMap<T> w(kernel.data(), static_cast<Eigen::Index>(Co), static_cast<Eigen::Index>(K));
    for (std::size_t d0 = 0; d0 < g.out_depth; d0 += slab) {
      const std::size_t d1 = std::min(g.out_depth, d0 + slab);
      const auto cols = static_cast<Eigen::Index>((d1 - d0) * plane);
      detail::im2col(input.data(), g, d0, d1, col.data());
      detail::StridedMap<T> o(out.data() + d0 * plane, static_cast<Eigen::Index>(Co), cols,
                              Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
      o.noalias() = w * detail::ConstMatMap<T>(col.data(), static_cast<Eigen::Index>(K), cols);
    }
    if (bias.defined()) {
      for (std::size_t oc = 0; oc < Co; ++oc)
        for (std::size_t p = 0; p < P; ++p) out[oc * P + p] += bias[oc];
    }
  }
  const bool rg = detail::any_requires_grad(input, kernel, bias);
  auto result = detail::make_output<T>({Co, g.out_depth, g.out_height, g.out_width}, std::move(out), rg);
  if (!rg) return result;

  tape.record([in = input.ptr(), ker = kernel.ptr(), b = bias.ptr(), res = result.ptr(), g] {
    if (res->grad.empty()) return;
    const std::size_t P = g.positions(), K = g.patch(), Co = g.out_channels;
    if (b && b->requires_grad) {
      b->ensure_grad();
      // Plain loop: Eigen's vectorized sum changes order with buffer alignment.
      for (std::size_t oc = 0; oc < Co; ++oc) {
        T acc = T(0);
        for (std::size_t p = 0; p < P; ++p) acc += res->grad[oc * P + p];
        b->grad[oc] += acc;
      }
    }
    if (!ker->requires_grad && !in->requires_grad) return;
    const std::size_t slab = detail::conv_slab_depth<T>(g);
    const std::size_t plane = g.out_height * g.out_width;
    std::vector<T> col(K * slab * plane);
    detail::ConstMatMap<T> w(ker->storage->data(), static_cast<Eigen::Index>(Co), static_cast<Eigen::Index>(K));
    if (ker->requires_grad) ker->ensure_grad();
    if (in->requires_grad) in->ensure_grad();
    for (std::size_t d0 = 0; d0 < g.out_depth; d0 += slab) {
      const std::size_t d1 = std::min(g.out_depth, d0 + slab);
      const auto cols = static_cast<Eigen::Index>((d1 - d0) * plane);
      detail::ConstStridedMap<T> gslab(res->grad.data() + d0 * plane, static_cast<Eigen::Index>(Co), cols,
                                       Eigen::OuterStride<>(static_cast<Eigen::Index>(P)));
      detail::MatMap<T> c(col.data(), static_cast<Eigen::Index>(K), cols);
      if (ker->requires_grad) {
        detail::im2col(in->storage->data(), g, d0, d1, col.data());
        detail::MatMap<T>(ker->grad.data(), static_cast<Eigen::Index>(Co), static_cast<Eigen::Index>(K)).noalias() +=
            gslab * c.transpose();
      }
      if (in->requires_grad) {
        c.noalias() = w.transpose() * gslab;
        detail::col2im_add(col.data(), g, d0, d1, in->grad.data());
      }
    }
  });
  return result;
}

/// Per-channel standardization over all trailing dimensions (biased variance,
/// no affine parameters).
template <typename T>
Tensor<T> instance_norm(Tape<T>& tape, const Tensor<T>& input, double eps = 1e-5) {
  if (input.rank() < 2) throw InvalidArgument("instance_norm expects [C, ...]");
  const std::size_t C = input.dim(0);
  const std::size_t N = input.size() / C;
  std::vector<T> out(input.size());
  std::vector<double> inv_std(C);
  const T* x = input.data();
  for (std::size_t c = 0; c < C; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < N; ++i) mean += x[c * N + i];
    mean /= static_cast<double>(N);
    double var = 0.0;
    for (std::size_t i = 0; i < N; ++i) {
      const double d = x[c * N + i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(N);
    inv_std[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t i = 0; i < N; ++i) out[c * N + i] = static_cast<T>((x[c * N + i] - mean) * inv_std[c]);
  }
  const bool rg = input.requires_grad();
  auto result = detail::make_output<T>(input.shape(), std::move(out), rg);
  if (!rg) return result;
  tape.record([in = input.ptr(), res = result.ptr(), inv_std, C, N] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    const T* y = res->storage->data();
    const T* g = res->grad.data();
    for (std::size_t c = 0; c < C; ++c) {
      double sum_g = 0.0, sum_gy = 0.0;
      for (std::size_t i = 0; i < N; ++i) {
        sum_g += g[c * N + i];
        sum_gy += static_cast<double>(g[c * N + i]) * y[c * N + i];
      }
      const double n = static_cast<double>(N);
      for (std::size_t i = 0; i < N; ++i) {
        in->grad[c * N + i] +=
            static_cast<T>(inv_std[c] * (g[c * N + i] - sum_g / n - y[c * N + i] * sum_gy / n));
      }
    }
  });
  return result;
}

/// max(0, x); the subgradient at 0 is 0.
template <typename T>
Tensor<T> relu(Tape<T>& tape, const Tensor<T>& input) {
  std::vector<T> out(input.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = input[i] > T(0) ? input[i] : T(0);
  const bool rg = input.requires_grad();
  auto result = detail::make_output<T>(input.shape(), std::move(out), rg);
  if (!rg) return result;
  tape.record([in = input.ptr(), res = result.ptr()] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    const auto& x = *in->storage;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (x[i] > T(0)) in->grad[i] += res->grad[i];
  });
  return result;
}

template <typename T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& input, Shape shape) {
  if (numel(shape) != input.size()) throw InvalidArgument("reshape to " + shape_string(shape) + " changes size");
  const bool rg = input.requires_grad();
  auto result = detail::make_output<T>(std::move(shape), std::vector<T>(input.values().begin(), input.values().end()), rg);
  if (!rg) return result;
  tape.record([in = input.ptr(), res = result.ptr()] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < res->grad.size(); ++i) in->grad[i] += res->grad[i];
  });
  return result;
}

/// y = W x + b for x of shape [F] (output [O]) or [B, F] (output [B, O]).
template <typename T>
Tensor<T> linear(Tape<T>& tape, const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2) throw InvalidArgument("linear weight must be [O, F]");
  const std::size_t O = weight.dim(0), F = weight.dim(1);
  const bool batched = input.rank() == 2;
  if (!(input.rank() == 1 || batched) || input.shape().back() != F) {
    throw InvalidArgument("linear input " + shape_string(input.shape()) + " incompatible with weight " +
                          shape_string(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) throw InvalidArgument("linear bias shape mismatch");
  const std::size_t B = batched ? input.dim(0) : 1;
  std::vector<T> out(B * O);
  {
    detail::ConstMatMap<T> x(input.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(F));
    detail::ConstMatMap<T> w(weight.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(F));
    detail::MatMap<T> y(out.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(O));
    y.noalias() = x * w.transpose();
    if (bias.defined()) {
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t o = 0; o < O; ++o) out[r * O + o] += bias[o];
    }
  }
  const bool rg = detail::any_requires_grad(input, weight, bias);
  Shape shape = batched ? Shape{B, O} : Shape{O};
  auto result = detail::make_output<T>(std::move(shape), std::move(out), rg);
  if (!rg) return result;
  tape.record([in = input.ptr(), w = weight.ptr(), b = bias.ptr(), res = result.ptr(), B, O, F] {
    if (res->grad.empty()) return;
    detail::ConstMatMap<T> gy(res->grad.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(O));
    if (b && b->requires_grad) {
      b->ensure_grad();
      for (std::size_t r = 0; r < B; ++r)
        for (std::size_t o = 0; o < O; ++o) b->grad[o] += res->grad[r * O + o];
    }
    if (w->requires_grad) {
      w->ensure_grad();
      detail::MatMap<T> gw(w->grad.data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(F));
      detail::ConstMatMap<T> x(in->storage->data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(F));
      gw.noalias() += gy.transpose() * x;
    }
    if (in->requires_grad) {
      in->ensure_grad();
      detail::MatMap<T> gx(in->grad.data(), static_cast<Eigen::Index>(B), static_cast<Eigen::Index>(F));
      detail::ConstMatMap<T> wm(w->storage->data(), static_cast<Eigen::Index>(O), static_cast<Eigen::Index>(F));
      gx.noalias() += gy * wm;
    }
  });
  return result;
}

/// Row-wise x / |x|_2 for [n] or [B, n] inputs.
template <typename T>
Tensor<T> l2_normalize(Tape<T>& tape, const Tensor<T>& input) {
  if (input.rank() != 1 && input.rank() != 2) throw InvalidArgument("l2_normalize expects [n] or [B, n]");
  const std::size_t n = input.shape().back();
  const std::size_t rows = input.size() / n;
  std::vector<T> out(input.size());
  std::vector<double> norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) s += static_cast<double>(input[r * n + i]) * input[r * n + i];
    norms[r] = std::sqrt(s);
    if (!(norms[r] > 1e-12)) throw InvalidArgument("l2_normalize of a zero-norm vector");
    for (std::size_t i = 0; i < n; ++i) out[r * n + i] = static_cast<T>(input[r * n + i] / norms[r]);
  }
  const bool rg = input.requires_grad();
  auto result = detail::make_output<T>(input.shape(), std::move(out), rg);
  if (!rg) return result;
  tape.record([in = input.ptr(), res = result.ptr(), norms, n, rows] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    const auto& x = *in->storage;
    for (std::size_t r = 0; r < rows; ++r) {
      // d(x/|x|) = (g - y (y.g)) / |x|, with y recomputed in double.
      double yg = 0.0;
      for (std::size_t i = 0; i < n; ++i) yg += (x[r * n + i] / norms[r]) * res->grad[r * n + i];
      for (std::size_t i = 0; i < n; ++i) {
        const double y = x[r * n + i] / norms[r];
        in->grad[r * n + i] += static_cast<T>((res->grad[r * n + i] - y * yg) / norms[r]);
      }
    }
  });
  return result;
}

/// a_j = exp(-|q - k_j|) / sum_l exp(-|q - k_l|). query [n] gives [m]; a
/// batch of queries [a, n] gives one softmax row per query, [a, m].
template <typename T>
Tensor<T> softmax_neg_distance(Tape<T>& tape, const Tensor<T>& query, const Tensor<T>& keys) {
  if (keys.rank() != 2 || keys.dim(0) < 1) throw InvalidArgument("softmax_neg_distance keys must be [m>=1, n]");
  const std::size_t m = keys.dim(0), n = keys.dim(1);
  const bool batched = query.rank() == 2;
  if (!(query.rank() == 1 || batched) || query.shape().back() != n) {
    throw InvalidArgument("softmax_neg_distance query/key width mismatch");
  }
  const std::size_t rows = batched ? query.dim(0) : 1;
  std::vector<T> out(rows * m);
  std::vector<double> dist(rows * m);
  for (std::size_t r = 0; r < rows; ++r) {
    double dmin = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < m; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(query[r * n + i]) - keys[j * n + i];
        s += d * d;
      }
      dist[r * m + j] = std::sqrt(s);
      dmin = std::min(dmin, dist[r * m + j]);
    }
    double z = 0.0;
    for (std::size_t j = 0; j < m; ++j) z += std::exp(-(dist[r * m + j] - dmin));
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = static_cast<T>(std::exp(-(dist[r * m + j] - dmin)) / z);
  }
  const bool rg = detail::any_requires_grad(query, keys);
  Shape shape = batched ? Shape{rows, m} : Shape{m};
  auto result = detail::make_output<T>(std::move(shape), std::move(out), rg);
  if (!rg) return result;
  tape.record([q = query.ptr(), k = keys.ptr(), res = result.ptr(), dist, rows, m, n] {
    if (res->grad.empty()) return;
    const auto& qv = *q->storage;
    const auto& kv = *k->storage;
    const auto& a = *res->storage;
    if (q->requires_grad) q->ensure_grad();
    if (k->requires_grad) k->ensure_grad();
    for (std::size_t r = 0; r < rows; ++r) {
      double ag = 0.0;
      for (std::size_t j = 0; j < m; ++j) ag += static_cast<double>(a[r * m + j]) * res->grad[r * m + j];
      for (std::size_t j = 0; j < m; ++j) {
        const double dj = dist[r * m + j];
        if (dj == 0.0) continue;
        // dL/d(-dist_j) = a_j (g_j - sum a g)
        const double h = a[r * m + j] * (res->grad[r * m + j] - ag);
        for (std::size_t i = 0; i < n; ++i) {
          const double u = (static_cast<double>(qv[r * n + i]) - kv[j * n + i]) / dj;
          if (q->requires_grad) q->grad[r * n + i] += static_cast<T>(-h * u);
          if (k->requires_grad) k->grad[j * n + i] += static_cast<T>(h * u);
        }
      }
    }
  });
  return result;
}

/// out[r] = x[r, columns[r]] for x of shape [rows, m].
template <typename T>
Tensor<T> gather_rows(Tape<T>& tape, const Tensor<T>& x, const std::vector<std::size_t>& columns) {
  if (x.rank() != 2 || columns.size() != x.dim(0)) throw InvalidArgument("gather_rows shape mismatch");
  const std::size_t m = x.dim(1);
  std::vector<T> out(columns.size());
  for (std::size_t r = 0; r < columns.size(); ++r) {
    if (columns[r] >= m) throw InvalidArgument("gather_rows column out of range");
    out[r] = x[r * m + columns[r]];
  }
  const bool rg = x.requires_grad();
  auto result = detail::make_output<T>({columns.size()}, std::move(out), rg);
  if (!rg) return result;
  tape.record([in = x.ptr(), res = result.ptr(), columns, m] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    for (std::size_t r = 0; r < columns.size(); ++r) in->grad[r * m + columns[r]] += res->grad[r];
  });
  return result;
}

/// Elementwise product with a constant array (no gradient to the constant).
template <typename T>
Tensor<T> mul_const(Tape<T>& tape, const Tensor<T>& x, std::span<const T> c) {
  if (c.size() != x.size()) throw InvalidArgument("mul_const size mismatch");
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] * c[i];
  const bool rg = x.requires_grad();
  auto result = detail::make_output<T>(x.shape(), std::move(out), rg);
  if (!rg) return result;
  tape.record([in = x.ptr(), res = result.ptr(), cc = std::vector<T>(c.begin(), c.end())] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    for (std::size_t i = 0; i < cc.size(); ++i) in->grad[i] += res->grad[i] * cc[i];
  });
  return result;
}

/// Elementwise product of two same-shaped tensors.
template <typename T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw InvalidArgument("mul shape mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  const bool rg = detail::any_requires_grad(a, b);
  auto result = detail::make_output<T>(a.shape(), std::move(out), rg);
  if (!rg) return result;
  tape.record([pa = a.ptr(), pb = b.ptr(), res = result.ptr()] {
    if (res->grad.empty()) return;
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < res->grad.size(); ++i) pa->grad[i] += res->grad[i] * (*pb->storage)[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < res->grad.size(); ++i) pb->grad[i] += res->grad[i] * (*pa->storage)[i];
    }
  });
  return result;
}

/// alpha * a + beta * b for same-shaped tensors.
template <typename T>
Tensor<T> axpby(Tape<T>& tape, T alpha, const Tensor<T>& a, T beta, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw InvalidArgument("axpby shape mismatch");
  std::vector<T> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = alpha * a[i] + beta * b[i];
  const bool rg = detail::any_requires_grad(a, b);
  auto result = detail::make_output<T>(a.shape(), std::move(out), rg);
  if (!rg) return result;
  tape.record([pa = a.ptr(), pb = b.ptr(), res = result.ptr(), alpha, beta] {
    if (res->grad.empty()) return;
    if (pa->requires_grad) {
      pa->ensure_grad();
      for (std::size_t i = 0; i < res->grad.size(); ++i) pa->grad[i] += alpha * res->grad[i];
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      for (std::size_t i = 0; i < res->grad.size(); ++i) pb->grad[i] += beta * res->grad[i];
    }
  });
  return result;
}

template <typename T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& x) {
  T s = T(0);
  for (auto v : x.values()) s += v;
  const bool rg = x.requires_grad();
  auto result = detail::make_output<T>({1}, {s}, rg);
  if (!rg) return result;
  tape.record([in = x.ptr(), res = result.ptr()] {
    if (res->grad.empty()) return;
    in->ensure_grad();
    for (auto& g : in->grad) g += res->grad[0];
  });
  return result;
}

/// [a, m] x [m, c] matrix product.
template <typename T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) throw InvalidArgument("matmul shape mismatch");
  const auto R = static_cast<Eigen::Index>(a.dim(0)), M = static_cast<Eigen::Index>(a.dim(1)),
             C = static_cast<Eigen::Index>(b.dim(1));
  std::vector<T> out(a.dim(0) * b.dim(1));
  detail::MatMap<T>(out.data(), R, C).noalias() =
      detail::ConstMatMap<T>(a.data(), R, M) * detail::ConstMatMap<T>(b.data(), M, C);
  const bool rg = detail::any_requires_grad(a, b);
  auto result = detail::make_output<T>({a.dim(0), b.dim(1)}, std::move(out), rg);
  if (!rg) return result;
  tape.record([pa = a.ptr(), pb = b.ptr(), res = result.ptr(), R, M, C] {
    if (res->grad.empty()) return;
    detail::ConstMatMap<T> g(res->grad.data(), R, C);
    if (pa->requires_grad) {
      pa->ensure_grad();
      detail::MatMap<T>(pa->grad.data(), R, M).noalias() +=
          g * detail::ConstMatMap<T>(pb->storage->data(), M, C).transpose();
    }
    if (pb->requires_grad) {
      pb->ensure_grad();
      detail::MatMap<T>(pb->grad.data(), M, C).noalias() +=
          detail::ConstMatMap<T>(pa->storage->data(), R, M).transpose() * g;
    }
  });
  return result;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  std::uint64_t step = 0;
};

/// One bias-corrected Adam update of params in place.
template <typename T>
void adam_step(std::span<const Tensor<T>> params, std::span<const std::vector<T>> grads, AdamState<T>& state,
               const AdamConfig& cfg = {}) {
  if (params.size() != grads.size()) throw InvalidArgument("adam: parameter/gradient count mismatch");
  if (state.m.empty() && state.step == 0) {
    for (const auto& p : params) {
      state.m.emplace_back(p.size(), T(0));
      state.v.emplace_back(p.size(), T(0));
    }
  }
  if (state.m.size() != params.size()) throw InvalidArgument("adam: state does not match parameters");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].size() != params[i].size() || state.m[i].size() != params[i].size()) {
      throw InvalidArgument("adam: shape mismatch for parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(cfg.beta1, t);
  const double c2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto values = params[i].mutable_values();
    for (std::size_t j = 0; j < values.size(); ++j) {
      const double g = grads[i][j];
      const double m = cfg.beta1 * state.m[i][j] + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * state.v[i][j] + (1.0 - cfg.beta2) * g * g;
      state.m[i][j] = static_cast<T>(m);
      state.v[i][j] = static_cast<T>(v);
      values[j] = static_cast<T>(values[j] - cfg.lr * (m / c1) / (std::sqrt(v / c2) + cfg.eps));
    }
  }
}

// ---------------------------------------------------------------------------
// Gradient checking

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t coordinates_checked = 0;
};

using ScalarFn = std::function<Tensor<double>(Tape<double>&, const std::vector<Tensor<double>>&)>;

struct GradCheckOptions {
  double step = 1e-5;
  std::size_t max_coords_per_input = 0;  // 0 checks every coordinate
  std::uint64_t seed = 0;
};

/// Central-difference check of every input coordinate (or a seeded subset).
/// Relative error is |a - n| / max(1e-8, |a| + |n|).
inline GradCheckReport grad_check(const ScalarFn& fn, const std::vector<Tensor<double>>& inputs,
                                  const GradCheckOptions& opts = {}) {
  for (const auto& x : inputs) {
    x.set_requires_grad(true);
    x.zero_grad();
  }
  {
    Tape<double> tape;
    const auto out = fn(tape, inputs);
    tape.backward(out);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& x : inputs) {
    analytic.emplace_back(x.has_grad() ? std::vector<double>(x.grad().begin(), x.grad().end())
                                       : std::vector<double>(x.size(), 0.0));
    x.set_requires_grad(false);
  }
  auto evaluate = [&] {
    Tape<double> tape;
    return fn(tape, inputs).item();
  };
  GradCheckReport report;
  std::mt19937_64 rng(opts.seed);
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    std::vector<std::size_t> coords(inputs[i].size());
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (opts.max_coords_per_input > 0 && coords.size() > opts.max_coords_per_input) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(opts.max_coords_per_input);
      std::sort(coords.begin(), coords.end());
    }
    auto values = inputs[i].mutable_values();
    for (auto c : coords) {
      const double saved = values[c];
      values[c] = saved + opts.step;
      const double plus = evaluate();
      values[c] = saved - opts.step;
      const double minus = evaluate();
      values[c] = saved;
      const double numeric = (plus - minus) / (2.0 * opts.step);
      const double a = analytic[i][c];
      const double rel = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
      ++report.coordinates_checked;
      if (rel > report.max_rel_error || report.coordinates_checked == 1) {
        report.max_rel_error = rel;
        report.worst_input = i;
        report.worst_index = c;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  for (const auto& x : inputs) x.set_requires_grad(true);
  return report;
}

}  // namespace wsdesc::ad
