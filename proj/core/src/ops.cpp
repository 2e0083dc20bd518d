#include "densesiam/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "densesiam/errors.hpp"

namespace dsiam {

namespace {

template <typename T>
using Node = detail::Node<T>;
template <typename T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapR = Eigen::Map<MatR<T>>;
template <typename T>
using CMapR = Eigen::Map<const MatR<T>>;

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
}

void require_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for " +
                         shape_str(s));
  }
}

struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T>
Node<T>* raw(const Tensor<T>& t) {
  return t.node().get();
}

template <typename T>
bool wants_grad(const Node<T>* n) {
  return n && n->requires_grad;
}

// Unary elementwise op: `df(x, y)` is dy/dx given input x and output y.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& a, const char* name, F f, DF df) {
  auto src = a.data();
  std::vector<T> out(src.size());
  for (std::size_t i = 0; i < src.size(); ++i) out[i] = f(src[i]);
  Node<T>* pa = raw(a);
  return detail::make_result<T>(a.shape(), std::move(out), name, {a.node()},
                                [pa, df](Node<T>& self) {
                                  auto& g = pa->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i)
                                    g[i] += self.grad[i] * df(pa->data[i], self.data[i]);
                                });
}

}  // namespace

// ---------------------------------------------------------------- elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "add");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] + y[i];
  Node<T>* pa = raw(a);
  Node<T>* pb = raw(b);
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a.node(), b.node()},
                                [pa, pb](Node<T>& self) {
                                  for (Node<T>* p : {pa, pb}) {
                                    if (!wants_grad(p)) continue;
                                    auto& g = p->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "sub");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] - y[i];
  Node<T>* pa = raw(a);
  Node<T>* pb = raw(b);
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a.node(), b.node()},
                                [pa, pb](Node<T>& self) {
                                  if (wants_grad(pa)) {
                                    auto& g = pa->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                  }
                                  if (wants_grad(pb)) {
                                    auto& g = pb->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
                                  }
                                });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "mul");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] * y[i];
  Node<T>* pa = raw(a);
  Node<T>* pb = raw(b);
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a.node(), b.node()},
                                [pa, pb](Node<T>& self) {
                                  if (wants_grad(pa)) {
                                    auto& g = pa->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * pb->data[i];
                                  }
                                  if (wants_grad(pb)) {
                                    auto& g = pb->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] * pa->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape(a, b, "div");
  auto x = a.data();
  auto y = b.data();
  std::vector<T> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] / y[i];
  Node<T>* pa = raw(a);
  Node<T>* pb = raw(b);
  return detail::make_result<T>(a.shape(), std::move(out), "div", {a.node(), b.node()},
                                [pa, pb](Node<T>& self) {
                                  if (wants_grad(pa)) {
                                    auto& g = pa->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] += self.grad[i] / pb->data[i];
                                  }
                                  if (wants_grad(pb)) {
                                    auto& g = pb->grad_buffer();
                                    for (std::size_t i = 0; i < g.size(); ++i)
                                      g[i] -= self.grad[i] * self.data[i] / pb->data[i];
                                  }
                                });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary<T>(a, "add_scalar", [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T s) {
  return unary<T>(a, "mul_scalar", [s](T x) { return x * s; }, [s](T, T) { return s; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary<T>(a, "neg", [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      a, "relu", [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(a, "exp", [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary<T>(a, "log", [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary<T>(a, "square", [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

// ---------------------------------------------------------------- reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  auto x = a.data();
  T s = T(0);
  for (T v : x) s += v;
  Node<T>* pa = raw(a);
  return detail::make_result<T>(Shape{1}, {s}, "sum", {a.node()}, [pa](Node<T>& self) {
    auto& g = pa->grad_buffer();
    const T d = self.grad[0];
    for (auto& v : g) v += d;
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return mul_scalar(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
  require_axis(a.shape(), axis, "sum_axis");
  const AxisSplit sp = split_at(a.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i)
    if (i != axis) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  auto x = a.data();
  std::vector<T> out(sp.outer * sp.inner, T(0));
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.n; ++k) {
      const T* row = x.data() + (o * sp.n + k) * sp.inner;
      T* dst = out.data() + o * sp.inner;
      for (std::size_t i = 0; i < sp.inner; ++i) dst[i] += row[i];
    }
  Node<T>* pa = raw(a);
  return detail::make_result<T>(std::move(out_shape), std::move(out), "sum_axis", {a.node()},
                                [pa, sp](Node<T>& self) {
                                  auto& g = pa->grad_buffer();
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t k = 0; k < sp.n; ++k) {
                                      T* row = g.data() + (o * sp.n + k) * sp.inner;
                                      const T* src = self.grad.data() + o * sp.inner;
                                      for (std::size_t i = 0; i < sp.inner; ++i) row[i] += src[i];
                                    }
                                });
}

template <typename T>
Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis) {
  require_axis(a.shape(), axis, "mean_axis");
  return mul_scalar(sum_axis(a, axis), T(1) / static_cast<T>(a.shape()[axis]));
}

// ---------------------------------------------------------------- shape

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) {
    throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  Node<T>* pa = raw(a);
  return detail::make_result<T>(std::move(shape), std::move(out), "reshape", {a.node()},
                                [pa](Node<T>& self) {
                                  auto& g = pa->grad_buffer();
                                  for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1) {
  require_axis(a.shape(), axis0, "transpose");
  require_axis(a.shape(), axis1, "transpose");
  const Shape& in = a.shape();
  Shape out_shape = in;
  std::swap(out_shape[axis0], out_shape[axis1]);
  const std::size_t rank = in.size();
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t i = rank - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  // Stride in the input for each output axis.
  std::vector<std::size_t> perm_strides = in_strides;
  std::swap(perm_strides[axis0], perm_strides[axis1]);

  const std::size_t n = a.numel();
  std::vector<std::size_t> index_map(n);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t dst = 0; dst < n; ++dst) {
    index_map[dst] = src;
    for (std::size_t ax = rank; ax-- > 0;) {
      if (++counter[ax] < out_shape[ax]) {
        src += perm_strides[ax];
        break;
      }
      src -= perm_strides[ax] * (out_shape[ax] - 1);
      counter[ax] = 0;
    }
  }
  auto x = a.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = x[index_map[i]];
  Node<T>* pa = raw(a);
  return detail::make_result<T>(std::move(out_shape), std::move(out), "transpose", {a.node()},
                                [pa, map = std::move(index_map)](Node<T>& self) {
                                  auto& g = pa->grad_buffer();
                                  for (std::size_t i = 0; i < map.size(); ++i) g[map[i]] += self.grad[i];
                                });
}

// ---------------------------------------------------------------- linear algebra

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n);
  MapR<T>(out.data(), m, n).noalias() = CMapR<T>(a.data().data(), m, k) * CMapR<T>(b.data().data(), k, n);
  Node<T>* pa = raw(a);
  Node<T>* pb = raw(b);
  return detail::make_result<T>(Shape{m, n}, std::move(out), "matmul", {a.node(), b.node()},
                                [pa, pb, m, k, n](Node<T>& self) {
                                  CMapR<T> dy(self.grad.data(), m, n);
                                  if (wants_grad(pa)) {
                                    MapR<T>(pa->grad_buffer().data(), m, k).noalias() +=
                                        dy * CMapR<T>(pb->data.data(), k, n).transpose();
                                  }
                                  if (wants_grad(pb)) {
                                    MapR<T>(pb->grad_buffer().data(), k, n).noalias() +=
                                        CMapR<T>(pa->data.data(), m, k).transpose() * dy;
                                  }
                                });
}

template <typename T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1)) {
    throw DimensionError("bmm: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  std::vector<T> out(bs * m * n);
  for (std::size_t i = 0; i < bs; ++i) {
    MapR<T>(out.data() + i * m * n, m, n).noalias() =
        CMapR<T>(a.data().data() + i * m * k, m, k) * CMapR<T>(b.data().data() + i * k * n, k, n);
  }
  Node<T>* pa = raw(a);
  Node<T>* pb = raw(b);
  return detail::make_result<T>(
      Shape{bs, m, n}, std::move(out), "bmm", {a.node(), b.node()},
      [pa, pb, bs, m, k, n](Node<T>& self) {
        for (std::size_t i = 0; i < bs; ++i) {
          CMapR<T> dy(self.grad.data() + i * m * n, m, n);
          if (wants_grad(pa)) {
            MapR<T>(pa->grad_buffer().data() + i * m * k, m, k).noalias() +=
                dy * CMapR<T>(pb->data.data() + i * k * n, k, n).transpose();
          }
          if (wants_grad(pb)) {
            MapR<T>(pb->grad_buffer().data() + i * k * n, k, n).noalias() +=
                CMapR<T>(pa->data.data() + i * m * k, m, k).transpose() * dy;
          }
        }
      });
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (x.rank() != 2 || weight.rank() != 2 || x.dim(1) != weight.dim(1)) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t m = x.dim(0), in = x.dim(1), out_f = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != out_f)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " +
                         std::to_string(out_f) + " outputs");
  }
  std::vector<T> out(m * out_f);
  MapR<T> y(out.data(), m, out_f);
  y.noalias() = CMapR<T>(x.data().data(), m, in) * CMapR<T>(weight.data().data(), out_f, in).transpose();
  if (bias.defined()) {
    auto bv = bias.data();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < out_f; ++c) y(r, c) += bv[c];
  }
  Node<T>* px = raw(x);
  Node<T>* pw = raw(weight);
  Node<T>* pb = bias.defined() ? raw(bias) : nullptr;
  std::vector<typename Tensor<T>::NodePtr> parents{x.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return detail::make_result<T>(
      Shape{m, out_f}, std::move(out), "linear", std::move(parents),
      [px, pw, pb, m, in, out_f](Node<T>& self) {
        CMapR<T> dy(self.grad.data(), m, out_f);
        if (wants_grad(px)) {
          MapR<T>(px->grad_buffer().data(), m, in).noalias() += dy * CMapR<T>(pw->data.data(), out_f, in);
        }
        if (wants_grad(pw)) {
          MapR<T>(pw->grad_buffer().data(), out_f, in).noalias() +=
              dy.transpose() * CMapR<T>(px->data.data(), m, in);
        }
        if (wants_grad(pb)) {
          auto& g = pb->grad_buffer();
          for (std::size_t r = 0; r < m; ++r)
            for (std::size_t c = 0; c < out_f; ++c) g[c] += dy(r, c);
        }
      });
}

// ---------------------------------------------------------------- conv2d

namespace {

struct ConvGeom {
  std::size_t batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo;
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t out_pixels() const { return ho * wo; }
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* cols) {
  const std::size_t np = g.out_pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        T* row = cols + ((c * g.kh + ki) * g.kw + kj) * np;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          T* dst = row + oy * g.wo;
          if (iy < 0 || iy >= static_cast<long>(g.h)) {
            std::fill(dst, dst + g.wo, T(0));
            continue;
          }
          const T* src = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<long>(g.w)) ? T(0) : src[ix];
          }
        }
      }
}

template <typename T>
void col2im_add(const T* cols, const ConvGeom& g, T* img) {
  const std::size_t np = g.out_pixels();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ki = 0; ki < g.kh; ++ki)
      for (std::size_t kj = 0; kj < g.kw; ++kj) {
        const T* row = cols + ((c * g.kh + ki) * g.kw + kj) * np;
        for (std::size_t oy = 0; oy < g.ho; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ki) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          T* dst = img + (c * g.h + static_cast<std::size_t>(iy)) * g.w;
          const T* src = row + oy * g.wo;
          for (std::size_t ox = 0; ox < g.wo; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kj) - static_cast<long>(g.pad);
            if (ix >= 0 && ix < static_cast<long>(g.w)) dst[ix] += src[ox];
          }
        }
      }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding) {
  if (input.rank() != 4 || weight.rank() != 4) {
    throw DimensionError("conv2d: expected rank-4 input and weight, got " + shape_str(input.shape()) +
                         " and " + shape_str(weight.shape()));
  }
  if (input.dim(1) != weight.dim(1)) {
    throw DimensionError("conv2d: input has " + std::to_string(input.dim(1)) +
                         " channels but weight expects " + std::to_string(weight.dim(1)));
  }
  if (stride == 0) throw UsageError("conv2d: stride must be >= 1");
  ConvGeom g{};
  g.batch = input.dim(0);
  g.cin = input.dim(1);
  g.h = input.dim(2);
  g.w = input.dim(3);
  g.cout = weight.dim(0);
  g.kh = weight.dim(2);
  g.kw = weight.dim(3);
  g.stride = stride;
  g.pad = padding;
  if (g.h + 2 * padding < g.kh || g.w + 2 * padding < g.kw) {
    throw DimensionError("conv2d: kernel " + shape_str(weight.shape()) + " larger than padded input " +
                         shape_str(input.shape()));
  }
  g.ho = (g.h + 2 * padding - g.kh) / stride + 1;
  g.wo = (g.w + 2 * padding - g.kw) / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(g.cout) +
                         " output channels");
  }

  const std::size_t np = g.out_pixels();
  const std::size_t in_stride = g.cin * g.h * g.w;
  std::vector<T> out(g.batch * g.cout * np);
  std::vector<T> cols(g.pointwise() ? 0 : g.patch() * np);
  CMapR<T> wm(weight.data().data(), g.cout, g.patch());
  const T* x = input.data().data();
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* colp = x + b * in_stride;
    if (!g.pointwise()) {
      im2col(x + b * in_stride, g, cols.data());
      colp = cols.data();
    }
    MapR<T> y(out.data() + b * g.cout * np, g.cout, np);
    y.noalias() = wm * CMapR<T>(colp, g.patch(), np);
    if (bias.defined()) {
      auto bv = bias.data();
      for (std::size_t c = 0; c < g.cout; ++c) y.row(c).array() += bv[c];
    }
  }

  Node<T>* px = raw(input);
  Node<T>* pw = raw(weight);
  Node<T>* pb = bias.defined() ? raw(bias) : nullptr;
  std::vector<typename Tensor<T>::NodePtr> parents{input.node(), weight.node()};
  if (bias.defined()) parents.push_back(bias.node());
  return detail::make_result<T>(
      Shape{g.batch, g.cout, g.ho, g.wo}, std::move(out), "conv2d", std::move(parents),
      [px, pw, pb, g](Node<T>& self) {
        const std::size_t np = g.out_pixels();
        const std::size_t in_stride = g.cin * g.h * g.w;
        std::vector<T> cols(g.pointwise() ? 0 : g.patch() * np);
        std::vector<T> dcols(g.pointwise() ? 0 : g.patch() * np);
        CMapR<T> wm(pw->data.data(), g.cout, g.patch());
        T* dx = wants_grad(px) ? px->grad_buffer().data() : nullptr;
        T* dw = wants_grad(pw) ? pw->grad_buffer().data() : nullptr;
        T* db = wants_grad(pb) ? pb->grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < g.batch; ++b) {
          CMapR<T> dy(self.grad.data() + b * g.cout * np, g.cout, np);
          if (dw) {
            const T* colp = px->data.data() + b * in_stride;
            if (!g.pointwise()) {
              im2col(px->data.data() + b * in_stride, g, cols.data());
              colp = cols.data();
            }
            MapR<T>(dw, g.cout, g.patch()).noalias() += dy * CMapR<T>(colp, g.patch(), np).transpose();
          }
          if (dx) {
            if (g.pointwise()) {
              MapR<T>(dx + b * in_stride, g.cin, np).noalias() += wm.transpose() * dy;
            } else {
              MapR<T>(dcols.data(), g.patch(), np).noalias() = wm.transpose() * dy;
              col2im_add(dcols.data(), g, dx + b * in_stride);
            }
          }
          if (db) {
            for (std::size_t c = 0; c < g.cout; ++c) db[c] += dy.row(c).sum();
          }
        }
      });
}

// ---------------------------------------------------------------- batch norm

template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training, double momentum,
                     double eps) {
  if (input.rank() < 2) throw DimensionError("batch_norm: input must have rank >= 2");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t spatial = input.numel() / (batch * channels);
  const std::size_t count = batch * spatial;
  if (gamma.defined() != beta.defined()) throw UsageError("batch_norm: gamma and beta must come together");
  for (const Tensor<T>* t : std::initializer_list<const Tensor<T>*>{&gamma, &beta, &running_mean, &running_var}) {
    if (t->defined() && (t->rank() != 1 || t->dim(0) != channels)) {
      throw DimensionError("batch_norm: per-channel tensor " + shape_str(t->shape()) + " for " +
                           std::to_string(channels) + " channels");
    }
  }
  if (training && count < 2) {
    throw UsageError("batch_norm: training mode needs at least 2 values per channel, got " +
                     std::to_string(count));
  }
  const bool affine = gamma.defined();
  auto x = input.data();
  std::vector<T> mu(channels), invstd(channels);
  if (training) {
    auto rm = running_mean.data_mut();
    auto rv = running_var.data_mut();
    for (std::size_t c = 0; c < channels; ++c) {
      double s = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) s += p[i];
      }
      const double m = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t b = 0; b < batch; ++b) {
        const T* p = x.data() + (b * channels + c) * spatial;
        for (std::size_t i = 0; i < spatial; ++i) {
          const double d = p[i] - m;
          ss += d * d;
        }
      }
      const double var = ss / static_cast<double>(count);
      mu[c] = static_cast<T>(m);
      invstd[c] = static_cast<T>(1.0 / std::sqrt(var + eps));
      const double unbiased = ss / static_cast<double>(count - 1);
      rm[c] = static_cast<T>((1.0 - momentum) * rm[c] + momentum * m);
      rv[c] = static_cast<T>((1.0 - momentum) * rv[c] + momentum * unbiased);
    }
  } else {
    auto rm = running_mean.data();
    auto rv = running_var.data();
    for (std::size_t c = 0; c < channels; ++c) {
      mu[c] = rm[c];
      invstd[c] = static_cast<T>(1.0 / std::sqrt(static_cast<double>(rv[c]) + eps));
    }
  }

  std::vector<T> xhat(input.numel());
  std::vector<T> out(input.numel());
  auto gv = affine ? gamma.data() : std::span<const T>{};
  auto bv = affine ? beta.data() : std::span<const T>{};
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c) {
      const std::size_t off = (b * channels + c) * spatial;
      const T scale = affine ? gv[c] : T(1);
      const T shift = affine ? bv[c] : T(0);
      for (std::size_t i = 0; i < spatial; ++i) {
        const T h = (x[off + i] - mu[c]) * invstd[c];
        xhat[off + i] = h;
        out[off + i] = h * scale + shift;
      }
    }

  Node<T>* px = raw(input);
  Node<T>* pg = affine ? raw(gamma) : nullptr;
  Node<T>* pb = affine ? raw(beta) : nullptr;
  std::vector<typename Tensor<T>::NodePtr> parents{input.node()};
  if (affine) {
    parents.push_back(gamma.node());
    parents.push_back(beta.node());
  }
  return detail::make_result<T>(
      input.shape(), std::move(out), "batch_norm", std::move(parents),
      [px, pg, pb, training, batch, channels, spatial, count, invstd = std::move(invstd),
       xhat = std::move(xhat)](Node<T>& self) {
        const auto& dy = self.grad;
        T* dg = wants_grad(pg) ? pg->grad_buffer().data() : nullptr;
        T* dbeta = wants_grad(pb) ? pb->grad_buffer().data() : nullptr;
        T* dx = wants_grad(px) ? px->grad_buffer().data() : nullptr;
        for (std::size_t c = 0; c < channels; ++c) {
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              sum_dy += dy[off + i];
              sum_dy_xhat += static_cast<double>(dy[off + i]) * xhat[off + i];
            }
          }
          if (dg) dg[c] += static_cast<T>(sum_dy_xhat);
          if (dbeta) dbeta[c] += static_cast<T>(sum_dy);
          if (!dx) continue;
          const T scale = pg ? pg->data[c] : T(1);
          const double k = static_cast<double>(scale) * invstd[c];
          for (std::size_t b = 0; b < batch; ++b) {
            const std::size_t off = (b * channels + c) * spatial;
            for (std::size_t i = 0; i < spatial; ++i) {
              if (training) {
                const double m = static_cast<double>(count);
                dx[off + i] += static_cast<T>(k * (dy[off + i] - sum_dy / m - xhat[off + i] * sum_dy_xhat / m));
              } else {
                dx[off + i] += static_cast<T>(k * dy[off + i]);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------- softmax family

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  require_axis(a.shape(), axis, "softmax");
  const AxisSplit sp = split_at(a.shape(), axis);
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      T s = T(0);
      for (std::size_t k = 0; k < sp.n; ++k) {
        const T e = std::exp(x[base + k * sp.inner] - mx);
        out[base + k * sp.inner] = e;
        s += e;
      }
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] /= s;
    }
  Node<T>* pa = raw(a);
  return detail::make_result<T>(a.shape(), std::move(out), "softmax", {a.node()},
                                [pa, sp](Node<T>& self) {
                                  auto& g = pa->grad_buffer();
                                  const auto& y = self.data;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t i = 0; i < sp.inner; ++i) {
                                      const std::size_t base = o * sp.n * sp.inner + i;
                                      T dot = T(0);
                                      for (std::size_t k = 0; k < sp.n; ++k)
                                        dot += dy[base + k * sp.inner] * y[base + k * sp.inner];
                                      for (std::size_t k = 0; k < sp.n; ++k) {
                                        const std::size_t j = base + k * sp.inner;
                                        g[j] += y[j] * (dy[j] - dot);
                                      }
                                    }
                                });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
  require_axis(a.shape(), axis, "log_softmax");
  const AxisSplit sp = split_at(a.shape(), axis);
  auto x = a.data();
  std::vector<T> out(x.size());
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t k = 0; k < sp.n; ++k) mx = std::max(mx, x[base + k * sp.inner]);
      T s = T(0);
      for (std::size_t k = 0; k < sp.n; ++k) s += std::exp(x[base + k * sp.inner] - mx);
      const T lse = mx + std::log(s);
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = x[base + k * sp.inner] - lse;
    }
  Node<T>* pa = raw(a);
  return detail::make_result<T>(a.shape(), std::move(out), "log_softmax", {a.node()},
                                [pa, sp](Node<T>& self) {
                                  auto& g = pa->grad_buffer();
                                  const auto& y = self.data;
                                  const auto& dy = self.grad;
                                  for (std::size_t o = 0; o < sp.outer; ++o)
                                    for (std::size_t i = 0; i < sp.inner; ++i) {
                                      const std::size_t base = o * sp.n * sp.inner + i;
                                      T total = T(0);
                                      for (std::size_t k = 0; k < sp.n; ++k) total += dy[base + k * sp.inner];
                                      for (std::size_t k = 0; k < sp.n; ++k) {
                                        const std::size_t j = base + k * sp.inner;
                                        g[j] += dy[j] - std::exp(y[j]) * total;
                                      }
                                    }
                                });
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, std::size_t axis, double eps) {
  require_axis(a.shape(), axis, "l2_normalize");
  const AxisSplit sp = split_at(a.shape(), axis);
  auto x = a.data();
  std::vector<T> out(x.size());
  std::vector<T> denom(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      const std::size_t base = o * sp.n * sp.inner + i;
      double ss = 0.0;
      for (std::size_t k = 0; k < sp.n; ++k) {
        const double v = x[base + k * sp.inner];
        ss += v * v;
      }
      const T d = static_cast<T>(std::max(std::sqrt(ss), eps));
      denom[o * sp.inner + i] = d;
      for (std::size_t k = 0; k < sp.n; ++k) out[base + k * sp.inner] = x[base + k * sp.inner] / d;
    }
  Node<T>* pa = raw(a);
  return detail::make_result<T>(
      a.shape(), std::move(out), "l2_normalize", {a.node()},
      [pa, sp, eps, denom = std::move(denom)](Node<T>& self) {
        auto& g = pa->grad_buffer();
        const auto& y = self.data;
        const auto& dy = self.grad;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < sp.inner; ++i) {
            const std::size_t base = o * sp.n * sp.inner + i;
            const T d = denom[o * sp.inner + i];
            // Inside the eps guard the map is x / eps, a plain scaling.
            const bool guarded = static_cast<double>(d) <= eps;
            T dot = T(0);
            if (!guarded)
              for (std::size_t k = 0; k < sp.n; ++k) dot += y[base + k * sp.inner] * dy[base + k * sp.inner];
            for (std::size_t k = 0; k < sp.n; ++k) {
              const std::size_t j = base + k * sp.inner;
              g[j] += (dy[j] - y[j] * dot) / d;
            }
          }
      });
}

// ---------------------------------------------------------------- grid sample

namespace {

struct Tap {
  std::size_t x0, x1, y0, y1;
  double ax, ay;
  bool x_free, y_free;  // false when clamped (coordinate gradient is zero)
};

Tap make_tap(double u, double v, std::size_t w, std::size_t h) {
  Tap t{};
  double px = u * static_cast<double>(w) - 0.5;
  double py = v * static_cast<double>(h) - 0.5;
  const double maxx = static_cast<double>(w - 1);
  const double maxy = static_cast<double>(h - 1);
  t.x_free = px >= 0.0 && px <= maxx && w > 1;
  t.y_free = py >= 0.0 && py <= maxy && h > 1;
  px = std::clamp(px, 0.0, maxx);
  py = std::clamp(py, 0.0, maxy);
  t.x0 = static_cast<std::size_t>(std::floor(px));
  t.y0 = static_cast<std::size_t>(std::floor(py));
  t.x1 = std::min(t.x0 + 1, w - 1);
  t.y1 = std::min(t.y0 + 1, h - 1);
  t.ax = px - static_cast<double>(t.x0);
  t.ay = py - static_cast<double>(t.y0);
  return t;
}

}  // namespace

template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& field, const Tensor<T>& coords) {
  if (field.rank() != 4 || coords.rank() != 4 || coords.dim(3) != 2 || coords.dim(0) != field.dim(0)) {
    throw DimensionError("grid_sample_bilinear: field " + shape_str(field.shape()) + " and coords " +
                         shape_str(coords.shape()) + " are incompatible");
  }
  const std::size_t batch = field.dim(0), ch = field.dim(1), h = field.dim(2), w = field.dim(3);
  const std::size_t gh = coords.dim(1), gw = coords.dim(2), npts = gh * gw;
  auto cv = coords.data();
  for (T c : cv) {
    if (!std::isfinite(static_cast<double>(c))) throw InputError("grid_sample_bilinear: non-finite coordinate");
  }
  std::vector<Tap> taps(batch * npts);
  for (std::size_t i = 0; i < taps.size(); ++i) taps[i] = make_tap(cv[2 * i], cv[2 * i + 1], w, h);

  auto f = field.data();
  std::vector<T> out(batch * ch * npts);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < ch; ++c) {
      const T* img = f.data() + (b * ch + c) * h * w;
      T* dst = out.data() + (b * ch + c) * npts;
      for (std::size_t p = 0; p < npts; ++p) {
        const Tap& t = taps[b * npts + p];
        const double top = (1.0 - t.ax) * img[t.y0 * w + t.x0] + t.ax * img[t.y0 * w + t.x1];
        const double bot = (1.0 - t.ax) * img[t.y1 * w + t.x0] + t.ax * img[t.y1 * w + t.x1];
        dst[p] = static_cast<T>((1.0 - t.ay) * top + t.ay * bot);
      }
    }

  Node<T>* pf = raw(field);
  Node<T>* pc = raw(coords);
  return detail::make_result<T>(
      Shape{batch, ch, gh, gw}, std::move(out), "grid_sample_bilinear", {field.node(), coords.node()},
      [pf, pc, batch, ch, h, w, npts, taps = std::move(taps)](Node<T>& self) {
        const auto& dy = self.grad;
        T* df = wants_grad(pf) ? pf->grad_buffer().data() : nullptr;
        T* dc = wants_grad(pc) ? pc->grad_buffer().data() : nullptr;
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t c = 0; c < ch; ++c) {
            const T* img = pf->data.data() + (b * ch + c) * h * w;
            const T* g = dy.data() + (b * ch + c) * npts;
            for (std::size_t p = 0; p < npts; ++p) {
              const Tap& t = taps[b * npts + p];
              const double gp = g[p];
              if (df) {
                T* d = df + (b * ch + c) * h * w;
                d[t.y0 * w + t.x0] += static_cast<T>(gp * (1.0 - t.ay) * (1.0 - t.ax));
                d[t.y0 * w + t.x1] += static_cast<T>(gp * (1.0 - t.ay) * t.ax);
                d[t.y1 * w + t.x0] += static_cast<T>(gp * t.ay * (1.0 - t.ax));
                d[t.y1 * w + t.x1] += static_cast<T>(gp * t.ay * t.ax);
              }
              if (dc) {
                const double f00 = img[t.y0 * w + t.x0], f01 = img[t.y0 * w + t.x1];
                const double f10 = img[t.y1 * w + t.x0], f11 = img[t.y1 * w + t.x1];
                if (t.x_free) {
                  const double dpx = (1.0 - t.ay) * (f01 - f00) + t.ay * (f11 - f10);
                  dc[2 * (b * npts + p)] += static_cast<T>(gp * dpx * static_cast<double>(w));
                }
                if (t.y_free) {
                  const double dpy = (1.0 - t.ax) * (f10 - f00) + t.ax * (f11 - f01);
                  dc[2 * (b * npts + p) + 1] += static_cast<T>(gp * dpy * static_cast<double>(h));
                }
              }
            }
          }
      });
}

namespace {

struct SgTape {
  StopGradientTape::Mode mode = StopGradientTape::Mode::Off;
  std::vector<std::vector<double>> values;
  std::size_t cursor = 0;
};

thread_local SgTape sg_tape;

}  // namespace

StopGradientTape::StopGradientTape() {
  if (sg_tape.mode != Mode::Off) throw UsageError("StopGradientTape: tapes do not nest");
}

StopGradientTape::~StopGradientTape() { sg_tape = SgTape{}; }

void StopGradientTape::record() {
  sg_tape.mode = Mode::Record;
  sg_tape.values.clear();
  sg_tape.cursor = 0;
}

void StopGradientTape::replay() {
  sg_tape.mode = Mode::Replay;
  sg_tape.cursor = 0;
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  if (sg_tape.mode == StopGradientTape::Mode::Record) {
    const auto v = a.data();
    sg_tape.values.emplace_back(v.begin(), v.end());
  } else if (sg_tape.mode == StopGradientTape::Mode::Replay) {
    if (sg_tape.cursor >= sg_tape.values.size() || sg_tape.values[sg_tape.cursor].size() != a.numel()) {
      throw UsageError("stop_gradient replay: program took a different path than when recorded");
    }
    const auto& v = sg_tape.values[sg_tape.cursor++];
    return Tensor<T>(a.shape(), std::vector<T>(v.begin(), v.end()));
  }
  return a.detach();
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& a) {
  if (a.rank() != 4) throw DimensionError("global_avg_pool: expected [B,C,H,W], got " + shape_str(a.shape()));
  return mean_axis(reshape(a, Shape{a.dim(0), a.dim(1), a.dim(2) * a.dim(3)}), 2);
}

#define DSIAM_INSTANTIATE_OPS(T)                                                                   \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> mul_scalar(const Tensor<T>&, T);                                              \
  template Tensor<T> neg(const Tensor<T>&);                                                        \
  template Tensor<T> relu(const Tensor<T>&);                                                       \
  template Tensor<T> exp(const Tensor<T>&);                                                        \
  template Tensor<T> log(const Tensor<T>&);                                                        \
  template Tensor<T> square(const Tensor<T>&);                                                     \
  template Tensor<T> sum(const Tensor<T>&);                                                        \
  template Tensor<T> mean(const Tensor<T>&);                                                       \
  template Tensor<T> sum_axis(const Tensor<T>&, std::size_t);                                      \
  template Tensor<T> mean_axis(const Tensor<T>&, std::size_t);                                     \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                             \
  template Tensor<T> transpose(const Tensor<T>&, std::size_t, std::size_t);                        \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> bmm(const Tensor<T>&, const Tensor<T>&);                                      \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                 \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,     \
                            std::size_t);                                                          \
  template Tensor<T> batch_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, Tensor<T>&,  \
                                Tensor<T>&, bool, double, double);                                 \
  template Tensor<T> softmax(const Tensor<T>&, std::size_t);                                       \
  template Tensor<T> log_softmax(const Tensor<T>&, std::size_t);                                   \
  template Tensor<T> l2_normalize(const Tensor<T>&, std::size_t, double);                          \
  template Tensor<T> grid_sample_bilinear(const Tensor<T>&, const Tensor<T>&);                     \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                              \
  template Tensor<T> global_avg_pool(const Tensor<T>&);

DSIAM_INSTANTIATE_OPS(float)
DSIAM_INSTANTIATE_OPS(double)

#undef DSIAM_INSTANTIATE_OPS

}  // namespace dsiam
