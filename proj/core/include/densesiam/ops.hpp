#pragma once

#include <cstddef>

#include "densesiam/tensor.hpp"

// Differentiable primitives. Every function here is pure: it reads its
// inputs, allocates a fresh result node and never touches global state
// (batch_norm additionally updates the running buffers it is handed).
namespace dsiam {

// ---- elementwise (operands must have identical shapes) ----
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> mul_scalar(const Tensor<T>& a, T s);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);
template <typename T> Tensor<T> square(const Tensor<T>& a);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, T s) { return mul_scalar(a, s); }
template <typename T> Tensor<T> operator*(T s, const Tensor<T>& a) { return mul_scalar(a, s); }

// ---- reductions ----
template <typename T> Tensor<T> sum(const Tensor<T>& a);   // -> [1]
template <typename T> Tensor<T> mean(const Tensor<T>& a);  // -> [1]
// Reduces `axis` away (rank-1 inputs reduce to [1]).
template <typename T> Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> mean_axis(const Tensor<T>& a, std::size_t axis);

// ---- shape ----
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);
// Swaps two axes (materialized copy).
template <typename T> Tensor<T> transpose(const Tensor<T>& a, std::size_t axis0, std::size_t axis1);

// ---- linear algebra ----
// [M,K] x [K,N] -> [M,N]
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// [B,M,K] x [B,K,N] -> [B,M,N]
template <typename T> Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b);
// x[M,In] * W[Out,In]^T + bias[Out]; bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias = {});

// ---- network primitives ----
// input [B,Cin,H,W], weight [Cout,Cin,kh,kw], bias [Cout] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::size_t stride, std::size_t padding);

/// Batch normalization over every axis except axis 1 (channels); accepts
/// [B,C] and [B,C,H,W]. In training mode the batch statistics normalize the
/// input and are blended into the running buffers with `momentum` (running
/// variance uses the unbiased estimate). Undefined gamma/beta mean no affine.
template <typename T>
Tensor<T> batch_norm(const Tensor<T>& input, const Tensor<T>& gamma, const Tensor<T>& beta,
                     Tensor<T>& running_mean, Tensor<T>& running_var, bool training,
                     double momentum = 0.1, double eps = 1e-5);

template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis);

// x / max(||x||_2, eps) along `axis`; a zero vector maps to zero.
template <typename T> Tensor<T> l2_normalize(const Tensor<T>& a, std::size_t axis, double eps = 1e-12);

/// Bilinear sampling of field [B,C,H,W] at coords [B,Hg,Wg,2] -> [B,C,Hg,Wg].
///
/// Coordinates are (x, y) in [0,1]^2 with the pixel-center convention:
/// pixel (i, j) sits at ((j + 0.5) / W, (i + 0.5) / H). Positions outside
/// the lattice of centers clamp to the border. Differentiable with respect
/// to both the field and the coordinates (the coordinate gradient is zero
/// where clamping is active).
template <typename T>
Tensor<T> grid_sample_bilinear(const Tensor<T>& field, const Tensor<T>& coords);

// Identity forward; contributes no gradient to its input's graph.
template <typename T> Tensor<T> stop_gradient(const Tensor<T>& a);

/// While alive, stop_gradient calls on this thread are recorded (record())
/// or answered from the recording in call order (replay()). A replayed
/// program sees its stop-gradient operands frozen at the recorded values,
/// which is the function that backprop differentiates.
class StopGradientTape {
 public:
  enum class Mode { Off, Record, Replay };
  StopGradientTape();
  ~StopGradientTape();
  StopGradientTape(const StopGradientTape&) = delete;
  StopGradientTape& operator=(const StopGradientTape&) = delete;
  void record();
  void replay();
};

// [B,C,H,W] -> [B,C]
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& a);

}  // namespace dsiam
