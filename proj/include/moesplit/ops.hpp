#pragma once

#include <cstddef>
#include <cstdint>
#include <random>

#include "moesplit/tensor.hpp"

namespace moesplit {

/// Raw row-major kernels shared by the eager ops and the recorded graph.
/// Every reduction runs in a fixed loop order so results are reproducible
/// bit for bit.
namespace kernels {

/// out[M,N] += a[M,K] * b[K,N]
template <typename T>
void matmul_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n);

/// Like matmul_acc but rows whose mask byte is zero are skipped entirely.
template <typename T>
void matmul_acc_masked(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n,
                       const std::uint8_t* row_mask);

/// out[M,K] += g[M,N] * b[K,N]^T
template <typename T>
void matmul_acc_bt(const T* g, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n);

/// out[K,N] += a[M,K]^T * g[M,N]
template <typename T>
void matmul_acc_at(const T* a, const T* g, T* out, std::size_t m, std::size_t k, std::size_t n);

}  // namespace kernels

template <typename T>
T silu_scalar(T h);

/// d/dh [h * sigmoid(h)]
template <typename T>
T silu_grad_scalar(T h);

/// y[.., j] = sum_i x[.., i] * w[i, j]
template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w);

/// y[.., j] = sum_i x[.., i] * w[i, j] + b[j]
template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b);

/// Adds `b` (shape [cols]) to every row of `x`.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> silu(const Tensor<T>& h);

/// Softmax along the last axis with max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& logits);

/// Softmax over each of `groups` contiguous column blocks of the last axis,
/// each block scaled by 1/groups so that rows still sum to one.
template <typename T>
Tensor<T> softmax_grouped(const Tensor<T>& logits, std::size_t groups);

/// x / sqrt(mean(x^2) + eps) * scale + shift, row-wise.
template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps);

/// Mean over rows of -log softmax(logits)[label].
template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

template <typename T>
Tensor<T> random_normal(Shape shape, double stddev, std::mt19937_64& rng);

template <typename T>
Tensor<T> random_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng);

/// max_i |a_i - b_i|
template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b);

}  // namespace moesplit
