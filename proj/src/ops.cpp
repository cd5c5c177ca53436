#include "moesplit/ops.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

namespace moesplit {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace kernels {

template <typename T>
void matmul_acc(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    T* orow = out + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_acc_masked(const T* a, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n,
                       const std::uint8_t* row_mask) {
  for (std::size_t i = 0; i < m; ++i) {
    if (!row_mask[i]) continue;
    T* orow = out + i * n;
    const T* arow = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }
}

template <typename T>
void matmul_acc_bt(const T* g, const T* b, T* out, std::size_t m, std::size_t k, std::size_t n) {
  std::vector<T> bt(n * k);
  for (std::size_t p = 0; p < k; ++p)
    for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = b[p * n + j];
  matmul_acc(g, bt.data(), out, m, n, k);
}

template <typename T>
void matmul_acc_at(const T* a, const T* g, T* out, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = a + i * k;
    const T* grow = g + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = arow[p];
      T* orow = out + p * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += av * grow[j];
    }
  }
}

}  // namespace kernels

template <typename T>
T silu_scalar(T h) {
  if (h >= T(0)) return h / (T(1) + std::exp(-h));
  const T e = std::exp(h);
  return h * e / (T(1) + e);
}

template <typename T>
T silu_grad_scalar(T h) {
  T s;
  if (h >= T(0)) {
    s = T(1) / (T(1) + std::exp(-h));
  } else {
    const T e = std::exp(h);
    s = e / (T(1) + e);
  }
  return s * (T(1) + h * (T(1) - s));
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& x, const Tensor<T>& w) {
  if (w.rank() != 2 || x.cols() != w.shape()[0]) {
    throw DimensionError("matmul: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  Shape out_shape = x.shape().empty() ? Shape{1} : x.shape();
  out_shape.back() = w.shape()[1];
  Tensor<T> y(out_shape);
  kernels::matmul_acc(x.data().data(), w.data().data(), y.data().data(), x.rows(), w.shape()[0],
                      w.shape()[1]);
  return y;
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (b.size() != x.cols()) {
    throw DimensionError("add_bias: input " + shape_str(x.shape()) + " incompatible with bias " +
                         shape_str(b.shape()));
  }
  Tensor<T> y = x;
  const std::size_t n = x.cols();
  for (std::size_t r = 0; r < x.rows(); ++r) {
    T* row = y.data().data() + r * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += b[j];
  }
  return y;
}

template <typename T>
Tensor<T> linear_forward(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  if (w.rank() != 2 || x.cols() != w.shape()[0] || b.size() != w.shape()[1]) {
    throw DimensionError("linear_forward: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()) + " and bias " + shape_str(b.shape()));
  }
  return add_bias(matmul(x, w), b);
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor<T> y = a;
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += b[i];
  return y;
}

template <typename T>
Tensor<T> silu(const Tensor<T>& h) {
  Tensor<T> y = h;
  for (auto& v : y.data()) v = silu_scalar(v);
  return y;
}

template <typename T>
Tensor<T> softmax_grouped(const Tensor<T>& logits, std::size_t groups) {
  const std::size_t n = logits.cols();
  if (groups == 0 || n % groups != 0) {
    throw DimensionError("softmax: " + std::to_string(groups) + " groups do not divide last axis of " +
                         shape_str(logits.shape()));
  }
  const std::size_t width = n / groups;
  const T inv_groups = T(1) / static_cast<T>(groups);
  Tensor<T> y = logits;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    T* row = y.data().data() + r * n;
    for (std::size_t g = 0; g < groups; ++g) {
      T* seg = row + g * width;
      const T mx = *std::max_element(seg, seg + width);
      T sum = 0;
      for (std::size_t j = 0; j < width; ++j) {
        seg[j] = std::exp(seg[j] - mx);
        sum += seg[j];
      }
      const T scale = inv_groups / sum;
      for (std::size_t j = 0; j < width; ++j) seg[j] *= scale;
    }
  }
  return y;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& logits) {
  return softmax_grouped(logits, 1);
}

template <typename T>
Tensor<T> rms_norm(const Tensor<T>& x, const Tensor<T>& scale, const Tensor<T>& shift, T eps) {
  const std::size_t n = x.cols();
  if (scale.size() != n || shift.size() != n) {
    throw DimensionError("rms_norm: input " + shape_str(x.shape()) + " vs scale " +
                         shape_str(scale.shape()) + " / shift " + shape_str(shift.shape()));
  }
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    const T* xr = x.data().data() + r * n;
    T* yr = y.data().data() + r * n;
    T ss = 0;
    for (std::size_t j = 0; j < n; ++j) ss += xr[j] * xr[j];
    const T inv = T(1) / std::sqrt(ss / static_cast<T>(n) + eps);
    for (std::size_t j = 0; j < n; ++j) yr[j] = xr[j] * inv * scale[j] + shift[j];
  }
  return y;
}

template <typename T>
double cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  const std::size_t c = logits.cols();
  if (labels.size() != logits.rows()) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  double total = 0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const int label = labels[r];
    if (label < 0 || static_cast<std::size_t>(label) >= c) {
      throw ContractError("cross_entropy: label " + std::to_string(label) + " outside vocabulary of " +
                          std::to_string(c));
    }
    const T* row = logits.data().data() + r * c;
    const T mx = *std::max_element(row, row + c);
    double sum = 0;
    for (std::size_t j = 0; j < c; ++j) sum += std::exp(static_cast<double>(row[j] - mx));
    total += std::log(sum) + static_cast<double>(mx) - static_cast<double>(row[label]);
  }
  return labels.empty() ? 0.0 : total / static_cast<double>(labels.size());
}

template <typename T>
Tensor<T> random_normal(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
Tensor<T> random_uniform(Shape shape, double lo, double hi, std::mt19937_64& rng) {
  Tensor<T> t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data()) v = static_cast<T>(dist(rng));
  return t;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.size() != b.size()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

#define MOESPLIT_INSTANTIATE_OPS(T)                                                                     \
  template void kernels::matmul_acc<T>(const T*, const T*, T*, std::size_t, std::size_t, std::size_t); \
  template void kernels::matmul_acc_masked<T>(const T*, const T*, T*, std::size_t, std::size_t,         \
                                              std::size_t, const std::uint8_t*);                        \
  template void kernels::matmul_acc_bt<T>(const T*, const T*, T*, std::size_t, std::size_t,             \
                                          std::size_t);                                                 \
  template void kernels::matmul_acc_at<T>(const T*, const T*, T*, std::size_t, std::size_t,             \
                                          std::size_t);                                                 \
  template T silu_scalar<T>(T);                                                                         \
  template T silu_grad_scalar<T>(T);                                                                    \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear_forward<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);           \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> silu<T>(const Tensor<T>&);                                                         \
  template Tensor<T> softmax<T>(const Tensor<T>&);                                                      \
  template Tensor<T> softmax_grouped<T>(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> rms_norm<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);              \
  template double cross_entropy<T>(const Tensor<T>&, std::span<const int>);                             \
  template Tensor<T> random_normal<T>(Shape, double, std::mt19937_64&);                                 \
  template Tensor<T> random_uniform<T>(Shape, double, double, std::mt19937_64&);                        \
  template double max_abs_diff<T>(const Tensor<T>&, const Tensor<T>&);

MOESPLIT_INSTANTIATE_OPS(float)
MOESPLIT_INSTANTIATE_OPS(double)

}  // namespace moesplit
