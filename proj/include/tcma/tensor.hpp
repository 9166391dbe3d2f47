// Dense row-major tensors of rank 1..4 in double precision, plus the small
// op set the retrieval heads need: matmul, axis mean, L2 normalization,
// temperature softmax, softplus, top-k selection and a central-difference
// gradient oracle.

#ifndef TCMA_TENSOR_HPP
#define TCMA_TENSOR_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "tcma/error.hpp"

namespace tcma {

using Shape = std::vector<std::size_t>;

inline constexpr std::size_t kMaxRank = 4;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out << 'x';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

inline std::size_t shape_product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0) : shape_(std::move(shape)) {
    validate_shape(shape_);
    data_.assign(shape_product(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
    validate_shape(shape_);
    if (data_.size() != shape_product(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor vector(std::span<const double> values) {
    return Tensor({values.size()}, std::vector<double>(values.begin(), values.end()));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    const std::size_t n_rows = rows.size();
    const std::size_t n_cols = n_rows ? rows.begin()->size() : 0;
    std::vector<double> data;
    data.reserve(n_rows * n_cols);
    for (const auto& row : rows) {
      if (row.size() != n_cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({n_rows, n_cols}, std::move(data));
  }

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t extent(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                           shape_string(shape_));
    }
    return shape_[axis];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  /// Number of elements in one slice along the leading axis.
  std::size_t stride0() const noexcept { return shape_.empty() ? 0 : data_.size() / shape_[0]; }

  /// Contiguous view of slice `i` along the leading axis.
  std::span<const double> slice(std::size_t i) const {
    const std::size_t s = stride0();
    return std::span<const double>(data_).subspan(i * s, s);
  }
  std::span<double> slice(std::size_t i) {
    const std::size_t s = stride0();
    return std::span<double>(data_).subspan(i * s, s);
  }

  /// Copy of slice `i` along the leading axis, with that axis dropped.
  Tensor slice_tensor(std::size_t i) const {
    if (rank() < 2) throw DimensionError("slice_tensor needs rank >= 2, got " + shape_string(shape_));
    Shape sub(shape_.begin() + 1, shape_.end());
    auto view = slice(i);
    return Tensor(std::move(sub), std::vector<double>(view.begin(), view.end()));
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static void validate_shape(const Shape& shape) {
    if (shape.empty() || shape.size() > kMaxRank) {
      throw DimensionError("tensor rank must be in 1.." + std::to_string(kMaxRank) + ", got " +
                           std::to_string(shape.size()));
    }
    for (std::size_t e : shape) {
      if (e == 0) throw DimensionError("zero extent in shape " + shape_string(shape));
    }
  }

  Shape shape_;
  std::vector<double> data_;
};

inline double dot(std::span<const double> a, std::span<const double> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline constexpr double kNormFloor = 1e-12;

/// Cosine similarity with both norms clamped to `floor`.
inline double cosine(std::span<const double> a, std::span<const double> b,
                     double floor = kNormFloor) {
  return dot(a, b) / (std::max(norm(a), floor) * std::max(norm(b), floor));
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.extent(1) != b.extent(0)) {
    throw DimensionError("matmul shape mismatch: " + shape_string(a.shape()) + " x " +
                         shape_string(b.shape()));
  }
  const std::size_t m = a.extent(0), k = a.extent(1), n = b.extent(1);
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = a.at(i, p);
      for (std::size_t j = 0; j < n; ++j) out.at(i, j) += aip * b.at(p, j);
    }
  }
  return out;
}

namespace detail {

// Splits a shape around `axis` into (outer, extent, inner) element counts.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace detail

/// Arithmetic mean along `axis`; the axis is dropped (a rank-1 input yields shape [1]).
inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  if (axis >= x.rank()) {
    throw DimensionError("mean_axis: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (i != axis) out_shape.push_back(x.shape()[i]);
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const double inv = 1.0 / static_cast<double>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double acc = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) acc += x[(o * s.extent + e) * s.inner + in];
      out[o * s.inner + in] = acc * inv;
    }
  }
  return out;
}

/// Scales every slice along `axis` to unit L2 norm; norms below `floor` are clamped to it.
inline Tensor l2_normalize(const Tensor& x, std::size_t axis, double floor = kNormFloor) {
  if (axis >= x.rank()) {
    throw DimensionError("l2_normalize: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_string(x.shape()));
  }
  const auto s = detail::split_axis(x.shape(), axis);
  Tensor out = x;
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      double sq = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        const double v = x[(o * s.extent + e) * s.inner + in];
        sq += v * v;
      }
      const double inv = 1.0 / std::max(std::sqrt(sq), floor);
      for (std::size_t e = 0; e < s.extent; ++e) out[(o * s.extent + e) * s.inner + in] *= inv;
    }
  }
  return out;
}

/// exp(s_i / tau) / sum_j exp(s_j / tau), evaluated with max subtraction.
inline std::vector<double> softmax_temp(std::span<const double> s, double tau) {
  if (!(tau > 0.0)) throw DomainError("softmax_temp: temperature must be positive, got " + std::to_string(tau));
  if (s.empty()) throw SizeError("softmax_temp: empty input");
  const double mx = *std::max_element(s.begin(), s.end());
  std::vector<double> out(s.size());
  double total = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    out[i] = std::exp((s[i] - mx) / tau);
    total += out[i];
  }
  for (double& v : out) v /= total;
  return out;
}

inline Tensor softmax_temp(const Tensor& s, double tau) {
  if (s.rank() != 1) throw DimensionError("softmax_temp expects a vector, got " + shape_string(s.shape()));
  return Tensor(s.shape(), softmax_temp(s.data(), tau));
}

/// log(1 + exp(x)) without overflow.
inline double softplus(double x) {
  return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

/// Logistic function; the derivative of softplus.
inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor softplus(const Tensor& x) {
  Tensor out = x;
  for (double& v : out.data()) v = softplus(v);
  return out;
}

/// Indices of the k largest scores in ascending index order; ties go to the lower index.
inline std::vector<std::size_t> topk_indices(std::span<const double> scores, std::size_t k) {
  if (k == 0) throw SizeError("topk_indices: k must be at least 1");
  if (k > scores.size()) {
    throw SizeError("topk_indices: k=" + std::to_string(k) + " exceeds n=" +
                    std::to_string(scores.size()));
  }
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
  order.resize(k);
  std::sort(order.begin(), order.end());
  return order;
}

inline std::vector<std::size_t> topk_indices(const Tensor& scores, std::size_t k) {
  if (scores.rank() != 1) throw DimensionError("topk_indices expects a vector, got " + shape_string(scores.shape()));
  return topk_indices(scores.data(), k);
}

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.
inline Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, const Tensor& x,
                               double h = 1e-5) {
  if (!(h > 0.0)) throw DomainError("finite_diff_grad: step must be positive");
  Tensor grad(x.shape());
  Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = probe[i];
    probe[i] = orig + h;
    const double up = f(probe);
    probe[i] = orig - h;
    const double down = f(probe);
    probe[i] = orig;
    grad[i] = (up - down) / (2.0 * h);
  }
  return grad;
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(what) + ": shape mismatch " + shape_string(a.shape()) +
                         " vs " + shape_string(b.shape()));
  }
}

}  // namespace tcma

#endif  // TCMA_TENSOR_HPP
