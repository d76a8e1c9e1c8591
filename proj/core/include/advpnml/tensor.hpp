#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "advpnml/errors.hpp"

namespace advpnml {

using Shape = std::vector<std::size_t>;

/// Cache-line aligned storage. GEMM kernels pick their code path from the
/// buffer alignment, so a fixed alignment keeps results independent of the
/// heap layout.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() noexcept = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) noexcept { return true; }
};

template <typename T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) out << (i ? "x" : "") << shape[i];
  out << ']';
  return out.str();
}

/// Dense row-major array. Rank 0 is a scalar holding one value.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() : data_(1, T{0}) {}

  explicit Tensor(Shape shape, T fill = T{0}) : shape_(std::move(shape)) {
    check_extents();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, const std::vector<T>& data) : Tensor(std::move(shape), AlignedVector<T>(data.begin(), data.end())) {}

  Tensor(Shape shape, AlignedVector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_size(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape " + advpnml::to_string(shape_));
    }
  }

  static Tensor scalar(T value) { return Tensor(Shape{}, AlignedVector<T>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<const T> data() const noexcept { return data_; }
  std::span<T> data() noexcept { return data_; }

  T operator[](std::size_t i) const { return data_[i]; }
  T& operator[](std::size_t i) { return data_[i]; }

  T item() const {
    if (data_.size() != 1) throw ContractError("item() on tensor of shape " + advpnml::to_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const& {
    Tensor out = *this;
    out.reshape(std::move(shape));
    return out;
  }
  Tensor reshaped(Shape shape) && {
    reshape(std::move(shape));
    return std::move(*this);
  }

  void reshape(Shape shape) {
    if (shape_size(shape) != data_.size()) {
      throw DimensionError("cannot reshape " + advpnml::to_string(shape_) + " to " +
                           advpnml::to_string(shape));
    }
    shape_ = std::move(shape);
  }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
  }

  /// Rows [begin, end) along axis 0.
  Tensor slice_rows(std::size_t begin, std::size_t end) const {
    if (rank() == 0 || begin > end || end > shape_[0]) throw IndexError("slice_rows out of range");
    const std::size_t row = data_.size() / shape_[0];
    Shape shape = shape_;
    shape[0] = end - begin;
    return Tensor(std::move(shape), std::vector<T>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                   data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
  }

  /// Copy of row `index` along axis 0 with the leading extent dropped.
  Tensor row(std::size_t index) const {
    Tensor out = slice_rows(index, index + 1);
    out.shape_.erase(out.shape_.begin());
    return out;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (std::size_t extent : shape_) {
      if (extent == 0) throw DimensionError("zero extent in shape " + advpnml::to_string(shape_));
    }
  }

  Shape shape_;
  AlignedVector<T> data_;
};

/// Stacks equally shaped tensors along a new leading axis.
template <typename T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw DimensionError("stack of zero tensors");
  Shape shape = items.front().shape();
  std::vector<T> data;
  data.reserve(items.size() * items.front().size());
  for (const auto& item : items) {
    if (item.shape() != shape) throw DimensionError("stack: shape mismatch");
    data.insert(data.end(), item.data().begin(), item.data().end());
  }
  shape.insert(shape.begin(), items.size());
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Concatenates along axis 0.
template <typename T>
Tensor<T> concat_rows(std::span<const Tensor<T>> items) {
  if (items.empty()) throw DimensionError("concat of zero tensors");
  Shape shape = items.front().shape();
  std::size_t rows = 0;
  std::vector<T> data;
  for (const auto& item : items) {
    if (item.rank() != shape.size() || !std::equal(shape.begin() + 1, shape.end(), item.shape().begin() + 1)) {
      throw DimensionError("concat_rows: trailing shape mismatch");
    }
    rows += item.dim(0);
    data.insert(data.end(), item.data().begin(), item.data().end());
  }
  shape[0] = rows;
  return Tensor<T>(std::move(shape), std::move(data));
}

/// Closed interval of legal input values. Infinite bounds disable clamping.
struct ValueRange {
  double lo = -std::numeric_limits<double>::infinity();
  double hi = std::numeric_limits<double>::infinity();

  static constexpr ValueRange unbounded() { return {}; }
  static constexpr ValueRange unit() { return {0.0, 1.0}; }
  bool bounded() const { return std::isfinite(lo) || std::isfinite(hi); }
  friend bool operator==(const ValueRange&, const ValueRange&) = default;
};

/// Elementwise sign with sign(0) = 0.
template <typename T>
Tensor<T> sign(const Tensor<T>& input) {
  Tensor<T> out = input;
  for (T& v : out.data()) v = static_cast<T>((v > T{0}) - (v < T{0}));
  return out;
}

/// Clips x elementwise into [center - eps, center + eps] intersected with [lo, hi].
template <typename T>
Tensor<T> clamp_project(const Tensor<T>& x, const Tensor<T>& center, double epsilon, ValueRange range) {
  if (x.shape() != center.shape()) {
    throw DimensionError("clamp_project: shape " + to_string(x.shape()) + " vs center " + to_string(center.shape()));
  }
  if (!(range.lo < range.hi)) throw DomainError("clamp_project: empty value range");
  if (epsilon < 0.0) throw DomainError("clamp_project: negative epsilon");
  Tensor<T> out = x;
  auto o = out.data();
  auto c = center.data();
  const T eps = static_cast<T>(epsilon);
  const T lo = range.lo == -std::numeric_limits<double>::infinity() ? -std::numeric_limits<T>::infinity()
                                                                    : static_cast<T>(range.lo);
  const T hi = range.hi == std::numeric_limits<double>::infinity() ? std::numeric_limits<T>::infinity()
                                                                   : static_cast<T>(range.hi);
  for (std::size_t i = 0; i < o.size(); ++i) {
    T v = std::clamp(o[i], c[i] - eps, c[i] + eps);
    o[i] = std::clamp(v, lo, hi);
  }
  return out;
}

/// max_i |a_i - b_i|
template <typename T>
double linf_distance(std::span<const T> a, std::span<const T> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d = std::max(d, std::abs(static_cast<double>(a[i]) - b[i]));
  return d;
}

template <typename T>
double l2_distance(std::span<const T> a, std::span<const T> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return std::sqrt(s);
}

template <typename T>
double linf_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("linf_distance: shape mismatch");
  return linf_distance(std::span<const T>(a.data()), std::span<const T>(b.data()));
}

template <typename T>
double l2_distance(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("l2_distance: shape mismatch");
  return l2_distance(std::span<const T>(a.data()), std::span<const T>(b.data()));
}

}  // namespace advpnml
