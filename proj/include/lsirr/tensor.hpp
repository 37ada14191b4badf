// Dense planar tensors. Rank-3 tensors are laid out channel-major (C, H, W);
// weights use rank 4 (Cout, Cin, kH, kW).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace lsirr {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_size(shape_))
      throw std::invalid_argument("tensor data size does not match shape " + shape_string(shape_));
  }

  static Tensor chw(std::size_t c, std::size_t h, std::size_t w, T fill = T{0}) {
    return Tensor(Shape{c, h, w}, fill);
  }
  static Tensor scalar(T v) { return Tensor(Shape{1, 1, 1}, v); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // Rank-3 accessors.
  std::size_t channels() const { return shape_.at(0); }
  std::size_t height() const { return shape_.at(1); }
  std::size_t width() const { return shape_.at(2); }
  std::size_t plane_size() const { return height() * width(); }

  T& operator()(std::size_t c, std::size_t y, std::size_t x) {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  const T& operator()(std::size_t c, std::size_t y, std::size_t x) const {
    return data_[(c * shape_[1] + y) * shape_[2] + x];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

  T* plane(std::size_t c) { return data_.data() + c * plane_size(); }
  const T* plane(std::size_t c) const { return data_.data() + c * plane_size(); }

  T item() const {
    if (data_.size() != 1) throw std::logic_error("item() on non-scalar tensor " + shape_string(shape_));
    return data_[0];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  Tensor reshaped(Shape s) const {
    if (shape_size(s) != size()) throw std::invalid_argument("reshape size mismatch");
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.size());
    std::transform(data_.begin(), data_.end(), out.begin(), [](T v) { return static_cast<U>(v); });
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor& operator+=(const Tensor& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }
  Tensor& operator-=(const Tensor& o) {
    check_same(o);
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= o.data_[i];
    return *this;
  }
  Tensor& operator*=(T s) {
    for (auto& v : data_) v *= s;
    return *this;
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_same(const Tensor& o) const {
    if (shape_ != o.shape_)
      throw std::invalid_argument("shape mismatch " + shape_string(shape_) + " vs " + shape_string(o.shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

template <class T>
Tensor<T> operator+(Tensor<T> a, const Tensor<T>& b) { return a += b; }
template <class T>
Tensor<T> operator-(Tensor<T> a, const Tensor<T>& b) { return a -= b; }
template <class T>
Tensor<T> operator*(Tensor<T> a, T s) { return a *= s; }

template <class T>
T max_abs(const Tensor<T>& t) {
  T m{0};
  for (T v : t.span()) m = std::max(m, std::abs(v));
  return m;
}

template <class T>
T max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.same_shape(b)) throw std::invalid_argument("max_abs_diff: shape mismatch");
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.span().begin(), t.span().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace lsirr
