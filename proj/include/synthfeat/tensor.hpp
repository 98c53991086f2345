#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <new>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace synthfeat {

/// 64-byte aligned storage, so vectorized reductions see the same alignment
/// on every run and sum in the same order.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

/// Dense row-major array with a small dynamic shape. Feature maps use NCHW.
template <class T>
class BasicTensor {
 public:
  using Storage = std::vector<T, AlignedAllocator<T>>;

  BasicTensor() = default;
  explicit BasicTensor(std::vector<int> shape, T fill = T{})
      : shape_(std::move(shape)), data_(count(shape_), fill) {}
  BasicTensor(int n, int c, int h, int w, T fill = T{})
      : BasicTensor(std::vector<int>{n, c, h, w}, fill) {}

  static std::size_t count(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= static_cast<std::size_t>(d);
    }
    return shape.empty() ? 0 : n;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // NCHW accessors; only meaningful for rank-4 tensors.
  int n() const { return dim(0); }
  int c() const { return dim(1); }
  int h() const { return dim(2); }
  int w() const { return dim(3); }
  std::size_t plane() const { return static_cast<std::size_t>(h()) * w(); }
  std::size_t item_size() const { return static_cast<std::size_t>(c()) * plane(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  Storage& values() { return data_; }
  const Storage& values() const { return data_; }
  void assign(std::span<const T> v) { data_.assign(v.begin(), v.end()); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int n, int c, int y, int x) { return data_[index(n, c, y, x)]; }
  const T& at(int n, int c, int y, int x) const { return data_[index(n, c, y, x)]; }

  std::span<T> item(int n) {
    return std::span<T>(data_).subspan(static_cast<std::size_t>(n) * item_size(), item_size());
  }
  std::span<const T> item(int n) const {
    return std::span<const T>(data_).subspan(static_cast<std::size_t>(n) * item_size(), item_size());
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  void reshape(std::vector<int> shape) {
    if (count(shape) != data_.size()) throw std::invalid_argument("reshape changes element count");
    shape_ = std::move(shape);
  }

  bool same_shape(const BasicTensor& o) const { return shape_ == o.shape_; }

  BasicTensor& operator+=(const BasicTensor& o) {
    if (!same_shape(o)) throw std::invalid_argument("tensor shape mismatch in +=");
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool operator==(const BasicTensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  std::size_t index(int n, int c, int y, int x) const {
    return ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  }

  std::vector<int> shape_;
  Storage data_;
};

using Tensor = BasicTensor<float>;
using Mask = BasicTensor<std::uint8_t>;

inline std::string shape_string(const std::vector<int>& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

template <class T>
bool all_finite(std::span<const T> v) {
  return std::all_of(v.begin(), v.end(), [](T x) { return std::isfinite(x); });
}

template <class T>
double l2_norm(std::span<const T> v) {
  double s = 0;
  for (T x : v) s += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(s);
}

/// Copies a rank-4 tensor, optionally converting the element type.
template <class To, class From>
BasicTensor<To> tensor_cast(const BasicTensor<From>& t) {
  BasicTensor<To> out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<To>(t[i]);
  return out;
}

/// Stacks equal-shaped (C,H,W) items along a new batch dimension.
template <class T>
BasicTensor<T> stack_items(const std::vector<const BasicTensor<T>*>& items) {
  if (items.empty()) throw std::invalid_argument("stack_items: empty input");
  const auto& s0 = items.front()->shape();
  std::vector<int> shape{static_cast<int>(items.size())};
  shape.insert(shape.end(), s0.begin() + 1, s0.end());
  BasicTensor<T> out(shape);
  std::size_t per = items.front()->size();
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (items[i]->shape() != s0) throw std::invalid_argument("stack_items: shape mismatch");
    std::copy(items[i]->values().begin(), items[i]->values().end(), out.values().begin() + i * per);
  }
  return out;
}

/// Concatenates two NCHW tensors with equal N,H,W along channels.
inline Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.n() != b.n() || a.h() != b.h() || a.w() != b.w())
    throw std::invalid_argument("concat_channels: shape mismatch " + shape_string(a.shape()) + " vs " +
                                shape_string(b.shape()));
  Tensor out(a.n(), a.c() + b.c(), a.h(), a.w());
  for (int n = 0; n < a.n(); ++n) {
    auto dst = out.item(n);
    auto sa = a.item(n);
    auto sb = b.item(n);
    std::copy(sa.begin(), sa.end(), dst.begin());
    std::copy(sb.begin(), sb.end(), dst.begin() + static_cast<std::ptrdiff_t>(sa.size()));
  }
  return out;
}

/// Concatenates two NCHW tensors with equal C,H,W along the batch dimension.
inline Tensor concat_batch(const Tensor& a, const Tensor& b) {
  if (a.c() != b.c() || a.h() != b.h() || a.w() != b.w())
    throw std::invalid_argument("concat_batch: shape mismatch");
  Tensor out(a.n() + b.n(), a.c(), a.h(), a.w());
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

inline Tensor slice_batch(const Tensor& t, int begin, int end) {
  Tensor out(end - begin, t.c(), t.h(), t.w());
  auto first = t.values().begin() + static_cast<std::ptrdiff_t>(begin * t.item_size());
  std::copy(first, first + static_cast<std::ptrdiff_t>(out.size()), out.values().begin());
  return out;
}

}  // namespace synthfeat
