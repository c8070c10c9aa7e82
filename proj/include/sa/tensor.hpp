#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace sa {

// Allocator that default-initializes new elements (indeterminate for scalar
// types) so buffers that are fully overwritten can skip the zero fill.
template <typename T>
class UninitAlloc : public std::allocator<T> {
 public:
  template <typename U>
  struct rebind {
    using other = UninitAlloc<U>;
  };
  using std::allocator<T>::allocator;
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
  template <typename U>
  void construct(U* p) noexcept {
    ::new (static_cast<void*>(p)) U;
  }
};

// Dense row-major tensor. Scalar type T is double in oracle/property tests
// and float in the training loop.
template <typename T>
struct TensorT {
  std::vector<int> shape;
  std::vector<T, UninitAlloc<T>> data;

  TensorT() = default;
  explicit TensorT(std::vector<int> s) : shape(std::move(s)) {
    data.assign(static_cast<size_t>(numel_of(shape)), T(0));
  }
  TensorT(std::vector<int> s, std::vector<T> d) : shape(std::move(s)) {
    data.assign(d.begin(), d.end());
    if (numel_of(shape) != static_cast<int64_t>(data.size()))
      throw std::invalid_argument("tensor: shape/data size mismatch");
  }

  // Allocates without zero-filling; every element must be written before use.
  static TensorT uninit(std::vector<int> s) {
    TensorT t;
    t.shape = std::move(s);
    t.data.resize(static_cast<size_t>(numel_of(t.shape)));
    return t;
  }

  static int64_t numel_of(const std::vector<int>& s) {
    int64_t n = 1;
    for (int d : s) n *= d;
    return n;
  }
  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  bool empty() const { return data.empty(); }

  static TensorT zeros(std::vector<int> s) { return TensorT(std::move(s)); }
  static TensorT full(std::vector<int> s, T v) {
    TensorT t(std::move(s));
    std::fill(t.data.begin(), t.data.end(), v);
    return t;
  }
  static TensorT scalar(T v) { return TensorT({1}, {v}); }

  int dim(int i) const { return shape[static_cast<size_t>(i)]; }

  // 3-D accessors (C,H,W) — the dominant layout in this project.
  T& at(int c, int y, int x) {
    return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  T at(int c, int y, int x) const {
    return data[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
  }
  T& at(int i, int j) { return data[static_cast<size_t>(i) * shape[1] + j]; }
  T at(int i, int j) const { return data[static_cast<size_t>(i) * shape[1] + j]; }

  bool same_shape(const TensorT& o) const { return shape == o.shape; }

  bool all_finite() const {
    for (T v : data)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  template <typename U>
  TensorT<U> cast() const {
    TensorT<U> out;
    out.shape = shape;
    out.data.resize(data.size());
    for (size_t i = 0; i < data.size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

inline std::string shape_str(const std::vector<int>& s) {
  std::string r = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

}  // namespace sa
