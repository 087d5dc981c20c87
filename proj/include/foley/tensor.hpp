#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "foley/common.hpp"

namespace foley {

template <typename S>
using MatrixX = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using VectorX = Eigen::Matrix<S, Eigen::Dynamic, 1>;

using MatrixXd = MatrixX<double>;
using VectorXd = VectorX<double>;

using Shape = std::vector<std::int64_t>;

/// 64-byte-aligned storage so Eigen's vectorized kernels see the same
/// alignment for every buffer; reductions then sum in the same order on every
/// run, which the bit-reproducibility contract depends on.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t alignment = 64;

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(alignment)));
  }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, std::align_val_t(alignment)); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <typename S>
using AlignedVector = std::vector<S, AlignedAllocator<S>>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "(";
  for (size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + ")";
}

/// Dense row-major N-d tensor. Math goes through Eigen maps; an empty tensor
/// (no shape, no data) doubles as the "not yet allocated" marker for gradients.
template <typename S>
class TensorT {
public:
  TensorT() = default;
  explicit TensorT(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), S(0)) {}
  TensorT(Shape shape, S fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

  static TensorT zeros(Shape shape) { return TensorT(std::move(shape)); }
  static TensorT full(Shape shape, S value) { return TensorT(std::move(shape), value); }
  static TensorT scalar(S value) { return TensorT({1}, value); }
  static TensorT from_flat(Shape shape, const std::vector<S>& data) {
    check_config(shape_numel(shape) == static_cast<std::int64_t>(data.size()),
                 msg("tensor data length ", data.size(), " does not match shape ", shape_str(shape)));
    TensorT t;
    t.shape_ = std::move(shape);
    t.data_.assign(data.begin(), data.end());
    return t;
  }
  static TensorT from_matrix(const MatrixX<S>& m) {
    TensorT t({m.rows(), m.cols()});
    t.mat() = m;
    return t;
  }
  static TensorT from_vector(const VectorX<S>& v) {
    TensorT t({v.size()});
    t.vec() = v;
    return t;
  }

  bool empty() const { return data_.empty(); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
  int ndim() const { return static_cast<int>(shape_.size()); }
  const Shape& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_.at(static_cast<size_t>(i)); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& flat(std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  S flat(std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  S& at(std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  S& at(std::int64_t i, std::int64_t j) { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  S& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  S& at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }
  S at(std::int64_t i) const { return data_[static_cast<size_t>(i)]; }
  S at(std::int64_t i, std::int64_t j) const { return data_[static_cast<size_t>(i * shape_[1] + j)]; }
  S at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return data_[static_cast<size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  S at(std::int64_t i, std::int64_t j, std::int64_t k, std::int64_t l) const {
    return data_[static_cast<size_t>(((i * shape_[1] + j) * shape_[2] + k) * shape_[3] + l)];
  }

  Eigen::Map<VectorX<S>> vec() { return {data_.data(), size()}; }
  Eigen::Map<const VectorX<S>> vec() const { return {data_.data(), size()}; }

  /// 2-D view; with no arguments requires ndim()==2.
  Eigen::Map<MatrixX<S>> mat() {
    check_config(ndim() == 2, msg("mat() on tensor of shape ", shape_str(shape_)));
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<const MatrixX<S>> mat() const {
    check_config(ndim() == 2, msg("mat() on tensor of shape ", shape_str(shape_)));
    return {data_.data(), shape_[0], shape_[1]};
  }
  Eigen::Map<MatrixX<S>> mat(std::int64_t rows, std::int64_t cols) {
    check_config(rows * cols == size(), msg("mat(", rows, ",", cols, ") on size-", size(), " tensor"));
    return {data_.data(), rows, cols};
  }
  Eigen::Map<const MatrixX<S>> mat(std::int64_t rows, std::int64_t cols) const {
    check_config(rows * cols == size(), msg("mat(", rows, ",", cols, ") on size-", size(), " tensor"));
    return {data_.data(), rows, cols};
  }

  TensorT reshaped(Shape shape) const {
    check_config(shape_numel(shape) == size(),
                 msg("reshape ", shape_str(shape_), " -> ", shape_str(shape), " changes element count"));
    TensorT t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

  bool same_shape(const TensorT& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

private:
  Shape shape_;
  AlignedVector<S> data_;
};

using Tensor = TensorT<double>;

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  check_config(a.same_shape(b), msg(op, ": shape mismatch ", shape_str(a.shape()), " vs ", shape_str(b.shape())));
}

inline Tensor operator+(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "operator+");
  Tensor r(a.shape());
  r.vec() = a.vec() + b.vec();
  return r;
}

inline Tensor operator-(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "operator-");
  Tensor r(a.shape());
  r.vec() = a.vec() - b.vec();
  return r;
}

inline Tensor operator*(double s, const Tensor& a) {
  Tensor r(a.shape());
  r.vec() = s * a.vec();
  return r;
}

inline Tensor cwise_mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "cwise_mul");
  Tensor r(a.shape());
  r.vec() = a.vec().cwiseProduct(b.vec());
  return r;
}

inline bool bit_equal(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return false;
  for (std::int64_t i = 0; i < a.size(); ++i)
    if (a.flat(i) != b.flat(i)) return false;
  return true;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  return (a.vec() - b.vec()).cwiseAbs().maxCoeff();
}

}  // namespace foley
