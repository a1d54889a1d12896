#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace attnseg {

using Scalar = double;
using MatX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VecX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// Tensor storage keeps Eigen's preferred alignment so vectorized reductions
/// split identically no matter where the heap places a buffer; without this,
/// repeated runs inside one process can drift by an ulp and break bitwise
/// reproducibility.
using AlignedVec = std::vector<Scalar, Eigen::aligned_allocator<Scalar>>;

/// Dense row-major tensor. Rank-3 tensors use (h, w, c) with channels
/// interleaved, so the (h*w) x c matrix view is contiguous.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    v.assign(static_cast<size_t>(count(shape_)), Scalar(0));
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

  static Tensor scalar(Scalar x) {
    Tensor t({1});
    t.v[0] = x;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<size_t>(i)); }
  long long size() const { return static_cast<long long>(v.size()); }
  bool empty() const { return v.empty(); }

  int h() const { return dim3_(0); }
  int w() const { return dim3_(1); }
  int c() const { return dim3_(2); }

  Scalar& at(int y, int x, int ch) { return v[idx3_(y, x, ch)]; }
  Scalar at(int y, int x, int ch) const { return v[idx3_(y, x, ch)]; }

  Scalar& operator[](size_t i) { return v[i]; }
  Scalar operator[](size_t i) const { return v[i]; }

  /// Reshaped matrix view; rows*cols must equal size().
  Eigen::Map<MatX> mat(int rows, int cols) {
    check_view_(rows, cols);
    return Eigen::Map<MatX>(v.data(), rows, cols);
  }
  Eigen::Map<const MatX> mat(int rows, int cols) const {
    check_view_(rows, cols);
    return Eigen::Map<const MatX>(v.data(), rows, cols);
  }

  /// (h*w) x c view of a rank-3 tensor.
  Eigen::Map<MatX> pixmat() { return mat(h() * w(), c()); }
  Eigen::Map<const MatX> pixmat() const { return mat(h() * w(), c()); }

  Eigen::Map<VecX> vec() { return Eigen::Map<VecX>(v.data(), static_cast<long>(v.size())); }
  Eigen::Map<const VecX> vec() const {
    return Eigen::Map<const VecX>(v.data(), static_cast<long>(v.size()));
  }

  void set_zero() { std::fill(v.begin(), v.end(), Scalar(0)); }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape_[i]);
    }
    return s + ")";
  }

  static long long count(const std::vector<int>& shape) {
    long long n = 1;
    for (int d : shape) {
      if (d < 0) throw std::invalid_argument("negative tensor dimension");
      n *= d;
    }
    return n;
  }

  AlignedVec v;

 private:
  int dim3_(int i) const {
    if (shape_.size() != 3) throw std::logic_error("tensor is not rank-3: " + shape_str());
    return shape_[static_cast<size_t>(i)];
  }
  size_t idx3_(int y, int x, int ch) const {
    return (static_cast<size_t>(y) * static_cast<size_t>(shape_[1]) + static_cast<size_t>(x)) *
               static_cast<size_t>(shape_[2]) +
           static_cast<size_t>(ch);
  }
  void check_view_(int rows, int cols) const {
    if (static_cast<long long>(rows) * cols != size())
      throw std::logic_error("bad matrix view " + std::to_string(rows) + "x" +
                             std::to_string(cols) + " of tensor " + shape_str());
  }

  std::vector<int> shape_;
};

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b))
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                " vs " + b.shape_str());
}

}  // namespace attnseg
