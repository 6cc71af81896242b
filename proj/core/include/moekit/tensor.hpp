#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moekit {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Dense row-major matrix of 64-bit floats.
class Matrix2D {
 public:
  Matrix2D() = default;
  Matrix2D(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}
  Matrix2D(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double& at(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double* row(std::size_t r) { return data_.data() + r * cols_; }
  const double* row(std::size_t r) const { return data_.data() + r * cols_; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Matrix2D& o) const {
    return rows_ == o.rows_ && cols_ == o.cols_;
  }
  bool all_finite() const;

  friend bool operator==(const Matrix2D&, const Matrix2D&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Dense row-major rank-3 tensor; dim0 indexes experts throughout the kit.
class Tensor3D {
 public:
  Tensor3D() = default;
  Tensor3D(std::size_t dim0, std::size_t dim1, std::size_t dim2)
      : dim0_(dim0), dim1_(dim1), dim2_(dim2), data_(dim0 * dim1 * dim2, 0.0) {}
  Tensor3D(std::size_t dim0, std::size_t dim1, std::size_t dim2,
           std::vector<double> data);

  std::size_t dim0() const { return dim0_; }
  std::size_t dim1() const { return dim1_; }
  std::size_t dim2() const { return dim2_; }
  std::size_t size() const { return data_.size(); }

  double& at(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * dim1_ + j) * dim2_ + k];
  }
  double at(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * dim1_ + j) * dim2_ + k];
  }
  /// Pointer to row j of expert slice i (dim2 contiguous values).
  double* row(std::size_t i, std::size_t j) {
    return data_.data() + (i * dim1_ + j) * dim2_;
  }
  const double* row(std::size_t i, std::size_t j) const {
    return data_.data() + (i * dim1_ + j) * dim2_;
  }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  bool same_shape(const Tensor3D& o) const {
    return dim0_ == o.dim0_ && dim1_ == o.dim1_ && dim2_ == o.dim2_;
  }
  bool all_finite() const;

  friend bool operator==(const Tensor3D&, const Tensor3D&) = default;

 private:
  std::size_t dim0_ = 0;
  std::size_t dim1_ = 0;
  std::size_t dim2_ = 0;
  std::vector<double> data_;
};

enum class ActivationKind { kRelu, kGelu, kIdentity };

double activation_value(ActivationKind kind, double x);
double activation_derivative(ActivationKind kind, double x);

/// Elementwise F(pre).
Matrix2D activation_apply(ActivationKind kind, const Matrix2D& pre);
/// upstream (.) F'(pre); shapes must match.
Matrix2D activation_grad(ActivationKind kind, const Matrix2D& pre,
                         const Matrix2D& upstream);

std::string_view activation_name(ActivationKind kind);
ActivationKind activation_from_name(std::string_view name);

void add_inplace(Matrix2D& dst, const Matrix2D& src);
void add_inplace(Tensor3D& dst, const Tensor3D& src);

/// (E, a, b) -> (E, b, a): per-expert transpose used for backward weights.
Tensor3D transpose_experts(const Tensor3D& w);

double max_abs(const Matrix2D& m);
double max_abs(const Tensor3D& t);
double max_abs_diff(const Matrix2D& a, const Matrix2D& b);
double max_abs_diff(const Tensor3D& a, const Tensor3D& b);

}  // namespace moekit
