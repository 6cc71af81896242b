#include "moekit/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace moekit {

Matrix2D::Matrix2D(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw ShapeError("Matrix2D: data length " + std::to_string(data_.size()) +
                     " does not equal rows*cols = " +
                     std::to_string(rows_ * cols_));
  }
}

Tensor3D::Tensor3D(std::size_t dim0, std::size_t dim1, std::size_t dim2,
                   std::vector<double> data)
    : dim0_(dim0), dim1_(dim1), dim2_(dim2), data_(std::move(data)) {
  if (data_.size() != dim0_ * dim1_ * dim2_) {
    throw ShapeError("Tensor3D: data length " + std::to_string(data_.size()) +
                     " does not equal dim0*dim1*dim2 = " +
                     std::to_string(dim0_ * dim1_ * dim2_));
  }
}

bool Matrix2D::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

bool Tensor3D::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

namespace {

constexpr double kSqrt2OverPi = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

double gelu_tanh(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  return 0.5 * x * (1.0 + std::tanh(u));
}

// Exact derivative of the tanh approximation, so F and F' stay consistent.
double gelu_tanh_derivative(double x) {
  const double u = kSqrt2OverPi * (x + kGeluCubic * x * x * x);
  const double t = std::tanh(u);
  const double du = kSqrt2OverPi * (1.0 + 3.0 * kGeluCubic * x * x);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

}  // namespace

double activation_value(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::kRelu:
      return x > 0.0 ? x : 0.0;
    case ActivationKind::kGelu:
      return gelu_tanh(x);
    case ActivationKind::kIdentity:
      return x;
  }
  return x;
}

double activation_derivative(ActivationKind kind, double x) {
  switch (kind) {
    case ActivationKind::kRelu:
      return x > 0.0 ? 1.0 : 0.0;
    case ActivationKind::kGelu:
      return gelu_tanh_derivative(x);
    case ActivationKind::kIdentity:
      return 1.0;
  }
  return 1.0;
}

Matrix2D activation_apply(ActivationKind kind, const Matrix2D& pre) {
  Matrix2D out(pre.rows(), pre.cols());
  const auto& src = pre.data();
  auto& dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i] = activation_value(kind, src[i]);
  }
  return out;
}

Matrix2D activation_grad(ActivationKind kind, const Matrix2D& pre,
                         const Matrix2D& upstream) {
  if (!pre.same_shape(upstream)) {
    throw ShapeError("activation_grad: pre and upstream shapes differ");
  }
  Matrix2D out(pre.rows(), pre.cols());
  const auto& p = pre.data();
  const auto& u = upstream.data();
  auto& dst = out.data();
  for (std::size_t i = 0; i < p.size(); ++i) {
    dst[i] = u[i] * activation_derivative(kind, p[i]);
  }
  return out;
}

std::string_view activation_name(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::kRelu:
      return "relu";
    case ActivationKind::kGelu:
      return "gelu";
    case ActivationKind::kIdentity:
      return "identity";
  }
  return "identity";
}

ActivationKind activation_from_name(std::string_view name) {
  if (name == "relu") return ActivationKind::kRelu;
  if (name == "gelu") return ActivationKind::kGelu;
  if (name == "identity") return ActivationKind::kIdentity;
  throw std::invalid_argument("unknown activation: " + std::string(name));
}

void add_inplace(Matrix2D& dst, const Matrix2D& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("add_inplace: matrix shapes differ");
  }
  auto& d = dst.data();
  const auto& s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

void add_inplace(Tensor3D& dst, const Tensor3D& src) {
  if (!dst.same_shape(src)) {
    throw ShapeError("add_inplace: tensor shapes differ");
  }
  auto& d = dst.data();
  const auto& s = src.data();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] += s[i];
}

Tensor3D transpose_experts(const Tensor3D& w) {
  Tensor3D out(w.dim0(), w.dim2(), w.dim1());
  for (std::size_t e = 0; e < w.dim0(); ++e) {
    for (std::size_t i = 0; i < w.dim1(); ++i) {
      for (std::size_t j = 0; j < w.dim2(); ++j) {
        out.at(e, j, i) = w.at(e, i, j);
      }
    }
  }
  return out;
}

double max_abs(const Matrix2D& m) {
  double r = 0.0;
  for (double v : m.data()) r = std::max(r, std::abs(v));
  return r;
}

double max_abs(const Tensor3D& t) {
  double r = 0.0;
  for (double v : t.data()) r = std::max(r, std::abs(v));
  return r;
}

double max_abs_diff(const Matrix2D& a, const Matrix2D& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: matrix shapes differ");
  }
  double r = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    r = std::max(r, std::abs(a.data()[i] - b.data()[i]));
  }
  return r;
}

double max_abs_diff(const Tensor3D& a, const Tensor3D& b) {
  if (!a.same_shape(b)) {
    throw ShapeError("max_abs_diff: tensor shapes differ");
  }
  double r = 0.0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    r = std::max(r, std::abs(a.data()[i] - b.data()[i]));
  }
  return r;
}

}  // namespace moekit
