#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace gelm {

// Dense row-major tensor of 64-bit reals. Rank 0 (scalar), 1 (vector) and
// 2 (matrix) are the only shapes the decoder needs.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() = default;
  explicit Tensor(Shape shape);  // zero-filled
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);
  static Tensor vector(std::vector<double> values);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  bool is_scalar() const { return data_.size() == 1; }

  // Matrix view helpers. A rank-1 tensor is treated as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
  double item() const;

  std::span<double> row(std::size_t r);
  std::span<const double> row(std::size_t r) const;
  Tensor row_copy(std::size_t r) const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(double factor);

  friend bool operator==(const Tensor&, const Tensor&) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

std::string shape_string(const Tensor::Shape& shape);

// Throws DomainError naming `what` when shapes differ.
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor hadamard(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double factor);
Tensor transpose(const Tensor& a);

// (r x k) * (k x c)
Tensor matmul(const Tensor& a, const Tensor& b);
// a * b^T for (r x k), (c x k)
Tensor matmul_bt(const Tensor& a, const Tensor& b);
// a^T * b for (k x r), (k x c)
Tensor matmul_at(const Tensor& a, const Tensor& b);

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);

double dot(std::span<const double> a, std::span<const double> b);
double sum(std::span<const double> v);
double l2_norm(std::span<const double> v);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Numerically stable softmax (max subtracted). Throws DomainError on empty input.
std::vector<double> softmax(std::span<const double> v);

// Min-max rescale to [0,1]. A constant input maps to all ones.
std::vector<double> zero_one_normalize(std::span<const double> v);

std::size_t argmax(std::span<const double> v);  // lowest index wins ties

}  // namespace gelm
