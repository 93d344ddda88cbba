#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace saelab {

using Vector = std::vector<double>;

/// Dense row-major matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);
  Matrix(std::initializer_list<std::initializer_list<double>> rows);

  static Matrix identity(std::size_t n);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }
  Vector col(std::size_t c) const;

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }

  std::string shape_str() const;

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

/// Numerically stable softmax (max subtracted). Throws on empty input.
Vector softmax(std::span<const double> logits);

/// Indices of the k largest values, ordered by value descending; ties go to
/// the lower index. k larger than the input is clamped.
std::vector<std::size_t> topk_select(std::span<const double> values, std::size_t k);

/// a.b / (|a||b|), clamped to [-1, 1]. Throws on a zero-norm input.
double cosine_similarity(std::span<const double> a, std::span<const double> b);

Matrix matmul(const Matrix& a, const Matrix& b);
Vector matvec(const Matrix& a, std::span<const double> x);
/// a^T x without materializing the transpose.
Vector matvec_transposed(const Matrix& a, std::span<const double> x);
Matrix transpose(const Matrix& a);
/// Arithmetic mean of all rows (length = cols).
Vector row_mean(const Matrix& a);

bool all_finite(std::span<const double> v);

}  // namespace saelab
