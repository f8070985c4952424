#pragma once

#include <cstddef>
#include <initializer_list>
#include <vector>

namespace sigprop {

// Dense row-major matrix of doubles. Row-major storage is load-bearing:
// vec_row() and all Jacobian layouts index entries as i * cols + j.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);

  static Matrix identity(std::size_t n);
  static Matrix ones(std::size_t rows, std::size_t cols);
  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::vector<double>& data() { return data_; }
  const std::vector<double>& data() const { return data_; }

  Matrix transpose() const;

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);

  bool all_finite() const;

  double frobenius_sq() const;
  double frobenius() const;

  // Squared Euclidean norm of one row.
  double row_norm_sq(std::size_t i) const;
  double row_dot(std::size_t i, std::size_t j) const;

  // Column means, i.e. the mean token x_bar for an n x d token matrix.
  std::vector<double> col_means() const;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(const Matrix& a, const Matrix& b);
Matrix operator*(double s, Matrix a);
Matrix operator*(Matrix a, double s);

Matrix hadamard(const Matrix& a, const Matrix& b);

// Largest absolute entry difference; shapes must match.
double max_abs_diff(const Matrix& a, const Matrix& b);

}  // namespace sigprop
