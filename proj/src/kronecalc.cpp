#include "sigprop/kronecalc.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sigprop {

std::vector<double> vec_row(const Matrix& m) { return m.data(); }

Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < a.cols(); ++j) {
      const double aij = a(i, j);
      if (aij == 0.0) continue;
      for (std::size_t k = 0; k < b.rows(); ++k)
        for (std::size_t l = 0; l < b.cols(); ++l)
          out(i * b.rows() + k, j * b.cols() + l) = aij * b(k, l);
    }
  }
  return out;
}

Matrix kron_mixed_product(const Matrix& a, const Matrix& b, const Matrix& c, const Matrix& d) {
  if (a.cols() != c.rows() || b.cols() != d.rows()) {
    throw std::invalid_argument("kron_mixed_product: (A(x)B)(C(x)D) needs A.cols==C.rows and B.cols==D.rows");
  }
  return kron(a * c, b * d);
}

Matrix commutation_matrix(std::size_t m, std::size_t n) {
  if (m == 0 || n == 0) throw std::invalid_argument("commutation_matrix: dimensions must be positive");
  Matrix k(m * n, m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) k(i * n + j, j * m + i) = 1.0;
  return k;
}

Matrix centering_matrix(std::size_t n) {
  if (n == 0) throw std::invalid_argument("centering_matrix: n must be positive");
  Matrix l = Matrix::identity(n);
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) l(i, j) -= inv;
  return l;
}

Matrix block_diag(const std::vector<Matrix>& blocks) {
  if (blocks.empty()) throw std::invalid_argument("block_diag: empty block list");
  std::size_t rows = 0, cols = 0;
  for (const Matrix& b : blocks) {
    rows += b.rows();
    cols += b.cols();
  }
  Matrix out(rows, cols, 0.0);
  std::size_t r0 = 0, c0 = 0;
  for (const Matrix& b : blocks) {
    for (std::size_t i = 0; i < b.rows(); ++i)
      for (std::size_t j = 0; j < b.cols(); ++j) out(r0 + i, c0 + j) = b(i, j);
    r0 += b.rows();
    c0 += b.cols();
  }
  return out;
}

SequenceStats sequence_stats(const Matrix& x) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  SequenceStats s;
  s.frob_sq = x.frobenius_sq();
  s.mean_token = x.col_means();

  // C(X) as the literal double sum over ordered token pairs; tests cross-check
  // it against n^2 ||x_bar||^2.
  double c = 0.0;
  for (std::size_t k = 0; k < n; ++k)
    for (std::size_t k2 = 0; k2 < n; ++k2) c += x.row_dot(k, k2);
  s.c_of_x = c;

  // Centered Gram deviation ||X^T X - n x_bar x_bar^T||_F^2.
  double dev = 0.0;
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      double g = 0.0;
      for (std::size_t k = 0; k < n; ++k) g += x(k, i) * x(k, j);
      g -= static_cast<double>(n) * s.mean_token[i] * s.mean_token[j];
      dev += g * g;
    }
  }
  s.centered_gram_sq = dev;

  if (n >= 2) {
    double acc = 0.0;
    for (std::size_t k = 0; k < n; ++k) {
      const double nk = x.row_norm_sq(k);
      for (std::size_t k2 = k + 1; k2 < n; ++k2) {
        const double nk2 = x.row_norm_sq(k2);
        if (nk == 0.0 || nk2 == 0.0) continue;  // zero-norm row: pair contributes 0
        acc += x.row_dot(k, k2) / std::sqrt(nk * nk2);
      }
    }
    const double pairs = 0.5 * static_cast<double>(n) * static_cast<double>(n - 1);
    s.avg_cosine = std::clamp(acc / pairs, -1.0, 1.0);
  }
  return s;
}

}  // namespace sigprop
