#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "sigprop/matrix.hpp"

namespace sigprop {

// Row-major vectorization: entry (i, j) of an r x c matrix lands at index i * c + j.
// All Jacobians in this project are laid out against vec_row of both sides.
std::vector<double> vec_row(const Matrix& m);

// Kronecker product, a(i,j) * b as the (i,j) block.
Matrix kron(const Matrix& a, const Matrix& b);

// (A (x) B)(C (x) D) computed as (AC) (x) (BD); throws unless A.cols == C.rows
// and B.cols == D.rows, the shapes under which the identity holds.
Matrix kron_mixed_product(const Matrix& a, const Matrix& b, const Matrix& c, const Matrix& d);

// Commutation matrix K_{mn} (mn x mn): K_{mn} vec_col(B) = vec_col(B^T) for B m x n.
// Entry pattern: K[i*n + j, j*m + i] = 1 for i < m, j < n.
// The same permutation maps vec_row(B) to vec_row(B^T) for B n x m.
Matrix commutation_matrix(std::size_t m, std::size_t n);

// Centering projector L = I_n - (1/n) 1 1^T.
Matrix centering_matrix(std::size_t n);

// Block-diagonal assembly; blocks may be rectangular. Empty list throws.
Matrix block_diag(const std::vector<Matrix>& blocks);

// Summary statistics of a token matrix X (n tokens of width d, one per row).
//   frob_sq          ||X||_F^2
//   c_of_x           C(X) = sum_{k,k'} <X_k, X_k'>   (all ordered pairs, including k = k')
//   mean_token       x_bar = (1/n) sum_k X_k
//   centered_gram_sq ||X^T X - n x_bar x_bar^T||_F^2
//   avg_cosine       mean cosine over unordered pairs k < k'; empty for n = 1.
//                    A zero-norm row contributes 0 to its pair cosines.
struct SequenceStats {
  double frob_sq = 0.0;
  double c_of_x = 0.0;
  std::vector<double> mean_token;
  double centered_gram_sq = 0.0;
  std::optional<double> avg_cosine;
};

SequenceStats sequence_stats(const Matrix& x);

}  // namespace sigprop
