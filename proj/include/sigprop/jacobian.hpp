#pragma once

#include <cstddef>

#include "sigprop/matrix.hpp"
#include "sigprop/weights.hpp"

namespace sigprop {

// Numerator-layout Jacobian of a matrix-valued map: entries is the
// (out_rows*out_cols) x (in_rows*in_cols) matrix d vec_row(out) / d vec_row(in)^T.
struct Jacobian {
  std::size_t out_rows = 0;
  std::size_t out_cols = 0;
  std::size_t in_rows = 0;
  std::size_t in_cols = 0;
  Matrix entries;

  double frobenius_sq() const { return entries.frobenius_sq(); }
  double frobenius() const { return entries.frobenius(); }
};

// d vec_row(A) / d vec_row(M): block-diagonal with row blocks
// diag(A_i) - A_i A_i^T. `a` must be row-stochastic (each row sums to 1).
Jacobian softmax_jacobian(const Matrix& a);

// dS/dW^V = (A X) (x) I_{d_v}, where X is the attention input.
Jacobian grad_s_wrt_values(const Matrix& x, const Matrix& a);

// dS/dW^Q = (I_n (x) W^V^T X^T) dA/dM (tau/sqrt(d_k)) (X (x) X W^K).
Jacobian grad_s_wrt_queries(const Matrix& x, const BlockWeights& w, const Matrix& a, double tau);

// Same structure with the roles of W^Q and W^K exchanged; the right factor
// becomes (tau/sqrt(d_k)) (X W^Q (x) X) K_{d_k,d_v}, the commutation factor
// mapping vec_row(W^K) to vec_row(W^K^T).
Jacobian grad_s_wrt_keys(const Matrix& x, const BlockWeights& w, const Matrix& a, double tau);

// dS/dX = (tau/sqrt(d_k)) (I_n (x) W^V^T X^T) dA/dM
//           [I_n (x) X W^K W^Q^T + K_{nn} (I_n (x) X W^Q W^K^T)]
//         + A (x) W^V^T.
// The trailing term keeps this nonzero even on rank-collapsed input.
Jacobian grad_s_wrt_input(const Matrix& x, const BlockWeights& w, const Matrix& a, double tau);

// Closed uniform-attention form of dS/dW^Q:
// (tau / (sqrt(d_k) n)) X (x) [W^V^T X^T (I_n - (1/n) 1 1^T) X W^K].
// Must coincide with grad_s_wrt_queries evaluated at A = (1/n) 1 1^T.
Jacobian grad_s_wrt_queries_uniform(const Matrix& x, const BlockWeights& w, double tau);

}  // namespace sigprop
