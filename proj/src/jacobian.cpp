#include "sigprop/jacobian.hpp"

#include <cmath>
#include <stdexcept>

#include "sigprop/kronecalc.hpp"

namespace sigprop {

namespace {

void check_attention_shapes(const Matrix& x, const BlockWeights& w, const Matrix& a) {
  if (a.rows() != a.cols() || a.rows() != x.rows()) {
    throw std::invalid_argument("attention jacobian: A must be n x n matching X");
  }
  if (w.w_q.rows() != x.cols() || w.w_k.rows() != x.cols() || w.w_v.rows() != x.cols()) {
    throw std::invalid_argument("attention jacobian: weight shapes do not match X");
  }
  if (w.w_q.cols() != w.w_k.cols()) {
    throw std::invalid_argument("attention jacobian: w_q/w_k width mismatch");
  }
}

double logit_scale(const BlockWeights& w, double tau) {
  return tau / std::sqrt(static_cast<double>(w.w_q.cols()));
}

// I_n (x) W^V^T X^T, the dS/dA factor shared by the query/key/input Jacobians.
Matrix ds_da_factor(const Matrix& x, const BlockWeights& w) {
  return kron(Matrix::identity(x.rows()), w.w_v.transpose() * x.transpose());
}

}  // namespace

Jacobian softmax_jacobian(const Matrix& a) {
  const std::size_t n = a.rows();
  if (a.cols() != n) throw std::invalid_argument("softmax_jacobian: A must be square");
  std::vector<Matrix> blocks;
  blocks.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Matrix b(n, n);
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = 0; q < n; ++q) b(p, q) = (p == q ? a(i, p) : 0.0) - a(i, p) * a(i, q);
    blocks.push_back(std::move(b));
  }
  return {n, n, n, n, block_diag(blocks)};
}

Jacobian grad_s_wrt_values(const Matrix& x, const Matrix& a) {
  if (a.cols() != x.rows()) throw std::invalid_argument("grad_s_wrt_values: A/X shape mismatch");
  const std::size_t d_v = x.cols();
  return {a.rows(), d_v, d_v, d_v, kron(a * x, Matrix::identity(d_v))};
}

Jacobian grad_s_wrt_queries(const Matrix& x, const BlockWeights& w, const Matrix& a, double tau) {
  check_attention_shapes(x, w, a);
  const Matrix left = ds_da_factor(x, w) * softmax_jacobian(a).entries;
  const Matrix right = logit_scale(w, tau) * kron(x, x * w.w_k);
  return {x.rows(), x.cols(), w.w_q.rows(), w.w_q.cols(), left * right};
}

Jacobian grad_s_wrt_keys(const Matrix& x, const BlockWeights& w, const Matrix& a, double tau) {
  check_attention_shapes(x, w, a);
  const Matrix left = ds_da_factor(x, w) * softmax_jacobian(a).entries;
  const Matrix right =
      logit_scale(w, tau) * kron(x * w.w_q, x) * commutation_matrix(w.w_k.cols(), w.w_k.rows());
  return {x.rows(), x.cols(), w.w_k.rows(), w.w_k.cols(), left * right};
}

Jacobian grad_s_wrt_input(const Matrix& x, const BlockWeights& w, const Matrix& a, double tau) {
  check_attention_shapes(x, w, a);
  const std::size_t n = x.rows();
  const Matrix eye_n = Matrix::identity(n);
  const Matrix left = ds_da_factor(x, w) * softmax_jacobian(a).entries;
  Matrix dm_dx = kron(eye_n, x * w.w_k * w.w_q.transpose()) +
                 commutation_matrix(n, n) * kron(eye_n, x * w.w_q * w.w_k.transpose());
  Matrix entries = left * (logit_scale(w, tau) * dm_dx) + kron(a, w.w_v.transpose());
  return {n, x.cols(), n, x.cols(), std::move(entries)};
}

Jacobian grad_s_wrt_queries_uniform(const Matrix& x, const BlockWeights& w, double tau) {
  const std::size_t n = x.rows();
  const Matrix core = w.w_v.transpose() * x.transpose() * centering_matrix(n) * x * w.w_k;
  const double scale = logit_scale(w, tau) / static_cast<double>(n);
  return {n, x.cols(), w.w_q.rows(), w.w_q.cols(), scale * kron(x, core)};
}

}  // namespace sigprop
