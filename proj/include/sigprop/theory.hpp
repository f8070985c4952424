#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "sigprop/config.hpp"
#include "sigprop/kronecalc.hpp"
#include "sigprop/matrix.hpp"

namespace sigprop {

// Token ensemble of the constant-correlation model: entries zero-mean
// Gaussian, variance sigma_x_sq, dimensions independent, and distinct tokens
// correlated rho * sigma_x_sq within each dimension (d_v = d_k = d here).
struct CorrelatedInputSpec {
  std::size_t n = 0;
  std::size_t d = 0;
  double sigma_x_sq = 1.0;
  double rho = 0.0;

  void validate() const;
};

// One propagated expectation: value at every layer 0..L plus the
// infinite-depth limit where one exists (DepthScaled residuals).
struct PropagationSeries {
  std::vector<double> per_layer;
  std::optional<double> limit;
};

struct PropagationPrediction {
  PropagationSeries c;        // E C(X^l)
  PropagationSeries norm;     // E ||X^l||_F^2
  PropagationSeries rho;      // predicted correlation rho^l
};

// d_v * n * ||x_bar||^2: the exact squared Frobenius norm of dS/dW^V under
// uniform attention, conditional on X.
double expected_grad_value_norm(const Matrix& x, std::size_t d_v);

// tau^2 * (sigma_v^2 sigma_k^2 d_v / n^2) * ||X||_F^2 * ||X^T X - n x_bar x_bar^T||_F^2,
// the expectation of ||dS/dW^Q||_F^2 over W^K, W^V at fixed X under uniform
// attention. The derivation carries sigma_v^2 sigma_k^2 d_k d_v / (d_k n^2);
// the d_k cancels against the squared 1/sqrt(d_k) logit scaling, which is why
// d_k does not appear in the value. The parameter is kept for interface
// symmetry with the other conditional predictors.
double expected_grad_query_norm_conditional(const Matrix& x, double sigma_v_sq, double sigma_k_sq,
                                            std::size_t d_v, std::size_t d_k, double tau);

// Upper bound (8 sigma_q^2 sigma_k^2 sigma_v^2 d_k d_v / n) * ||X^T X - n x_bar x_bar^T||_F^2
//   + 2 d_v^2 sigma_v^2
// on the expectation of ||dS/dX||_F^2 at fixed X (tau = 1 setting).
double expected_grad_input_bound(const Matrix& x, double sigma_q_sq, double sigma_k_sq,
                                 double sigma_v_sq, std::size_t d_k, std::size_t d_v,
                                 std::size_t n);

// sigma_x^2 d^2 (1 + rho (n-1)).
double theory_grad_value_constant_rho(const CorrelatedInputSpec& spec);

// sigma_x^6 ((n-1)/n) (1-rho)^2 d (n+d). Assumes norm and correlation
// propagate independently, so Monte-Carlo agreement is approximate.
double theory_grad_query_constant_rho(const CorrelatedInputSpec& spec);

// Exact E ||X^T L X||_F^2 under the constant-correlation model, assembled as
// d*B + d(d-1)*A with A = (n-1)(1-rho)^2 sigma_x^4 and
// B = sigma_x^4 (n-1)(n+1)(1-rho)^2.
double centered_gram_expectation_exact(const CorrelatedInputSpec& spec);

// Same expectation computed by brute-force enumeration of the three Gaussian
// pairings over all index tuples; restricted to n, d <= 3.
double isserlis_brute_force(const CorrelatedInputSpec& spec);

// E C(X^L) = ((a1^2+1)(a2^2+1))^L C(X); limit e^{at1+at2} C(X) for
// DepthScaled residuals. Requires linear activation, uniform attention, no
// norm, ffn_ratio 1 (the regime where the recursion is exact).
PropagationSeries propagate_c(double c0, const ModelConfig& config);

// E ||X^L||_F^2 = (a2^2+1)^L [ n ((a1^2+1)^L - 1) ||x_bar||^2 + ||X||_F^2 ];
// limit n e^{at2}(e^{at1} - 1) ||x_bar||^2 + e^{at2} ||X||_F^2.
PropagationSeries propagate_norm(double frob0, double mean_token_norm_sq, const ModelConfig& config);

// rho^l = E C(X^l) / ((n-1) E||X^l||^2) - 1/(n-1) per layer, with the
// appropriate limit: the DepthScaled closed form, or 1 for Constant residuals
// with a nonzero attention branch (c0 > 0). Preconditions as propagate_c; the
// stats overload additionally assumes the input tokens had equal norms, which
// the TokenMatrix overload verifies to 1e-8 relative.
PropagationPrediction predicted_correlation(const SequenceStats& stats0, const ModelConfig& config);
PropagationPrediction predicted_correlation(const Matrix& x0, const ModelConfig& config);

// sigma_k^4 ||X_i||^2 ||X_j||^2 = E[M_ij^2 | X] over W^Q, W^K draws.
double logits_second_moment(const Matrix& x, double sigma_k_sq, std::size_t i, std::size_t j);

// Temperature that equates the constant-rho query and value gradient norms:
// tau* = sqrt(grad_value / grad_query). Throws for rho = 1 (query norm 0).
double temperature_matching_gradients(const CorrelatedInputSpec& spec);

}  // namespace sigprop
