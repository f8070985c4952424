#include "sigprop/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sigprop {

void CorrelatedInputSpec::validate() const {
  if (n == 0 || d == 0) throw std::invalid_argument("CorrelatedInputSpec: n, d must be positive");
  if (!(sigma_x_sq > 0.0)) throw std::invalid_argument("CorrelatedInputSpec: sigma_x_sq must be positive");
  if (rho < 0.0 || rho > 1.0) throw std::invalid_argument("CorrelatedInputSpec: rho must be in [0, 1]");
}

double expected_grad_value_norm(const Matrix& x, std::size_t d_v) {
  const std::vector<double> mean = x.col_means();
  double norm_sq = 0.0;
  for (double v : mean) norm_sq += v * v;
  return static_cast<double>(d_v) * static_cast<double>(x.rows()) * norm_sq;
}

double expected_grad_query_norm_conditional(const Matrix& x, double sigma_v_sq, double sigma_k_sq,
                                            std::size_t d_v, std::size_t d_k, double tau) {
  (void)d_k;  // cancels against the squared logit scaling, see header
  const SequenceStats stats = sequence_stats(x);
  const double n = static_cast<double>(x.rows());
  return tau * tau * sigma_v_sq * sigma_k_sq * static_cast<double>(d_v) / (n * n) * stats.frob_sq *
         stats.centered_gram_sq;
}

double expected_grad_input_bound(const Matrix& x, double sigma_q_sq, double sigma_k_sq,
                                 double sigma_v_sq, std::size_t d_k, std::size_t d_v,
                                 std::size_t n) {
  const SequenceStats stats = sequence_stats(x);
  const double dk = static_cast<double>(d_k);
  const double dv = static_cast<double>(d_v);
  return 8.0 * sigma_q_sq * sigma_k_sq * sigma_v_sq * dk * dv / static_cast<double>(n) *
             stats.centered_gram_sq +
         2.0 * dv * dv * sigma_v_sq;
}

double theory_grad_value_constant_rho(const CorrelatedInputSpec& spec) {
  spec.validate();
  const double d = static_cast<double>(spec.d);
  const double n = static_cast<double>(spec.n);
  return spec.sigma_x_sq * d * d * (1.0 + spec.rho * (n - 1.0));
}

double theory_grad_query_constant_rho(const CorrelatedInputSpec& spec) {
  spec.validate();
  const double d = static_cast<double>(spec.d);
  const double n = static_cast<double>(spec.n);
  const double one_minus_rho = 1.0 - spec.rho;
  const double sigma6 = spec.sigma_x_sq * spec.sigma_x_sq * spec.sigma_x_sq;
  return sigma6 * (n - 1.0) / n * one_minus_rho * one_minus_rho * d * (n + d);
}

double centered_gram_expectation_exact(const CorrelatedInputSpec& spec) {
  spec.validate();
  const double d = static_cast<double>(spec.d);
  const double n = static_cast<double>(spec.n);
  const double sigma4 = spec.sigma_x_sq * spec.sigma_x_sq;
  const double one_minus_rho_sq = (1.0 - spec.rho) * (1.0 - spec.rho);
  const double a = (n - 1.0) * one_minus_rho_sq * sigma4;
  const double b = sigma4 * (n - 1.0) * (n + 1.0) * one_minus_rho_sq;
  return d * b + d * (d - 1.0) * a;
}

namespace {

// Covariance of X_{a,i} and X_{b,j} under the constant-correlation model.
double pair_cov(const CorrelatedInputSpec& spec, std::size_t a, std::size_t i, std::size_t b,
                std::size_t j) {
  if (i != j) return 0.0;
  return (a == b) ? spec.sigma_x_sq : spec.rho * spec.sigma_x_sq;
}

// E[w x y z] for jointly Gaussian zero-mean entries, by the three pairings.
double fourth_moment(const CorrelatedInputSpec& spec, std::size_t a1, std::size_t i1,
                     std::size_t a2, std::size_t i2, std::size_t a3, std::size_t i3,
                     std::size_t a4, std::size_t i4) {
  return pair_cov(spec, a1, i1, a2, i2) * pair_cov(spec, a3, i3, a4, i4) +
         pair_cov(spec, a1, i1, a3, i3) * pair_cov(spec, a2, i2, a4, i4) +
         pair_cov(spec, a1, i1, a4, i4) * pair_cov(spec, a2, i2, a3, i3);
}

}  // namespace

double isserlis_brute_force(const CorrelatedInputSpec& spec) {
  spec.validate();
  if (spec.n > 3 || spec.d > 3) {
    throw std::invalid_argument("isserlis_brute_force: restricted to n, d <= 3");
  }
  const Matrix l = centering_matrix(spec.n);
  double total = 0.0;
  for (std::size_t i = 0; i < spec.d; ++i) {
    for (std::size_t j = 0; j < spec.d; ++j) {
      // E[(X^T L X)_{ij}^2] expanded over the two L-sums.
      for (std::size_t a = 0; a < spec.n; ++a) {
        for (std::size_t b = 0; b < spec.n; ++b) {
          for (std::size_t a2 = 0; a2 < spec.n; ++a2) {
            for (std::size_t b2 = 0; b2 < spec.n; ++b2) {
              total += l(a, b) * l(a2, b2) *
                       fourth_moment(spec, a, i, b, j, a2, i, b2, j);
            }
          }
        }
      }
    }
  }
  return total;
}

namespace {

void check_propagation_preconditions(const ModelConfig& config) {
  config.validate();
  if (config.activation != Activation::linear) {
    throw std::invalid_argument("propagation theory requires linear activation");
  }
  if (config.attention != AttentionMode::uniform) {
    throw std::invalid_argument("propagation theory requires uniform attention");
  }
  if (config.norm != NormPlacement::none) {
    throw std::invalid_argument("propagation theory requires norm placement none");
  }
  if (config.ffn_ratio != 1) {
    throw std::invalid_argument("propagation theory requires ffn_ratio 1");
  }
}

}  // namespace

PropagationSeries propagate_c(double c0, const ModelConfig& config) {
  check_propagation_preconditions(config);
  const auto [a1, a2] = config.alphas();
  const double factor = (a1 * a1 + 1.0) * (a2 * a2 + 1.0);
  PropagationSeries series;
  series.per_layer.reserve(config.depth + 1);
  for (std::size_t l = 0; l <= config.depth; ++l) {
    series.per_layer.push_back(std::pow(factor, static_cast<double>(l)) * c0);
  }
  if (config.residual.mode == Residual::Mode::depth_scaled) {
    series.limit = std::exp(config.residual.a1 + config.residual.a2) * c0;
  }
  return series;
}

PropagationSeries propagate_norm(double frob0, double mean_token_norm_sq, const ModelConfig& config) {
  check_propagation_preconditions(config);
  const auto [a1, a2] = config.alphas();
  const double n = static_cast<double>(config.seq_len);
  const double f1 = a1 * a1 + 1.0;
  const double f2 = a2 * a2 + 1.0;
  PropagationSeries series;
  series.per_layer.reserve(config.depth + 1);
  for (std::size_t l = 0; l <= config.depth; ++l) {
    const double dl = static_cast<double>(l);
    // a1^2 sum_{k<l} (a1^2+1)^k telescopes to (a1^2+1)^l - 1.
    series.per_layer.push_back(std::pow(f2, dl) *
                               (n * (std::pow(f1, dl) - 1.0) * mean_token_norm_sq + frob0));
  }
  if (config.residual.mode == Residual::Mode::depth_scaled) {
    const double e1 = std::exp(config.residual.a1);
    const double e2 = std::exp(config.residual.a2);
    series.limit = n * e2 * (e1 - 1.0) * mean_token_norm_sq + e2 * frob0;
  }
  return series;
}

PropagationPrediction predicted_correlation(const SequenceStats& stats0, const ModelConfig& config) {
  check_propagation_preconditions(config);
  if (config.seq_len < 2) {
    throw std::invalid_argument("predicted_correlation: needs at least two tokens");
  }
  const double n = static_cast<double>(config.seq_len);
  const double c0 = stats0.c_of_x;
  const double f0 = stats0.frob_sq;
  PropagationPrediction pred;
  pred.c = propagate_c(c0, config);
  pred.norm = propagate_norm(f0, c0 / (n * n), config);
  pred.rho.per_layer.reserve(config.depth + 1);
  for (std::size_t l = 0; l <= config.depth; ++l) {
    pred.rho.per_layer.push_back(pred.c.per_layer[l] / ((n - 1.0) * pred.norm.per_layer[l]) -
                                 1.0 / (n - 1.0));
  }
  if (config.residual.mode == Residual::Mode::depth_scaled) {
    const double e1 = std::exp(config.residual.a1);
    pred.rho.limit =
        n * e1 * c0 / ((n - 1.0) * ((e1 - 1.0) * c0 + n * f0)) - 1.0 / (n - 1.0);
  } else {
    const auto [a1, a2] = config.alphas();
    (void)a2;
    if (a1 == 0.0) {
      pred.rho.limit = pred.rho.per_layer.front();
    } else {
      pred.rho.limit = (c0 > 0.0) ? 1.0 : -1.0 / (n - 1.0);
    }
  }
  return pred;
}

PropagationPrediction predicted_correlation(const Matrix& x0, const ModelConfig& config) {
  if (x0.rows() != config.seq_len || x0.cols() != config.d_v) {
    throw std::invalid_argument("predicted_correlation: input shape does not match config");
  }
  double lo = x0.row_norm_sq(0), hi = lo;
  for (std::size_t i = 1; i < x0.rows(); ++i) {
    const double r = x0.row_norm_sq(i);
    lo = std::min(lo, r);
    hi = std::max(hi, r);
  }
  // 1e-8 relative on the norms means 2e-8 on their squares.
  if (!(lo > 0.0) || (hi - lo) / hi > 2e-8) {
    throw std::invalid_argument("predicted_correlation: input tokens must have equal norms");
  }
  return predicted_correlation(sequence_stats(x0), config);
}

double logits_second_moment(const Matrix& x, double sigma_k_sq, std::size_t i, std::size_t j) {
  if (i >= x.rows() || j >= x.rows()) {
    throw std::out_of_range("logits_second_moment: token index out of range");
  }
  return sigma_k_sq * sigma_k_sq * x.row_norm_sq(i) * x.row_norm_sq(j);
}

double temperature_matching_gradients(const CorrelatedInputSpec& spec) {
  const double grad_q = theory_grad_query_constant_rho(spec);
  if (grad_q <= 0.0) {
    throw std::domain_error("temperature_matching_gradients: query gradient norm is zero");
  }
  return std::sqrt(theory_grad_value_constant_rho(spec) / grad_q);
}

}  // namespace sigprop
