#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include "sigprop/config.hpp"
#include "sigprop/matrix.hpp"
#include "sigprop/rng.hpp"
#include "sigprop/theory.hpp"

namespace sigprop {

struct EstimatorResult {
  double mean = 0.0;
  double std_err = 0.0;  // sample standard deviation / sqrt(N)
  std::size_t n_samples = 0;
  std::uint64_t master_seed = 0;
};

// Deviation of the attention matrix from uniform as a function of d_k.
struct DecayFit {
  std::vector<std::size_t> dk_grid;
  std::vector<double> mean_sq_deviation;  // (1/n^2) ||A - (1/n) 1||_F^2, averaged
  std::vector<double> std_err;
  double slope = 0.0;  // log-log least squares
  double intercept = 0.0;
};

enum class QKInit { xavier, glorot };  // variance 1/d_k vs 2/(d_v + d_k)

// X_{ij} = sigma_x (sqrt(rho) z_j + sqrt(1-rho) g_{ij}); z and g standard
// Gaussian. Realizes the constant-correlation covariance exactly.
Matrix sample_correlated_tokens(const CorrelatedInputSpec& spec, std::uint64_t seed);

// 1_n x^T: every row equal to x_vec.
Matrix rank_one_input(const std::vector<double>& x_vec, std::size_t n);

// Runs `statistic(mix_seed(master_seed, i))` for i = 0..n_samples-1, possibly
// across worker threads, and reduces replica results in index order with
// compensated summation. The result is bit-identical for any worker count.
// workers = 0 picks hardware concurrency. Throws if any replica returns a
// non-finite value (the message names the replica).
EstimatorResult estimate(const std::function<double(std::uint64_t)>& statistic,
                         std::size_t n_samples, std::uint64_t master_seed, std::size_t workers = 1);

// Vector-valued variant; every replica must return the same number of
// components, each reduced independently under the same contract.
std::vector<EstimatorResult> estimate_many(
    const std::function<std::vector<double>(std::uint64_t)>& statistic, std::size_t n_samples,
    std::uint64_t master_seed, std::size_t workers = 1);

// For each d_k in the grid, draws `reps` (W^Q, W^K) pairs on a fixed random X
// (entries N(0, 1/d_v), so rows have roughly unit norm), measures
// (1/n^2) ||A - (1/n) 1||_F^2, and fits the log-log trend. Xavier (1/d_k)
// keeps E[M^2] proportional to 1/d_k^2 across the grid and is the default;
// glorot (2/(d_v+d_k)) reproduces the flatter trend of a shared-variance
// setup. Requires a strictly increasing grid spanning at least one decade.
DecayFit validate_uniform_attention(std::size_t n, std::size_t d_v,
                                    const std::vector<std::size_t>& dk_grid, std::size_t reps,
                                    std::uint64_t seed, QKInit init = QKInit::xavier);

// Per-layer gradient norms (Frobenius, groups ordered w_q, w_k, w_v, w_f1,
// w_f2) and per-layer token cosines, sampled over (input, weights) pairs with
// an MSE loss against one fixed random target.
struct DepthProfile {
  std::vector<std::vector<EstimatorResult>> grad_norms;  // [layer][group]
  std::vector<EstimatorResult> avg_cosine;               // X^0 .. X^L
};

DepthProfile empirical_grad_depth_profile(const ModelConfig& config,
                                          const CorrelatedInputSpec& spec, std::size_t n_samples,
                                          std::uint64_t seed, std::size_t workers = 1);

// Ratio-estimator correlation per layer: mean token Gram over replicas, then
// rho_hat = average over ordered pairs k != k' of G_{kk'} / sqrt(G_kk G_k'k').
// std_err from batch means (replicas split into n_batches index ranges).
struct CorrelationEstimate {
  std::vector<double> rho;      // layers 0..L
  std::vector<double> std_err;
};

CorrelationEstimate correlation_profile(const Matrix& x0, const ModelConfig& config,
                                        std::size_t n_samples, std::size_t n_batches,
                                        std::uint64_t seed, std::size_t workers = 1);

}  // namespace sigprop
