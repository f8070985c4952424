#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "sigprop/config.hpp"
#include "sigprop/matrix.hpp"
#include "sigprop/weights.hpp"

namespace sigprop {

enum class Optimizer { sgd, adam };

// Sequence-reversal toy task: embed digit tokens, run the Transformer
// encoder, project back through the tied embedding, cross-entropy against
// the reversed sequence.
struct TrainConfig {
  std::size_t seq_len = 20;
  std::size_t vocab = 10;
  std::size_t embed_dim = 16;
  std::size_t depth = 5;
  Optimizer optimizer = Optimizer::adam;
  double lr = 0.01;
  double weight_decay = 0.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double tau_final = 1.0;
  std::size_t warmup_steps = 1000;
  std::size_t max_steps = 3000;
  std::size_t batch = 32;
  std::uint64_t seed = 0;
  // Stop once a step's batch accuracy reaches this value; > 1 disables.
  double stop_accuracy = 2.0;

  void validate() const;
  ModelConfig model_config(double tau) const;
};

struct OptimizerState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  std::size_t t = 0;
};

struct StepTelemetry {
  std::size_t step = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double tau = 0.0;
  // Group order: w_q, w_k, w_v, w_f1, w_f2 (summed over layers, then sqrt).
  std::array<double, 5> grad_norm{};
  std::array<double, 5> eff_lr{};
};

// (inputs, targets); target rows are the reversed input rows.
std::pair<std::vector<std::vector<std::size_t>>, std::vector<std::vector<std::size_t>>>
reversal_batch(const TrainConfig& config, std::uint64_t seed, std::size_t step);

Matrix sinusoidal_positions(std::size_t seq_len, std::size_t dim);

Matrix embed(const std::vector<std::size_t>& tokens, const Matrix& table, const Matrix& positional);

void sgd_step(Matrix& param, const Matrix& grad, double lr, double weight_decay);

// Bias-corrected Adam with decoupled weight decay. Returns the mean of
// lr/(sqrt(v_hat)+eps) over the entries, the effective learning rate.
double adam_step(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, std::size_t t,
                 double lr, double weight_decay, double beta1, double beta2, double eps);

double temperature_schedule(std::size_t step, double tau_final, std::size_t warmup_steps);

std::vector<StepTelemetry> train(const TrainConfig& config);

}  // namespace sigprop
