#pragma once

#include <cstddef>
#include <string>
#include <utility>
#include <vector>

#include "sigprop/forward.hpp"
#include "sigprop/matrix.hpp"

namespace sigprop {

struct BlockGradients {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  Matrix w_f1;
  Matrix w_f2;
};

// Loss value plus per-layer gradients. frob_sq(l, group) exposes the squared
// Frobenius norms the depth profiles are built from; the full matrices stay
// available for optimizer steps.
struct GradientReport {
  double loss = 0.0;
  std::vector<BlockGradients> layers;
  Matrix input_grad;  // dL/dX^0

  static constexpr const char* kGroups[5] = {"w_q", "w_k", "w_v", "w_f1", "w_f2"};
  double frob_sq(std::size_t layer, const std::string& group) const;
  std::string to_json() const;
};

// Exact reverse-mode pass through one block using the activations cached by
// block_forward. Returns (parameter gradients, dL/d block-input).
std::pair<BlockGradients, Matrix> block_backward(const LayerCache& cache, const Matrix& upstream);

GradientReport model_backward(const ForwardTrace& trace, const std::vector<BlockWeights>& weights,
                              const ModelConfig& config, const Matrix& loss_grad,
                              double loss_value = 0.0);

// MSE = (1/(n d_v)) ||X - T||_F^2; returns (loss, dL/dX).
std::pair<double, Matrix> mse_loss(const Matrix& x, const Matrix& target);

// Row-wise softmax cross-entropy against one target id per row, averaged over
// rows; returns (loss, dL/dlogits).
std::pair<double, Matrix> cross_entropy_loss(const Matrix& logits,
                                             const std::vector<std::size_t>& targets);

}  // namespace sigprop
