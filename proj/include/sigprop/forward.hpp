#pragma once

#include <utility>
#include <vector>

#include "sigprop/config.hpp"
#include "sigprop/kronecalc.hpp"
#include "sigprop/weights.hpp"

namespace sigprop {

// Everything block_backward needs, captured during the forward pass.
// Naming follows the block recursion:
//   U = attention input (X, or LN(X) under pre-norm)
//   M = scaled logits, A = attention matrix, S = A U w_v
//   R1 = a1 S + X, Z = R1 (or LN(R1) under post-norm)
//   F = feed-forward input (Z, or LN(Z) under pre-norm)
//   P = F w_f1, H = act(P), Y = H w_f2
//   R2 = a2 Y + Z; block output = R2 (or LN(R2) under post-norm)
struct LayerCache {
  std::size_t layer_index = 0;
  ModelConfig config;
  BlockWeights weights;
  Matrix x_in;
  Matrix attn_in;
  Matrix logits;
  Matrix attn;
  Matrix s;
  Matrix resid1;
  Matrix z;
  Matrix ffn_in;
  Matrix preact;
  Matrix hidden;
  Matrix y;
  Matrix resid2;
  Matrix x_out;
};

struct ForwardTrace {
  ModelConfig config;
  std::vector<LayerCache> layers;
  Matrix output;                     // X^L
  std::vector<SequenceStats> stats;  // stats of X^0 .. X^L (depth + 1 entries)
};

// Returns (A, M). M = (temperature / sqrt(d_k)) X w_q (X w_k)^T and A is its
// row-wise softmax with max subtraction. Uniform mode returns A = (1/n) 1 1^T
// and M = 0 without touching the weights.
std::pair<Matrix, Matrix> attention_matrix(const Matrix& x, const BlockWeights& w,
                                           const ModelConfig& config);

// Token-wise normalization y = (x - mean) / sqrt(var + 1e-5), population
// variance over the row, no learnable gain or bias. Width-1 rows throw.
Matrix layer_norm(const Matrix& x);

std::pair<Matrix, LayerCache> block_forward(const Matrix& x, const BlockWeights& w,
                                            std::size_t layer_index, const ModelConfig& config);

ForwardTrace model_forward(const Matrix& x, const std::vector<BlockWeights>& weights,
                           const ModelConfig& config);

}  // namespace sigprop
