#pragma once

#include <cstdint>
#include <vector>

#include "sigprop/config.hpp"
#include "sigprop/matrix.hpp"

namespace sigprop {

// One block's parameters. w_q, w_k: d_v x d_k; w_v: d_v x d_v;
// w_f1: d_v x d_ff; w_f2: d_ff x d_v.
struct BlockWeights {
  Matrix w_q;
  Matrix w_k;
  Matrix w_v;
  Matrix w_f1;
  Matrix w_f2;
};

// Gaussian init, mean zero:
//   w_q, w_k    variance 1/d_k
//   w_v, w_f2   variance 1/d_v
//   w_f1        variance 1/d_v (linear activation), 2/d_v (relu)
// Deterministic per (config, seed); one independent stream per layer.
std::vector<BlockWeights> init_weights(const ModelConfig& config, std::uint64_t seed);

}  // namespace sigprop
