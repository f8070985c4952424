#pragma once

#include <cstddef>
#include <utility>

namespace sigprop {

enum class Activation { linear, relu };

// softmax: standard row-wise softmax of the scaled logits.
// uniform: forward pass uses A = (1/n) 1 1^T and M = 0 exactly; Jacobians and
// backward keep the softmax-derivative structure evaluated at the uniform point,
// so gradients through the scores remain meaningful (and vanish under rank
// collapse of the input, which is the content of the degeneracy results).
enum class AttentionMode { softmax, uniform };

// none: plain residual blocks.
// post: Z = LN(a1 S + X), X_next = LN(a2 Y + Z).
// pre:  attention and feed-forward read LN'd inputs, residual paths stay raw.
enum class NormPlacement { none, pre, post };

// Residual branch weights. Constant uses alpha1/alpha2 as given at every
// depth; DepthScaled stores alpha_tilde and resolves alpha_i = sqrt(alpha_tilde_i / L).
struct Residual {
  enum class Mode { constant, depth_scaled };

  Mode mode = Mode::constant;
  double a1 = 1.0;  // alpha1, or alpha_tilde1 for depth_scaled
  double a2 = 1.0;

  static Residual constant(double alpha1, double alpha2);
  static Residual depth_scaled(double alpha_tilde1, double alpha_tilde2);

  // Resolved (alpha1, alpha2) for a model of the given depth.
  std::pair<double, double> resolve(std::size_t depth) const;
};

struct ModelConfig {
  std::size_t depth = 1;
  std::size_t seq_len = 0;  // n
  std::size_t d_v = 0;      // token width
  std::size_t d_k = 0;      // query/key width
  Activation activation = Activation::linear;
  AttentionMode attention = AttentionMode::softmax;
  NormPlacement norm = NormPlacement::none;
  Residual residual = Residual::constant(1.0, 1.0);
  double temperature = 1.0;
  std::size_t ffn_ratio = 1;  // hidden width = ffn_ratio * d_v

  std::size_t d_ff() const { return ffn_ratio * d_v; }
  std::pair<double, double> alphas() const { return residual.resolve(depth); }

  // Throws std::invalid_argument on any malformed field combination.
  void validate() const;
};

}  // namespace sigprop
