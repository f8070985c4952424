#include "sigprop/config.hpp"

#include <cmath>
#include <stdexcept>

namespace sigprop {

Residual Residual::constant(double alpha1, double alpha2) {
  Residual r;
  r.mode = Mode::constant;
  r.a1 = alpha1;
  r.a2 = alpha2;
  return r;
}

Residual Residual::depth_scaled(double alpha_tilde1, double alpha_tilde2) {
  Residual r;
  r.mode = Mode::depth_scaled;
  r.a1 = alpha_tilde1;
  r.a2 = alpha_tilde2;
  return r;
}

std::pair<double, double> Residual::resolve(std::size_t depth) const {
  if (mode == Mode::constant) return {a1, a2};
  if (depth == 0) throw std::invalid_argument("Residual::resolve: depth must be positive");
  const double l = static_cast<double>(depth);
  return {std::sqrt(a1 / l), std::sqrt(a2 / l)};
}

void ModelConfig::validate() const {
  if (depth == 0) throw std::invalid_argument("ModelConfig: depth must be positive");
  if (seq_len == 0) throw std::invalid_argument("ModelConfig: seq_len must be positive");
  if (d_v == 0) throw std::invalid_argument("ModelConfig: d_v must be positive");
  if (d_k == 0) throw std::invalid_argument("ModelConfig: d_k must be positive");
  if (ffn_ratio == 0) throw std::invalid_argument("ModelConfig: ffn_ratio must be positive");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("ModelConfig: temperature must be positive and finite");
  }
  if (residual.a1 < 0.0 || residual.a2 < 0.0) {
    throw std::invalid_argument("ModelConfig: residual weights must be nonnegative");
  }
  if (norm != NormPlacement::none && d_v < 2) {
    throw std::invalid_argument("ModelConfig: layer norm needs token width >= 2");
  }
}

}  // namespace sigprop
