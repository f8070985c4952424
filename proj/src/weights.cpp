#include "sigprop/weights.hpp"

#include <cmath>

#include "sigprop/rng.hpp"

namespace sigprop {

namespace {

Matrix gaussian_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double variance) {
  std::normal_distribution<double> dist(0.0, std::sqrt(variance));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = dist(rng);
  return m;
}

}  // namespace

std::vector<BlockWeights> init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const double var_k = 1.0 / static_cast<double>(config.d_k);
  const double var_v = 1.0 / static_cast<double>(config.d_v);
  const double var_f1 = (config.activation == Activation::relu ? 2.0 : 1.0) / static_cast<double>(config.d_v);

  std::vector<BlockWeights> layers;
  layers.reserve(config.depth);
  for (std::size_t l = 0; l < config.depth; ++l) {
    auto rng = make_engine(mix_seed(seed, l));
    BlockWeights w;
    w.w_q = gaussian_matrix(rng, config.d_v, config.d_k, var_k);
    w.w_k = gaussian_matrix(rng, config.d_v, config.d_k, var_k);
    w.w_v = gaussian_matrix(rng, config.d_v, config.d_v, var_v);
    w.w_f1 = gaussian_matrix(rng, config.d_v, config.d_ff(), var_f1);
    w.w_f2 = gaussian_matrix(rng, config.d_ff(), config.d_v, var_v);
    layers.push_back(std::move(w));
  }
  return layers;
}

}  // namespace sigprop
