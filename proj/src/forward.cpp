#include "sigprop/forward.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace sigprop {

namespace {

constexpr double kLayerNormEps = 1e-5;

Matrix relu(const Matrix& m) {
  Matrix out = m;
  for (double& v : out.data()) v = std::max(v, 0.0);
  return out;
}

}  // namespace

std::pair<Matrix, Matrix> attention_matrix(const Matrix& x, const BlockWeights& w,
                                           const ModelConfig& config) {
  const std::size_t n = x.rows();
  if (n == 0) throw std::invalid_argument("attention_matrix: empty input");
  if (config.attention == AttentionMode::uniform) {
    Matrix a(n, n, 1.0 / static_cast<double>(n));
    Matrix m(n, n, 0.0);
    return {a, m};
  }
  if (x.cols() != w.w_q.rows()) throw std::invalid_argument("attention_matrix: x/w_q shape mismatch");
  const double scale = config.temperature / std::sqrt(static_cast<double>(w.w_q.cols()));
  Matrix m = scale * (x * w.w_q) * (x * w.w_k).transpose();
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double mmax = m(i, 0);
    for (std::size_t j = 1; j < n; ++j) mmax = std::max(mmax, m(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      a(i, j) = std::exp(m(i, j) - mmax);
      z += a(i, j);
    }
    for (std::size_t j = 0; j < n; ++j) a(i, j) /= z;
  }
  return {a, m};
}

Matrix layer_norm(const Matrix& x) {
  const std::size_t d = x.cols();
  if (d < 2) throw std::invalid_argument("layer_norm: token width must be >= 2");
  Matrix y(x.rows(), d);
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x(i, j);
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x(i, j) - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) y(i, j) = (x(i, j) - mu) * inv;
  }
  return y;
}

std::pair<Matrix, LayerCache> block_forward(const Matrix& x, const BlockWeights& w,
                                            std::size_t layer_index, const ModelConfig& config) {
  if (x.rows() != config.seq_len || x.cols() != config.d_v) {
    throw std::invalid_argument("block_forward: input shape does not match config");
  }
  const auto [a1, a2] = config.alphas();
  LayerCache c;
  c.layer_index = layer_index;
  c.config = config;
  c.weights = w;
  c.x_in = x;
  c.attn_in = (config.norm == NormPlacement::pre) ? layer_norm(x) : x;
  auto [attn, logits] = attention_matrix(c.attn_in, w, config);
  c.attn = std::move(attn);
  c.logits = std::move(logits);
  c.s = c.attn * (c.attn_in * w.w_v);
  c.resid1 = a1 * c.s + x;
  c.z = (config.norm == NormPlacement::post) ? layer_norm(c.resid1) : c.resid1;
  c.ffn_in = (config.norm == NormPlacement::pre) ? layer_norm(c.z) : c.z;
  c.preact = c.ffn_in * w.w_f1;
  c.hidden = (config.activation == Activation::relu) ? relu(c.preact) : c.preact;
  c.y = c.hidden * w.w_f2;
  c.resid2 = a2 * c.y + c.z;
  c.x_out = (config.norm == NormPlacement::post) ? layer_norm(c.resid2) : c.resid2;
  Matrix out = c.x_out;
  return {std::move(out), std::move(c)};
}

ForwardTrace model_forward(const Matrix& x, const std::vector<BlockWeights>& weights,
                           const ModelConfig& config) {
  config.validate();
  if (weights.size() != config.depth) {
    throw std::invalid_argument("model_forward: weight count does not match depth");
  }
  ForwardTrace trace;
  trace.config = config;
  trace.layers.reserve(config.depth);
  trace.stats.reserve(config.depth + 1);
  trace.stats.push_back(sequence_stats(x));
  Matrix cur = x;
  for (std::size_t l = 0; l < config.depth; ++l) {
    auto [x_next, cache] = block_forward(cur, weights[l], l, config);
    cur = std::move(x_next);
    trace.stats.push_back(sequence_stats(cur));
    trace.layers.push_back(std::move(cache));
  }
  if (!cur.all_finite()) throw std::runtime_error("model_forward: non-finite activations");
  trace.output = std::move(cur);
  return trace;
}

}  // namespace sigprop
