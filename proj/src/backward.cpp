#include "sigprop/backward.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace sigprop {

namespace {

constexpr double kLayerNormEps = 1e-5;

// VJP of token-wise layer_norm: x is the normalization input, g = dL/dy.
Matrix layer_norm_backward(const Matrix& x, const Matrix& g) {
  const std::size_t d = x.cols();
  Matrix dx(x.rows(), d);
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
    double g_mean = 0.0, gy_mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double y = (x(i, j) - mu) * inv;
      g_mean += g(i, j);
      gy_mean += g(i, j) * y;
    }
    g_mean /= static_cast<double>(d);
    gy_mean /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double y = (x(i, j) - mu) * inv;
      dx(i, j) = inv * (g(i, j) - g_mean - y * gy_mean);
    }
  }
  return dx;
}

// Row-wise VJP through the softmax at the cached attention matrix:
// dM_i = A_i o dA_i - <A_i, dA_i> A_i.
Matrix softmax_vjp(const Matrix& a, const Matrix& da) {
  const std::size_t n = a.rows();
  Matrix dm(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    double dot = 0.0;
    for (std::size_t j = 0; j < n; ++j) dot += a(i, j) * da(i, j);
    for (std::size_t j = 0; j < n; ++j) dm(i, j) = a(i, j) * (da(i, j) - dot);
  }
  return dm;
}

}  // namespace

std::pair<BlockGradients, Matrix> block_backward(const LayerCache& cache, const Matrix& upstream) {
  const ModelConfig& cfg = cache.config;
  if (upstream.rows() != cfg.seq_len || upstream.cols() != cfg.d_v) {
    throw std::invalid_argument("block_backward: upstream shape mismatch");
  }
  const auto [a1, a2] = cfg.alphas();
  const BlockWeights& w = cache.weights;
  BlockGradients g;

  Matrix d_r2 = (cfg.norm == NormPlacement::post) ? layer_norm_backward(cache.resid2, upstream)
                                                  : upstream;
  Matrix d_y = a2 * d_r2;
  Matrix d_z = d_r2;

  Matrix d_h = d_y * w.w_f2.transpose();
  g.w_f2 = cache.hidden.transpose() * d_y;
  Matrix d_p = d_h;
  if (cfg.activation == Activation::relu) {
    for (std::size_t k = 0; k < d_p.data().size(); ++k) {
      if (cache.preact.data()[k] <= 0.0) d_p.data()[k] = 0.0;
    }
  }
  Matrix d_f = d_p * w.w_f1.transpose();
  g.w_f1 = cache.ffn_in.transpose() * d_p;
  d_z += (cfg.norm == NormPlacement::pre) ? layer_norm_backward(cache.z, d_f) : d_f;

  Matrix d_r1 = (cfg.norm == NormPlacement::post) ? layer_norm_backward(cache.resid1, d_z) : d_z;
  Matrix d_s = a1 * d_r1;
  Matrix d_x = d_r1;

  const Matrix& u = cache.attn_in;
  const Matrix& a = cache.attn;
  g.w_v = u.transpose() * (a.transpose() * d_s);
  Matrix d_u = a.transpose() * d_s * w.w_v.transpose();
  // Score gradients always go through the softmax derivative at the cached
  // attention matrix. Uniform mode caches A = (1/n) 1 1^T, so its w_q/w_k
  // gradients are the score-path gradients evaluated at the uniform point,
  // not derivatives of the constant forward map; finite differences of the
  // uniform forward are therefore not the reference for them.
  const double c = cfg.temperature / std::sqrt(static_cast<double>(cfg.d_k));
  const Matrix v_proj = u * w.w_v;
  Matrix d_a = d_s * v_proj.transpose();
  Matrix d_m = softmax_vjp(a, d_a);
  const Matrix uq = u * w.w_q;
  const Matrix uk = u * w.w_k;
  g.w_q = c * (u.transpose() * (d_m * uk));
  g.w_k = c * (u.transpose() * (d_m.transpose() * uq));
  d_u += c * (d_m * uk * w.w_q.transpose()) + c * (d_m.transpose() * uq * w.w_k.transpose());
  d_x += (cfg.norm == NormPlacement::pre) ? layer_norm_backward(cache.x_in, d_u) : d_u;

  return {std::move(g), std::move(d_x)};
}

GradientReport model_backward(const ForwardTrace& trace, const std::vector<BlockWeights>& weights,
                              const ModelConfig& config, const Matrix& loss_grad, double loss_value) {
  if (weights.size() != config.depth || trace.layers.size() != config.depth) {
    throw std::invalid_argument("model_backward: trace/weights depth mismatch");
  }
  GradientReport report;
  report.loss = loss_value;
  report.layers.resize(config.depth);
  Matrix upstream = loss_grad;
  for (std::size_t l = config.depth; l-- > 0;) {
    auto [grads, d_in] = block_backward(trace.layers[l], upstream);
    report.layers[l] = std::move(grads);
    upstream = std::move(d_in);
  }
  report.input_grad = std::move(upstream);
  return report;
}

double GradientReport::frob_sq(std::size_t layer, const std::string& group) const {
  const BlockGradients& g = layers.at(layer);
  if (group == "w_q") return g.w_q.frobenius_sq();
  if (group == "w_k") return g.w_k.frobenius_sq();
  if (group == "w_v") return g.w_v.frobenius_sq();
  if (group == "w_f1") return g.w_f1.frobenius_sq();
  if (group == "w_f2") return g.w_f2.frobenius_sq();
  throw std::invalid_argument("GradientReport::frob_sq: unknown group " + group);
}

std::string GradientReport::to_json() const {
  nlohmann::ordered_json j;
  j["loss"] = loss;
  for (const char* group : kGroups) {
    std::vector<double> norms;
    norms.reserve(layers.size());
    for (std::size_t l = 0; l < layers.size(); ++l) norms.push_back(frob_sq(l, group));
    j["frob_sq"][group] = norms;
  }
  return j.dump(2);
}

std::pair<double, Matrix> mse_loss(const Matrix& x, const Matrix& target) {
  if (x.rows() != target.rows() || x.cols() != target.cols()) {
    throw std::invalid_argument("mse_loss: shape mismatch");
  }
  const double scale = 1.0 / static_cast<double>(x.rows() * x.cols());
  Matrix grad = x - target;
  double loss = scale * grad.frobenius_sq();
  grad *= 2.0 * scale;
  return {loss, std::move(grad)};
}

std::pair<double, Matrix> cross_entropy_loss(const Matrix& logits,
                                             const std::vector<std::size_t>& targets) {
  const std::size_t n = logits.rows();
  const std::size_t vocab = logits.cols();
  if (targets.size() != n) throw std::invalid_argument("cross_entropy_loss: one target per row required");
  Matrix grad(n, vocab);
  double loss = 0.0;
  const double inv_n = 1.0 / static_cast<double>(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (targets[i] >= vocab) throw std::out_of_range("cross_entropy_loss: target id out of range");
    double mmax = logits(i, 0);
    for (std::size_t j = 1; j < vocab; ++j) mmax = std::max(mmax, logits(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits(i, j) - mmax);
    loss += inv_n * (std::log(z) - (logits(i, targets[i]) - mmax));
    for (std::size_t j = 0; j < vocab; ++j) {
      const double p = std::exp(logits(i, j) - mmax) / z;
      grad(i, j) = inv_n * (p - (j == targets[i] ? 1.0 : 0.0));
    }
  }
  return {loss, std::move(grad)};
}

}  // namespace sigprop
