#include "sigprop/train.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <stdexcept>
#include <string>

#include "sigprop/backward.hpp"
#include "sigprop/forward.hpp"
#include "sigprop/rng.hpp"

namespace sigprop {

void TrainConfig::validate() const {
  if (seq_len == 0 || embed_dim == 0 || depth == 0 || batch == 0 || max_steps == 0) {
    throw std::invalid_argument("TrainConfig: counts must be positive");
  }
  if (vocab < 2) throw std::invalid_argument("TrainConfig: vocab must be at least 2");
  if (!(lr >= 0.0) || !std::isfinite(lr)) {
    throw std::invalid_argument("TrainConfig: lr must be finite and non-negative");
  }
  if (!(weight_decay >= 0.0)) throw std::invalid_argument("TrainConfig: negative weight_decay");
  if (!(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0)) {
    throw std::invalid_argument("TrainConfig: betas must lie in (0,1)");
  }
  if (!(eps > 0.0)) throw std::invalid_argument("TrainConfig: eps must be positive");
  if (!(tau_final > 0.0) || !std::isfinite(tau_final)) {
    throw std::invalid_argument("TrainConfig: tau_final must be finite and positive");
  }
  model_config(tau_final).validate();
}

ModelConfig TrainConfig::model_config(double tau) const {
  ModelConfig cfg;
  cfg.depth = depth;
  cfg.seq_len = seq_len;
  cfg.d_v = embed_dim;
  cfg.d_k = embed_dim;
  cfg.activation = Activation::relu;
  cfg.attention = AttentionMode::softmax;
  cfg.norm = NormPlacement::post;
  cfg.residual = Residual::constant(1.0, 1.0);
  cfg.temperature = tau;
  cfg.ffn_ratio = 1;
  return cfg;
}

std::pair<std::vector<std::vector<std::size_t>>, std::vector<std::vector<std::size_t>>>
reversal_batch(const TrainConfig& config, std::uint64_t seed, std::size_t step) {
  auto rng = make_engine(mix_seed(seed, step));
  std::uniform_int_distribution<std::size_t> token(0, config.vocab - 1);
  std::vector<std::vector<std::size_t>> inputs(config.batch);
  std::vector<std::vector<std::size_t>> targets(config.batch);
  for (std::size_t b = 0; b < config.batch; ++b) {
    inputs[b].resize(config.seq_len);
    for (auto& t : inputs[b]) t = token(rng);
    targets[b].assign(inputs[b].rbegin(), inputs[b].rend());
  }
  return {inputs, targets};
}

Matrix sinusoidal_positions(std::size_t seq_len, std::size_t dim) {
  Matrix pe(seq_len, dim);
  for (std::size_t pos = 0; pos < seq_len; ++pos) {
    for (std::size_t j = 0; j < dim; ++j) {
      const double pair_index = static_cast<double>(j / 2);
      const double angle =
          static_cast<double>(pos) /
          std::pow(10000.0, 2.0 * pair_index / static_cast<double>(dim));
      pe(pos, j) = (j % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return pe;
}

Matrix embed(const std::vector<std::size_t>& tokens, const Matrix& table,
             const Matrix& positional) {
  if (tokens.size() != positional.rows() || table.cols() != positional.cols()) {
    throw std::invalid_argument("embed: shape mismatch");
  }
  Matrix x(tokens.size(), table.cols());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (tokens[i] >= table.rows()) throw std::out_of_range("embed: token id out of range");
    for (std::size_t j = 0; j < table.cols(); ++j) {
      x(i, j) = table(tokens[i], j) + positional(i, j);
    }
  }
  return x;
}

void sgd_step(Matrix& param, const Matrix& grad, double lr, double weight_decay) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols()) {
    throw std::invalid_argument("sgd_step: shape mismatch");
  }
  for (std::size_t k = 0; k < param.size(); ++k) {
    param.data()[k] -= lr * grad.data()[k] + lr * weight_decay * param.data()[k];
  }
}

double adam_step(Matrix& param, const Matrix& grad, Matrix& m, Matrix& v, std::size_t t,
                 double lr, double weight_decay, double beta1, double beta2, double eps) {
  if (param.rows() != grad.rows() || param.cols() != grad.cols() ||
      param.rows() != m.rows() || param.cols() != m.cols() || param.rows() != v.rows() ||
      param.cols() != v.cols()) {
    throw std::invalid_argument("adam_step: shape mismatch");
  }
  if (t == 0) throw std::invalid_argument("adam_step: step counter must start at 1");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  double eff_sum = 0.0;
  for (std::size_t k = 0; k < param.size(); ++k) {
    const double g = grad.data()[k];
    m.data()[k] = beta1 * m.data()[k] + (1.0 - beta1) * g;
    v.data()[k] = beta2 * v.data()[k] + (1.0 - beta2) * g * g;
    const double m_hat = m.data()[k] / bc1;
    const double v_hat = v.data()[k] / bc2;
    const double eff = lr / (std::sqrt(v_hat) + eps);
    eff_sum += eff;
    param.data()[k] -= eff * m_hat + lr * weight_decay * param.data()[k];
  }
  return eff_sum / static_cast<double>(param.size());
}

double temperature_schedule(std::size_t step, double tau_final, std::size_t warmup_steps) {
  if (warmup_steps == 0) return tau_final;
  const double ramp =
      static_cast<double>(std::max<std::size_t>(step, 1)) / static_cast<double>(warmup_steps);
  return tau_final * std::min(1.0, ramp);
}

namespace {

struct ToyModel {
  std::vector<BlockWeights> weights;
  Matrix embedding;
};

ToyModel init_toy_model(const TrainConfig& config) {
  ToyModel model;
  model.weights = init_weights(config.model_config(config.tau_final), mix_seed(config.seed, 1));
  model.embedding = Matrix(config.vocab, config.embed_dim);
  auto rng = make_engine(mix_seed(config.seed, 2));
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (double& e : model.embedding.data()) e = gauss(rng);
  return model;
}

std::vector<Matrix*> parameter_list(ToyModel& model) {
  std::vector<Matrix*> params;
  for (BlockWeights& w : model.weights) {
    params.push_back(&w.w_q);
    params.push_back(&w.w_k);
    params.push_back(&w.w_v);
    params.push_back(&w.w_f1);
    params.push_back(&w.w_f2);
  }
  params.push_back(&model.embedding);
  return params;
}

}  // namespace

std::vector<StepTelemetry> train(const TrainConfig& config) {
  config.validate();
  ToyModel model = init_toy_model(config);
  const std::uint64_t batch_seed = mix_seed(config.seed, 3);
  const Matrix pe = sinusoidal_positions(config.seq_len, config.embed_dim);
  const std::size_t depth = config.depth;

  std::vector<Matrix*> params = parameter_list(model);
  OptimizerState state;
  if (config.optimizer == Optimizer::adam) {
    for (const Matrix* p : params) {
      state.m.emplace_back(p->rows(), p->cols());
      state.v.emplace_back(p->rows(), p->cols());
    }
  }

  std::vector<StepTelemetry> history;
  history.reserve(config.max_steps);
  for (std::size_t step = 0; step < config.max_steps; ++step) {
    const double tau = temperature_schedule(step, config.tau_final, config.warmup_steps);
    const ModelConfig cfg = config.model_config(tau);
    const auto [inputs, targets_batch] = reversal_batch(config, batch_seed, step);

    std::vector<BlockGradients> grad_acc(depth);
    for (std::size_t l = 0; l < depth; ++l) {
      grad_acc[l].w_q = Matrix(model.weights[l].w_q.rows(), model.weights[l].w_q.cols());
      grad_acc[l].w_k = Matrix(model.weights[l].w_k.rows(), model.weights[l].w_k.cols());
      grad_acc[l].w_v = Matrix(model.weights[l].w_v.rows(), model.weights[l].w_v.cols());
      grad_acc[l].w_f1 = Matrix(model.weights[l].w_f1.rows(), model.weights[l].w_f1.cols());
      grad_acc[l].w_f2 = Matrix(model.weights[l].w_f2.rows(), model.weights[l].w_f2.cols());
    }
    Matrix embed_grad(config.vocab, config.embed_dim);
    double loss_sum = 0.0;
    std::size_t correct = 0;

    for (std::size_t b = 0; b < config.batch; ++b) {
      const std::vector<std::size_t>& tokens = inputs[b];
      const std::vector<std::size_t>& targets = targets_batch[b];
      const Matrix x0 = embed(tokens, model.embedding, pe);
      const ForwardTrace trace = model_forward(x0, model.weights, cfg);
      const Matrix logits = trace.output * model.embedding.transpose();
      auto [loss, dlogits] = cross_entropy_loss(logits, targets);
      loss_sum += loss;
      for (std::size_t i = 0; i < config.seq_len; ++i) {
        std::size_t best = 0;
        for (std::size_t c = 1; c < config.vocab; ++c) {
          if (logits(i, c) > logits(i, best)) best = c;
        }
        if (best == targets[i]) ++correct;
      }
      const Matrix upstream = dlogits * model.embedding;
      const GradientReport report = model_backward(trace, model.weights, cfg, upstream, loss);
      for (std::size_t l = 0; l < depth; ++l) {
        grad_acc[l].w_q += report.layers[l].w_q;
        grad_acc[l].w_k += report.layers[l].w_k;
        grad_acc[l].w_v += report.layers[l].w_v;
        grad_acc[l].w_f1 += report.layers[l].w_f1;
        grad_acc[l].w_f2 += report.layers[l].w_f2;
      }
      // Tied embedding: gradient flows through both the output projection
      // and the input lookup.
      Matrix proj_grad = dlogits.transpose() * trace.output;
      embed_grad += proj_grad;
      for (std::size_t i = 0; i < config.seq_len; ++i) {
        for (std::size_t j = 0; j < config.embed_dim; ++j) {
          embed_grad(tokens[i], j) += report.input_grad(i, j);
        }
      }
    }

    const double inv_batch = 1.0 / static_cast<double>(config.batch);
    for (std::size_t l = 0; l < depth; ++l) {
      grad_acc[l].w_q *= inv_batch;
      grad_acc[l].w_k *= inv_batch;
      grad_acc[l].w_v *= inv_batch;
      grad_acc[l].w_f1 *= inv_batch;
      grad_acc[l].w_f2 *= inv_batch;
    }
    embed_grad *= inv_batch;

    StepTelemetry row;
    row.step = step;
    row.loss = loss_sum * inv_batch;
    row.accuracy = static_cast<double>(correct) /
                   static_cast<double>(config.batch * config.seq_len);
    row.tau = tau;
    if (!std::isfinite(row.loss)) {
      throw std::runtime_error("train: loss diverged at step " + std::to_string(step));
    }
    for (std::size_t l = 0; l < depth; ++l) {
      row.grad_norm[0] += grad_acc[l].w_q.frobenius_sq();
      row.grad_norm[1] += grad_acc[l].w_k.frobenius_sq();
      row.grad_norm[2] += grad_acc[l].w_v.frobenius_sq();
      row.grad_norm[3] += grad_acc[l].w_f1.frobenius_sq();
      row.grad_norm[4] += grad_acc[l].w_f2.frobenius_sq();
    }
    for (double& g : row.grad_norm) g = std::sqrt(g);

    std::vector<const Matrix*> grads;
    for (std::size_t l = 0; l < depth; ++l) {
      grads.push_back(&grad_acc[l].w_q);
      grads.push_back(&grad_acc[l].w_k);
      grads.push_back(&grad_acc[l].w_v);
      grads.push_back(&grad_acc[l].w_f1);
      grads.push_back(&grad_acc[l].w_f2);
    }
    grads.push_back(&embed_grad);

    if (config.optimizer == Optimizer::adam) {
      ++state.t;
      std::array<double, 5> eff_sum{};
      for (std::size_t p = 0; p < params.size(); ++p) {
        const double eff =
            adam_step(*params[p], *grads[p], state.m[p], state.v[p], state.t, config.lr,
                      config.weight_decay, config.beta1, config.beta2, config.eps);
        if (p < depth * 5) eff_sum[p % 5] += eff;
      }
      for (std::size_t g = 0; g < 5; ++g) row.eff_lr[g] = eff_sum[g] / static_cast<double>(depth);
    } else {
      for (std::size_t p = 0; p < params.size(); ++p) {
        sgd_step(*params[p], *grads[p], config.lr, config.weight_decay);
      }
      row.eff_lr.fill(config.lr);
    }
    history.push_back(row);
    if (row.accuracy >= config.stop_accuracy) break;
  }
  return history;
}

}  // namespace sigprop
