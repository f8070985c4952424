#include "sigprop/mc.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <stdexcept>
#include <string>
#include <thread>

#include "sigprop/backward.hpp"
#include "sigprop/forward.hpp"
#include "sigprop/weights.hpp"

namespace sigprop {

namespace {

struct KahanAccumulator {
  double sum = 0.0;
  double comp = 0.0;

  void add(double v) {
    const double y = v - comp;
    const double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

std::size_t resolve_workers(std::size_t workers, std::size_t n_samples) {
  if (workers == 0) {
    const unsigned hw = std::thread::hardware_concurrency();
    workers = hw == 0 ? 1 : hw;
  }
  return std::min(workers, n_samples);
}

// Deterministic parallel map: replica i always receives mix_seed(master, i),
// and the caller reduces the results vector in index order.
std::vector<std::vector<double>> run_replicas(
    const std::function<std::vector<double>(std::uint64_t)>& statistic, std::size_t n_samples,
    std::uint64_t master_seed, std::size_t workers) {
  std::vector<std::vector<double>> results(n_samples);
  workers = resolve_workers(workers, n_samples);
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&]() {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= n_samples) return;
      try {
        results[i] = statistic(mix_seed(master_seed, i));
      } catch (...) {
        std::lock_guard<std::mutex> lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        return;
      }
    }
  };
  if (workers <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  for (std::size_t i = 0; i < n_samples; ++i) {
    for (double v : results[i]) {
      if (!std::isfinite(v)) {
        throw std::runtime_error("estimate: non-finite statistic at replica " + std::to_string(i));
      }
    }
  }
  return results;
}

EstimatorResult reduce_component(const std::vector<std::vector<double>>& results,
                                 std::size_t component, std::uint64_t master_seed) {
  const std::size_t n = results.size();
  KahanAccumulator acc;
  for (std::size_t i = 0; i < n; ++i) acc.add(results[i][component]);
  const double mean = acc.sum / static_cast<double>(n);
  KahanAccumulator sq;
  for (std::size_t i = 0; i < n; ++i) {
    const double d = results[i][component] - mean;
    sq.add(d * d);
  }
  const double var = sq.sum / static_cast<double>(n - 1);
  EstimatorResult r;
  r.mean = mean;
  r.std_err = std::sqrt(var / static_cast<double>(n));
  r.n_samples = n;
  r.master_seed = master_seed;
  return r;
}

}  // namespace

Matrix sample_correlated_tokens(const CorrelatedInputSpec& spec, std::uint64_t seed) {
  spec.validate();
  auto rng = make_engine(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> z(spec.d);
  for (double& v : z) v = gauss(rng);
  const double sigma = std::sqrt(spec.sigma_x_sq);
  const double w_shared = std::sqrt(spec.rho);
  const double w_own = std::sqrt(1.0 - spec.rho);
  Matrix x(spec.n, spec.d);
  for (std::size_t i = 0; i < spec.n; ++i) {
    for (std::size_t j = 0; j < spec.d; ++j) {
      x(i, j) = sigma * (w_shared * z[j] + w_own * gauss(rng));
    }
  }
  return x;
}

Matrix rank_one_input(const std::vector<double>& x_vec, std::size_t n) {
  if (x_vec.empty() || n == 0) throw std::invalid_argument("rank_one_input: empty input");
  Matrix x(n, x_vec.size());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < x_vec.size(); ++j) x(i, j) = x_vec[j];
  }
  return x;
}

EstimatorResult estimate(const std::function<double(std::uint64_t)>& statistic,
                         std::size_t n_samples, std::uint64_t master_seed, std::size_t workers) {
  auto wrapped = [&statistic](std::uint64_t seed) { return std::vector<double>{statistic(seed)}; };
  return estimate_many(wrapped, n_samples, master_seed, workers).front();
}

std::vector<EstimatorResult> estimate_many(
    const std::function<std::vector<double>(std::uint64_t)>& statistic, std::size_t n_samples,
    std::uint64_t master_seed, std::size_t workers) {
  if (n_samples < 2) throw std::invalid_argument("estimate: n_samples must be at least 2");
  const auto results = run_replicas(statistic, n_samples, master_seed, workers);
  const std::size_t dim = results.front().size();
  for (const auto& r : results) {
    if (r.size() != dim) throw std::logic_error("estimate: replicas returned differing dimensions");
  }
  if (dim == 0) throw std::logic_error("estimate: statistic returned no components");
  std::vector<EstimatorResult> out;
  out.reserve(dim);
  for (std::size_t c = 0; c < dim; ++c) out.push_back(reduce_component(results, c, master_seed));
  return out;
}

DecayFit validate_uniform_attention(std::size_t n, std::size_t d_v,
                                    const std::vector<std::size_t>& dk_grid, std::size_t reps,
                                    std::uint64_t seed, QKInit init) {
  if (dk_grid.size() < 2) throw std::invalid_argument("validate_uniform_attention: need >= 2 grid points");
  for (std::size_t i = 1; i < dk_grid.size(); ++i) {
    if (dk_grid[i] <= dk_grid[i - 1]) {
      throw std::invalid_argument("validate_uniform_attention: grid must be strictly increasing");
    }
  }
  if (dk_grid.back() < 10 * dk_grid.front()) {
    throw std::invalid_argument("validate_uniform_attention: grid must span at least one decade");
  }

  // Fixed input with entries N(0, 1/d_v): rows near unit norm keep the logits
  // in the small-deviation regime the decay law describes.
  Matrix x(n, d_v);
  {
    auto rng = make_engine(mix_seed(seed, 0));
    std::normal_distribution<double> gauss(0.0, std::sqrt(1.0 / static_cast<double>(d_v)));
    for (double& v : x.data()) v = gauss(rng);
  }

  DecayFit fit;
  fit.dk_grid = dk_grid;
  const double inv_nsq = 1.0 / (static_cast<double>(n) * static_cast<double>(n));
  const double uniform_entry = 1.0 / static_cast<double>(n);
  for (std::size_t gi = 0; gi < dk_grid.size(); ++gi) {
    const std::size_t d_k = dk_grid[gi];
    const double variance = (init == QKInit::xavier)
                                ? 1.0 / static_cast<double>(d_k)
                                : 2.0 / static_cast<double>(d_v + d_k);
    auto statistic = [&, d_k, variance](std::uint64_t rep_seed) {
      auto rng = make_engine(rep_seed);
      std::normal_distribution<double> gauss(0.0, std::sqrt(variance));
      ModelConfig cfg;
      cfg.seq_len = n;
      cfg.d_v = d_v;
      cfg.d_k = d_k;
      BlockWeights w;
      w.w_q = Matrix(d_v, d_k);
      w.w_k = Matrix(d_v, d_k);
      for (double& v : w.w_q.data()) v = gauss(rng);
      for (double& v : w.w_k.data()) v = gauss(rng);
      auto [a, m] = attention_matrix(x, w, cfg);
      double dev = 0.0;
      for (double v : a.data()) {
        const double c = v - uniform_entry;
        dev += c * c;
      }
      return inv_nsq * dev;
    };
    EstimatorResult res = estimate(statistic, reps, mix_seed(seed, gi + 1));
    fit.mean_sq_deviation.push_back(res.mean);
    fit.std_err.push_back(res.std_err);
  }

  // Least squares of log(mean deviation) on log(d_k).
  const std::size_t g = dk_grid.size();
  double sx = 0.0, sy = 0.0;
  std::vector<double> lx(g), ly(g);
  for (std::size_t i = 0; i < g; ++i) {
    lx[i] = std::log(static_cast<double>(dk_grid[i]));
    ly[i] = std::log(fit.mean_sq_deviation[i]);
    sx += lx[i];
    sy += ly[i];
  }
  const double mx = sx / static_cast<double>(g);
  const double my = sy / static_cast<double>(g);
  double sxx = 0.0, sxy = 0.0;
  for (std::size_t i = 0; i < g; ++i) {
    sxx += (lx[i] - mx) * (lx[i] - mx);
    sxy += (lx[i] - mx) * (ly[i] - my);
  }
  fit.slope = sxy / sxx;
  fit.intercept = my - fit.slope * mx;
  return fit;
}

DepthProfile empirical_grad_depth_profile(const ModelConfig& config,
                                          const CorrelatedInputSpec& spec, std::size_t n_samples,
                                          std::uint64_t seed, std::size_t workers) {
  config.validate();
  spec.validate();
  if (config.seq_len != spec.n || config.d_v != spec.d) {
    throw std::invalid_argument("empirical_grad_depth_profile: config/spec shape mismatch");
  }
  if (config.seq_len < 2) {
    throw std::invalid_argument("empirical_grad_depth_profile: needs at least two tokens");
  }
  Matrix target(config.seq_len, config.d_v);
  {
    auto rng = make_engine(mix_seed(seed, n_samples));
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (double& v : target.data()) v = gauss(rng);
  }
  const std::size_t depth = config.depth;
  auto statistic = [&](std::uint64_t rep_seed) {
    const Matrix x = sample_correlated_tokens(spec, mix_seed(rep_seed, 1));
    const auto weights = init_weights(config, mix_seed(rep_seed, 2));
    const ForwardTrace trace = model_forward(x, weights, config);
    auto [loss, grad] = mse_loss(trace.output, target);
    const GradientReport report = model_backward(trace, weights, config, grad, loss);
    std::vector<double> components;
    components.reserve(depth * 5 + depth + 1);
    for (std::size_t l = 0; l < depth; ++l) {
      for (const char* group : GradientReport::kGroups) {
        components.push_back(std::sqrt(report.frob_sq(l, group)));
      }
    }
    for (std::size_t l = 0; l <= depth; ++l) {
      components.push_back(trace.stats[l].avg_cosine.value());
    }
    return components;
  };
  const auto flat = estimate_many(statistic, n_samples, seed, workers);
  DepthProfile profile;
  profile.grad_norms.resize(depth);
  std::size_t idx = 0;
  for (std::size_t l = 0; l < depth; ++l) {
    profile.grad_norms[l].assign(flat.begin() + idx, flat.begin() + idx + 5);
    idx += 5;
  }
  profile.avg_cosine.assign(flat.begin() + idx, flat.end());
  return profile;
}

CorrelationEstimate correlation_profile(const Matrix& x0, const ModelConfig& config,
                                        std::size_t n_samples, std::size_t n_batches,
                                        std::uint64_t seed, std::size_t workers) {
  config.validate();
  if (config.seq_len < 2) throw std::invalid_argument("correlation_profile: needs at least two tokens");
  if (n_batches < 2 || n_samples < 2 * n_batches) {
    throw std::invalid_argument("correlation_profile: need >= 2 batches with >= 2 replicas each");
  }
  const std::size_t n = config.seq_len;
  const std::size_t layers = config.depth + 1;
  // Each replica reports the full per-layer token Gram matrices.
  auto statistic = [&](std::uint64_t rep_seed) {
    const auto weights = init_weights(config, rep_seed);
    const ForwardTrace trace = model_forward(x0, weights, config);
    std::vector<double> grams;
    grams.reserve(layers * n * n);
    auto push_gram = [&grams, n](const Matrix& x) {
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t k2 = 0; k2 < n; ++k2) grams.push_back(x.row_dot(k, k2));
    };
    push_gram(x0);
    for (const LayerCache& cache : trace.layers) push_gram(cache.x_out);
    return grams;
  };
  const auto results = run_replicas(statistic, n_samples, seed, workers);

  auto rho_from_mean_gram = [n](const std::vector<double>& gram, std::size_t offset) {
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t k = 0; k < n; ++k) {
      for (std::size_t k2 = 0; k2 < n; ++k2) {
        if (k == k2) continue;
        const double denom =
            std::sqrt(gram[offset + k * n + k] * gram[offset + k2 * n + k2]);
        acc += gram[offset + k * n + k2] / denom;
        ++pairs;
      }
    }
    return acc / static_cast<double>(pairs);
  };

  const std::size_t dim = layers * n * n;
  CorrelationEstimate est;
  est.rho.resize(layers);
  est.std_err.resize(layers);
  // Batch means over contiguous replica-index ranges keep the estimate
  // independent of worker scheduling.
  std::vector<std::vector<double>> batch_gram(n_batches, std::vector<double>(dim, 0.0));
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t lo = b * n_samples / n_batches;
    const std::size_t hi = (b + 1) * n_samples / n_batches;
    for (std::size_t c = 0; c < dim; ++c) {
      KahanAccumulator acc;
      for (std::size_t i = lo; i < hi; ++i) acc.add(results[i][c]);
      batch_gram[b][c] = acc.sum / static_cast<double>(hi - lo);
    }
  }
  std::vector<double> full_gram(dim, 0.0);
  for (std::size_t c = 0; c < dim; ++c) {
    KahanAccumulator acc;
    for (std::size_t i = 0; i < n_samples; ++i) acc.add(results[i][c]);
    full_gram[c] = acc.sum / static_cast<double>(n_samples);
  }
  for (std::size_t l = 0; l < layers; ++l) {
    const std::size_t offset = l * n * n;
    est.rho[l] = rho_from_mean_gram(full_gram, offset);
    double mean_b = 0.0;
    std::vector<double> rho_b(n_batches);
    for (std::size_t b = 0; b < n_batches; ++b) {
      rho_b[b] = rho_from_mean_gram(batch_gram[b], offset);
      mean_b += rho_b[b];
    }
    mean_b /= static_cast<double>(n_batches);
    double var = 0.0;
    for (double r : rho_b) var += (r - mean_b) * (r - mean_b);
    var /= static_cast<double>(n_batches - 1);
    est.std_err[l] = std::sqrt(var / static_cast<double>(n_batches));
  }
  return est;
}

}  // namespace sigprop
