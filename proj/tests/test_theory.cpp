#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>

#include "sigprop/config.hpp"
#include "sigprop/kronecalc.hpp"
#include "sigprop/matrix.hpp"
#include "sigprop/theory.hpp"

using namespace sigprop;

namespace {

ModelConfig mean_field_config(std::size_t n, std::size_t d_v, std::size_t depth, Residual r) {
  ModelConfig c;
  c.depth = depth;
  c.seq_len = n;
  c.d_v = d_v;
  c.d_k = d_v;
  c.attention = AttentionMode::uniform;
  c.residual = r;
  return c;
}

}  // namespace

TEST_CASE("input spec validation") {
  CHECK_THROWS_AS((CorrelatedInputSpec{0, 2, 1.0, 0.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((CorrelatedInputSpec{2, 2, 0.0, 0.0}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((CorrelatedInputSpec{2, 2, 1.0, -0.1}.validate()), std::invalid_argument);
  CHECK_THROWS_AS((CorrelatedInputSpec{2, 2, 1.0, 1.1}.validate()), std::invalid_argument);
  CHECK_NOTHROW((CorrelatedInputSpec{2, 2, 1.0, 1.0}.validate()));
}

TEST_CASE("value gradient expectation on identity tokens") {
  // X = I_2: mean token (1/2, 1/2), so d_v * n * ||x_bar||^2 = d_v
  Matrix x = Matrix::identity(2);
  CHECK(expected_grad_value_norm(x, 2) == doctest::Approx(2.0));
  CHECK(expected_grad_value_norm(x, 7) == doctest::Approx(7.0));
  // mean-free tokens kill the expectation entirely
  Matrix opposed = Matrix::from_rows({{1.0, -2.0}, {-1.0, 2.0}});
  CHECK(expected_grad_value_norm(opposed, 5) == doctest::Approx(0.0));
}

TEST_CASE("conditional query gradient expectation on identity tokens") {
  // ||I_2||^2 = 2, ||I^T L I||^2 = ||L||^2 = 1, so the product
  // tau^2 sv sk d_v / n^2 * 2 * 1 = 1 * .25 * 2 / 4 * 2 = 0.25
  Matrix x = Matrix::identity(2);
  CHECK(expected_grad_query_norm_conditional(x, 0.5, 0.5, 2, 2, 1.0) == doctest::Approx(0.25));
  // quadratic in temperature
  CHECK(expected_grad_query_norm_conditional(x, 0.5, 0.5, 2, 2, 2.0) == doctest::Approx(1.0));
  // d_k does not enter
  CHECK(expected_grad_query_norm_conditional(x, 0.5, 0.5, 2, 99, 1.0) == doctest::Approx(0.25));
}

TEST_CASE("input gradient bound on identity tokens") {
  // 8 * 1 * 2 * 2 / 2 * 1 + 2 * 4 * 1 = 24
  Matrix x = Matrix::identity(2);
  CHECK(expected_grad_input_bound(x, 1.0, 1.0, 1.0, 2, 2, 2) == doctest::Approx(24.0));
}

TEST_CASE("constant-correlation gradient moments, arithmetic anchors") {
  CHECK(theory_grad_value_constant_rho({2, 2, 1.0, 0.0}) == doctest::Approx(4.0));
  CHECK(theory_grad_value_constant_rho({3, 2, 1.0, 1.0}) == doctest::Approx(12.0));
  CHECK(theory_grad_query_constant_rho({2, 2, 1.0, 0.0}) == doctest::Approx(4.0));
  CHECK(theory_grad_query_constant_rho({4, 8, 1.0, 1.0}) == doctest::Approx(0.0));
}

TEST_CASE("value gradient grows and query gradient shrinks with correlation") {
  double prev_v = -1.0, prev_q = 1e300;
  for (double rho : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    CorrelatedInputSpec spec{4, 8, 1.0, rho};
    const double v = theory_grad_value_constant_rho(spec);
    const double q = theory_grad_query_constant_rho(spec);
    CHECK(v > prev_v);
    CHECK(q < prev_q);
    prev_v = v;
    prev_q = q;
  }
}

TEST_CASE("centered gram expectation agrees with the brute-force pairing sum") {
  for (std::size_t n : {2, 3}) {
    for (std::size_t d : {2, 3}) {
      for (double rho : {0.0, 0.3, 0.75}) {
        CorrelatedInputSpec spec{n, d, 1.3, rho};
        const double closed = centered_gram_expectation_exact(spec);
        const double brute = isserlis_brute_force(spec);
        CHECK(std::abs(closed - brute) / brute < 1e-10);
      }
    }
  }
  // perfectly correlated tokens are killed by centering
  CHECK(centered_gram_expectation_exact({3, 3, 2.0, 1.0}) == doctest::Approx(0.0));
  CHECK(isserlis_brute_force({3, 3, 2.0, 1.0}) == doctest::Approx(0.0));
  CHECK_THROWS_AS(isserlis_brute_force({4, 2, 1.0, 0.0}), std::invalid_argument);
  CHECK_THROWS_AS(isserlis_brute_force({2, 4, 1.0, 0.0}), std::invalid_argument);
}

TEST_CASE("gradient-matching temperature") {
  // n = 20, d = 16, rho = 0: value moment 256, query moment 547.2
  CorrelatedInputSpec spec{20, 16, 1.0, 0.0};
  CHECK(theory_grad_value_constant_rho(spec) == doctest::Approx(256.0));
  CHECK(theory_grad_query_constant_rho(spec) == doctest::Approx(547.2));
  CHECK(temperature_matching_gradients(spec) ==
        doctest::Approx(std::sqrt(256.0 / 547.2)).epsilon(1e-12));
  CHECK_THROWS_AS(temperature_matching_gradients({4, 8, 1.0, 1.0}), std::domain_error);
}

TEST_CASE("token-sum second moment geometric growth") {
  ModelConfig cfg = mean_field_config(4, 8, 3, Residual::constant(1.0, 1.0));
  PropagationSeries s = propagate_c(2.0, cfg);
  REQUIRE(s.per_layer.size() == 4);
  // per block: (a1^2 + 1)(a2^2 + 1) = 4
  CHECK(s.per_layer[0] == doctest::Approx(2.0));
  CHECK(s.per_layer[1] == doctest::Approx(8.0));
  CHECK(s.per_layer[2] == doctest::Approx(32.0));
  CHECK(s.per_layer[3] == doctest::Approx(128.0));
  CHECK_FALSE(s.limit.has_value());
}

TEST_CASE("depth-scaled token-sum series approaches its limit") {
  ModelConfig cfg = mean_field_config(4, 8, 4096, Residual::depth_scaled(0.5, 0.3));
  PropagationSeries s = propagate_c(3.0, cfg);
  REQUIRE(s.limit.has_value());
  CHECK(*s.limit == doctest::Approx(std::exp(0.8) * 3.0).epsilon(1e-12));
  CHECK(s.per_layer.back() == doctest::Approx(*s.limit).epsilon(1e-3));
  // finite depth always undershoots the exponential
  CHECK(s.per_layer.back() < *s.limit);
}

TEST_CASE("norm recursion, single step by hand") {
  // one block: attention adds a1^2 n ||x_bar||^2, ffn multiplies by a2^2 + 1
  ModelConfig cfg = mean_field_config(4, 8, 1, Residual::constant(0.7, 0.4));
  const double f0 = 5.0, mean_sq = 0.25;
  PropagationSeries s = propagate_norm(f0, mean_sq, cfg);
  REQUIRE(s.per_layer.size() == 2);
  CHECK(s.per_layer[0] == doctest::Approx(f0));
  const double expected = (0.4 * 0.4 + 1.0) * (4.0 * 0.7 * 0.7 * 0.25 + 5.0);
  CHECK(s.per_layer[1] == doctest::Approx(expected).epsilon(1e-12));
}

TEST_CASE("depth-scaled norm series approaches its limit") {
  ModelConfig cfg = mean_field_config(4, 8, 4096, Residual::depth_scaled(0.5, 0.3));
  PropagationSeries s = propagate_norm(5.0, 0.25, cfg);
  REQUIRE(s.limit.has_value());
  const double e1 = std::exp(0.5), e2 = std::exp(0.3);
  CHECK(*s.limit == doctest::Approx(4.0 * e2 * (e1 - 1.0) * 0.25 + e2 * 5.0).epsilon(1e-12));
  CHECK(s.per_layer.back() == doctest::Approx(*s.limit).epsilon(1e-3));
}

TEST_CASE("mean-field preconditions are enforced") {
  ModelConfig cfg = mean_field_config(4, 8, 2, Residual::constant(1.0, 1.0));
  ModelConfig bad = cfg;
  bad.activation = Activation::relu;
  CHECK_THROWS_AS(propagate_c(1.0, bad), std::invalid_argument);
  bad = cfg;
  bad.attention = AttentionMode::softmax;
  CHECK_THROWS_AS(propagate_c(1.0, bad), std::invalid_argument);
  bad = cfg;
  bad.norm = NormPlacement::pre;
  CHECK_THROWS_AS(propagate_norm(1.0, 0.1, bad), std::invalid_argument);
  bad = cfg;
  bad.ffn_ratio = 2;
  CHECK_THROWS_AS(propagate_c(1.0, bad), std::invalid_argument);
}

TEST_CASE("correlation prediction on orthonormal tokens") {
  // X = I_4: every cross-token inner product is zero, so layer 0 sits at rho = 0
  Matrix x = Matrix::identity(4);
  ModelConfig cfg = mean_field_config(4, 4, 64, Residual::depth_scaled(1.0, 0.7));
  PropagationPrediction pred = predicted_correlation(x, cfg);
  REQUIRE(pred.rho.per_layer.size() == 65);
  CHECK(pred.rho.per_layer[0] == doctest::Approx(0.0));
  // c0 = 4, f0 = 4: limit = 16 e / (12 e + 36) - 1/3
  const double e = std::exp(1.0);
  REQUIRE(pred.rho.limit.has_value());
  CHECK(*pred.rho.limit ==
        doctest::Approx(16.0 * e / (12.0 * e + 36.0) - 1.0 / 3.0).epsilon(1e-12));
  // correlations increase toward the limit and never overshoot it
  for (std::size_t l = 1; l <= 64; ++l) {
    CHECK(pred.rho.per_layer[l] > pred.rho.per_layer[l - 1]);
    CHECK(pred.rho.per_layer[l] < *pred.rho.limit);
  }
  // the per-layer entries are consistent with the c and norm series
  for (std::size_t l = 0; l <= 64; ++l) {
    const double direct = pred.c.per_layer[l] / (3.0 * pred.norm.per_layer[l]) - 1.0 / 3.0;
    CHECK(pred.rho.per_layer[l] == doctest::Approx(direct).epsilon(1e-12));
  }
}

TEST_CASE("constant residual correlation limits") {
  Matrix x = Matrix::identity(4);
  ModelConfig grow = mean_field_config(4, 4, 8, Residual::constant(1.0, 1.0));
  PropagationPrediction pred = predicted_correlation(x, grow);
  REQUIRE(pred.rho.limit.has_value());
  CHECK(*pred.rho.limit == doctest::Approx(1.0));
  ModelConfig frozen = mean_field_config(4, 4, 8, Residual::constant(0.0, 0.6));
  PropagationPrediction flat = predicted_correlation(x, frozen);
  CHECK(*flat.rho.limit == doctest::Approx(flat.rho.per_layer.front()));
  // with no attention branch the correlation never moves
  for (double r : flat.rho.per_layer) CHECK(r == doctest::Approx(0.0));
}

TEST_CASE("correlation prediction input guards") {
  ModelConfig cfg = mean_field_config(4, 4, 2, Residual::constant(1.0, 1.0));
  CHECK_THROWS_AS(predicted_correlation(Matrix::identity(3), cfg), std::invalid_argument);
  Matrix unequal = Matrix::from_rows(
      {{1, 0, 0, 0}, {0, 2, 0, 0}, {0, 0, 1, 0}, {0, 0, 0, 1}});
  CHECK_THROWS_AS(predicted_correlation(unequal, cfg), std::invalid_argument);
  ModelConfig tiny = mean_field_config(1, 4, 2, Residual::constant(1.0, 1.0));
  CHECK_THROWS_AS(predicted_correlation(sequence_stats(Matrix::ones(1, 4)), tiny),
                  std::invalid_argument);
}

TEST_CASE("logit second moment factorizes over row norms") {
  Matrix x = Matrix::from_rows({{1, 2}, {3, 4}});
  // sigma_k^4 ||x_0||^2 ||x_1||^2 = 4 * 5 * 25
  CHECK(logits_second_moment(x, 2.0, 0, 1) == doctest::Approx(500.0));
  CHECK(logits_second_moment(x, 2.0, 1, 1) == doctest::Approx(4.0 * 625.0));
  CHECK_THROWS_AS(logits_second_moment(x, 1.0, 2, 0), std::out_of_range);
}
