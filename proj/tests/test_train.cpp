#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>

#include "sigprop/config.hpp"
#include "sigprop/matrix.hpp"
#include "sigprop/train.hpp"

using namespace sigprop;

namespace {

bool bit_equal(double a, double b) { return std::memcmp(&a, &b, sizeof(double)) == 0; }

TrainConfig tiny_config() {
  TrainConfig c;
  c.seq_len = 4;
  c.vocab = 4;
  c.embed_dim = 6;
  c.depth = 1;
  c.lr = 0.01;
  c.tau_final = 1.0;
  c.warmup_steps = 10;
  c.max_steps = 3;
  c.batch = 4;
  c.seed = 77;
  return c;
}

}  // namespace

TEST_CASE("train config validation") {
  TrainConfig c = tiny_config();
  CHECK_NOTHROW(c.validate());
  c.lr = 0.0;
  CHECK_NOTHROW(c.validate());
  c.lr = -0.1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.vocab = 1;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.beta1 = 1.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.tau_final = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.eps = 0.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.batch = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("train config maps onto the encoder") {
  TrainConfig c = tiny_config();
  ModelConfig m = c.model_config(0.25);
  CHECK(m.depth == 1);
  CHECK(m.seq_len == 4);
  CHECK(m.d_v == 6);
  CHECK(m.d_k == 6);
  CHECK(m.temperature == 0.25);
  CHECK(m.activation == Activation::relu);
  CHECK(m.attention == AttentionMode::softmax);
  CHECK(m.norm == NormPlacement::post);
}

TEST_CASE("reversal batches reverse their inputs") {
  TrainConfig c = tiny_config();
  c.batch = 8;
  auto [inputs, targets] = reversal_batch(c, 5, 2);
  REQUIRE(inputs.size() == 8);
  REQUIRE(targets.size() == 8);
  for (std::size_t b = 0; b < 8; ++b) {
    REQUIRE(inputs[b].size() == 4);
    REQUIRE(targets[b].size() == 4);
    for (std::size_t i = 0; i < 4; ++i) {
      CHECK(inputs[b][i] < 4);
      CHECK(targets[b][i] == inputs[b][3 - i]);
    }
  }
  auto [again, again_t] = reversal_batch(c, 5, 2);
  CHECK(again == inputs);
  auto [next, next_t] = reversal_batch(c, 5, 3);
  CHECK(next != inputs);
}

TEST_CASE("sinusoidal positions, first columns by hand") {
  Matrix pe = sinusoidal_positions(4, 4);
  // position 0: sines vanish, cosines are 1
  CHECK(pe(0, 0) == doctest::Approx(0.0));
  CHECK(pe(0, 1) == doctest::Approx(1.0));
  CHECK(pe(0, 2) == doctest::Approx(0.0));
  CHECK(pe(0, 3) == doctest::Approx(1.0));
  // first pair uses wavelength 1, second pair 10000^(2/4) = 100
  CHECK(pe(1, 0) == doctest::Approx(std::sin(1.0)));
  CHECK(pe(1, 1) == doctest::Approx(std::cos(1.0)));
  CHECK(pe(2, 2) == doctest::Approx(std::sin(0.02)));
  CHECK(pe(3, 3) == doctest::Approx(std::cos(0.03)));
}

TEST_CASE("embedding adds token rows to position rows") {
  Matrix table = Matrix::from_rows({{1, 2}, {10, 20}, {100, 200}});
  Matrix pe = Matrix::from_rows({{0.1, 0.2}, {0.3, 0.4}});
  Matrix x = embed({2, 0}, table, pe);
  CHECK(x(0, 0) == doctest::Approx(100.1));
  CHECK(x(0, 1) == doctest::Approx(200.2));
  CHECK(x(1, 0) == doctest::Approx(1.3));
  CHECK(x(1, 1) == doctest::Approx(2.4));
  CHECK_THROWS_AS(embed({0}, table, pe), std::invalid_argument);
  CHECK_THROWS_AS(embed({3, 0}, table, pe), std::out_of_range);
}

TEST_CASE("sgd step with and without decay") {
  Matrix p = Matrix::from_rows({{1.0, 2.0}});
  Matrix g = Matrix::from_rows({{0.5, -1.0}});
  sgd_step(p, g, 0.1, 0.0);
  CHECK(p(0, 0) == doctest::Approx(0.95));
  CHECK(p(0, 1) == doctest::Approx(2.1));
  p = Matrix::from_rows({{1.0, 2.0}});
  sgd_step(p, g, 0.1, 0.5);
  CHECK(p(0, 0) == doctest::Approx(0.9));
  CHECK(p(0, 1) == doctest::Approx(2.0));
  CHECK_THROWS_AS(sgd_step(p, Matrix::ones(2, 2), 0.1, 0.0), std::invalid_argument);
}

TEST_CASE("adam step against the update rule written out") {
  Matrix p = Matrix::from_rows({{1.0}});
  Matrix g = Matrix::from_rows({{2.0}});
  Matrix m(1, 1), v(1, 1);
  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;

  double eff = adam_step(p, g, m, v, 1, lr, 0.0, b1, b2, eps);
  // t = 1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
  CHECK(m(0, 0) == doctest::Approx(0.2));
  CHECK(v(0, 0) == doctest::Approx(0.004));
  CHECK(eff == doctest::Approx(lr / (2.0 + eps)).epsilon(1e-14));
  CHECK(p(0, 0) == doctest::Approx(1.0 - lr * 2.0 / (2.0 + eps)).epsilon(1e-14));

  Matrix g2 = Matrix::from_rows({{1.0}});
  const double p_before = p(0, 0);
  eff = adam_step(p, g2, m, v, 2, lr, 0.0, b1, b2, eps);
  const double m2 = 0.9 * 0.2 + 0.1 * 1.0;
  const double v2 = 0.999 * 0.004 + 0.001 * 1.0;
  const double m_hat = m2 / (1.0 - 0.81);
  const double v_hat = v2 / (1.0 - 0.999 * 0.999);
  CHECK(m(0, 0) == doctest::Approx(m2).epsilon(1e-14));
  CHECK(v(0, 0) == doctest::Approx(v2).epsilon(1e-14));
  CHECK(eff == doctest::Approx(lr / (std::sqrt(v_hat) + eps)).epsilon(1e-12));
  CHECK(p(0, 0) ==
        doctest::Approx(p_before - lr * m_hat / (std::sqrt(v_hat) + eps)).epsilon(1e-12));

  CHECK_THROWS_AS(adam_step(p, g2, m, v, 0, lr, 0.0, b1, b2, eps), std::invalid_argument);
}

TEST_CASE("decoupled decay shrinks parameters independently of the moments") {
  Matrix p = Matrix::from_rows({{4.0}});
  Matrix g(1, 1);  // zero gradient
  Matrix m(1, 1), v(1, 1);
  adam_step(p, g, m, v, 1, 0.1, 0.5, 0.9, 0.999, 1e-8);
  // no gradient signal: only the decay term lr * wd * p acts
  CHECK(p(0, 0) == doctest::Approx(4.0 - 0.1 * 0.5 * 4.0).epsilon(1e-12));
}

TEST_CASE("temperature warm-up ramps from the first step") {
  CHECK(temperature_schedule(0, 2.0, 1000) == doctest::Approx(0.002));
  CHECK(temperature_schedule(1, 2.0, 1000) == doctest::Approx(0.002));
  CHECK(temperature_schedule(500, 2.0, 1000) == doctest::Approx(1.0));
  CHECK(temperature_schedule(1000, 2.0, 1000) == doctest::Approx(2.0));
  CHECK(temperature_schedule(5000, 2.0, 1000) == doctest::Approx(2.0));
  CHECK(temperature_schedule(0, 2.0, 0) == doctest::Approx(2.0));
  for (std::size_t s = 1; s < 50; ++s) {
    CHECK(temperature_schedule(s, 1.5, 40) >= temperature_schedule(s - 1, 1.5, 40));
  }
}

TEST_CASE("training runs are bit-reproducible") {
  TrainConfig c = tiny_config();
  auto first = train(c);
  auto second = train(c);
  REQUIRE(first.size() == 3);
  REQUIRE(second.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    CHECK(first[s].step == s);
    CHECK(bit_equal(first[s].loss, second[s].loss));
    CHECK(bit_equal(first[s].accuracy, second[s].accuracy));
    CHECK(bit_equal(first[s].tau, second[s].tau));
    for (std::size_t gi = 0; gi < 5; ++gi) {
      CHECK(bit_equal(first[s].grad_norm[gi], second[s].grad_norm[gi]));
      CHECK(bit_equal(first[s].eff_lr[gi], second[s].eff_lr[gi]));
    }
  }
  // the first step sees real gradients everywhere
  for (double gnorm : first[0].grad_norm) CHECK(gnorm > 0.0);
}

TEST_CASE("zero learning rate freezes the model for both optimizers") {
  TrainConfig c = tiny_config();
  c.lr = 0.0;
  c.optimizer = Optimizer::sgd;
  auto frozen_sgd = train(c);
  c.optimizer = Optimizer::adam;
  auto frozen_adam = train(c);
  REQUIRE(frozen_sgd.size() == 3);
  REQUIRE(frozen_adam.size() == 3);
  for (std::size_t s = 0; s < 3; ++s) {
    // weights never move, so the two optimizers see the same batches and losses
    CHECK(bit_equal(frozen_sgd[s].loss, frozen_adam[s].loss));
    CHECK(bit_equal(frozen_sgd[s].accuracy, frozen_adam[s].accuracy));
    CHECK(frozen_sgd[s].eff_lr[0] == 0.0);
  }
}

TEST_CASE("sgd telemetry reports the raw learning rate") {
  TrainConfig c = tiny_config();
  c.optimizer = Optimizer::sgd;
  c.max_steps = 1;
  auto history = train(c);
  for (double e : history[0].eff_lr) CHECK(e == 0.01);
}

TEST_CASE("accuracy threshold stops the run immediately when trivial") {
  TrainConfig c = tiny_config();
  c.max_steps = 50;
  c.stop_accuracy = 0.0;
  auto history = train(c);
  CHECK(history.size() == 1);
}

TEST_CASE("diverging run throws") {
  TrainConfig c = tiny_config();
  c.optimizer = Optimizer::sgd;
  c.lr = 1e200;
  c.max_steps = 10;
  CHECK_THROWS_AS(train(c), std::runtime_error);
}
