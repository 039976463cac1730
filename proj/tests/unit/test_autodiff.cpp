#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "../support/fd_oracle.hpp"
#include "compostruct/adam.hpp"
#include "compostruct/autodiff.hpp"
#include "compostruct/rng.hpp"
#include "doctest.h"

using namespace compostruct;
using compostruct::testing::max_gradient_error;

namespace {

Tensor random_tensor(Rng& rng, Shape shape, double keep_away_from_zero = 0.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) {
    do {
      v = rng.uniform(-2.0, 2.0);
    } while (std::abs(v) < keep_away_from_zero);
  }
  return t;
}

// Reduces any output to a scalar with a fixed random projection.
Var project(Tape& tape, Var out, std::uint64_t seed) {
  Rng rng(seed);
  Tensor r(tape.value(out).shape());
  for (auto& v : r.values()) v = rng.uniform(-1.0, 1.0);
  return tape.sum(tape.mul(out, tape.constant(std::move(r))));
}

constexpr int kCases = 20;
constexpr double kTolerance = 1e-4;

}  // namespace

TEST_CASE("forward examples") {
  Tape tape;
  Tensor eye(Shape{3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Rng rng(1);
  Tensor a = random_tensor(rng, {3, 3});
  auto prod = tape.matmul(tape.constant(eye), tape.constant(a));
  CHECK(tape.value(prod) == a);

  auto half = tape.sigmoid(tape.constant(Tensor::scalar(0.0)));
  CHECK(tape.value(half)[0] == 0.5);

  std::vector<std::size_t> target{0};
  auto ce = tape.softmax_cross_entropy(tape.constant(Tensor(Shape{4}, 0.0)), target);
  CHECK(tape.value(ce)[0] == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  CHECK(tape.value(ce)[0] == doctest::Approx(1.386294).epsilon(1e-6));
}

TEST_CASE("backward examples") {
  SUBCASE("x squared at 3") {
    Tensor x = Tensor::scalar(3.0);
    Tape tape;
    auto v = tape.parameter(x);
    tape.backward(tape.mul(v, v));
    CHECK(x.grad()[0] == doctest::Approx(6.0));
  }
  SUBCASE("sigmoid at 0") {
    Tensor x = Tensor::scalar(0.0);
    Tape tape;
    tape.backward(tape.sigmoid(tape.parameter(x)));
    CHECK(x.grad()[0] == doctest::Approx(0.25));
  }
}

TEST_CASE("tape misuse is an error") {
  Tensor x = Tensor::scalar(2.0);
  SUBCASE("backward before forward") {
    Tape tape;
    CHECK_THROWS_AS(tape.backward(Var{0}), TapeError);
  }
  SUBCASE("backward twice") {
    Tape tape;
    auto loss = tape.mul(tape.parameter(x), tape.parameter(x));
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), TapeError);
  }
  SUBCASE("non-scalar loss") {
    Tape tape;
    Tensor v(Shape{2}, 1.0);
    CHECK_THROWS_AS(tape.backward(tape.parameter(v)), TapeError);
  }
}

TEST_CASE("shape errors name the primitive and shapes") {
  Tape tape;
  auto a = tape.constant(Tensor(Shape{2, 3}));
  auto b = tape.constant(Tensor(Shape{2, 3}));
  try {
    tape.matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("matmul") != std::string::npos);
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
  CHECK_THROWS_AS(tape.add(a, tape.constant(Tensor(Shape{3, 2}))), ShapeError);
  CHECK_THROWS_AS(tape.odd_one_out_logits(tape.constant(Tensor(Shape{6, 2})), 4), ShapeError);
  std::vector<std::size_t> ids{5};
  CHECK_THROWS_AS(tape.embedding(a, ids), ShapeError);
}

TEST_CASE("non-finite values surface as errors") {
  Tape tape;
  Tensor big = Tensor::scalar(1e200);
  auto v = tape.constant(big);
  CHECK_THROWS_AS(tape.mul(v, v), NonFiniteError);
  Tensor nan = Tensor::scalar(std::numeric_limits<double>::quiet_NaN());
  CHECK_THROWS_AS(tape.constant(nan), NonFiniteError);
}

TEST_CASE("gradient of every primitive matches central differences") {
  Rng rng(2024);
  double worst = 0.0;
  for (int c = 0; c < kCases; ++c) {
    const std::uint64_t proj = 100 + static_cast<std::uint64_t>(c);
    {
      std::vector<Tensor> leaves{random_tensor(rng, {3, 4}), random_tensor(rng, {4, 5})};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.matmul(v[0], v[1]), proj);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {3, 4}), random_tensor(rng, {3, 4})};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.add(v[0], v[1]), proj);
                       }));
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.mul(v[0], v[1]), proj);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {5, 3}), random_tensor(rng, {3})};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.add_bias(v[0], v[1]), proj);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {4, 4})};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.scale(v[0], -1.7), proj);
                       }));
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.sigmoid(v[0]), proj);
                       }));
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return t.sum(t.reshape(t.mul(v[0], v[0]), Shape{2, 8}));
                       }));
    }
    {
      // Keep inputs off the ReLU kink so the difference quotient is defined.
      std::vector<Tensor> leaves{random_tensor(rng, {4, 4}, 1e-3)};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.relu(v[0]), proj);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {6, 3})};
      std::vector<std::size_t> ids{0, 5, 2, 2, 3};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.embedding(v[0], ids), proj);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {8, 3})};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.odd_one_out_logits(v[0], 4), proj);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {3, 4})};
      std::vector<std::size_t> targets{static_cast<std::size_t>(rng.below(4)), 1, 3};
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return t.softmax_cross_entropy(v[0], targets);
                       }));
    }
    {
      std::vector<Tensor> leaves{random_tensor(rng, {3, 5}), random_tensor(rng, {3, 5})};
      const double beta = rng.uniform(0.5, 4.0);
      worst = std::max(worst, max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
                         return project(t, t.soft_mask(v[0], v[1], beta), proj);
                       }));
    }
  }
  CHECK(worst < kTolerance);
}

TEST_CASE("fused soft mask equals the composed primitives") {
  Rng rng(5);
  Tensor w = random_tensor(rng, {4, 6});
  Tensor s = random_tensor(rng, {4, 6});
  Tape tape;
  auto fused = tape.soft_mask(tape.constant_ref(w), tape.constant_ref(s), 3.5);
  auto composed = tape.mul(tape.constant_ref(w), tape.sigmoid(tape.scale(tape.constant_ref(s), 3.5)));
  for (std::size_t i = 0; i < w.size(); ++i)
    CHECK(tape.value(fused)[i] == doctest::Approx(tape.value(composed)[i]).epsilon(1e-14));
}

TEST_CASE("two-layer MLP gradients match central differences") {
  Rng rng(99);
  for (int c = 0; c < kCases; ++c) {
    std::vector<Tensor> leaves{random_tensor(rng, {5, 7}), random_tensor(rng, {7}), random_tensor(rng, {7, 3}),
                               random_tensor(rng, {3})};
    // Fan-in scaling keeps the loss O(1), so difference quotients are not swamped by roundoff.
    for (auto& v : leaves[0].values()) v *= 0.4;
    for (auto& v : leaves[2].values()) v *= 0.4;
    Tensor x = random_tensor(rng, {8, 5});
    {
      // Resample when a hidden pre-activation sits on the ReLU kink.
      Tape probe;
      auto z = probe.add_bias(probe.matmul(probe.constant_ref(x), probe.constant_ref(leaves[0])),
                              probe.constant_ref(leaves[1]));
      bool near_kink = false;
      for (double v : probe.value(z).values()) near_kink |= std::abs(v) < 1e-3;
      if (near_kink) {
        --c;
        continue;
      }
    }
    std::vector<std::size_t> odd{static_cast<std::size_t>(rng.below(4)), static_cast<std::size_t>(rng.below(4))};
    const double err = max_gradient_error(leaves, [&](Tape& t, const std::vector<Var>& v) {
      auto h = t.relu(t.add_bias(t.matmul(t.constant_ref(x), v[0]), v[1]));
      auto e = t.add_bias(t.matmul(h, v[2]), v[3]);
      return t.softmax_cross_entropy(t.odd_one_out_logits(e, 4), odd);
    });
    CHECK(err < kTolerance);
  }
}

TEST_CASE("identical seed and graph give bit-identical results") {
  auto run = [] {
    Rng rng(42);
    Tensor w = random_tensor(rng, {6, 4});
    Tensor x = random_tensor(rng, {8, 6});
    Tape tape;
    std::vector<std::size_t> odd{1, 2};
    auto loss = tape.softmax_cross_entropy(
        tape.odd_one_out_logits(tape.relu(tape.matmul(tape.constant_ref(x), tape.parameter(w))), 4), odd);
    tape.backward(loss);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(tape.value(loss)[0]);
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("adam examples") {
  SUBCASE("zero gradient leaves the parameter unchanged") {
    Tensor p(Shape{3}, {1.0, -2.0, 0.5});
    p.zero_grad();
    AdamState st(AdamConfig{0.1});
    Tensor* ps[] = {&p};
    st.step(ps);
    CHECK(p == Tensor(Shape{3}, {1.0, -2.0, 0.5}));
    CHECK(st.steps() == 1);
  }
  SUBCASE("first step moves by about lr") {
    Tensor p = Tensor::scalar(0.0);
    p.grad()[0] = 1.0;
    AdamState st(AdamConfig{0.1, 0.9, 0.999, 1e-8});
    Tensor* ps[] = {&p};
    st.step(ps);
    // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps).
    CHECK(p[0] == doctest::Approx(-0.1 / (1.0 + 1e-8)).epsilon(1e-15));
  }
  SUBCASE("minimizes a quadratic") {
    Tensor x = Tensor::scalar(0.0);
    AdamState st(AdamConfig{0.05});
    Tensor* ps[] = {&x};
    for (int i = 0; i < 200; ++i) {
      x.zero_grad();
      Tape tape;
      auto d = tape.add(tape.parameter(x), tape.constant(Tensor::scalar(-2.0)));
      tape.backward(tape.mul(d, d));
      st.step(ps);
    }
    CHECK(std::abs(x[0] - 2.0) < 0.01);
    CHECK(st.steps() == 200);
  }
  SUBCASE("NaN gradient aborts") {
    Tensor p = Tensor::scalar(1.0);
    p.grad()[0] = std::numeric_limits<double>::quiet_NaN();
    AdamState st;
    Tensor* ps[] = {&p};
    CHECK_THROWS_AS(st.step(ps), NonFiniteError);
    CHECK(p[0] == 1.0);
  }
}
