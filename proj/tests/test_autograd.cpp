#include <doctest.h>

#include "voxfuse/gradcheck.hpp"
#include "voxfuse/ops.hpp"
#include "voxfuse/tensor.hpp"

using namespace voxfuse;

TEST_CASE("backward: loss = sum(x) gives all-ones gradient") {
  auto x = Tensor<double>::from_data({3}, {5, -2, 0.5});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK(x.grad() == std::vector<double>{1, 1, 1});
}

TEST_CASE("backward: loss = sum(x*x) at [1,2] gives [2,4]") {
  auto x = Tensor<double>::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto loss = sum(mul(x, x));
  tape.backward(loss);
  CHECK(x.grad()[0] == doctest::Approx(2.0));
  CHECK(x.grad()[1] == doctest::Approx(4.0));
}

TEST_CASE("backward: gradient of sum(a x b) w.r.t. a is ones x b^T") {
  Rng rng(17);
  auto a = Tensor<double>::zeros({3, 4});
  auto b = Tensor<double>::zeros({4, 2});
  for (auto& v : a.values()) v = rng.normal();
  for (auto& v : b.values()) v = rng.normal();
  a.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto loss = sum(matmul(a, b));
  tape.backward(loss);
  // expected: grad[m,k] = sum_j b[k,j]
  for (int m = 0; m < 3; ++m) {
    for (int k = 0; k < 4; ++k) {
      double expect = b.values()[k * 2] + b.values()[k * 2 + 1];
      CHECK(a.grad()[m * 4 + k] == doctest::Approx(expect).epsilon(1e-12));
    }
  }
}

TEST_CASE("tape: second backward without re-recording is rejected") {
  auto x = Tensor<double>::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK_THROWS_AS(tape.backward(loss), ContractError);
}

TEST_CASE("tape: non-scalar loss and foreign losses are rejected") {
  auto x = Tensor<double>::from_data({2}, {1, 2});
  x.set_requires_grad(true);
  Tape<double> tape;
  {
    Tape<double>::Scope scope(tape);
    auto vec = mul(x, x);
    CHECK_THROWS_AS(tape.backward(vec), ContractError);
  }
  Tape<double> other;
  auto off_tape = Tensor<double>::scalar(1.0);
  CHECK_THROWS_AS(other.backward(off_tape), ContractError);
}

TEST_CASE("unreachable parameters keep zero gradients") {
  auto x = Tensor<double>::from_data({2}, {1, 2});
  auto unused = Tensor<double>::from_data({2}, {3, 4});
  x.set_requires_grad(true);
  unused.set_requires_grad(true);
  Tape<double> tape;
  Tape<double>::Scope scope(tape);
  auto loss = sum(x);
  tape.backward(loss);
  CHECK(unused.grad() == std::vector<double>{0, 0});
}

TEST_CASE("gradcheck: sum of squares is tight") {
  Rng rng(23);
  auto x = Tensor<double>::zeros({10});
  for (auto& v : x.values()) v = rng.normal();
  const double err = finite_difference_gradcheck<double>(
      [&] { return sum(mul(x, x)); }, {x}, 1e-5);
  CHECK(err < 1e-8);
}

TEST_CASE("gradcheck: zero-gradient objective reports zero error") {
  auto x = Tensor<double>::from_data({3}, {1, 2, 3});
  auto c = Tensor<double>::scalar(4.0);
  // objective ignores x entirely; analytic and numeric are both ~0
  const double err = finite_difference_gradcheck<double>(
      [&] { return add(mul_scalar(sum(x), 0.0), c); }, {x}, 1e-5);
  CHECK(err < 1e-9);
}

TEST_CASE("gradcheck: corrupted backward rule is detected") {
  auto x = Tensor<double>::from_data({3}, {0.5, -1.0, 2.0});
  // y = 3*x elementwise, but the recorded rule claims dy/dx = 1.
  auto broken_triple = [&]() {
    Tensor<double> out = Tensor<double>::zeros(x.shape());
    for (std::int64_t i = 0; i < x.size(); ++i) out.ptr()[i] = 3.0 * x.ptr()[i];
    if (Tape<double>::recording() && x.requires_grad()) {
      auto xc = x;
      record_node(out, [xc, out]() mutable {
        for (std::int64_t i = 0; i < out.size(); ++i)
          xc.grad()[i] += out.grad()[i];  // wrong: should be 3 * grad
      });
    }
    return sum(out);
  };
  const double err =
      finite_difference_gradcheck<double>(broken_triple, {x}, 1e-5);
  CHECK(err > 1e-2);
}

TEST_CASE("gradcheck: non-deterministic objective is rejected") {
  int calls = 0;
  auto x = Tensor<double>::from_data({1}, {1.0});
  auto f = [&] {
    ++calls;
    return Tensor<double>::scalar(static_cast<double>(calls));
  };
  CHECK_THROWS_AS(finite_difference_gradcheck<double>(f, {x}, 1e-5),
                  ContractError);
}

TEST_CASE("gradcheck: elementwise ops and activations in f64") {
  Rng rng(31);
  auto x = Tensor<double>::zeros({2, 5});
  auto y = Tensor<double>::zeros({2, 5});
  // keep values away from activation kinks
  for (auto& v : x.values()) {
    v = rng.normal();
    if (std::abs(v) < 0.05) v = 0.1;
  }
  for (auto& v : y.values()) {
    v = rng.normal();
    if (std::abs(v) < 0.05) v = -0.1;
  }

  auto check = [&](const std::function<Tensor<double>()>& f) {
    const double err = finite_difference_gradcheck<double>(f, {x, y}, 1e-6);
    CHECK(err < 1e-5);
  };
  check([&] { return sum(add(x, y)); });
  check([&] { return sum(sub(x, y)); });
  check([&] { return mean(mul(x, y)); });
  check([&] { return sum(mul_scalar(x, 1.7)); });
  check([&] { return sum(relu(x)); });
  check([&] { return sum(leaky_relu(x, 0.2)); });
  check([&] { return sum(elu(x)); });
  check([&] { return sum(mul(sigmoid(x), sigmoid(x))); });
  check([&] { return sum(mul(reshape(x, {5, 2}), reshape(y, {5, 2}))); });
}

TEST_CASE("gradcheck: matmul and linear in f64") {
  Rng rng(37);
  auto a = Tensor<double>::zeros({3, 4});
  auto b = Tensor<double>::zeros({4, 2});
  auto w = Tensor<double>::zeros({6, 4});
  auto bias = Tensor<double>::zeros({6});
  for (auto* t : {&a, &b, &w, &bias})
    for (auto& v : t->values()) v = rng.normal();

  double err = finite_difference_gradcheck<double>(
      [&] { return sum(mul(matmul(a, b), matmul(a, b))); }, {a, b}, 1e-6);
  CHECK(err < 1e-5);

  err = finite_difference_gradcheck<double>(
      [&] {
        auto out = linear(a, w, std::optional<Tensor<double>>(bias));
        return sum(mul(out, out));
      },
      {a, w, bias}, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: softmax across views and weighted fusion sum") {
  Rng rng(41);
  auto raw = Tensor<double>::zeros({3, 1, 2, 2, 2});
  auto vols = Tensor<double>::zeros({3, 1, 2, 2, 2});
  for (auto& v : raw.values()) v = rng.normal();
  for (auto& v : vols.values()) v = 0.5 + 0.4 * std::tanh(rng.normal());

  const double err = finite_difference_gradcheck<double>(
      [&] {
        auto scores = softmax_axis0(raw);
        auto fused = weighted_sum_axis0(vols, scores);
        return sum(mul(fused, fused));
      },
      {raw, vols}, 1e-6);
  CHECK(err < 1e-5);
}

TEST_CASE("gradcheck: concat and split") {
  Rng rng(43);
  auto a = Tensor<double>::zeros({2, 3, 2, 2});
  auto b = Tensor<double>::zeros({2, 1, 2, 2});
  for (auto& v : a.values()) v = rng.normal();
  for (auto& v : b.values()) v = rng.normal();

  double err = finite_difference_gradcheck<double>(
      [&] {
        auto cat = concat_channels(std::vector<Tensor<double>>{a, b});
        return sum(mul(cat, cat));
      },
      {a, b}, 1e-6);
  CHECK(err < 1e-5);

  err = finite_difference_gradcheck<double>(
      [&] {
        auto parts = split_axis0(a);
        auto acc = sum(mul(parts[0], parts[0]));
        return add(acc, mul_scalar(sum(parts[1]), 2.0));
      },
      {a}, 1e-6);
  CHECK(err < 1e-5);
}
