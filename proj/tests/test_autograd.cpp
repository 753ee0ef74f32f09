#include <doctest.h>

#include <cmath>

#include "lgms/autograd.hpp"
#include "lgms/gradcheck_suite.hpp"
#include "oracles.hpp"

using namespace lgms;
using ad::Tape;
using ad::Var;

TEST_CASE("backward of sum is ones") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_f64({3}, {5, -2, 7}), true);
  auto grads = tape.backward(tape.sum(x));
  const Tensor& g = grads.at(x.id);
  for (int i = 0; i < 3; ++i) CHECK(g.at_flat(i) == 1.0);
}

TEST_CASE("backward of sum(x*x) is 2x") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_f64({2}, {1, 2}), true);
  auto grads = tape.backward(tape.sum(tape.mul(x, x)));
  CHECK(grads.at(x.id).at_flat(0) == 2.0);
  CHECK(grads.at(x.id).at_flat(1) == 4.0);
}

TEST_CASE("non-participating leaves get zero gradients") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_f64({2}, {1, 2}), true);
  Var unused = tape.leaf(Tensor::from_f64({3}, {1, 1, 1}), true);
  auto grads = tape.backward(tape.sum(x));
  CHECK(grads.count(unused.id) == 1);
  CHECK(grads.at(unused.id).shape() == Shape{3});
  CHECK(max_abs(grads.at(unused.id)) == 0.0);
}

TEST_CASE("gradient accumulates across multiple uses of a leaf") {
  // f = sum(x + x*x): df/dx = 1 + 2x
  Tape tape;
  Var x = tape.leaf(Tensor::from_f64({2}, {3, -1}), true);
  auto grads = tape.backward(tape.sum(tape.add(x, tape.mul(x, x))));
  CHECK(grads.at(x.id).at_flat(0) == doctest::Approx(7.0));
  CHECK(grads.at(x.id).at_flat(1) == doctest::Approx(-1.0));

  // equals the sum of per-path gradients on a duplicated-leaf construction
  Tape t2;
  Var a = t2.leaf(Tensor::from_f64({2}, {3, -1}), true);
  Var b = t2.leaf(Tensor::from_f64({2}, {3, -1}), true);
  auto g2 = t2.backward(t2.sum(t2.add(a, t2.mul(b, b))));
  Tensor summed = add(g2.at(a.id), g2.at(b.id));
  CHECK(oracle::max_abs_diff(summed, grads.at(x.id)) == 0.0);
}

TEST_CASE("backward requires a scalar output") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_f64({2}, {1, 2}), true);
  CHECK_THROWS_AS(tape.backward(tape.mul(x, x)), std::invalid_argument);
}

TEST_CASE("missing backward rule is reported by op name") {
  Tape tape;
  Var x = tape.leaf(Tensor::from_f64({2}, {1, 2}), true);
  Var y = tape.sum(tape.opaque(x));
  CHECK_THROWS_WITH_AS(tape.backward(y), doctest::Contains("opaque"), std::runtime_error);
}

TEST_CASE("maxpool gradient routes to argmax and conserves mass") {
  Rng rng(71);
  Tape tape;
  Tensor xv = random_normal(rng, {2, 2, 4, 4}, 0, 1, DType::f64);
  Var x = tape.leaf(xv, true);
  Var pooled = tape.maxpool2x2(x);
  // weighted sum so each output position carries a distinct gradient
  Tensor w = random_normal(rng, pooled.value().shape(), 0, 1, DType::f64);
  auto grads = tape.backward(tape.sum(tape.mul(pooled, tape.constant(w))));
  const Tensor& gx = grads.at(x.id);

  CHECK(std::abs(sum_value(gx) - sum_value(w)) < 1e-12);  // mass conserved
  // nonzero entries only at window maxima
  std::int64_t nonzero = 0;
  for (std::int64_t i = 0; i < gx.numel(); ++i) nonzero += gx.at_flat(i) != 0.0;
  CHECK(nonzero == pooled.value().numel());

  // ties route to the first (lowest row-major index) element
  Tape t2;
  Var c = t2.leaf(Tensor::full({1, 1, 2, 2}, 1.0, DType::f64), true);
  auto g2 = t2.backward(t2.sum(t2.maxpool2x2(c)));
  CHECK(g2.at(c.id).at_flat(0) == 1.0);
  CHECK(g2.at(c.id).at_flat(1) == 0.0);
  CHECK(g2.at(c.id).at_flat(2) == 0.0);
  CHECK(g2.at(c.id).at_flat(3) == 0.0);
}

TEST_CASE("gradcheck on an exact linear function") {
  auto f = [](Tape& t, std::span<const Var> v) { return t.sum(v[0]); };
  Rng rng(5);
  std::vector<Tensor> inputs = {random_normal(rng, {3, 4}, 0, 1, DType::f64)};
  auto report = ad::gradcheck(f, inputs, 1e-5, 1e-5);
  CHECK(report.pass);
  CHECK(report.max_rel_err < 1e-9);
}

TEST_CASE("gradcheck with tol 0 on a nonlinear function fails with finite error") {
  auto f = [](Tape& t, std::span<const Var> v) { return t.sum(t.silu(v[0])); };
  Rng rng(6);
  std::vector<Tensor> inputs = {random_normal(rng, {2, 3}, 0, 1, DType::f64)};
  auto report = ad::gradcheck(f, inputs, 1e-5, 0.0);
  CHECK(!report.pass);
  CHECK(std::isfinite(report.max_rel_err));
}

TEST_CASE("gradcheck rejects non-float64 inputs and non-scalar outputs") {
  auto f = [](Tape& t, std::span<const Var> v) { return t.sum(v[0]); };
  std::vector<Tensor> f32 = {Tensor::zeros({2}, DType::f32)};
  CHECK_THROWS_AS(ad::gradcheck(f, f32, 1e-5, 1e-5), std::invalid_argument);

  auto vec = [](Tape& t, std::span<const Var> v) { return t.mul(v[0], v[0]); };
  std::vector<Tensor> ok = {Tensor::zeros({2}, DType::f64)};
  CHECK_THROWS_AS(ad::gradcheck(vec, ok, 1e-5, 1e-5), std::invalid_argument);
}

TEST_CASE("silu gradcheck passes at 1e-6 as the fixture example") {
  auto f = [](Tape& t, std::span<const Var> v) { return t.sum(t.silu(v[0])); };
  Rng rng(1);
  std::vector<Tensor> inputs = {random_normal(rng, {2, 3, 4, 4}, 0, 1, DType::f64)};
  auto report = ad::gradcheck(f, inputs, 1e-5, 1e-6);
  CHECK(report.pass);
}

TEST_CASE("every differentiable op passes the battery across three seeds") {
  auto seeds = ad::default_gradcheck_seeds();
  auto checks = ad::gradcheck_battery(seeds, 1e-5, 1e-5);
  CHECK(checks.size() >= 20);
  for (const auto& c : checks) {
    INFO(c.op, " max_rel_err=", c.max_rel_err);
    CHECK(c.pass);
    CHECK(c.max_rel_err < 1e-5);
  }
}

TEST_CASE("gradcheck coordinate sampling stays deterministic") {
  auto f = [](Tape& t, std::span<const Var> v) { return t.sum(t.silu(v[0])); };
  Rng rng(9);
  std::vector<Tensor> inputs = {random_normal(rng, {8, 8}, 0, 1, DType::f64)};
  auto r1 = ad::gradcheck(f, inputs, 1e-5, 1e-5, 10, 333);
  auto r2 = ad::gradcheck(f, inputs, 1e-5, 1e-5, 10, 333);
  CHECK(r1.inputs[0].coords_checked == 10);
  CHECK(r1.max_rel_err == r2.max_rel_err);
}
