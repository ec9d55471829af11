#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>

#include "refix/autograd.hpp"
#include "refix/errors.hpp"
#include "test_support.hpp"

using namespace refix;
using namespace refix::ag;
using namespace refix::testing;

namespace {

Tensor param(Rng& rng, std::vector<int> shape, double scale = 1.0) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return Tensor::parameter(std::move(shape), random_values(rng, n, scale));
}

std::vector<std::size_t> all(const Tensor& t) {
  std::vector<std::size_t> i(t.numel());
  std::iota(i.begin(), i.end(), 0);
  return i;
}

// Scalarises an op with a fixed random probe so every output entry matters.
void check_op(Rng& rng, const std::function<Tensor()>& op, std::vector<Tensor*> inputs) {
  const Tensor sample = op();
  const Tensor probe = random_constant(rng, sample.shape());
  auto loss = [&] { return sum(mul(op(), probe)); };
  for (Tensor* t : inputs) {
    const GradCheck r = check_gradient(loss, *t, all(*t));
    CHECK(r.max_rel_error < 1e-6);
  }
}

}  // namespace

TEST_CASE("elementwise and shape ops: analytic gradients match central differences") {
  Rng rng = make_rng(1, "t");
  Tensor a = param(rng, {2, 3, 4}), b = param(rng, {2, 3, 4});
  check_op(rng, [&] { return add(mul(a, b), sub(a, scale(b, 0.3))); }, {&a, &b});
  check_op(rng, [&] { return mul(silu(a), sigmoid(b)); }, {&a, &b});
  check_op(rng, [&] { return mul(tanh(a), one_minus(affine(b, 0.5, 0.1))); }, {&a, &b});
  check_op(rng, [&] { return upsample_nearest2x(concat({a, b})); }, {&a, &b});
  check_op(rng, [&] { return from_tokens(to_tokens(slice(a, 1, 1)), 3, 4); }, {&a});
  check_op(rng, [&] { return channel_normalize(a); }, {&a});
}

TEST_CASE("matrix ops: analytic gradients match central differences") {
  Rng rng = make_rng(2, "t");
  Tensor x = param(rng, {5, 3}), w = param(rng, {3, 4}), bias = param(rng, {4}), y = param(rng, {6, 3});
  check_op(rng, [&] { return add_row_bias(matmul(x, w), bias); }, {&x, &w, &bias});
  check_op(rng, [&] { return softmax_rows(matmul_nt(x, y)); }, {&x, &y});
  check_op(rng, [&] { return concat_cols({slice_cols(matmul(x, w), 1, 2), x}); }, {&x, &w});
}

TEST_CASE("convolutions: analytic gradients match central differences") {
  Rng rng = make_rng(3, "t");
  Tensor x = param(rng, {2, 6, 5}), w = param(rng, {3, 2, 3, 3}), b = param(rng, {3});
  check_op(rng, [&] { return conv2d(x, w, b, 1, 1); }, {&x, &w, &b});
  check_op(rng, [&] { return conv2d(x, w, b, 2, 1); }, {&x, &w, &b});
  Tensor off = param(rng, {18, 6, 5}, 1.7), mask = param(rng, {9, 6, 5});
  check_op(rng, [&] { return deform_conv3x3(x, off, mask, w, b); }, {&x, &off, &mask, &w, &b});
}

TEST_CASE("losses: values and gradients") {
  Rng rng = make_rng(4, "t");
  Tensor a = param(rng, {3, 4, 4});
  const Tensor b = random_constant(rng, {3, 4, 4});
  std::vector<double> weights(16);
  for (double& v : weights) v = uniform01(rng);
  CHECK(check_gradient([&] { return mse(a, b); }, a, all(a)).max_rel_error < 1e-6);
  CHECK(check_gradient([&] { return weighted_mse(a, b, weights); }, a, all(a)).max_rel_error < 1e-6);
  CHECK(check_gradient([&] { return mean(a); }, a, all(a)).max_rel_error < 1e-6);
  const std::vector<double> ones(16, 1.0);
  CHECK(std::abs(weighted_mse(a, b, ones).item() - mse(a, b).item()) < 1e-15);
}

TEST_CASE("gradients accumulate across shared uses and stop under NoGradGuard") {
  Tensor a = Tensor::parameter({2}, {1.5, -2.0});
  sum(add(mul(a, a), a)).backward();
  CHECK(a.grad()[0] == 4.0);
  CHECK(a.grad()[1] == -3.0);
  a.zero_grad();
  {
    NoGradGuard ng;
    CHECK_FALSE(grad_enabled());
    const Tensor s = sum(mul(a, a));
    CHECK(s.item() == 6.25);
  }
  CHECK(grad_enabled());
}

TEST_CASE("shape mismatches are rejected") {
  const Tensor a = Tensor::zeros({2, 3}), b = Tensor::zeros({3, 2});
  CHECK_THROWS_AS(add(a, b), InvalidInput);
  CHECK_THROWS_AS(matmul(a, a), InvalidInput);
  CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 4, 4}), Tensor::zeros({1, 3, 3, 3}), Tensor(), 1, 1), InvalidInput);
  CHECK_THROWS_AS(Tensor::constant({2, 2}, {1.0, 2.0}), InvalidInput);
}
