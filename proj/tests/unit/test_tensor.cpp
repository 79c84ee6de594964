#include <cmath>
#include <limits>

#include "doctest.h"
#include "mmdit/grad_check.hpp"
#include "mmdit/ops.hpp"
#include "support/oracles.hpp"

using namespace mmdit;

TEST_CASE("tensor shape and storage agree") {
  Tensor t(Shape{2, 3}, 1.5);
  CHECK(t.numel() == 6);
  CHECK(t.data().size() == 6);
  CHECK(t.at({1, 2}) == 1.5);
  CHECK_THROWS_AS(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{0, 2}), ShapeError);
  CHECK_THROWS_AS(Tensor(Shape{}), ShapeError);
}

TEST_CASE("copies share storage and detach cuts history") {
  Tensor a(Shape{2}, std::vector<double>{1, 2});
  Tensor b = a;
  b.mutable_data()[0] = 7.0;
  CHECK(a[0] == 7.0);
  Tensor c = a.detach();
  c.mutable_data()[0] = 1.0;
  CHECK(a[0] == 7.0);
}

TEST_CASE("gradient of a quadratic is exact") {
  Tensor x(Shape{2}, std::vector<double>{1.0, 2.0});
  x.set_requires_grad();
  sum(square(x)).backward();
  CHECK(x.grad()[0] == 2.0);
  CHECK(x.grad()[1] == 4.0);
  CHECK(grad_check([](const Tensor& v) { return sum(square(v)); }, Tensor(Shape{2}, std::vector<double>{1, 2})) <
        1e-6);
}

TEST_CASE("leaf gradients accumulate across backward calls") {
  Tensor x(Shape{1}, 3.0);
  x.set_requires_grad();
  sum(scale(x, 2.0)).backward();
  sum(scale(x, 2.0)).backward();
  CHECK(x.grad()[0] == 4.0);
  x.zero_grad();
  CHECK_FALSE(x.has_grad());
}

TEST_CASE("reused inputs sum their gradient contributions") {
  Tensor x(Shape{3}, std::vector<double>{0.5, -1.0, 2.0});
  x.set_requires_grad();
  sum(mul(x, x)).backward();
  for (std::size_t i = 0; i < 3; ++i) CHECK(x.grad()[i] == doctest::Approx(2.0 * x[i]).epsilon(1e-15));
}

TEST_CASE("no-grad guard stops recording") {
  Tensor x(Shape{2}, 1.0);
  x.set_requires_grad();
  Tensor y;
  {
    NoGradGuard g;
    CHECK_FALSE(grad_enabled());
    y = sum(square(x));
  }
  CHECK(grad_enabled());
  CHECK_FALSE(y.requires_grad());
  CHECK_THROWS_AS(y.backward(), ContractError);
}

TEST_CASE("op outputs are read-only and must be finite") {
  Tensor x(Shape{2}, 1.0);
  x.set_requires_grad();
  Tensor y = scale(x, 2.0);
  CHECK_THROWS_AS(y.mutable_data(), ContractError);
  CHECK_THROWS_AS(scale(x, std::numeric_limits<double>::infinity()), NumericError);
  CHECK_THROWS_AS(scale(Tensor(Shape{1}, 1e300), 1e300), NumericError);
}

TEST_CASE("backward needs a scalar") {
  Tensor x(Shape{2}, 1.0);
  x.set_requires_grad();
  CHECK_THROWS_AS(scale(x, 2.0).backward(), ContractError);
}

TEST_CASE("grad_check contract") {
  const Tensor x(Shape{3}, 0.5);
  CHECK_THROWS_AS(grad_check([](const Tensor& v) { return scale(v, 2.0); }, x), ContractError);
  CHECK_THROWS_AS(grad_check([](const Tensor& v) { return sum(v); }, x, 1e-2), ContractError);
}

TEST_CASE("grad_check agrees with an independent finite-difference oracle") {
  Rng rng(11);
  const Tensor x = Tensor::randn(Shape{8}, rng);
  const Tensor w = Tensor::randn(Shape{8}, rng);
  auto fn = [&](const Tensor& v) { return sum(mul(softmax(v, 0), w)); };
  CHECK(grad_check(fn, x, 1e-5) < 1e-4);
  CHECK(oracle::grad_error(fn, x, 1e-5) < 1e-4);
}

TEST_CASE("grad_check_param restores the parameter") {
  Rng rng(2);
  Tensor p = Tensor::randn(Shape{4}, rng);
  p.set_requires_grad();
  const std::vector<double> before(p.data().begin(), p.data().end());
  const auto r = grad_check_param([&] { return sum(square(p)); }, p);
  CHECK(r.max_rel_error < 1e-6);
  for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == before[i]);
}

TEST_CASE("seeded generators are reproducible and split streams differ") {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) CHECK(a.normal() == b.normal());
  Rng c(42);
  Rng s1 = c.split(1);
  Rng d(42);
  Rng s2 = d.split(2);
  CHECK(s1.next_u64() != s2.next_u64());
  Rng u(5);
  for (int i = 0; i < 1000; ++i) {
    const auto k = u.uniform_int(-2, 2);
    CHECK(k >= -2);
    CHECK(k <= 2);
  }
}

TEST_CASE("normal draws have unit moments") {
  Rng rng(9);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double v = rng.normal();
    s += v;
    s2 += v * v;
  }
  CHECK(std::abs(s / n) < 0.01);
  CHECK(std::abs(s2 / n - 1.0) < 0.02);
}
