#include <cmath>
#include <numbers>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tpseg/gradcheck.hpp"
#include "tpseg/ops.hpp"
#include "tpseg/serialize.hpp"

using namespace tpseg;
using tpseg::testing::random_tensor;
using V = Var<double>;
using T = Tensor<double>;

TEST_CASE("tensor shape invariants") {
  T t(Shape{2, 3, 4});
  CHECK(t.size() == 24);
  CHECK_THROWS_AS(T(Shape{2, 2}, T::Vector::Zero(5)), ShapeError);
  CHECK_THROWS_AS(t.reshaped(Shape{5, 5}), ShapeError);
  CHECK(T::scalar(3.0).item() == 3.0);
}

TEST_CASE("backward: x*x at 3 gives 6") {
  V x = V::parameter(T::scalar(3.0));
  GradTape<double> tape;
  V loss = x * x;
  tape.backward(loss);
  CHECK(x.grad().item() == doctest::Approx(6.0));
}

TEST_CASE("backward: sum(sigmoid(x)) at 0 gives 0.25") {
  V x = V::parameter(T::zeros(Shape{5}));
  GradTape<double> tape;
  tape.backward(sum(sigmoid(x)));
  for (Index i = 0; i < 5; ++i) CHECK(x.grad()[i] == doctest::Approx(0.25));
}

TEST_CASE("backward: non-scalar loss is rejected") {
  V x = V::parameter(T::zeros(Shape{3}));
  GradTape<double> tape;
  V y = x * 2.0;
  CHECK_THROWS_AS(tape.backward(y), ShapeError);
}

TEST_CASE("backward: unreachable leaves hold zero, reused leaves accumulate once") {
  V a = V::parameter(T::full(Shape{2}, 1.5));
  V unused = V::parameter(T::full(Shape{2}, 7.0));
  GradTape<double> tape;
  V loss = sum(a * a + a);  // d/da = 2a + 1
  tape.backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(4.0));
  CHECK(!unused.has_grad());
  CHECK(unused.grad()[1] == 0.0);
  CHECK_THROWS_AS(tape.backward(loss), Error);
}

TEST_CASE("no tape means no recording") {
  V a = V::parameter(T::full(Shape{2}, 1.0));
  V y = a * 3.0;
  CHECK(!y.requires_grad());
  CHECK_THROWS_AS(backward(sum(y)), Error);
}

TEST_CASE("conv2d examples") {
  SplitMix64 rng(1);
  SUBCASE("identity kernel") {
    V x(random_tensor(Shape{1, 1, 3, 3}, rng));
    V w(T::full(Shape{1, 1, 1, 1}, 1.0));
    V y = conv2d(x, w, V(), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 3, 3});
    CHECK((y.value().values() - x.value().values()).cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("summation") {
    V x(T::full(Shape{1, 1, 2, 2}, 1.0));
    V w(T::full(Shape{1, 1, 2, 2}, 1.0));
    V y = conv2d(x, w, V(), 1, 0);
    CHECK(y.shape() == Shape{1, 1, 1, 1});
    CHECK(y.value()[0] == 4.0);
  }
  SUBCASE("output extent formula") {
    V x(random_tensor(Shape{2, 3, 9, 7}, rng));
    V w(random_tensor(Shape{4, 3, 3, 3}, rng));
    V y = conv2d(x, w, V(), 2, 1);
    CHECK(y.shape() == Shape{2, 4, 5, 4});
  }
  SUBCASE("shape mismatch names both shapes") {
    V x(random_tensor(Shape{1, 2, 4, 4}, rng));
    V w(random_tensor(Shape{1, 3, 3, 3}, rng));
    try {
      conv2d(x, w, V(), 1, 1);
      FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
      std::string msg = e.what();
      CHECK(msg.find("[1x2x4x4]") != std::string::npos);
      CHECK(msg.find("[1x3x3x3]") != std::string::npos);
    }
  }
  SUBCASE("gradient of sum w.r.t. input matches finite differences") {
    T xin = random_tensor(Shape{2, 3, 8, 8}, rng);
    V w(random_tensor(Shape{4, 3, 3, 3}, rng));
    double err = finite_diff_check<double>([&](const V& x) { return sum(conv2d(x, w, V(), 1, 1)); }, xin);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("group_norm examples") {
  SplitMix64 rng(2);
  V ones = V(T::full(Shape{4}, 1.0));
  V zeros = V(T::zeros(Shape{4}));
  SUBCASE("constant input maps to zero") {
    V y = group_norm(V(T::full(Shape{2, 4, 3, 3}, 2.5)), 2, ones, zeros, 1e-5);
    CHECK(y.value().values().cwiseAbs().maxCoeff() == 0.0);
  }
  SUBCASE("affine dominates with gamma 0") {
    V y = group_norm(V(random_tensor(Shape{2, 4, 3, 3}, rng)), 2, zeros, V(T::full(Shape{4}, 5.0)), 1e-5);
    CHECK((y.value().values().array() - 5.0).abs().maxCoeff() == 0.0);
  }
  SUBCASE("per-group statistics") {
    T x = random_tensor(Shape{3, 4, 5, 5}, rng, 3.0);
    V y = group_norm(V(x), 2, ones, zeros, 1e-12);
    const Index per = 2 * 25;
    for (Index g = 0; g < 6; ++g) {
      auto seg = y.value().values().segment(g * per, per).array();
      CHECK(std::abs(seg.mean()) < 1e-6);
      CHECK(std::abs((seg - seg.mean()).square().mean() - 1.0) < 1e-4);
    }
  }
  SUBCASE("indivisible channels") {
    CHECK_THROWS_AS(group_norm(V(random_tensor(Shape{1, 5, 2, 2}, rng)), 2, V(), V(), 1e-5), ShapeError);
  }
}

TEST_CASE("gelu, sigmoid, softmax closed forms") {
  CHECK(gelu(V(T::scalar(0.0))).item() == 0.0);
  CHECK(std::abs(gelu(V(T::scalar(10.0))).item() - 10.0) < 1e-6);
  CHECK(sigmoid(V(T::scalar(0.0))).item() == 0.5);
  CHECK(sigmoid(V(T::scalar(30.0))).item() > 1.0 - 1e-12);
  CHECK(sigmoid(V(T::scalar(1.0))).item() == doctest::Approx(0.7310585786).epsilon(1e-10));
  CHECK(sigmoid(V(T::scalar(-800.0))).item() >= 0.0);

  V u = softmax(V(T::full(Shape{4}, 0.3)));
  for (Index i = 0; i < 4; ++i) CHECK(u.value()[i] == doctest::Approx(0.25));
  V big = softmax(V(T::from_list(Shape{2}, {1000.0, 1000.0})));
  CHECK(big.value()[0] == 0.5);
  V l3 = softmax(V(T::from_list(Shape{2}, {0.0, std::log(3.0)})));
  CHECK(l3.value()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(l3.value()[1] == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("gelu gradient at selected points") {
  for (double x0 : {-2.0, -0.5, 0.3, 4.0}) {
    double err = finite_diff_check<double>([](const V& x) { return sum(gelu(x)); }, T::scalar(x0));
    CHECK(err < 1e-8);
  }
}

TEST_CASE("cross_attention examples") {
  SplitMix64 rng(3);
  SUBCASE("single key returns its value") {
    V q(random_tensor(Shape{1, 8}, rng));
    V k(random_tensor(Shape{1, 8}, rng));
    V v(random_tensor(Shape{1, 5}, rng));
    V out = cross_attention(q, k, v);
    CHECK((out.value().values() - v.value().values()).cwiseAbs().maxCoeff() < 1e-15);
  }
  SUBCASE("identical keys average the values") {
    T key = random_tensor(Shape{1, 8}, rng);
    T keys(Shape{6, 8});
    for (Index r = 0; r < 6; ++r) keys.values().segment(r * 8, 8) = key.values();
    V v(random_tensor(Shape{6, 3}, rng));
    V out = cross_attention(V(random_tensor(Shape{2, 8}, rng)), V(keys), v);
    for (Index c = 0; c < 3; ++c) {
      double m = 0;
      for (Index r = 0; r < 6; ++r) m += v.value()[r * 3 + c] / 6.0;
      CHECK(out.value()[c] == doctest::Approx(m));
      CHECK(out.value()[3 + c] == doctest::Approx(m));
    }
  }
  SUBCASE("zero keys") {
    CHECK_THROWS_AS(cross_attention(V(T(Shape{1, 4})), V(T(Shape{0, 4})), V(T(Shape{0, 4}))), ShapeError);
  }
}

TEST_CASE("cosine_map examples") {
  T p = T::from_list(Shape{3}, {0.0, 0.6, 0.8});
  T f(Shape{1, 3, 1, 4});
  // pixel 0 parallel, 1 antiparallel, 2 orthogonal, 3 zero
  const double px[4][3] = {{0, 1.2, 1.6}, {0, -0.6, -0.8}, {5, 0, 0}, {0, 0, 0}};
  for (int j = 0; j < 4; ++j)
    for (int c = 0; c < 3; ++c) f.at(0, c, 0, j) = px[j][c];
  V s = cosine_map(V(f), p);
  CHECK(s.shape() == Shape{1, 1, 4});
  CHECK(s.value()[0] == doctest::Approx(1.0));
  CHECK(s.value()[1] == doctest::Approx(-1.0));
  CHECK(s.value()[2] == doctest::Approx(0.0));
  CHECK(s.value()[3] == 0.0);
}

TEST_CASE("finite_diff_check self-tests") {
  SplitMix64 rng(4);
  T point = random_tensor(Shape{7}, rng);
  CHECK(finite_diff_check<double>([](const V& x) { return sum(x * x); }, point) < 1e-8);

  V gamma(random_tensor(Shape{4}, rng));
  V beta(random_tensor(Shape{4}, rng));
  T x4 = random_tensor(Shape{2, 4, 3, 3}, rng);
  V weights(random_tensor(Shape{2, 4, 3, 3}, rng));
  CHECK(finite_diff_check<double>([&](const V& x) { return sum(group_norm(x, 2, gamma, beta, 1e-5) * weights); }, x4) < 1e-4);

  // x^2 with a deliberately wrong derivative (x instead of 2x).
  auto broken = [](const V& x) {
    T y(x.shape(), x.value().values().cwiseAbs2());
    return sum(make_op<double>(std::move(y), {x.node()}, [](Node<double>& self) {
      self.inputs[0]->grad_buffer().values() += self.grad.values().cwiseProduct(self.inputs[0]->value.values());
    }));
  };
  CHECK(finite_diff_check<double>(broken, point) > 1e-2);
}

TEST_CASE("tensor serialization round trip and layout") {
  SplitMix64 rng(5);
  for (int trial = 0; trial < 10; ++trial) {
    Shape shape;
    const int rank = static_cast<int>(rng.below(5));
    for (int r = 0; r < rank; ++r) shape.push_back(static_cast<Index>(rng.below(4)));
    T t = random_tensor(shape, rng);
    std::stringstream ss;
    write_tensor(ss, t);
    CHECK(ss.str().size() == 4 + 4 + 8 * static_cast<std::size_t>(rank) + 8 * static_cast<std::size_t>(t.size()));
    T back = read_tensor(ss);
    CHECK(back.shape() == t.shape());
    CHECK(back.values() == t.values());
  }
  std::stringstream ss;
  write_tensor(ss, T::from_list(Shape{1}, {1.0}));
  const std::string bytes = ss.str();
  CHECK(bytes.substr(0, 4) == "TPST");
  CHECK(bytes[4] == 1);
  CHECK(bytes[8] == 1);
  CHECK(static_cast<unsigned char>(bytes[16 + 7]) == 0x3F);  // 1.0 = 0x3FF0..., little-endian
  std::stringstream bad("XXXX");
  CHECK_THROWS_AS(read_tensor(bad), Error);
}
