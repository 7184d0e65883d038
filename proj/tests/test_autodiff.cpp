// SPDX-License-Identifier: Apache-2.0
#include <catch_amalgamated.hpp>

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "ilab/autodiff.hpp"
#include "ilab/rng.hpp"
#include "gradcheck_cases.hpp"

using namespace ilab;
using ilab::ad::Graph;
using ilab::ad::Var;
using ilab::testing::check_op;

namespace {

Tensor random_matrix(Rng& rng, std::size_t r, std::size_t c, double scale = 1.0) {
  Tensor t(Shape{r, c});
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

}  // namespace

TEST_CASE("forward examples", "[autodiff]") {
  Graph g;
  ad::Bindings b;
  Tensor eye = Tensor::matrix(2, 2, {1, 0, 0, 1});
  Tensor a = Tensor::matrix(2, 2, {1, 2, 3, 4});
  b.bind("I", eye);
  b.bind("A", a);
  Var prod = g.matmul(g.parameter("I"), g.parameter("A"));
  Var sm = g.softmax(g.constant(Tensor::matrix(1, 3, {0, 0, 0})));
  Tensor ones(Shape{3}, 1.0), zeros(Shape{3}, 0.0);
  b.bind("g", ones);
  b.bind("o", zeros);
  Var ln = g.layer_norm(g.constant(Tensor::matrix(1, 3, {5, 5, 5})), g.parameter("g"), g.parameter("o"));
  g.name_output(prod, "prod");
  auto out = g.forward(b);

  CHECK(out.at("prod") == Tensor::matrix(2, 2, {1, 2, 3, 4}));
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(g.value(sm)[i] == Catch::Approx(1.0 / 3.0).epsilon(1e-15));
    CHECK(g.value(ln)[i] == 0.0);
  }
}

TEST_CASE("backward examples", "[autodiff]") {
  SECTION("sum of squares") {
    Graph g;
    ad::Bindings b;
    Tensor x = Tensor::matrix(1, 3, {1, -2, 3});
    b.bind("x", x);
    Var xv = g.parameter("x");
    Var loss = g.sum(g.mul(xv, xv));
    g.forward(b);
    auto grads = g.backward(loss);
    CHECK(grads.at("x") == Tensor::matrix(1, 3, {2, -4, 6}));
  }
  SECTION("linear form") {
    Graph g;
    ad::Bindings b;
    Tensor x = Tensor::matrix(1, 3, {0.5, 7, -1});
    b.bind("x", x);
    Tensor a = Tensor::matrix(1, 3, {3, -1, 2});
    Var loss = g.sum(g.mul(g.constant(a), g.parameter("x")));
    g.forward(b);
    CHECK(g.backward(loss).at("x") == a);
  }
  SECTION("cross-entropy at zero logits") {
    Graph g;
    ad::Bindings b;
    Tensor z = Tensor::matrix(1, 2, {0, 0});
    b.bind("z", z);
    Var loss = g.cross_entropy(g.parameter("z"), {0});
    g.forward(b);
    CHECK(g.value(loss)[0] == Catch::Approx(std::log(2.0)));
    const Tensor grad = g.backward(loss).at("z");
    CHECK(grad[0] == -0.5);
    CHECK(grad[1] == 0.5);
  }
}

TEST_CASE("grad_check on a quadratic is tight", "[autodiff]") {
  Graph g;
  ad::Bindings b;
  Tensor x = Tensor::matrix(2, 3, {0.3, -1.2, 2.0, 0.7, 0.1, -0.4});
  Tensor w = Tensor::matrix(3, 2, {1.0, 0.5, -0.3, 0.8, 0.2, -1.1});
  b.bind("x", x);
  b.bind("w", w);
  Var y = g.matmul(g.parameter("x"), g.parameter("w"));
  Var loss = g.sum(g.mul(y, y));
  auto report = ad::grad_check(g, loss, b, 1e-5, 1e-6);
  CHECK(report.passed());
  CHECK(report.worst < 1e-6);
}

TEST_CASE("grad_check on a constant graph is exactly zero", "[autodiff]") {
  Graph g;
  ad::Bindings b;
  Tensor x = Tensor::matrix(1, 2, {1.0, 2.0});
  b.bind("x", x);
  g.parameter("x");
  Var loss = g.sum(g.constant(Tensor::matrix(1, 2, {3.0, 4.0})));
  g.forward(b);
  auto grads = g.backward(loss);
  CHECK(grads.at("x") == Tensor::matrix(1, 2, {0.0, 0.0}));
  auto report = ad::grad_check(g, loss, b, 1e-5, 1e-12);
  CHECK(report.worst == 0.0);
}

TEST_CASE("every op kind matches central differences", "[autodiff]") {
  const auto cases = testing::op_cases();
  for (std::size_t i = 0; i < cases.size(); ++i) {
    INFO(cases[i].name);
    CHECK(check_op(cases[i], 100 + i) < 1e-4);
  }
}

TEST_CASE("softmax rows sum to one and cross-entropy is non-negative", "[autodiff][property]") {
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Graph g;
    Tensor x = random_matrix(rng, 4, 6, 10.0);
    Var sm = g.softmax(g.constant(x));
    std::vector<std::size_t> targets(4);
    for (auto& t : targets) t = rng.index(6);
    Var ce = g.cross_entropy(g.constant(x), targets);
    g.forward(ad::Bindings{});
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (double v : g.value(sm).row(r)) s += v;
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    CHECK(g.value(ce)[0] >= 0.0);
  }
}

TEST_CASE("frozen parameters get exact zero gradients", "[autodiff]") {
  Rng rng(3);
  Tensor x = random_matrix(rng, 2, 3), w = random_matrix(rng, 3, 3);
  Graph g;
  ad::Bindings b;
  b.bind("x", x);
  b.bind("w", w);
  Var loss = g.mean(g.gelu(g.matmul(g.parameter("x"), g.parameter("w"))));
  g.set_trainable("w", false);
  g.forward(b);
  auto grads = g.backward(loss);
  for (double v : grads.at("w").values()) CHECK(v == 0.0);
  bool any_nonzero = false;
  for (double v : grads.at("x").values()) any_nonzero = any_nonzero || v != 0.0;
  CHECK(any_nonzero);
}

TEST_CASE("forward and backward are bit-deterministic", "[autodiff]") {
  Rng rng(11);
  Tensor x = random_matrix(rng, 5, 4), w = random_matrix(rng, 6, 4);
  auto run = [&] {
    Graph g;
    ad::Bindings b;
    b.bind("x", x);
    b.bind("w", w);
    Var loss = g.cross_entropy(g.cosine_logits(g.parameter("x"), g.parameter("w")), {0, 1, 2, 3, 4});
    g.forward(b);
    return std::make_pair(g.value(loss), g.backward(loss));
  };
  auto a = run();
  auto c = run();
  CHECK(a.first == c.first);
  CHECK(a.second == c.second);
}

TEST_CASE("errors name the failing node", "[autodiff]") {
  SECTION("shape mismatch") {
    Graph g;
    g.matmul(g.constant(Tensor(Shape{2, 3}), "a"), g.constant(Tensor(Shape{2, 3}), "b"));
    try {
      g.forward(ad::Bindings{});
      FAIL("expected a dimension error");
    } catch (const DimensionError& e) {
      CHECK(std::string(e.what()).find("node 2 (matmul)") != std::string::npos);
    }
  }
  SECTION("non-finite output") {
    Graph g;
    g.scale(g.scale(g.constant(Tensor(Shape{1, 1}, 1e200)), 1e200), 1.0);
    CHECK_THROWS_AS(g.forward(ad::Bindings{}), NumericError);
  }
  SECTION("non-scalar loss") {
    Graph g;
    Var v = g.constant(Tensor(Shape{2, 2}, 1.0));
    g.forward(ad::Bindings{});
    CHECK_THROWS_AS(g.backward(v), ContractError);
  }
  SECTION("unbound parameter") {
    Graph g;
    g.parameter("missing");
    CHECK_THROWS_AS(g.forward(ad::Bindings{}), ContractError);
  }
  SECTION("embedding id out of range") {
    Graph g;
    g.embedding(g.constant(Tensor(Shape{3, 2})), {5});
    CHECK_THROWS_AS(g.forward(ad::Bindings{}), InputError);
  }
}
