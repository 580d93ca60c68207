#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "malsf/gradcheck.hpp"
#include "malsf/gradcheck_suite.hpp"
#include "malsf/ops.hpp"
#include "malsf/rng.hpp"

using namespace malsf;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(shape_numel(shape)));
  for (auto& v : data) v = rng.normal();
  return Tensor(std::move(shape), std::move(data));
}

}  // namespace

TEST_CASE("matmul identity and hand-computed product") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor b({2, 2}, {5, 6, 7, 8});
  CHECK(matmul(eye, b).data() == b.data());

  Tensor a({2, 2}, {1, 2, 3, 4});
  Tensor c = matmul(a, b);
  CHECK(c.data() == std::vector<double>{19, 22, 43, 50});
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 3});
  try {
    matmul(a, b);
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("vs") != std::string::npos);
  }
}

TEST_CASE("softmax symmetry, closed form and overflow safety") {
  Tensor s0 = softmax_lastdim(Tensor({2}, {0, 0}));
  CHECK(s0.data()[0] == doctest::Approx(0.5).epsilon(1e-15));

  Tensor s1 = softmax_lastdim(Tensor({2}, {0.0, std::log(2.0)}));
  CHECK(s1.data()[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(s1.data()[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  Tensor s2 = softmax_lastdim(Tensor({2}, {1000.0, 1000.0}));
  CHECK(s2.data()[0] == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(std::isfinite(s2.data()[1]));
}

TEST_CASE("softmax rows sum to one and shift invariance") {
  Rng rng(5);
  for (int it = 0; it < 50; ++it) {
    Tensor x = random_tensor({4, 7}, rng);
    Tensor y = softmax_lastdim(x);
    for (int r = 0; r < 4; ++r) {
      double s = 0.0;
      for (int c = 0; c < 7; ++c) s += y.data()[static_cast<size_t>(r) * 7 + c];
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
    Tensor shifted = softmax_lastdim(add_const(x, 3.25));
    for (size_t i = 0; i < y.data().size(); ++i) {
      CHECK(y.data()[i] == doctest::Approx(shifted.data()[i]).epsilon(1e-12));
    }
  }
}

TEST_CASE("layer_norm closed forms") {
  Tensor g1 = Tensor::full({3}, 1.0);
  Tensor b0 = Tensor::zeros({3});
  Tensor constant({1, 3}, {4.0, 4.0, 4.0});
  Tensor out = layer_norm(constant, g1, b0, 1e-5);
  for (double v : out.data()) CHECK(v == 0.0);

  Tensor x({1, 2}, {1.0, -1.0});
  Tensor out2 = layer_norm(x, Tensor::full({2}, 1.0), Tensor::zeros({2}), 0.0);
  CHECK(out2.data()[0] == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(out2.data()[1] == doctest::Approx(-1.0).epsilon(1e-12));

  Tensor out3 = layer_norm(x, Tensor::zeros({2}), Tensor::full({2}, 7.0), 1e-5);
  CHECK(out3.data()[0] == 7.0);
  CHECK(out3.data()[1] == 7.0);
}

TEST_CASE("cross_attention single key broadcasts the projected value") {
  Rng rng(11);
  AttentionParams p = make_attention_params(4, 2, rng);
  Tensor q = random_tensor({5, 4}, rng);
  Tensor kv = random_tensor({1, 4}, rng);
  Tensor out = cross_attention(q, kv, kv, p);
  // softmax over one logit is 1 for every query row, so the output is
  // W_o(W_v kv + b_v) + b_o in each row
  Tensor expect = add_rowvec(matmul(add_rowvec(matmul(kv, p.w_v), p.b_v), p.w_o), p.b_o);
  for (int r = 0; r < 5; ++r) {
    for (int c = 0; c < 4; ++c) {
      CHECK(out.at({r, c}) == doctest::Approx(expect.at({0, c})).epsilon(1e-12));
    }
  }
}

TEST_CASE("cross_attention zero query gives uniform weights") {
  Rng rng(12);
  AttentionParams p = make_attention_params(4, 2, rng);
  Tensor q = Tensor::zeros({2, 4});
  Tensor kv = random_tensor({3, 4}, rng);
  AttnTrace trace;
  cross_attention(q, kv, kv, p, nullptr, &trace);
  REQUIRE(trace.probs.size() == 6);
  for (double v : trace.probs) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
}

TEST_CASE("cross_attention matches a hand-rolled single-head reference") {
  Rng rng(13);
  const int d = 4;
  AttentionParams p;
  p.d_model = d;
  p.n_heads = 1;
  Tensor eye({d, d}, {1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1});
  p.w_q = p.w_k = p.w_v = p.w_o = eye;
  Tensor q = random_tensor({2, d}, rng);
  Tensor k = random_tensor({3, d}, rng);
  Tensor v = random_tensor({3, d}, rng);
  Tensor out = cross_attention(q, k, v, p);

  // independent reference: raw loops, no tensor ops
  for (int i = 0; i < 2; ++i) {
    double logits[3];
    for (int j = 0; j < 3; ++j) {
      double s = 0.0;
      for (int t = 0; t < d; ++t) s += q.at({i, t}) * k.at({j, t});
      logits[j] = s / std::sqrt(static_cast<double>(d));
    }
    const double mx = std::max({logits[0], logits[1], logits[2]});
    double z = 0.0;
    double w[3];
    for (int j = 0; j < 3; ++j) {
      w[j] = std::exp(logits[j] - mx);
      z += w[j];
    }
    for (int t = 0; t < d; ++t) {
      double acc = 0.0;
      for (int j = 0; j < 3; ++j) acc += w[j] / z * v.at({j, t});
      CHECK(out.at({i, t}) == doctest::Approx(acc).epsilon(1e-10));
    }
  }
}

TEST_CASE("backward: linearity, square, fan-out") {
  {
    Graph g;
    GraphScope scope(g);
    Tensor x({3}, {1, 2, 3}, true);
    g.backward(sum(x));
    CHECK(x.grad() == std::vector<double>{1, 1, 1});
  }
  {
    Graph g;
    GraphScope scope(g);
    Tensor x({1}, {3.0}, true);
    g.backward(sum(mul(x, x)));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-15));
  }
  {
    Graph g;
    GraphScope scope(g);
    Tensor y({1}, {1.5}, true);
    g.backward(add(y, y));
    CHECK(y.grad()[0] == 2.0);
  }
}

TEST_CASE("backward requires a scalar loss") {
  Graph g;
  GraphScope scope(g);
  Tensor x({2}, {1, 2}, true);
  Tensor y = mul(x, x);
  CHECK_THROWS_AS(g.backward(y), ShapeError);
}

TEST_CASE("requires_grad=false tensors never accumulate gradient") {
  Graph g;
  GraphScope scope(g);
  Tensor x({2}, {1, 2}, true);
  Tensor c({2}, {5, 5}, false);
  g.backward(sum(mul(x, c)));
  CHECK(x.grad() == std::vector<double>{5, 5});
  CHECK(!c.has_grad());
}

TEST_CASE("backward determinism across graph rebuilds") {
  Rng rng(21);
  Tensor w = random_tensor({6, 6}, rng);
  w.set_requires_grad(true);
  Tensor x = random_tensor({4, 6}, rng);

  auto run = [&] {
    w.zero_grad();
    Graph g;
    GraphScope scope(g);
    Tensor h = gelu(matmul(x, w));
    g.backward(sum(mul(h, h)));
    return w.grad();
  };
  const auto g1 = run();
  const auto g2 = run();
  CHECK(g1 == g2);  // bit-identical
}

TEST_CASE("grad_check closed forms") {
  Rng rng(31);
  {
    Tensor x = random_tensor({5}, rng);
    auto res = grad_check([](const std::vector<Tensor>& xs) { return sum(mul(xs[0], xs[0])); },
                          {x}, 1e-5);
    CHECK(res.max_rel_err < 1e-8);
  }
  {
    Tensor logits = random_tensor({6}, rng);
    auto res = grad_check(
        [](const std::vector<Tensor>& xs) { return neg(pick(log_softmax_lastdim(xs[0]), 2)); },
        {logits}, 1e-5);
    CHECK(res.max_rel_err < 1e-5);
  }
  {
    Tensor x = random_tensor({4}, rng);
    Tensor c = random_tensor({4}, rng);
    auto res = grad_check([&](const std::vector<Tensor>& xs) { return sum(mul(xs[0], c)); },
                          {x}, 1e-5);
    CHECK(res.max_rel_err < 1e-8);  // linear: only f64 cancellation noise remains
  }
}

TEST_CASE("grad_check eps bounds enforced") {
  Tensor x({2}, {1, 2});
  auto f = [](const std::vector<Tensor>& xs) { return sum(xs[0]); };
  CHECK_THROWS_AS(grad_check(f, {x}, 1e-8), std::invalid_argument);
  CHECK_THROWS_AS(grad_check(f, {x}, 1e-2), std::invalid_argument);
}

TEST_CASE("gradient battery: every differentiable op under 1e-4") {
  for (const auto& c : run_gradcheck_module("tensor")) {
    INFO(c.name);
    CHECK(c.result.max_rel_err < 1e-4);
  }
  for (const auto& c : run_gradcheck_module("losses")) {
    INFO(c.name);
    CHECK(c.result.max_rel_err < 1e-4);
  }
}

TEST_CASE("attention params validate head divisibility") {
  Rng rng(41);
  CHECK_THROWS_AS(make_attention_params(10, 3, rng), ShapeError);
}

TEST_CASE("shape and slicing ops round-trip gradients") {
  Rng rng(51);
  Tensor a = random_tensor({4, 3}, rng);
  Tensor b = random_tensor({2, 3}, rng);
  auto res = grad_check(
      [](const std::vector<Tensor>& xs) {
        Tensor cat = concat_rows({xs[0], xs[1]});
        Tensor head = slice_rows(cat, 1, 3);
        return sum(mul(head, head));
      },
      {a, b}, 1e-5);
  CHECK(res.max_rel_err < 1e-6);

  Tensor c = random_tensor({3, 2}, rng);
  Tensor d = random_tensor({3, 4}, rng);
  auto res2 = grad_check(
      [](const std::vector<Tensor>& xs) {
        Tensor cat = concat_cols({xs[0], xs[1]});
        return sum(mul(cat, cat));
      },
      {c, d}, 1e-5);
  CHECK(res2.max_rel_err < 1e-6);
}

TEST_CASE("gather_rows accumulates repeated ids") {
  Graph g;
  GraphScope scope(g);
  Tensor table({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  Tensor picked = gather_rows(table, {1, 1, 2});
  g.backward(sum(picked));
  CHECK(table.grad() == std::vector<double>{0, 0, 2, 2, 1, 1});
}
