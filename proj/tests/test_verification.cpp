#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "malsf/verification.hpp"

using namespace malsf;

namespace {

Tensor random_matrix(int r, int c, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.normal();
  return Tensor({r, c}, std::move(data));
}

GateProjections identity_projections(int d) {
  GateProjections p;
  std::vector<double> eye(static_cast<size_t>(d) * d, 0.0);
  for (int i = 0; i < d; ++i) eye[static_cast<size_t>(i) * d + i] = 1.0;
  p.phi_v = Tensor({d, d}, eye);
  p.phi_l = Tensor({d, d}, eye);
  return p;
}

}  // namespace

TEST_CASE("gate weight closed forms under identity projections") {
  const int d = 4;
  GateProjections proj = identity_projections(d);

  // orthogonal projected vectors -> sigmoid(0) = 0.5
  Tensor cap({1, d}, {1, 0, 0, 0});
  Tensor img({1, d}, {1, 0, 0, 0});
  Tensor region({1, d}, {0, 1, 0, 0});
  Tensor label({1, d}, {0, 0, 1, 0});
  GateWeights gw = gate_weights(cap, img, {{region, label}}, proj);
  REQUIRE(gw.w_v.size() == 1);
  REQUIRE(gw.w_l.size() == 1);
  CHECK(gw.w_v[0].value() == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(gw.w_l[0].value() == doctest::Approx(0.5).epsilon(1e-15));

  // dot product ln 3 -> sigmoid(ln 3) = 3/4
  const double r = std::sqrt(std::log(3.0));
  Tensor cap2({1, d}, {r, 0, 0, 0});
  Tensor region2({1, d}, {r, 0, 0, 0});
  GateWeights gw2 = gate_weights(cap2, img, {{region2, label}}, proj);
  CHECK(gw2.w_v[0].value() == doctest::Approx(0.75).epsilon(1e-12));
}

TEST_CASE("gate weights are strictly monotone in the alignment dot product") {
  const int d = 4;
  GateProjections proj = identity_projections(d);
  Tensor cap({1, d}, {1, 0, 0, 0});
  Tensor img({1, d}, {1, 0, 0, 0});
  Tensor label({1, d}, {0, 1, 0, 0});
  double prev = -1.0;
  for (double s : {-2.0, -0.5, 0.0, 0.5, 2.0}) {
    Tensor region({1, d}, {s, 0, 0, 0});
    GateWeights gw = gate_weights(cap, img, {{region, label}}, proj);
    const double w = gw.w_v[0].value();
    CHECK(w > prev);
    CHECK(w > 0.0);
    CHECK(w < 1.0);
    prev = w;
  }
}

TEST_CASE("gate weights flow gradients into the projections") {
  Rng rng(3);
  GateProjections proj = GateProjections::init(4, rng);
  Tensor cap = random_matrix(1, 4, rng);
  Tensor img = random_matrix(1, 4, rng);
  Tensor region = random_matrix(1, 4, rng);
  Tensor label = random_matrix(1, 4, rng);

  Graph g;
  GraphScope scope(g);
  GateWeights gw = gate_weights(cap, img, {{region, label}}, proj);
  g.backward(add(gw.w_v[0], gw.w_l[0]));
  CHECK(proj.phi_v.has_grad());
  CHECK(proj.phi_l.has_grad());
}

TEST_CASE("verification stream: gated-to-zero context equals explicit zero context") {
  Rng rng(5);
  const int d = 8;
  VerificationStream stream(d, 2, 2, rng);
  Tensor query = random_matrix(5, d, rng);
  Tensor ctx = random_matrix(3, d, rng);

  VerifyContext gated{ctx, {}, Tensor::scalar(0.0)};
  VerifyContext zeroed{Tensor::zeros({3, d}), {}, Tensor()};
  VerificationEntry a = stream.verify(query, {}, gated);
  VerificationEntry b = stream.verify(query, {}, zeroed);
  CHECK(a.seq.data() == b.seq.data());
}

TEST_CASE("verification stream output length follows the query") {
  Rng rng(6);
  const int d = 8;
  VerificationStream stream(d, 2, 2, rng);
  Tensor img_query = random_matrix(17, d, rng);  // 1 + 4x4 grid
  Tensor cap_query = random_matrix(9, d, rng);
  Tensor ctx = random_matrix(4, d, rng);

  VerificationEntry e1 = stream.verify(img_query, {}, {ctx, {}, Tensor()});
  CHECK(e1.seq.shape() == Shape{17, d});
  CHECK(e1.cls.shape() == Shape{1, d});
  for (int c = 0; c < d; ++c) CHECK(e1.cls.at({0, c}) == e1.seq.at({0, c}));

  VerificationEntry e2 = stream.verify(cap_query, {}, {ctx, {}, Tensor()});
  CHECK(e2.seq.shape() == Shape{9, d});
}

TEST_CASE("verify_all: one entry per context, global first, no contexts rejected") {
  Rng rng(7);
  const int d = 8;
  VerificationStream stream(d, 2, 2, rng);
  Tensor query = random_matrix(5, d, rng);

  std::vector<VerifyContext> contexts;
  contexts.push_back({random_matrix(3, d, rng), {}, Tensor()});
  CHECK(stream.verify_all(query, {}, contexts).size() == 1);  // caption-only case

  contexts.push_back({random_matrix(4, d, rng), {}, Tensor::scalar(0.7)});
  contexts.push_back({random_matrix(2, d, rng), {}, Tensor::scalar(0.3)});
  auto entries = stream.verify_all(query, {}, contexts);
  CHECK(entries.size() == 3);
  for (const auto& e : entries) CHECK(e.seq.rows() == 5);

  CHECK_THROWS_AS(stream.verify_all(query, {}, {}), ShapeError);
}

TEST_CASE("duplicate contexts with equal gates give bit-identical outputs") {
  Rng rng(8);
  const int d = 8;
  VerificationStream stream(d, 2, 2, rng);
  Tensor query = random_matrix(5, d, rng);
  Tensor ctx = random_matrix(3, d, rng);

  std::vector<VerifyContext> contexts;
  contexts.push_back({random_matrix(3, d, rng), {}, Tensor()});
  contexts.push_back({ctx, {}, Tensor::scalar(0.42)});
  contexts.push_back({ctx, {}, Tensor::scalar(0.42)});
  auto entries = stream.verify_all(query, {}, contexts);
  CHECK(entries[1].seq.data() == entries[2].seq.data());
  CHECK(entries[1].cls.data() == entries[2].cls.data());
}

TEST_CASE("one parameter set serves all contexts of a stream") {
  Rng rng(9);
  VerificationStream stream(8, 2, 2, rng);
  // handle identity: repeated visits see the same storage, and there is no
  // per-context duplication anywhere in the stream
  std::vector<const TensorImpl*> first, second;
  stream.visit_params("s", [&](const std::string&, Tensor& t) { first.push_back(t.impl()); });
  stream.visit_params("s", [&](const std::string&, Tensor& t) { second.push_back(t.impl()); });
  CHECK(first == second);
  CHECK(stream.depth() == 2);

  // distinct streams hold distinct parameters
  Rng rng2(10);
  VerificationStream other(8, 2, 2, rng2);
  std::vector<const TensorImpl*> third;
  other.visit_params("s", [&](const std::string&, Tensor& t) { third.push_back(t.impl()); });
  for (const auto* p : third) {
    CHECK(std::find(first.begin(), first.end(), p) == first.end());
  }
}

TEST_CASE("context key masks silence padded tokens") {
  Rng rng(11);
  const int d = 8;
  VerificationStream stream(d, 2, 2, rng);
  Tensor query = random_matrix(4, d, rng);
  Tensor ctx = random_matrix(5, d, rng);
  std::vector<uint8_t> mask{1, 1, 1, 0, 0};

  // altering masked-out rows must not change the output
  VerificationEntry a = stream.verify(query, {}, {ctx, mask, Tensor()});
  std::vector<double> modified = ctx.data();
  for (int j = 3; j < 5; ++j)
    for (int c = 0; c < d; ++c) modified[static_cast<size_t>(j) * d + c] = 99.0;
  VerificationEntry b = stream.verify(query, {}, {Tensor({5, d}, modified), mask, Tensor()});
  for (size_t i = 0; i < a.seq.data().size(); ++i) {
    CHECK(a.seq.data()[i] == doctest::Approx(b.seq.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("final-block cross-attention trace rows sum to one") {
  Rng rng(12);
  const int d = 8;
  VerificationStream stream(d, 2, 2, rng);
  Tensor query = random_matrix(4, d, rng);
  Tensor ctx = random_matrix(6, d, rng);
  AttnTrace trace;
  stream.verify(query, {}, {ctx, {}, Tensor()}, &trace);
  REQUIRE(trace.lq == 4);
  REQUIRE(trace.lk == 6);
  for (int i = 0; i < 4; ++i) {
    double s = 0.0;
    for (int j = 0; j < 6; ++j) s += trace.probs[static_cast<size_t>(i) * 6 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}
