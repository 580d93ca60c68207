#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "malsf/fusion.hpp"
#include "malsf/model.hpp"
#include "malsf/synthdata.hpp"

using namespace malsf;

namespace {

Tensor random_matrix(int r, int c, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(r) * c);
  for (auto& v : data) v = rng.normal();
  return Tensor({r, c}, std::move(data));
}

VerificationEntry entry_from(const Tensor& seq) {
  VerificationEntry e;
  e.seq = seq;
  e.cls = slice_rows(seq, 0, 1);
  return e;
}

}  // namespace

TEST_CASE("aggr with a single key adds the normalized projected value") {
  Rng rng(1);
  const int d = 8;
  Aggregator a = Aggregator::init(d, 2, rng);
  Tensor q = random_matrix(3, d, rng);
  Tensor kv = random_matrix(1, d, rng);
  Tensor out = a.aggr(q, kv);

  Tensor projected = add_rowvec(
      matmul(add_rowvec(matmul(kv, a.attn.w_v), a.attn.b_v), a.attn.w_o), a.attn.b_o);
  Tensor normed = layer_norm(projected, a.ln_gamma, a.ln_beta);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < d; ++c)
      CHECK(out.at({i, c}) ==
            doctest::Approx(q.at({i, c}) + normed.at({0, c})).epsilon(1e-12));
}

TEST_CASE("aggr residual structure under uniform attention") {
  Rng rng(2);
  const int d = 8;
  Aggregator a = Aggregator::init(d, 2, rng);
  for (auto& v : a.attn.w_q.data()) v = 0.0;  // all logits zero -> uniform rows
  Tensor q = random_matrix(3, d, rng);
  Tensor kv = random_matrix(5, d, rng);
  Tensor out = a.aggr(q, kv);
  // every query row receives the same attention output c, so out = q + LN(c)
  for (int i = 1; i < 3; ++i)
    for (int c = 0; c < d; ++c)
      CHECK(out.at({i, c}) - q.at({i, c}) ==
            doctest::Approx(out.at({0, c}) - q.at({0, c})).epsilon(1e-10));
}

TEST_CASE("aggr matches hand-composed cross-attention plus layer norm") {
  Rng rng(3);
  const int d = 8;
  Aggregator a = Aggregator::init(d, 2, rng);
  Tensor q = random_matrix(2, d, rng);
  Tensor kv = random_matrix(6, d, rng);
  Tensor expect = add(q, layer_norm(cross_attention(q, kv, kv, a.attn), a.ln_gamma, a.ln_beta));
  Tensor out = a.aggr(q, kv);
  for (size_t i = 0; i < out.data().size(); ++i) {
    CHECK(out.data()[i] == doctest::Approx(expect.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("shallow_fuse degenerate and shape cases") {
  Rng rng(4);
  const int d = 8;
  ShallowFusion sf = ShallowFusion::init(d, 2, rng);
  const int lq_img = 5, lq_cap = 4;
  std::vector<uint8_t> cap_mask{1, 1, 1, 0};

  // single global entry: KV is that entry alone
  auto img_global = entry_from(random_matrix(lq_img, d, rng));
  auto cap_global = entry_from(random_matrix(lq_cap, d, rng));
  ShallowFused fused0 = shallow_fuse(sf, {img_global}, {cap_global}, cap_mask, true);
  CHECK(fused0.a_img.shape() == Shape{1, d});
  CHECK(fused0.s_img.shape() == Shape{lq_img, d});
  Tensor expect_a = sf.img_cls.aggr(img_global.cls, img_global.cls);
  for (size_t i = 0; i < expect_a.data().size(); ++i)
    CHECK(fused0.a_img.data()[i] == doctest::Approx(expect_a.data()[i]).epsilon(1e-12));

  // two locals: output shapes stay query-sized while KV grows to 3 entries
  auto img_l1 = entry_from(random_matrix(lq_img, d, rng));
  auto img_l2 = entry_from(random_matrix(lq_img, d, rng));
  auto cap_l1 = entry_from(random_matrix(lq_cap, d, rng));
  auto cap_l2 = entry_from(random_matrix(lq_cap, d, rng));
  ShallowFused fused2 =
      shallow_fuse(sf, {img_global, img_l1, img_l2}, {cap_global, cap_l1, cap_l2}, cap_mask,
                   true);
  CHECK(fused2.s_img.shape() == Shape{lq_img, d});
  CHECK(fused2.s_cap.shape() == Shape{lq_cap, d});

  // compositional check on the seq path: same aggregator, explicit concat
  Tensor kv = concat_rows({img_global.seq, img_l1.seq, img_l2.seq});
  CHECK(kv.rows() == 3 * lq_img);
  Tensor expect_s = sf.img_seq.aggr(img_global.seq, kv);
  for (size_t i = 0; i < expect_s.data().size(); ++i)
    CHECK(fused2.s_img.data()[i] == doctest::Approx(expect_s.data()[i]).epsilon(1e-12));
}

TEST_CASE("shallow_fuse with identical entries reduces to the single-entry case") {
  Rng rng(5);
  const int d = 8;
  ShallowFusion sf = ShallowFusion::init(d, 2, rng);
  auto g = entry_from(random_matrix(4, d, rng));
  std::vector<uint8_t> mask{1, 1, 1, 1};
  ShallowFused one = shallow_fuse(sf, {g}, {g}, mask, true);
  ShallowFused three = shallow_fuse(sf, {g, g, g}, {g, g, g}, mask, true);
  for (size_t i = 0; i < one.a_img.data().size(); ++i)
    CHECK(one.a_img.data()[i] == doctest::Approx(three.a_img.data()[i]).epsilon(1e-10));
}

TEST_CASE("shallow_fuse position-wise mean when attention fusion is off") {
  Rng rng(6);
  const int d = 4;
  auto e1 = entry_from(random_matrix(3, d, rng));
  auto e2 = entry_from(random_matrix(3, d, rng));
  ShallowFused fused = shallow_fuse(ShallowFusion{}, {e1, e2}, {}, {}, false);
  for (int i = 0; i < 3; ++i)
    for (int c = 0; c < d; ++c)
      CHECK(fused.s_img.at({i, c}) ==
            doctest::Approx((e1.seq.at({i, c}) + e2.seq.at({i, c})) / 2.0).epsilon(1e-12));
  CHECK(!fused.s_cap.defined());
}

TEST_CASE("deep_fuse: uniform rows, cancellation, compositional oracle") {
  Rng rng(7);
  const int d = 8;
  DeepFusion df = DeepFusion::init(d, 2, rng);

  // s_img rows all equal r -> c_v is the projected r regardless of attention
  std::vector<double> row(static_cast<size_t>(d));
  for (auto& v : row) v = rng.normal();
  std::vector<double> rep;
  for (int i = 0; i < 5; ++i) rep.insert(rep.end(), row.begin(), row.end());
  ShallowFused fused;
  fused.a_img = random_matrix(1, d, rng);
  fused.a_cap = random_matrix(1, d, rng);
  fused.s_img = Tensor({5, d}, rep);
  fused.s_cap = random_matrix(4, d, rng);
  fused.cap_mask = {1, 1, 1, 1};
  auto img_entries = std::vector<VerificationEntry>{entry_from(random_matrix(5, d, rng))};
  auto cap_entries = std::vector<VerificationEntry>{entry_from(random_matrix(4, d, rng))};
  TaskFeatures tf = deep_fuse(df, fused, img_entries, cap_entries, true);
  Tensor rrow({1, d}, row);
  Tensor expect_cv = add_rowvec(
      matmul(add_rowvec(matmul(rrow, df.attn_v.w_v), df.attn_v.b_v), df.attn_v.w_o),
      df.attn_v.b_o);
  for (int c = 0; c < d; ++c)
    CHECK(tf.c_v.at({0, c}) == doctest::Approx(expect_cv.at({0, c})).epsilon(1e-10));

  // c_bbox equals hand-composed attention with the learned token
  Tensor expect_bbox = cross_attention(df.p_bbox, fused.s_img, fused.s_img, df.attn_bbox);
  for (int c = 0; c < d; ++c)
    CHECK(tf.c_bbox.at({0, c}) == doctest::Approx(expect_bbox.at({0, c})).epsilon(1e-12));

  // opposite stream summaries cancel: zero query -> uniform summary weights
  fused.a_cap = scale(fused.a_img, -1.0);
  AttnTrace btrace;
  deep_fuse(df, fused, img_entries, cap_entries, true, &btrace);
  REQUIRE(btrace.lk == 1);
  for (double p : btrace.probs) CHECK(p == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("deep_fuse pairwise summary keys and single-stream fallback") {
  Rng rng(8);
  const int d = 8;
  DeepFusion df = DeepFusion::init(d, 2, rng);
  ShallowFusion sf = ShallowFusion::init(d, 2, rng);
  std::vector<VerificationEntry> img{entry_from(random_matrix(3, d, rng)),
                                     entry_from(random_matrix(3, d, rng))};
  std::vector<VerificationEntry> cap{entry_from(random_matrix(4, d, rng)),
                                     entry_from(random_matrix(4, d, rng))};
  ShallowFused fused = shallow_fuse(sf, img, cap, {1, 1, 1, 1}, true);
  AttnTrace trace;
  TaskFeatures tf = deep_fuse(df, fused, img, cap, true, &trace);
  CHECK(tf.c_b.shape() == Shape{1, d});
  CHECK(trace.lk == 2);  // global + one pair, summed pairwise across streams

  // single stream: the surviving summaries stand alone
  ShallowFused img_only = shallow_fuse(sf, img, {}, {}, true);
  TaskFeatures tf2 = deep_fuse(df, img_only, img, {}, true);
  CHECK(tf2.c_b.defined());
  CHECK(!tf2.c_l.defined());
  CHECK(!tf2.s_cap.defined());
}

TEST_CASE("run_heads zero-network fixed points") {
  Rng rng(9);
  const int d = 8;
  Heads h = Heads::init(d, rng);
  auto zero_mlp = [](Mlp& m) {
    for (auto& v : m.w1.data()) v = 0.0;
    for (auto& v : m.w2.data()) v = 0.0;
  };
  zero_mlp(h.h_b);
  zero_mlp(h.h_ig);
  TaskFeatures tf;
  tf.c_b = random_matrix(1, d, rng);
  tf.c_v = random_matrix(1, d, rng);
  tf.c_l = random_matrix(1, d, rng);
  tf.c_bbox = random_matrix(1, d, rng);
  tf.s_cap = random_matrix(6, d, rng);
  tf.cap_mask = {1, 1, 1, 1, 1, 1};
  Predictions p = run_heads(h, tf);
  CHECK(p.binary_logits.data() == std::vector<double>{0.0, 0.0});
  for (double v : p.bbox.data()) CHECK(v == 0.5);
  CHECK(p.token_logits.rows() == 6);
  CHECK(p.has_image_type);
  CHECK(p.has_text_type);
}

TEST_CASE("bbox outputs live in (0,1) and are sorted per axis (1000 draws)") {
  Rng rng(10);
  const int d = 8;
  Heads h = Heads::init(d, rng);
  // widen the weights so the sigmoid sees a broad logit range
  for (auto& v : h.h_ig.w1.data()) v = rng.normal(0.0, 0.8);
  for (auto& v : h.h_ig.w2.data()) v = rng.normal(0.0, 0.8);
  for (int it = 0; it < 1000; ++it) {
    TaskFeatures tf;
    tf.c_b = random_matrix(1, d, rng);
    tf.c_bbox = random_matrix(1, d, rng);
    Predictions p = run_heads(h, tf);
    const auto& b = p.bbox.data();
    CHECK(b[0] > 0.0);
    CHECK(b[3] < 1.0);
    CHECK(b[0] <= b[2]);
    CHECK(b[1] <= b[3]);
  }
}

TEST_CASE("all fusion parameter sets are pairwise disjoint") {
  MalsfModel model(ModelConfig{}, 3);
  std::set<const TensorImpl*> seen;
  std::set<std::string> names;
  for (auto& p : model.named_params()) {
    CHECK(seen.insert(p.tensor.impl()).second);
    CHECK(names.insert(p.name).second);
  }
}

TEST_CASE("total parameter count matches the closed-form architecture count") {
  const ModelConfig cfg;
  const int64_t d = cfg.d_model;
  const int64_t ffn = 4 * d;
  const int64_t attn = 4 * (d * d + d);
  const int64_t ln = 2 * d;
  const int64_t enc_block = attn + 2 * ln + (d * ffn + ffn + ffn * d + d);
  const int64_t text_enc = cfg.vocab_size * d + cfg.l_max * d + cfg.text_layers * enc_block;
  const int64_t grid = cfg.grid_cells();
  const int64_t vis_enc = (cfg.patch * cfg.patch * 3) * d + d + grid * d +
                          cfg.image_layers * enc_block;
  const int64_t gates = 2 * d * d;
  const int64_t verify_block = 2 * attn + 3 * ln + (d * ffn + ffn + ffn * d + d);
  const int64_t streams = 2 * cfg.stream_depth * verify_block;
  const int64_t shallow = 4 * (attn + ln);
  const int64_t deep = 3 * d + 3 * attn + (attn + ln);
  const int64_t mlp2 = d * d + d + d * 2 + 2;
  const int64_t mlp4 = d * d + d + d * 4 + 4;
  const int64_t heads = 4 * mlp2 + mlp4;
  const int64_t expected = text_enc + vis_enc + gates + streams + shallow + deep + heads;

  MalsfModel model(cfg, 7);
  CHECK(model.param_count() == expected);
  CHECK(model.param_count() == 165356);  // pinned
}

TEST_CASE("every ablation combination runs end to end") {
  const Sample s = generate_sample(555, {ManipKind::fs, ManipKind::ta}, PairSource::open_vocab);
  LossWeights w;
  int idx = 0;
  for (LocalSemantics local : {LocalSemantics::pairs, LocalSemantics::labels_only,
                               LocalSemantics::masks_only, LocalSemantics::none}) {
    for (StreamMode streams : {StreamMode::bidirectional, StreamMode::image_query_only,
                               StreamMode::text_query_only}) {
      for (bool gate : {true, false}) {
        for (bool msf : {true, false}) {
          for (bool mdf : {true, false}) {
            ModelConfig cfg;
            cfg.ablation = {local, streams, gate, msf, mdf};
            MalsfModel model(cfg, static_cast<uint64_t>(100 + idx++));
            Graph g;
            GraphScope scope(g);
            SampleLoss sl = model.loss(s, w, TaskMode::dgm4);
            CHECK(std::isfinite(sl.total.value()));
            g.backward_local(sl.total);
          }
        }
      }
    }
  }
}

TEST_CASE("dropping a stream removes exactly the dependent outputs") {
  const Sample s = generate_sample(777, {ManipKind::fa}, PairSource::open_vocab);

  ModelConfig no_text;
  no_text.ablation.streams = StreamMode::image_query_only;
  MalsfModel m1(no_text, 5);
  ModelOutput o1 = m1.forward(s);
  CHECK(!o1.preds.token_logits.defined());  // token grounding undefined
  CHECK(o1.preds.bbox.defined());
  CHECK(o1.preds.has_image_type);
  CHECK(!o1.preds.has_text_type);
  CHECK(o1.preds.binary_logits.defined());

  ModelConfig no_image;
  no_image.ablation.streams = StreamMode::text_query_only;
  MalsfModel m2(no_image, 5);
  ModelOutput o2 = m2.forward(s);
  CHECK(o2.preds.token_logits.defined());
  CHECK(!o2.preds.bbox.defined());
  CHECK(!o2.preds.has_image_type);
  CHECK(o2.preds.has_text_type);
}

TEST_CASE("end-to-end forward satisfies the prediction invariants") {
  MalsfModel model(ModelConfig{}, 11);
  for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
    const Sample s = generate_sample(seed, {ManipKind::ts}, PairSource::open_vocab);
    ModelOutput out = model.forward(s);
    CHECK(out.preds.binary_logits.size() == 2);
    CHECK(out.preds.type_logits.size() == 4);
    const auto& b = out.preds.bbox.data();
    CHECK(b[0] <= b[2]);
    CHECK(b[1] <= b[3]);
    for (double v : b) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
    CHECK(out.preds.token_logits.rows() == model.config().l_max);
    for (double v : out.preds.binary_logits.data()) CHECK(std::isfinite(v));
    // gates of live pairs sit strictly inside (0,1)
    for (double g : out.gate_v) {
      CHECK(g > 0.0);
      CHECK(g < 1.0);
    }
  }
}
