#include "malsf/fusion.hpp"

namespace malsf {

Aggregator Aggregator::init(int d_model, int n_heads, Rng& rng) {
  Aggregator a;
  a.attn = make_attention_params(d_model, n_heads, rng);
  a.ln_gamma = Tensor::full({d_model}, 1.0, true);
  a.ln_beta = Tensor::zeros({d_model}, true);
  return a;
}

Tensor Aggregator::aggr(const Tensor& q, const Tensor& kv, const std::vector<uint8_t>* kv_mask,
                        AttnTrace* trace) const {
  if (kv.rows() < 1) throw ShapeError("aggr: empty key-value set");
  return add(q, layer_norm(cross_attention(q, kv, kv, attn, kv_mask, trace), ln_gamma, ln_beta));
}

void Aggregator::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  visit_attention_params(attn, prefix + ".attn", fn);
  fn(prefix + ".ln.gamma", ln_gamma);
  fn(prefix + ".ln.beta", ln_beta);
}

ShallowFusion ShallowFusion::init(int d_model, int n_heads, Rng& rng) {
  ShallowFusion s;
  s.img_cls = Aggregator::init(d_model, n_heads, rng);
  s.img_seq = Aggregator::init(d_model, n_heads, rng);
  s.cap_cls = Aggregator::init(d_model, n_heads, rng);
  s.cap_seq = Aggregator::init(d_model, n_heads, rng);
  return s;
}

void ShallowFusion::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  img_cls.visit_params(prefix + ".img_cls", fn);
  img_seq.visit_params(prefix + ".img_seq", fn);
  cap_cls.visit_params(prefix + ".cap_cls", fn);
  cap_seq.visit_params(prefix + ".cap_seq", fn);
}

DeepFusion DeepFusion::init(int d_model, int n_heads, Rng& rng) {
  DeepFusion d;
  auto token = [&] {
    std::vector<double> w(static_cast<size_t>(d_model));
    for (auto& v : w) v = rng.normal(0.0, 0.02);
    return Tensor({1, d_model}, std::move(w), true);
  };
  d.p_v = token();
  d.p_l = token();
  d.p_bbox = token();
  d.attn_v = make_attention_params(d_model, n_heads, rng);
  d.attn_l = make_attention_params(d_model, n_heads, rng);
  d.attn_bbox = make_attention_params(d_model, n_heads, rng);
  d.aggr_b = Aggregator::init(d_model, n_heads, rng);
  return d;
}

void DeepFusion::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".p_v", p_v);
  fn(prefix + ".p_l", p_l);
  fn(prefix + ".p_bbox", p_bbox);
  visit_attention_params(attn_v, prefix + ".attn_v", fn);
  visit_attention_params(attn_l, prefix + ".attn_l", fn);
  visit_attention_params(attn_bbox, prefix + ".attn_bbox", fn);
  aggr_b.visit_params(prefix + ".aggr_b", fn);
}

Mlp Mlp::init(int d_in, int d_hidden, int d_out, Rng& rng) {
  Mlp m;
  auto mat = [&](int r, int c) {
    std::vector<double> w(static_cast<size_t>(r) * c);
    for (auto& v : w) v = rng.normal(0.0, 0.02);
    return Tensor({r, c}, std::move(w), true);
  };
  m.w1 = mat(d_in, d_hidden);
  m.b1 = Tensor::zeros({d_hidden}, true);
  m.w2 = mat(d_hidden, d_out);
  m.b2 = Tensor::zeros({d_out}, true);
  return m;
}

Tensor Mlp::forward(const Tensor& x) const {
  return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w1), b1)), w2), b2);
}

void Mlp::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".w1", w1);
  fn(prefix + ".b1", b1);
  fn(prefix + ".w2", w2);
  fn(prefix + ".b2", b2);
}

Heads Heads::init(int d_model, Rng& rng) {
  Heads h;
  h.h_b = Mlp::init(d_model, d_model, 2, rng);
  h.h_v = Mlp::init(d_model, d_model, 2, rng);
  h.h_l = Mlp::init(d_model, d_model, 2, rng);
  h.h_ig = Mlp::init(d_model, d_model, 4, rng);
  h.h_tg = Mlp::init(d_model, d_model, 2, rng);
  return h;
}

void Heads::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  h_b.visit_params(prefix + ".binary", fn);
  h_v.visit_params(prefix + ".type_img", fn);
  h_l.visit_params(prefix + ".type_text", fn);
  h_ig.visit_params(prefix + ".bbox", fn);
  h_tg.visit_params(prefix + ".token", fn);
}

namespace {

Tensor mean_of(const std::vector<Tensor>& xs) {
  Tensor acc = xs[0];
  for (size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return scale(acc, 1.0 / static_cast<double>(xs.size()));
}

// Mean over rows, optionally restricted to masked-in rows.
Tensor row_mean(const Tensor& x, const std::vector<uint8_t>* mask) {
  const int m = x.rows();
  std::vector<double> sel(static_cast<size_t>(m), 0.0);
  int live = 0;
  for (int i = 0; i < m; ++i) {
    const bool on = !mask || (*mask)[static_cast<size_t>(i)];
    if (on) {
      sel[static_cast<size_t>(i)] = 1.0;
      ++live;
    }
  }
  for (auto& v : sel) v /= live;
  return matmul(Tensor({1, m}, std::move(sel)), x);
}

std::vector<uint8_t> tile_mask(const std::vector<uint8_t>& mask, size_t copies) {
  std::vector<uint8_t> out;
  out.reserve(mask.size() * copies);
  for (size_t i = 0; i < copies; ++i) out.insert(out.end(), mask.begin(), mask.end());
  return out;
}

}  // namespace

ShallowFused shallow_fuse(const ShallowFusion& sf,
                          const std::vector<VerificationEntry>& img_entries,
                          const std::vector<VerificationEntry>& cap_entries,
                          const std::vector<uint8_t>& cap_mask, bool fused_attention) {
  ShallowFused out;
  out.cap_mask = cap_mask;

  auto fuse_side = [&](const std::vector<VerificationEntry>& entries, const Aggregator& cls_aggr,
                       const Aggregator& seq_aggr, const std::vector<uint8_t>* seq_mask,
                       Tensor& a_out, Tensor& s_out) {
    if (entries.empty()) return;
    std::vector<Tensor> cls_parts, seq_parts;
    for (const auto& e : entries) {
      cls_parts.push_back(e.cls);
      seq_parts.push_back(e.seq);
    }
    if (fused_attention) {
      Tensor cls_kv = concat_rows(cls_parts);
      Tensor seq_kv = concat_rows(seq_parts);
      std::vector<uint8_t> tiled;
      const std::vector<uint8_t>* km = nullptr;
      if (seq_mask) {
        tiled = tile_mask(*seq_mask, entries.size());
        km = &tiled;
      }
      a_out = cls_aggr.aggr(entries[0].cls, cls_kv);
      s_out = seq_aggr.aggr(entries[0].seq, seq_kv, km);
    } else {
      a_out = mean_of(cls_parts);
      s_out = mean_of(seq_parts);
    }
  };

  fuse_side(img_entries, sf.img_cls, sf.img_seq, nullptr, out.a_img, out.s_img);
  fuse_side(cap_entries, sf.cap_cls, sf.cap_seq, cap_mask.empty() ? nullptr : &cap_mask,
            out.a_cap, out.s_cap);
  return out;
}

TaskFeatures deep_fuse(const DeepFusion& df, const ShallowFused& sf,
                       const std::vector<VerificationEntry>& img_entries,
                       const std::vector<VerificationEntry>& cap_entries, bool fused_attention,
                       AttnTrace* binary_trace, AttnTrace* spatial_trace) {
  TaskFeatures tf;
  tf.s_cap = sf.s_cap;
  tf.cap_mask = sf.cap_mask;
  const std::vector<uint8_t>* cm = sf.cap_mask.empty() ? nullptr : &sf.cap_mask;

  if (sf.s_img.defined()) {
    if (fused_attention) {
      tf.c_v = cross_attention(df.p_v, sf.s_img, sf.s_img, df.attn_v);
      tf.c_bbox = cross_attention(df.p_bbox, sf.s_img, sf.s_img, df.attn_bbox, nullptr,
                                  spatial_trace);
    } else {
      tf.c_v = row_mean(sf.s_img, nullptr);
      tf.c_bbox = tf.c_v;
    }
  }
  if (sf.s_cap.defined()) {
    tf.c_l = fused_attention ? cross_attention(df.p_l, sf.s_cap, sf.s_cap, df.attn_l, cm)
                             : row_mean(sf.s_cap, cm);
  }

  // Binary feature: pairwise elementwise sums of the two streams' summary
  // entries, re-aggregated by the combined query. With one stream dropped,
  // the surviving entries stand alone.
  const bool has_img = !img_entries.empty();
  const bool has_cap = !cap_entries.empty();
  Tensor query;
  if (has_img && has_cap) {
    query = add(sf.a_img, sf.a_cap);
  } else {
    query = has_img ? sf.a_img : sf.a_cap;
  }
  if (fused_attention) {
    // Entry counts can differ under one-sided local-semantics ablations;
    // entries beyond the shorter list enter unpaired.
    std::vector<Tensor> kv_parts;
    const size_t n = std::max(img_entries.size(), cap_entries.size());
    for (size_t k = 0; k < n; ++k) {
      const bool in_img = k < img_entries.size();
      const bool in_cap = k < cap_entries.size();
      if (in_img && in_cap) {
        kv_parts.push_back(add(img_entries[k].cls, cap_entries[k].cls));
      } else {
        kv_parts.push_back(in_img ? img_entries[k].cls : cap_entries[k].cls);
      }
    }
    tf.c_b = df.aggr_b.aggr(query, concat_rows(kv_parts), nullptr, binary_trace);
  } else {
    tf.c_b = query;
  }
  return tf;
}

Predictions run_heads(const Heads& heads, const TaskFeatures& tf) {
  Predictions p;
  p.binary_logits = reshape(heads.h_b.forward(tf.c_b), {2});

  Tensor img_type = tf.c_v.defined() ? heads.h_v.forward(tf.c_v) : Tensor();
  Tensor text_type = tf.c_l.defined() ? heads.h_l.forward(tf.c_l) : Tensor();
  p.has_image_type = img_type.defined();
  p.has_text_type = text_type.defined();
  if (!img_type.defined() && text_type.defined()) img_type = Tensor::zeros({1, 2});
  if (img_type.defined() && !text_type.defined()) text_type = Tensor::zeros({1, 2});
  if (img_type.defined()) {
    p.type_logits = reshape(concat_cols({img_type, text_type}), {4});
  }

  if (tf.c_bbox.defined()) {
    Tensor raw = sigmoid(reshape(heads.h_ig.forward(tf.c_bbox), {4}));
    Tensor x1 = pick(raw, 0), y1 = pick(raw, 1), x2 = pick(raw, 2), y2 = pick(raw, 3);
    p.bbox = stack_scalars({emin(x1, x2), emin(y1, y2), emax(x1, x2), emax(y1, y2)});
  }

  if (tf.s_cap.defined()) {
    p.token_logits = heads.h_tg.forward(tf.s_cap);
  }
  return p;
}

}  // namespace malsf
