#include "malsf/verification.hpp"

namespace malsf {

GateProjections GateProjections::init(int d_model, Rng& rng) {
  GateProjections p;
  auto mat = [&] {
    std::vector<double> w(static_cast<size_t>(d_model) * d_model);
    for (auto& v : w) v = rng.normal(0.0, 0.02);
    return Tensor({d_model, d_model}, std::move(w), true);
  };
  p.phi_v = mat();
  p.phi_l = mat();
  return p;
}

void GateProjections::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".phi_v", phi_v);
  fn(prefix + ".phi_l", phi_l);
}

GateWeights gate_weights(const Tensor& l_cap_cls, const Tensor& v_img_cls,
                         const std::vector<std::pair<Tensor, Tensor>>& pair_cls,
                         const GateProjections& proj) {
  GateWeights gw;
  Tensor cap_proj = matmul(l_cap_cls, proj.phi_l);  // [1 x d]
  Tensor img_proj = matmul(v_img_cls, proj.phi_v);
  for (const auto& [v_cls, l_cls] : pair_cls) {
    Tensor region_proj = matmul(v_cls, proj.phi_v);
    Tensor label_proj = matmul(l_cls, proj.phi_l);
    gw.w_v.push_back(reshape(sigmoid(matmul(cap_proj, transpose(region_proj))), {1}));
    gw.w_l.push_back(reshape(sigmoid(matmul(img_proj, transpose(label_proj))), {1}));
  }
  return gw;
}

VerificationBlock VerificationBlock::init(int d_model, int n_heads, Rng& rng) {
  VerificationBlock b;
  auto mat = [&](int r, int c) {
    std::vector<double> w(static_cast<size_t>(r) * c);
    for (auto& v : w) v = rng.normal(0.0, 0.02);
    return Tensor({r, c}, std::move(w), true);
  };
  b.self_attn = make_attention_params(d_model, n_heads, rng);
  b.ln0_gamma = Tensor::full({d_model}, 1.0, true);
  b.ln0_beta = Tensor::zeros({d_model}, true);
  b.cross_attn = make_attention_params(d_model, n_heads, rng);
  b.ln1_gamma = Tensor::full({d_model}, 1.0, true);
  b.ln1_beta = Tensor::zeros({d_model}, true);
  b.ff_w1 = mat(d_model, 4 * d_model);
  b.ff_b1 = Tensor::zeros({4 * d_model}, true);
  b.ff_w2 = mat(4 * d_model, d_model);
  b.ff_b2 = Tensor::zeros({d_model}, true);
  b.ln2_gamma = Tensor::full({d_model}, 1.0, true);
  b.ln2_beta = Tensor::zeros({d_model}, true);
  return b;
}

void VerificationBlock::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  visit_attention_params(self_attn, prefix + ".self", fn);
  fn(prefix + ".ln0.gamma", ln0_gamma);
  fn(prefix + ".ln0.beta", ln0_beta);
  visit_attention_params(cross_attn, prefix + ".cross", fn);
  fn(prefix + ".ln1.gamma", ln1_gamma);
  fn(prefix + ".ln1.beta", ln1_beta);
  fn(prefix + ".ff.w1", ff_w1);
  fn(prefix + ".ff.b1", ff_b1);
  fn(prefix + ".ff.w2", ff_w2);
  fn(prefix + ".ff.b2", ff_b2);
  fn(prefix + ".ln2.gamma", ln2_gamma);
  fn(prefix + ".ln2.beta", ln2_beta);
}

VerificationStream::VerificationStream(int d_model, int n_heads, int depth, Rng& rng) {
  for (int i = 0; i < depth; ++i) blocks_.push_back(VerificationBlock::init(d_model, n_heads, rng));
}

VerificationEntry VerificationStream::verify(const Tensor& query_seq,
                                             const std::vector<uint8_t>& query_mask,
                                             const VerifyContext& ctx, AttnTrace* trace) const {
  if (!ctx.seq.defined()) throw ShapeError("verify: undefined context");
  Tensor kv = ctx.gate.defined() ? mul_scalar(ctx.seq, ctx.gate) : ctx.seq;
  const std::vector<uint8_t>* qm = query_mask.empty() ? nullptr : &query_mask;
  const std::vector<uint8_t>* cm = ctx.mask.empty() ? nullptr : &ctx.mask;

  Tensor x = query_seq;
  for (size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    AttnTrace* t = (trace && i + 1 == blocks_.size()) ? trace : nullptr;
    x = layer_norm(add(x, cross_attention(x, x, x, b.self_attn, qm)), b.ln0_gamma, b.ln0_beta);
    x = layer_norm(add(x, cross_attention(x, kv, kv, b.cross_attn, cm, t)), b.ln1_gamma,
                   b.ln1_beta);
    Tensor ff = add_rowvec(matmul(gelu(add_rowvec(matmul(x, b.ff_w1), b.ff_b1)), b.ff_w2), b.ff_b2);
    x = layer_norm(add(x, ff), b.ln2_gamma, b.ln2_beta);
  }
  VerificationEntry e;
  e.seq = x;
  e.cls = slice_rows(x, 0, 1);
  return e;
}

std::vector<VerificationEntry> VerificationStream::verify_all(
    const Tensor& query_seq, const std::vector<uint8_t>& query_mask,
    const std::vector<VerifyContext>& contexts, std::vector<AttnTrace>* traces) const {
  if (contexts.empty()) throw ShapeError("verify_all: no contexts");
  std::vector<VerificationEntry> out;
  out.reserve(contexts.size());
  if (traces) traces->resize(contexts.size());
  for (size_t i = 0; i < contexts.size(); ++i) {
    out.push_back(verify(query_seq, query_mask, contexts[i], traces ? &(*traces)[i] : nullptr));
  }
  return out;
}

void VerificationStream::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].visit_params(prefix + ".block" + std::to_string(i), fn);
}

}  // namespace malsf
