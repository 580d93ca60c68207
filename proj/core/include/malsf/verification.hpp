#pragma once

#include <optional>
#include <string>
#include <vector>

#include "malsf/encoders.hpp"
#include "malsf/ops.hpp"

namespace malsf {

// Relevance gates for local semantics (one weight per mask-label pair).
// Weights of live pairs are sigmoid outputs in (0,1); padded null slots are
// reported as exactly 0.
struct GateWeights {
  std::vector<Tensor> w_v;  // visual-region weights, one {1} tensor per pair
  std::vector<Tensor> w_l;  // label weights
};

// Bias-free projections used by the gate dot products.
struct GateProjections {
  Tensor phi_v;  // [d x d]
  Tensor phi_l;  // [d x d]

  static GateProjections init(int d_model, Rng& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// w_v[i] = sigmoid(phi_l(caption cls) . phi_v(region cls i))
// w_l[j] = sigmoid(phi_v(global image cls) . phi_l(label cls j))
GateWeights gate_weights(const Tensor& l_cap_cls, const Tensor& v_img_cls,
                         const std::vector<std::pair<Tensor, Tensor>>& pair_cls,
                         const GateProjections& proj);

// One key-value context for a verification stream: token rows, an optional
// key mask, and an optional gate scale applied to the tokens before use.
struct VerifyContext {
  Tensor seq;
  std::vector<uint8_t> mask;  // empty = all keys live
  Tensor gate;                // undefined = ungated
};

// Verification output for one (query, context) application, split into the
// row-0 summary and the full sequence (same length as the query).
struct VerificationEntry {
  Tensor cls;  // [1 x d]
  Tensor seq;  // [query len x d]
};

// Block layout: self-attention over the query, cross-attention into the
// context, then feed-forward; post-LN residuals throughout.
struct VerificationBlock {
  AttentionParams self_attn;
  Tensor ln0_gamma, ln0_beta;
  AttentionParams cross_attn;
  Tensor ln1_gamma, ln1_beta;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;
  Tensor ln2_gamma, ln2_beta;

  static VerificationBlock init(int d_model, int n_heads, Rng& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// A stack of verification blocks applied once per context with a single
// shared parameter set. The two directions of the model hold separate
// stream instances.
class VerificationStream {
 public:
  VerificationStream(int d_model, int n_heads, int depth, Rng& rng);

  // Applies the stream to one context. `trace`, when given, receives the
  // final block's cross-attention probabilities.
  VerificationEntry verify(const Tensor& query_seq, const std::vector<uint8_t>& query_mask,
                           const VerifyContext& ctx, AttnTrace* trace = nullptr) const;

  // N+1 independent applications over [global context, gated locals...].
  std::vector<VerificationEntry> verify_all(const Tensor& query_seq,
                                            const std::vector<uint8_t>& query_mask,
                                            const std::vector<VerifyContext>& contexts,
                                            std::vector<AttnTrace>* traces = nullptr) const;

  int depth() const { return static_cast<int>(blocks_.size()); }
  const VerificationBlock& block(int i) const { return blocks_[static_cast<size_t>(i)]; }
  void visit_params(const std::string& prefix, const ParamVisitor& fn);

 private:
  std::vector<VerificationBlock> blocks_;
};

}  // namespace malsf
