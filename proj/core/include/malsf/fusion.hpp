#pragma once

#include <optional>

#include "malsf/verification.hpp"

namespace malsf {

// Residual cross-attention aggregation: Q + LN(CrossAttn(Q, KV, KV)).
// Summary (cls) vectors are treated as length-1 sequences so one mechanism
// serves both the cls and seq paths.
struct Aggregator {
  AttentionParams attn;
  Tensor ln_gamma, ln_beta;

  static Aggregator init(int d_model, int n_heads, Rng& rng);
  Tensor aggr(const Tensor& q, const Tensor& kv,
              const std::vector<uint8_t>* kv_mask = nullptr,
              AttnTrace* trace = nullptr) const;
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// Aggregated verification features. a_* summarize the cls path; s_* carry
// the full sequences (s_cap rows align with caption token positions).
struct ShallowFused {
  Tensor a_img, a_cap;        // [1 x d]
  Tensor s_img;               // [(1 + grid cells) x d]
  Tensor s_cap;               // [l_max x d]
  std::vector<uint8_t> cap_mask;
};

// Four separately parameterized aggregators, one per (stream, granularity).
struct ShallowFusion {
  Aggregator img_cls, img_seq, cap_cls, cap_seq;

  static ShallowFusion init(int d_model, int n_heads, Rng& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

struct TaskFeatures {
  Tensor c_b;     // binary head input
  Tensor c_v;     // image-manipulation type head input
  Tensor c_l;     // text-manipulation type head input
  Tensor c_bbox;  // grounding head input
  Tensor s_cap;   // token-grounding features (passthrough)
  std::vector<uint8_t> cap_mask;
};

// Learned aggregate tokens plus task-specific attention; Eq-level fusion of
// the shallow outputs into per-task features.
struct DeepFusion {
  Tensor p_v, p_l, p_bbox;  // learned [1 x d] tokens
  AttentionParams attn_v, attn_l, attn_bbox;
  Aggregator aggr_b;

  static DeepFusion init(int d_model, int n_heads, Rng& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// Two-layer perceptron head (d -> d -> out, GELU).
struct Mlp {
  Tensor w1, b1, w2, b2;

  static Mlp init(int d_in, int d_hidden, int d_out, Rng& rng);
  Tensor forward(const Tensor& x) const;
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// Model outputs for one sample. Entries may be undefined under stream
// ablations (e.g. no token logits without the text-as-query stream);
// undefined features make the corresponding metric absent, never zero.
struct Predictions {
  Tensor binary_logits;  // {2}
  Tensor type_logits;    // {4}, order FS FA TS TA; undefined halves possible
  Tensor bbox;           // {4}, (x1,y1,x2,y2) in [0,1], sorted per axis
  Tensor token_logits;   // [l_max x 2]
  bool has_image_type = false;  // FS/FA logits populated
  bool has_text_type = false;   // TS/TA logits populated
};

struct Heads {
  Mlp h_b;   // d -> 2
  Mlp h_v;   // d -> 2 (FS, FA)
  Mlp h_l;   // d -> 2 (TS, TA)
  Mlp h_ig;  // d -> 4 bbox
  Mlp h_tg;  // d -> 2 per token

  static Heads init(int d_model, Rng& rng);
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// Shallow fusion over the two entry lists (global entry first). When
// `fused_attention` is false the aggregators are bypassed and entries are
// averaged position-wise instead.
ShallowFused shallow_fuse(const ShallowFusion& sf,
                          const std::vector<VerificationEntry>& img_entries,
                          const std::vector<VerificationEntry>& cap_entries,
                          const std::vector<uint8_t>& cap_mask, bool fused_attention);

// Deep fusion into task features. With `fused_attention` false, learned-token
// attention is replaced by mean pooling over the shallow sequences and the
// binary feature falls back to the elementwise sum of the stream summaries.
// Entries from a dropped stream arrive empty and leave the dependent
// features undefined.
TaskFeatures deep_fuse(const DeepFusion& df, const ShallowFused& sf,
                       const std::vector<VerificationEntry>& img_entries,
                       const std::vector<VerificationEntry>& cap_entries, bool fused_attention,
                       AttnTrace* binary_trace = nullptr, AttnTrace* spatial_trace = nullptr);

Predictions run_heads(const Heads& heads, const TaskFeatures& tf);

}  // namespace malsf
