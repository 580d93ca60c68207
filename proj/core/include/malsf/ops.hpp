#pragma once

#include <cstdint>
#include <vector>

#include "malsf/tensor.hpp"

namespace malsf {

// Elementwise arithmetic (same-shape operands).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div_t(const Tensor& a, const Tensor& b);
Tensor emin(const Tensor& a, const Tensor& b);  // ties resolve to a
Tensor emax(const Tensor& a, const Tensor& b);  // ties resolve to a

Tensor scale(const Tensor& a, double c);
Tensor add_const(const Tensor& a, double c);
Tensor neg(const Tensor& a);
// a scaled by a single-element tensor; gradient flows to both.
Tensor mul_scalar(const Tensor& a, const Tensor& s);

// Broadcasts over a 2-d left operand.
Tensor add_rowvec(const Tensor& a, const Tensor& b);   // b added to every row
Tensor mul_rowwise(const Tensor& a, const Tensor& c);  // row i scaled by c[i]

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor sum(const Tensor& a);       // -> {1}
Tensor mean_all(const Tensor& a);  // -> {1}

Tensor reshape(const Tensor& a, Shape s);
Tensor slice_rows(const Tensor& a, int row0, int len);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor stack_scalars(const std::vector<Tensor>& xs);  // n single-element -> {n}
Tensor pick(const Tensor& a, int64_t flat_index);     // -> {1}
Tensor gather_rows(const Tensor& table, const std::vector<int>& ids);

// Row-wise nonlinearities over the last axis.
Tensor softmax_lastdim(const Tensor& a);
Tensor log_softmax_lastdim(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor gelu(const Tensor& a);  // tanh approximation
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor relu(const Tensor& a);
Tensor abs_val(const Tensor& a);

// Multi-head scaled dot-product attention with projection weights applied on
// both sides; one fused graph node. Sequences are given as [len x d_model]
// with one token per row.
struct AttentionParams {
  int d_model = 0;
  int n_heads = 1;
  Tensor w_q, w_k, w_v, w_o;  // each [d_model x d_model]
  Tensor b_q, b_k, b_v, b_o;  // each [d_model]
};

AttentionParams make_attention_params(int d_model, int n_heads, class Rng& rng,
                                      double init_std = 0.02);

// Head-averaged attention probabilities captured for inspection dumps.
struct AttnTrace {
  int lq = 0, lk = 0;
  std::vector<double> probs;  // row-major [lq x lk]
};

Tensor cross_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                       const AttentionParams& p,
                       const std::vector<uint8_t>* key_mask = nullptr,
                       AttnTrace* trace = nullptr);

}  // namespace malsf
