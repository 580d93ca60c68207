#pragma once

#include <array>
#include <optional>
#include <vector>

#include "malsf/ops.hpp"

namespace malsf {

// Per-sample supervision. y_m order is (FS, FA, TS, TA); y_ig is an
// (x1,y1,x2,y2) box normalized to [0,1], all-zero on samples without image
// manipulation; y_tg aligns with tokenizer output positions.
struct GroundTruth {
  int y_b = 0;                   // 0 = real, 1 = fake
  std::array<int, 4> y_m{};      // manipulation-type flags
  std::array<double, 4> y_ig{};  // grounding box
  std::vector<int> y_tg;         // per-token manipulation flags, length l_max

  bool image_manipulated() const { return y_m[0] || y_m[1]; }
  bool text_manipulated() const { return y_m[2] || y_m[3]; }
};

struct LossWeights {
  double alpha = 1.5;  // manipulation-type term
  double beta = 0.1;   // grounding term
  double gamma = 1.0;  // token term
};

// -log softmax(logits)[target]
Tensor cross_entropy(const Tensor& logits, int target);

// Mean over the four type classes of binary cross-entropy with logistic
// activation; `live` can restrict the mean to the classes a stream ablation
// actually predicts.
Tensor mcls_loss(const Tensor& type_logits, const std::array<int, 4>& y_m,
                 const std::array<bool, 4>& live = {true, true, true, true});

// L1 plus (1 - GIoU) between sorted [0,1] boxes. Callers skip this loss
// entirely for samples without image manipulation.
Tensor bbox_loss(const Tensor& pred, const std::array<double, 4>& gt);

// Mean token-level cross-entropy over non-pad positions.
Tensor tg_loss(const Tensor& token_logits, const std::vector<int>& y_tg,
               const std::vector<uint8_t>& pad_mask);

// L_bcls + alpha*L_mcls + beta*L_ig + gamma*L_tg; null parts are simply
// absent (binary-only training passes nulls for everything else).
Tensor combined_loss(const Tensor& bcls, const Tensor* mcls, const Tensor* ig,
                     const Tensor* tg, const LossWeights& w);

// Plain-arithmetic GIoU used by tests and by the degenerate-box guard.
double giou_scalar(const std::array<double, 4>& a, const std::array<double, 4>& b);

}  // namespace malsf
