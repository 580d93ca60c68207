#pragma once

#include <functional>
#include <string>

#include "malsf/image.hpp"
#include "malsf/ops.hpp"
#include "malsf/rng.hpp"
#include "malsf/vocab.hpp"

namespace malsf {

using ParamVisitor = std::function<void(const std::string&, Tensor&)>;

void visit_attention_params(AttentionParams& p, const std::string& prefix,
                            const ParamVisitor& fn);

// Post-LN transformer block: x = LN1(x + SelfAttn(x)); x = LN2(x + FFN(x)).
struct EncoderBlock {
  AttentionParams attn;
  Tensor ln1_gamma, ln1_beta;
  Tensor ff_w1, ff_b1, ff_w2, ff_b2;  // d -> 4d -> d, GELU
  Tensor ln2_gamma, ln2_beta;

  static EncoderBlock init(int d_model, int n_heads, Rng& rng);
  Tensor forward(const Tensor& x, const std::vector<uint8_t>* key_mask) const;
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
};

// Encoder output: full token sequence plus the row-0 summary vector.
// For text, row 0 is the [CLS] position; for pooled image features it is
// the region mean.
struct TextFeature {
  Tensor cls;  // [1 x d]
  Tensor seq;  // [l_max x d], row 0 is the [CLS] output
  std::vector<uint8_t> mask;  // key mask for downstream attention
};

struct TextEncoderConfig {
  int vocab_size = 16;
  int d_model = 32;
  int n_heads = 4;
  int n_layers = 2;
  int l_max = 16;
};

// Shared text encoder: one instance encodes both captions and region labels
// so all text features live in the same latent space.
class TextEncoder {
 public:
  TextEncoder(const TextEncoderConfig& cfg, Rng& rng);

  TextFeature encode(const TokenSeq& seq) const;
  const TextEncoderConfig& config() const { return cfg_; }
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
  Tensor& position_embedding() { return pos_emb_; }

 private:
  TextEncoderConfig cfg_;
  Tensor tok_emb_;  // [vocab x d]
  Tensor pos_emb_;  // [l_max x d]
  std::vector<EncoderBlock> blocks_;
};

struct VisualEncoderConfig {
  int d_model = 32;  // channel width C
  int n_heads = 4;
  int n_layers = 2;
  int patch = 4;
  int image_h = 32;
  int image_w = 32;

  int grid_h() const { return image_h / patch; }
  int grid_w() const { return image_w / patch; }
};

// Patch-embedding transformer over non-overlapping PxP patches. Produces a
// [grid_h x grid_w x d_model] feature grid; summary vectors come from
// pooling, not a learned token.
class VisualEncoder {
 public:
  VisualEncoder(const VisualEncoderConfig& cfg, Rng& rng);

  Tensor encode(const Image& img) const;  // [h x w x d]
  const VisualEncoderConfig& config() const { return cfg_; }
  void visit_params(const std::string& prefix, const ParamVisitor& fn);
  Tensor& position_embedding() { return pos_emb_; }

 private:
  VisualEncoderConfig cfg_;
  Tensor patch_w_;  // [patch*patch*3 x d]
  Tensor patch_b_;  // [d]
  Tensor pos_emb_;  // [grid cells x d]
  std::vector<EncoderBlock> blocks_;
};

struct EmptyRegionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Pooled image feature: seq row 0 is the region mean, rows 1.. are the
// feature grid with cells outside the region zeroed.
struct PooledFeature {
  Tensor cls;  // [1 x d]
  Tensor seq;  // [(1 + grid cells) x d]
};

// A grid cell counts as inside the region iff at least half of its pixels
// are set (ties in).
std::vector<uint8_t> downsample_mask(const MaskBitmap& mask, int patch);

// Region pooling of a feature grid under a pixel mask. Throws
// EmptyRegionError when the downsampled mask has no set cell; callers drop
// such pairs.
PooledFeature mask_pool(const Tensor& grid, const MaskBitmap& mask);

// Global variant: mean over all cells (the all-ones mask).
PooledFeature global_pool(const Tensor& grid);

}  // namespace malsf
