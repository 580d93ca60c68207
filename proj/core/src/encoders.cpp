#include "malsf/encoders.hpp"

#include <array>
#include <cmath>

namespace malsf {

Image Image::filled(int h, int w, uint8_t r, uint8_t g, uint8_t b) {
  Image img;
  img.h = h;
  img.w = w;
  img.rgb.resize(static_cast<size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      img.at(y, x, 0) = r;
      img.at(y, x, 1) = g;
      img.at(y, x, 2) = b;
    }
  return img;
}

MaskBitmap MaskBitmap::zeros(int h, int w) {
  MaskBitmap m;
  m.h = h;
  m.w = w;
  m.bits.assign(static_cast<size_t>(h) * w, 0);
  return m;
}

int MaskBitmap::popcount() const {
  int n = 0;
  for (uint8_t b : bits) n += b;
  return n;
}

std::array<double, 4> mask_bbox_normalized(const MaskBitmap& m) {
  int x1 = m.w, y1 = m.h, x2 = -1, y2 = -1;
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x)
      if (m.at(y, x)) {
        x1 = std::min(x1, x);
        y1 = std::min(y1, y);
        x2 = std::max(x2, x);
        y2 = std::max(y2, y);
      }
  if (x2 < 0) return {0.0, 0.0, 0.0, 0.0};
  return {static_cast<double>(x1) / m.w, static_cast<double>(y1) / m.h,
          static_cast<double>(x2 + 1) / m.w, static_cast<double>(y2 + 1) / m.h};
}

void visit_attention_params(AttentionParams& p, const std::string& prefix,
                            const ParamVisitor& fn) {
  fn(prefix + ".wq", p.w_q);
  fn(prefix + ".bq", p.b_q);
  fn(prefix + ".wk", p.w_k);
  fn(prefix + ".bk", p.b_k);
  fn(prefix + ".wv", p.w_v);
  fn(prefix + ".bv", p.b_v);
  fn(prefix + ".wo", p.w_o);
  fn(prefix + ".bo", p.b_o);
}

namespace {

Tensor init_matrix(int rows, int cols, Rng& rng, double std = 0.02) {
  std::vector<double> w(static_cast<size_t>(rows) * cols);
  for (auto& v : w) v = rng.normal(0.0, std);
  return Tensor({rows, cols}, std::move(w), true);
}

Tensor mlp2(const Tensor& x, const Tensor& w1, const Tensor& b1, const Tensor& w2,
            const Tensor& b2) {
  return add_rowvec(matmul(gelu(add_rowvec(matmul(x, w1), b1)), w2), b2);
}

}  // namespace

EncoderBlock EncoderBlock::init(int d_model, int n_heads, Rng& rng) {
  EncoderBlock b;
  b.attn = make_attention_params(d_model, n_heads, rng);
  b.ln1_gamma = Tensor::full({d_model}, 1.0, true);
  b.ln1_beta = Tensor::zeros({d_model}, true);
  b.ff_w1 = init_matrix(d_model, 4 * d_model, rng);
  b.ff_b1 = Tensor::zeros({4 * d_model}, true);
  b.ff_w2 = init_matrix(4 * d_model, d_model, rng);
  b.ff_b2 = Tensor::zeros({d_model}, true);
  b.ln2_gamma = Tensor::full({d_model}, 1.0, true);
  b.ln2_beta = Tensor::zeros({d_model}, true);
  return b;
}

Tensor EncoderBlock::forward(const Tensor& x, const std::vector<uint8_t>* key_mask) const {
  Tensor h = layer_norm(add(x, cross_attention(x, x, x, attn, key_mask)), ln1_gamma, ln1_beta);
  return layer_norm(add(h, mlp2(h, ff_w1, ff_b1, ff_w2, ff_b2)), ln2_gamma, ln2_beta);
}

void EncoderBlock::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  visit_attention_params(attn, prefix + ".attn", fn);
  fn(prefix + ".ln1.gamma", ln1_gamma);
  fn(prefix + ".ln1.beta", ln1_beta);
  fn(prefix + ".ff.w1", ff_w1);
  fn(prefix + ".ff.b1", ff_b1);
  fn(prefix + ".ff.w2", ff_w2);
  fn(prefix + ".ff.b2", ff_b2);
  fn(prefix + ".ln2.gamma", ln2_gamma);
  fn(prefix + ".ln2.beta", ln2_beta);
}

TextEncoder::TextEncoder(const TextEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  tok_emb_ = init_matrix(cfg.vocab_size, cfg.d_model, rng);
  pos_emb_ = init_matrix(cfg.l_max, cfg.d_model, rng);
  for (int i = 0; i < cfg.n_layers; ++i)
    blocks_.push_back(EncoderBlock::init(cfg.d_model, cfg.n_heads, rng));
}

TextFeature TextEncoder::encode(const TokenSeq& seq) const {
  if (static_cast<int>(seq.ids.size()) != cfg_.l_max) {
    throw ShapeError("encode_text: sequence length " + std::to_string(seq.ids.size()) +
                     " != l_max " + std::to_string(cfg_.l_max));
  }
  for (int id : seq.ids) {
    if (id < 0 || id >= cfg_.vocab_size) {
      throw std::out_of_range("encode_text: token id " + std::to_string(id) +
                              " out of vocab size " + std::to_string(cfg_.vocab_size));
    }
  }
  Tensor x = add(gather_rows(tok_emb_, seq.ids), pos_emb_);
  for (const auto& b : blocks_) x = b.forward(x, &seq.attn_mask);
  TextFeature f;
  f.seq = x;
  f.cls = slice_rows(x, 0, 1);
  f.mask = seq.attn_mask;
  return f;
}

void TextEncoder::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".tok_emb", tok_emb_);
  fn(prefix + ".pos_emb", pos_emb_);
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].visit_params(prefix + ".block" + std::to_string(i), fn);
}

VisualEncoder::VisualEncoder(const VisualEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
  patch_w_ = init_matrix(cfg.patch * cfg.patch * 3, cfg.d_model, rng);
  patch_b_ = Tensor::zeros({cfg.d_model}, true);
  pos_emb_ = init_matrix(cfg.grid_h() * cfg.grid_w(), cfg.d_model, rng);
  for (int i = 0; i < cfg.n_layers; ++i)
    blocks_.push_back(EncoderBlock::init(cfg.d_model, cfg.n_heads, rng));
}

Tensor VisualEncoder::encode(const Image& img) const {
  if (img.h != cfg_.image_h || img.w != cfg_.image_w) {
    throw ShapeError("encode_image: image is " + std::to_string(img.h) + "x" +
                     std::to_string(img.w) + ", expected " + std::to_string(cfg_.image_h) +
                     "x" + std::to_string(cfg_.image_w));
  }
  const int p = cfg_.patch;
  if (img.h % p != 0 || img.w % p != 0) {
    throw ShapeError("encode_image: image dims not divisible by patch size " +
                     std::to_string(p));
  }
  const int gh = cfg_.grid_h(), gw = cfg_.grid_w();
  const int pd = p * p * 3;
  std::vector<double> patches(static_cast<size_t>(gh) * gw * pd);
  size_t o = 0;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx)
      for (int py = 0; py < p; ++py)
        for (int px = 0; px < p; ++px)
          for (int c = 0; c < 3; ++c)
            patches[o++] = img.at(gy * p + py, gx * p + px, c) / 255.0;
  Tensor x = add_rowvec(matmul(Tensor({gh * gw, pd}, std::move(patches)), patch_w_), patch_b_);
  x = add(x, pos_emb_);
  for (const auto& b : blocks_) x = b.forward(x, nullptr);
  return reshape(x, {gh, gw, cfg_.d_model});
}

void VisualEncoder::visit_params(const std::string& prefix, const ParamVisitor& fn) {
  fn(prefix + ".patch_w", patch_w_);
  fn(prefix + ".patch_b", patch_b_);
  fn(prefix + ".pos_emb", pos_emb_);
  for (size_t i = 0; i < blocks_.size(); ++i)
    blocks_[i].visit_params(prefix + ".block" + std::to_string(i), fn);
}

std::vector<uint8_t> downsample_mask(const MaskBitmap& mask, int patch) {
  if (mask.h % patch != 0 || mask.w % patch != 0) {
    throw ShapeError("downsample_mask: mask dims not divisible by patch size");
  }
  const int gh = mask.h / patch, gw = mask.w / patch;
  std::vector<uint8_t> out(static_cast<size_t>(gh) * gw, 0);
  const int area = patch * patch;
  for (int gy = 0; gy < gh; ++gy)
    for (int gx = 0; gx < gw; ++gx) {
      int count = 0;
      for (int py = 0; py < patch; ++py)
        for (int px = 0; px < patch; ++px) count += mask.at(gy * patch + py, gx * patch + px);
      out[static_cast<size_t>(gy) * gw + gx] = (2 * count >= area) ? 1 : 0;
    }
  return out;
}

namespace {

PooledFeature pool_with_cell_mask(const Tensor& grid, const std::vector<uint8_t>& cells) {
  if (grid.ndim() != 3) throw ShapeError("mask_pool: grid must be [h x w x c]");
  const int gh = grid.dim(0), gw = grid.dim(1), c = grid.dim(2);
  const int n = gh * gw;
  int live = 0;
  for (uint8_t b : cells) live += b;
  if (live == 0) throw EmptyRegionError("mask_pool: region empty after downsampling");

  Tensor flat = reshape(grid, {n, c});
  std::vector<double> sel(static_cast<size_t>(n), 0.0);
  std::vector<double> keep(static_cast<size_t>(n), 0.0);
  for (int i = 0; i < n; ++i) {
    keep[static_cast<size_t>(i)] = cells[static_cast<size_t>(i)] ? 1.0 : 0.0;
    sel[static_cast<size_t>(i)] = cells[static_cast<size_t>(i)] ? 1.0 / live : 0.0;
  }
  PooledFeature f;
  f.cls = matmul(Tensor({1, n}, std::move(sel)), flat);
  Tensor masked = mul_rowwise(flat, Tensor({n}, std::move(keep)));
  f.seq = concat_rows({f.cls, masked});
  return f;
}

}  // namespace

PooledFeature mask_pool(const Tensor& grid, const MaskBitmap& mask) {
  if (grid.ndim() != 3) throw ShapeError("mask_pool: grid must be [h x w x c]");
  const int gh = grid.dim(0), gw = grid.dim(1);
  if (mask.h % gh != 0 || mask.w % gw != 0) {
    throw ShapeError("mask_pool: mask " + std::to_string(mask.h) + "x" + std::to_string(mask.w) +
                     " incompatible with grid " + std::to_string(gh) + "x" + std::to_string(gw));
  }
  const int patch = mask.h / gh;
  if (mask.w / gw != patch) throw ShapeError("mask_pool: non-square downsampling factor");
  return pool_with_cell_mask(grid, downsample_mask(mask, patch));
}

PooledFeature global_pool(const Tensor& grid) {
  if (grid.ndim() != 3) throw ShapeError("global_pool: grid must be [h x w x c]");
  const int n = grid.dim(0) * grid.dim(1);
  return pool_with_cell_mask(grid, std::vector<uint8_t>(static_cast<size_t>(n), 1));
}

}  // namespace malsf
