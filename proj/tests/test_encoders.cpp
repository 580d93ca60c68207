#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "malsf/encoders.hpp"

using namespace malsf;

namespace {

Tensor random_grid(int h, int w, int c, Rng& rng) {
  std::vector<double> data(static_cast<size_t>(h) * w * c);
  for (auto& v : data) v = rng.normal();
  return Tensor({h, w, c}, std::move(data));
}

}  // namespace

TEST_CASE("tokenize: empty, known words, truncation") {
  const Vocab& v = Vocab::synthetic();

  TokenSeq empty = tokenize("", v, 8);
  CHECK(empty.ids[0] == Vocab::kCls);
  for (int i = 1; i < 8; ++i) CHECK(empty.ids[static_cast<size_t>(i)] == Vocab::kPad);
  CHECK(empty.attn_mask == std::vector<uint8_t>{1, 0, 0, 0, 0, 0, 0, 0});

  TokenSeq rc = tokenize("red circle", v, 6);
  CHECK(rc.ids[0] == Vocab::kCls);
  CHECK(rc.ids[1] == v.id_of("red"));
  CHECK(rc.ids[2] == v.id_of("circle"));
  CHECK(rc.ids[3] == Vocab::kPad);
  CHECK(rc.attn_mask == std::vector<uint8_t>{1, 1, 1, 0, 0, 0});

  std::string longer;
  for (int i = 0; i < 10; ++i) longer += "red ";
  TokenSeq tr = tokenize(longer, v, 6);
  CHECK(tr.ids.size() == 6);
  for (uint8_t m : tr.attn_mask) CHECK(m == 1);

  TokenSeq unk = tokenize("zebra", v, 4);
  CHECK(unk.ids[1] == Vocab::kUnk);
}

TEST_CASE("encode_text is deterministic and rejects out-of-range ids") {
  Rng rng(3);
  TextEncoder enc({16, 16, 4, 2, 8}, rng);
  const Vocab& v = Vocab::synthetic();
  TokenSeq a = tokenize("red circle", v, 8);
  TextFeature f1 = enc.encode(a);
  TextFeature f2 = enc.encode(a);
  CHECK(f1.seq.data() == f2.seq.data());  // bit-identical
  CHECK(f1.cls.data() == f2.cls.data());

  TokenSeq bad = a;
  bad.ids[2] = 99;
  CHECK_THROWS_AS(enc.encode(bad), std::out_of_range);
}

TEST_CASE("caption and label share one encoder: bit-identical features") {
  Rng rng(4);
  TextEncoder enc({16, 16, 4, 2, 8}, rng);
  const Vocab& v = Vocab::synthetic();
  // same string used once as a caption and once as a region label
  TextFeature as_caption = enc.encode(tokenize("blue square", v, 8));
  TextFeature as_label = enc.encode(tokenize("blue square", v, 8));
  CHECK(as_caption.seq.data() == as_label.seq.data());

  // parameter identity: both calls read the same underlying storage
  std::vector<const TensorImpl*> first, second;
  enc.visit_params("t", [&](const std::string&, Tensor& t) { first.push_back(t.impl()); });
  enc.visit_params("t", [&](const std::string&, Tensor& t) { second.push_back(t.impl()); });
  CHECK(first == second);
}

TEST_CASE("encode_text permutation equivariance with zeroed positions") {
  Rng rng(5);
  TextEncoder enc({16, 16, 4, 2, 8}, rng);
  for (auto& p : enc.position_embedding().data()) p = 0.0;
  const Vocab& v = Vocab::synthetic();
  TextFeature a = enc.encode(tokenize("red circle", v, 8));
  TextFeature b = enc.encode(tokenize("circle red", v, 8));
  const int d = 16;
  for (int c = 0; c < d; ++c) {
    CHECK(a.seq.at({1, c}) == doctest::Approx(b.seq.at({2, c})).epsilon(1e-12));
    CHECK(a.seq.at({2, c}) == doctest::Approx(b.seq.at({1, c})).epsilon(1e-12));
    CHECK(a.seq.at({0, c}) == doctest::Approx(b.seq.at({0, c})).epsilon(1e-12));
  }
}

TEST_CASE("encode_image: purity, degenerate grid, dimension checks") {
  Rng rng(6);
  VisualEncoder enc({16, 4, 2, 4, 32, 32}, rng);
  Image img = Image::filled(32, 32, 10, 120, 240);
  Tensor g1 = enc.encode(img);
  Tensor g2 = enc.encode(img);
  CHECK(g1.data() == g2.data());
  CHECK(g1.shape() == Shape{8, 8, 16});

  Rng rng2(7);
  VisualEncoder one_patch({16, 4, 1, 32, 32, 32}, rng2);
  Tensor g3 = one_patch.encode(img);
  CHECK(g3.shape() == Shape{1, 1, 16});

  Image wrong = Image::filled(16, 16, 0, 0, 0);
  CHECK_THROWS_AS(enc.encode(wrong), ShapeError);
}

TEST_CASE("constant image with zeroed positions gives identical grid cells") {
  Rng rng(8);
  VisualEncoder enc({16, 4, 2, 4, 32, 32}, rng);
  for (auto& p : enc.position_embedding().data()) p = 0.0;
  Tensor grid = enc.encode(Image::filled(32, 32, 200, 40, 90));
  for (int h = 0; h < 8; ++h)
    for (int w = 0; w < 8; ++w)
      for (int c = 0; c < 16; ++c)
        CHECK(grid.at({h, w, c}) == doctest::Approx(grid.at({0, 0, c})).epsilon(1e-12));
}

TEST_CASE("downsample_mask majority rule with ties in") {
  MaskBitmap m = MaskBitmap::zeros(8, 8);
  // top-left 4x4 patch: exactly half set -> tie -> in
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) m.at(y, x) = 1;
  // top-right patch: 7 of 16 -> out
  for (int y = 0; y < 7; ++y) m.at(y, 4) = 1;
  auto cells = downsample_mask(m, 4);
  CHECK(cells == std::vector<uint8_t>{1, 0, 0, 0});
}

TEST_CASE("mask_pool with all-ones mask equals global pooling exactly") {
  Rng rng(9);
  Tensor grid = random_grid(4, 4, 8, rng);
  MaskBitmap ones = MaskBitmap::zeros(16, 16);
  for (auto& b : ones.bits) b = 1;
  PooledFeature masked = mask_pool(grid, ones);
  PooledFeature global = global_pool(grid);
  CHECK(masked.cls.data() == global.cls.data());
  CHECK(masked.seq.data() == global.seq.data());
}

TEST_CASE("mask_pool single-cell region picks that cell") {
  Rng rng(10);
  Tensor grid = random_grid(4, 4, 8, rng);
  MaskBitmap m = MaskBitmap::zeros(16, 16);
  const int cell_h = 2, cell_w = 1;  // fully cover one 4x4 patch
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) m.at(cell_h * 4 + y, cell_w * 4 + x) = 1;
  PooledFeature f = mask_pool(grid, m);
  for (int c = 0; c < 8; ++c) {
    CHECK(f.cls.at({0, c}) == grid.at({cell_h, cell_w, c}));
  }
  // sequence: row 0 is the mean, remaining rows are the masked grid
  for (int cell = 0; cell < 16; ++cell) {
    for (int c = 0; c < 8; ++c) {
      const double v = f.seq.at({1 + cell, c});
      if (cell == cell_h * 4 + cell_w) {
        CHECK(v == grid.at({cell_h, cell_w, c}));
      } else {
        CHECK(v == 0.0);
      }
    }
  }
}

TEST_CASE("mask_pool mean matches a brute-force double loop") {
  Rng rng(11);
  Tensor grid = random_grid(8, 8, 16, rng);
  Rng mask_rng(12);
  MaskBitmap m = MaskBitmap::zeros(32, 32);
  for (auto& b : m.bits) b = mask_rng.below(2) ? 1 : 0;

  const auto cells = downsample_mask(m, 4);
  bool any = false;
  for (uint8_t c : cells) any = any || c;
  REQUIRE(any);

  PooledFeature f = mask_pool(grid, m);
  for (int c = 0; c < 16; ++c) {
    double total = 0.0;
    int count = 0;
    for (int h = 0; h < 8; ++h)
      for (int w = 0; w < 8; ++w)
        if (cells[static_cast<size_t>(h) * 8 + w]) {
          total += grid.at({h, w, c});
          ++count;
        }
    CHECK(f.cls.at({0, c}) == doctest::Approx(total / count).epsilon(1e-12));
  }
}

TEST_CASE("mask_pool mean additivity over disjoint equal-size regions") {
  Rng rng(13);
  Tensor grid = random_grid(4, 4, 8, rng);
  auto cover_cells = [&](std::vector<int> cells) {
    MaskBitmap m = MaskBitmap::zeros(16, 16);
    for (int cell : cells) {
      const int ch = cell / 4, cw = cell % 4;
      for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) m.at(ch * 4 + y, cw * 4 + x) = 1;
    }
    return m;
  };
  PooledFeature a = mask_pool(grid, cover_cells({0, 5}));
  PooledFeature b = mask_pool(grid, cover_cells({3, 10}));
  PooledFeature ab = mask_pool(grid, cover_cells({0, 5, 3, 10}));
  for (int c = 0; c < 8; ++c) {
    const double expect = (a.cls.at({0, c}) + b.cls.at({0, c})) / 2.0;
    CHECK(ab.cls.at({0, c}) == doctest::Approx(expect).epsilon(1e-12));
  }
}

TEST_CASE("mask_pool rejects empty regions after downsampling") {
  Rng rng(14);
  Tensor grid = random_grid(4, 4, 8, rng);
  MaskBitmap m = MaskBitmap::zeros(16, 16);
  m.at(0, 0) = 1;  // one pixel of sixteen: below the majority threshold
  CHECK_THROWS_AS(mask_pool(grid, m), EmptyRegionError);
}

TEST_CASE("mask_bbox_normalized on a block mask") {
  MaskBitmap m = MaskBitmap::zeros(32, 32);
  for (int y = 8; y < 16; ++y)
    for (int x = 16; x < 24; ++x) m.at(y, x) = 1;
  const auto box = mask_bbox_normalized(m);
  CHECK(box[0] == doctest::Approx(0.5));
  CHECK(box[1] == doctest::Approx(0.25));
  CHECK(box[2] == doctest::Approx(0.75));
  CHECK(box[3] == doctest::Approx(0.5));

  CHECK(mask_bbox_normalized(MaskBitmap::zeros(8, 8)) ==
        std::array<double, 4>{0.0, 0.0, 0.0, 0.0});
}
