#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "aerialformer/inference.hpp"
#include "support.hpp"

namespace af = aerialformer;
using af::Index;
using af::Tensor;

namespace {

af::RgbImage random_image(Index h, Index w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> px(0, 255);
  auto img = af::RgbImage::blank(h, w);
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(px(rng));
  return img;
}

// Logits depend on the tile content, so overlaps genuinely disagree.
Tensor content_stub(const Tensor& tile) {
  const Index h = tile.dim(2), w = tile.dim(3);
  std::vector<double> out(static_cast<std::size_t>(2 * h * w));
  double mean = 0.0;
  for (double v : tile.data()) mean += v;
  mean /= static_cast<double>(tile.numel());
  for (Index p = 0; p < h * w; ++p) {
    out[static_cast<std::size_t>(p)] = tile[p] + mean;
    out[static_cast<std::size_t>(h * w + p)] = tile[h * w + p] - mean;
  }
  return Tensor::from({1, 2, h, w}, std::move(out));
}

}  // namespace

TEST(ArgmaxTest, TiesGoToLowestId) {
  Tensor x = Tensor::from({3, 1, 3}, {1, 0, 2, 1, 5, 2, 0, 5, 2});
  EXPECT_EQ(af::argmax(x).ids, (std::vector<std::uint8_t>{0, 1, 0}));
}

TEST(InferenceTest, ConstantModelGivesConstantMask) {
  const auto img = random_image(37, 51, 1);
  af::TileModel stub = [](const Tensor& t) {
    Tensor out = Tensor::zeros({1, 3, t.dim(2), t.dim(3)});
    auto d = out.mutable_data();
    for (Index p = 0; p < t.dim(2) * t.dim(3); ++p) d[static_cast<std::size_t>(2 * t.dim(2) * t.dim(3) + p)] = 1.0;
    return out;
  };
  const auto pred = af::infer_image(stub, img, 16, 8);
  EXPECT_EQ(pred.mask.height, 37);
  EXPECT_EQ(pred.mask.width, 51);
  for (auto v : pred.mask.ids) ASSERT_EQ(v, 2);
}

TEST(InferenceTest, SingleTileEqualsDirectForward) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  std::mt19937_64 rng(2);
  model.forward(af::testing::random_tensor({2, 3, 64, 64}, rng), af::nn::Mode::kTrain);
  const auto img = random_image(64, 64, 3);
  const auto pred = af::infer_image(af::tile_model(model), img, 64, 32);
  const Tensor direct = model.forward(af::image_to_tensor(img), af::nn::Mode::kEval);
  ASSERT_EQ(pred.logits.numel(), direct.numel());
  for (Index i = 0; i < direct.numel(); ++i) ASSERT_EQ(pred.logits[i], direct[i]);
}

TEST(InferenceTest, TileOrderDoesNotChangeTheResult) {
  const auto img = random_image(40, 40, 4);
  const auto base = af::infer_image(content_stub, img, 16, 8);
  std::vector<std::size_t> order(af::tiling::make_grid(40, 40, 16, 8).origins.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 3; ++trial) {
    std::shuffle(order.begin(), order.end(), rng);
    const auto other = af::infer_image(content_stub, img, 16, 8, &order);
    EXPECT_EQ(other.mask.ids, base.mask.ids);
    for (Index i = 0; i < base.logits.numel(); ++i) ASSERT_EQ(other.logits[i], base.logits[i]);
  }
  std::vector<std::size_t> bad{0, 0};
  EXPECT_THROW(af::infer_image(content_stub, img, 16, 8, &bad), af::ConfigError);
}

TEST(InferenceTest, StitchedLogitsAverageOverlappingTiles) {
  const auto img = random_image(8, 12, 6);
  const auto pred = af::infer_image(content_stub, img, 8, 4);
  // Pixel column 5 is covered by the tiles at x=0 and x=4.
  const Tensor full = af::image_to_tensor(img);
  auto tile_mean = [&](Index x0) {
    double s = 0.0;
    for (Index c = 0; c < 3; ++c)
      for (Index y = 0; y < 8; ++y)
        for (Index x = x0; x < x0 + 8; ++x) s += full.at({0, c, y, x});
    return s / (3.0 * 64.0);
  };
  const double expected = full.at({0, 0, 3, 5}) + 0.5 * (tile_mean(0) + tile_mean(4));
  EXPECT_NEAR(pred.logits.at({0, 3, 5}), expected, 1e-12);
}

TEST(OverlayTest, BlendsPaletteColour) {
  auto img = af::RgbImage::blank(1, 1);
  img.pixels = {100, 100, 100};
  auto pal = af::Palette::generate(2);
  pal.classes[1].color = {200, 0, 50};
  const auto out = af::overlay(img, {1, 1, {1}}, pal, 0.5);
  EXPECT_EQ(out.pixels, (std::vector<std::uint8_t>{150, 50, 75}));
}
