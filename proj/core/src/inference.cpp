#include "aerialformer/inference.hpp"

#include <cmath>
#include <numeric>

namespace aerialformer {

TileModel tile_model(const AerialFormer& model) {
  return [&model](const Tensor& tile) { return model.predict(tile); };
}

LabelMap argmax(const Tensor& logits) {
  if (logits.rank() != 3) throw ShapeError("argmax expects (L, H, W), got " + shape_str(logits.shape()));
  const Index classes = logits.dim(0), h = logits.dim(1), w = logits.dim(2), plane = h * w;
  if (classes > kIgnoreLabel) throw ConfigError("at most 255 classes fit an 8-bit mask");
  const auto x = logits.data();
  LabelMap out{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(plane), 0)};
  for (Index p = 0; p < plane; ++p) {
    Index best = 0;
    for (Index c = 1; c < classes; ++c) {
      if (x[static_cast<std::size_t>(c * plane + p)] > x[static_cast<std::size_t>(best * plane + p)]) best = c;
    }
    out.ids[static_cast<std::size_t>(p)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

Prediction infer_image(const TileModel& model, const RgbImage& image, Index tile, Index step,
                       const std::vector<std::size_t>* order) {
  const tiling::TileGrid grid = tiling::make_grid(image.height, image.width, tile, step);
  const std::size_t n = grid.origins.size();
  std::vector<std::size_t> seq(n);
  std::iota(seq.begin(), seq.end(), 0);
  if (order) {
    std::vector<bool> seen(n, false);
    for (std::size_t i : *order) {
      if (i >= n || seen[i]) throw ConfigError("tile order is not a permutation of the grid");
      seen[i] = true;
    }
    if (order->size() != n) throw ConfigError("tile order is not a permutation of the grid");
    seq = *order;
  }
  std::vector<Tensor> tiles(n);
  Index classes = -1;
  for (std::size_t i : seq) {
    const RgbImage crop = tiling::extract_tile(image, grid.origins[i], grid.tile_h, grid.tile_w);
    Tensor logits = model(image_to_tensor(crop));
    if (logits.rank() != 4 || logits.dim(0) != 1 || logits.dim(2) != grid.tile_h || logits.dim(3) != grid.tile_w) {
      throw ShapeError("tile model returned " + shape_str(logits.shape()) + " for a " + std::to_string(grid.tile_h) +
                       "x" + std::to_string(grid.tile_w) + " tile");
    }
    if (classes < 0) classes = logits.dim(1);
    tiles[i] = std::move(logits);
  }
  Prediction out;
  out.logits = tiling::stitch(tiles, grid, classes);
  out.mask = argmax(out.logits);
  return out;
}

RgbImage overlay(const RgbImage& image, const LabelMap& mask, const Palette& palette, double alpha) {
  if (image.height != mask.height || image.width != mask.width) throw ShapeError("overlay needs equal image and mask sizes");
  RgbImage out = image;
  for (std::size_t i = 0; i < mask.ids.size(); ++i) {
    const auto c = palette.color_of(mask.ids[i]);
    for (std::size_t ch = 0; ch < 3; ++ch) {
      auto& v = out.pixels[3 * i + ch];
      v = static_cast<std::uint8_t>(std::lround((1.0 - alpha) * v + alpha * c[ch]));
    }
  }
  return out;
}

}  // namespace aerialformer
