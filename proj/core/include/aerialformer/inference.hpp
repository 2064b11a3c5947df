#pragma once

#include <functional>
#include <vector>

#include "aerialformer/dataset.hpp"
#include "aerialformer/model.hpp"
#include "aerialformer/tiling.hpp"

namespace aerialformer {

/// Maps a normalised (1, 3, h, w) tile to (1, L, h, w) logits.
using TileModel = std::function<Tensor(const Tensor& tile)>;

/// Wraps a model's size-agnostic eval-mode `predict`.
TileModel tile_model(const AerialFormer& model);

struct Prediction {
  LabelMap mask;
  Tensor logits;  ///< stitched (L, H, W)
};

/// Per-pixel argmax over (L, H, W) logits; ties go to the lowest id.
LabelMap argmax(const Tensor& logits);

/// Tiles `image`, runs `model` on every tile, averages overlapping logits and
/// takes the argmax. `order`, when given, is a permutation of tile indices
/// fixing the evaluation order (the result does not depend on it).
Prediction infer_image(const TileModel& model, const RgbImage& image, Index tile, Index step,
                       const std::vector<std::size_t>* order = nullptr);

/// Blends palette colours over `image`; `alpha` is the mask weight.
RgbImage overlay(const RgbImage& image, const LabelMap& mask, const Palette& palette, double alpha = 0.5);

}  // namespace aerialformer
