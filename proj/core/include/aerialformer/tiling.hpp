#pragma once

#include <vector>

#include "aerialformer/dataset.hpp"
#include "aerialformer/tensor.hpp"

namespace aerialformer::tiling {

struct Origin {
  Index y = 0;
  Index x = 0;
  bool operator==(const Origin&) const = default;
};

/// Origins of overlapping tiles over an image. Tiles larger than the image
/// shrink to the image; the last tile on each axis is clamped inward so no
/// tile leaves the image.
struct TileGrid {
  Index height = 0;
  Index width = 0;
  Index tile_h = 0;  ///< effective tile extent, at most `height`
  Index tile_w = 0;
  Index step_h = 0;
  Index step_w = 0;
  Index rows = 0;
  Index cols = 0;
  std::vector<Origin> origins;  ///< row-major
};

/// ceil((dim - tile) / step) + 1 when dim > tile, else 1.
Index tiles_per_axis(Index dim, Index tile, Index step);
/// Origins along one axis, ascending, last one clamped to dim - tile.
std::vector<Index> axis_origins(Index dim, Index tile, Index step);

/// Requires tile >= 1 and 1 <= step <= tile (ConfigError otherwise).
TileGrid make_grid(Index height, Index width, Index tile_h, Index tile_w, Index step_h, Index step_w);
TileGrid make_grid(Index height, Index width, Index tile, Index step);

RgbImage extract_tile(const RgbImage& image, const Origin& o, Index tile_h, Index tile_w);

/// Per-pixel mean of the tile logits. `tiles[i]` is (L, tile_h, tile_w) or
/// (1, L, tile_h, tile_w) and belongs to `grid.origins[i]`. Returns (L, H, W).
Tensor stitch(const std::vector<Tensor>& tiles, const TileGrid& grid, Index num_classes);

}  // namespace aerialformer::tiling
