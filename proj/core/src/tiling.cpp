#include "aerialformer/tiling.hpp"

#include <algorithm>
#include <string>

namespace aerialformer::tiling {

Index tiles_per_axis(Index dim, Index tile, Index step) {
  if (dim <= tile) return 1;
  return (dim - tile + step - 1) / step + 1;
}

std::vector<Index> axis_origins(Index dim, Index tile, Index step) {
  const Index n = tiles_per_axis(dim, tile, step);
  const Index last = std::max<Index>(dim - tile, 0);
  std::vector<Index> out;
  out.reserve(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) out.push_back(std::min(i * step, last));
  return out;
}

TileGrid make_grid(Index height, Index width, Index tile_h, Index tile_w, Index step_h, Index step_w) {
  if (height < 1 || width < 1) throw ConfigError("image must be at least 1x1");
  if (tile_h < 1 || tile_w < 1) throw ConfigError("tile size must be >= 1");
  if (step_h < 1 || step_w < 1 || step_h > tile_h || step_w > tile_w) {
    throw ConfigError("step must lie in [1, tile]; got step " + std::to_string(step_h) + "x" +
                      std::to_string(step_w) + " for tile " + std::to_string(tile_h) + "x" +
                      std::to_string(tile_w));
  }
  TileGrid g;
  g.height = height;
  g.width = width;
  g.tile_h = std::min(tile_h, height);
  g.tile_w = std::min(tile_w, width);
  g.step_h = step_h;
  g.step_w = step_w;
  const auto ys = axis_origins(height, tile_h, step_h);
  const auto xs = axis_origins(width, tile_w, step_w);
  g.rows = static_cast<Index>(ys.size());
  g.cols = static_cast<Index>(xs.size());
  for (Index y : ys) {
    for (Index x : xs) g.origins.push_back({y, x});
  }
  return g;
}

TileGrid make_grid(Index height, Index width, Index tile, Index step) {
  return make_grid(height, width, tile, tile, step, step);
}

RgbImage extract_tile(const RgbImage& image, const Origin& o, Index tile_h, Index tile_w) {
  if (o.y < 0 || o.x < 0 || o.y + tile_h > image.height || o.x + tile_w > image.width) {
    throw GeometryError("tile at (" + std::to_string(o.y) + ", " + std::to_string(o.x) + ") of size " +
                        std::to_string(tile_h) + "x" + std::to_string(tile_w) + " leaves the image");
  }
  RgbImage out = RgbImage::blank(tile_h, tile_w);
  for (Index y = 0; y < tile_h; ++y) {
    std::copy_n(image.at(o.y + y, o.x), tile_w * 3, out.at(y, 0));
  }
  return out;
}

Tensor stitch(const std::vector<Tensor>& tiles, const TileGrid& grid, Index num_classes) {
  if (tiles.size() != grid.origins.size()) {
    throw ShapeError("stitch needs one tile per origin: " + std::to_string(tiles.size()) + " tiles for " +
                     std::to_string(grid.origins.size()) + " origins");
  }
  const Index h = grid.height, w = grid.width, plane = h * w;
  Buffer sum(static_cast<std::size_t>(num_classes * plane), 0.0);
  std::vector<Index> cover(static_cast<std::size_t>(plane), 0);
  const Shape expect{num_classes, grid.tile_h, grid.tile_w};
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    Shape s = tiles[i].shape();
    if (s.size() == 4 && s[0] == 1) s.erase(s.begin());
    if (s != expect) {
      throw ShapeError("tile " + std::to_string(i) + " has shape " + shape_str(tiles[i].shape()) +
                       ", expected " + shape_str(expect));
    }
    const auto src = tiles[i].data();
    const Origin o = grid.origins[i];
    for (Index c = 0; c < num_classes; ++c) {
      for (Index y = 0; y < grid.tile_h; ++y) {
        const double* row = src.data() + (c * grid.tile_h + y) * grid.tile_w;
        double* dst = sum.data() + c * plane + (o.y + y) * w + o.x;
        for (Index x = 0; x < grid.tile_w; ++x) dst[x] += row[x];
      }
    }
    for (Index y = 0; y < grid.tile_h; ++y) {
      for (Index x = 0; x < grid.tile_w; ++x) ++cover[static_cast<std::size_t>((o.y + y) * w + o.x + x)];
    }
  }
  for (Index p = 0; p < plane; ++p) {
    const Index n = cover[static_cast<std::size_t>(p)];
    if (n == 0) {
      throw StateError("tile grid leaves pixel (" + std::to_string(p / w) + ", " + std::to_string(p % w) +
                       ") uncovered");
    }
    for (Index c = 0; c < num_classes; ++c) sum[static_cast<std::size_t>(c * plane + p)] /= static_cast<double>(n);
  }
  return Tensor::from({num_classes, h, w}, std::move(sum));
}

}  // namespace aerialformer::tiling
