#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "aerialformer/tensor.hpp"

namespace aerialformer {

inline constexpr std::uint8_t kIgnoreLabel = 255;

/// 8-bit interleaved RGB, row-major.
struct RgbImage {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> pixels;  ///< height * width * 3

  static RgbImage blank(Index h, Index w);
  std::uint8_t* at(Index y, Index x) { return pixels.data() + (y * width + x) * 3; }
  const std::uint8_t* at(Index y, Index x) const { return pixels.data() + (y * width + x) * 3; }
};

/// Single-channel 8-bit class-id map, row-major.
struct LabelMap {
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> ids;
};

struct SegSample {
  RgbImage image;
  LabelMap mask;
  std::string id;

  /// Equal dims, ids in [0, num_classes) or the ignore label.
  void validate(Index num_classes) const;
};

// PNG codecs. Readers throw DataError naming the path.
RgbImage read_png_rgb(const std::filesystem::path& path);
void write_png_rgb(const std::filesystem::path& path, const RgbImage& image);
void write_png_gray(const std::filesystem::path& path, const LabelMap& map);

/// A mask PNG: single-channel files are read as ids; colour files as RGB
/// (mapped through a palette by the caller).
struct MaskPixels {
  LabelMap gray;              ///< set when the file was single-channel
  std::optional<RgbImage> rgb;
};
MaskPixels read_png_mask(const std::filesystem::path& path);

/// Colour <-> class id mapping, stored as JSON:
///   {"classes": [{"id": 0, "name": "road", "color": [r, g, b]}, ...],
///    "ignore_color": [r, g, b]}            // optional
struct Palette {
  struct Entry {
    std::uint8_t id = 0;
    std::string name;
    std::array<std::uint8_t, 3> color{};
  };
  std::vector<Entry> classes;
  std::optional<std::array<std::uint8_t, 3>> ignore_color;

  static Palette load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;
  /// Distinct colours for `n` classes.
  static Palette generate(Index n);

  Index size() const { return static_cast<Index>(classes.size()); }
  std::array<std::uint8_t, 3> color_of(std::uint8_t id) const;
  /// Class id of `rgb`; DataError mentioning `source` if unknown.
  LabelMap decode(const RgbImage& rgb, const std::string& source) const;
  RgbImage encode(const LabelMap& ids) const;
};

/// Streams samples listed by a manifest of `image_path<TAB>mask_path` lines
/// (paths relative to the manifest's directory unless absolute; blank lines
/// and lines starting with '#' are skipped).
class DatasetReader {
 public:
  DatasetReader(const std::filesystem::path& manifest, Index num_classes,
                std::optional<Palette> palette = std::nullopt);
  std::optional<SegSample> next();

 private:
  std::filesystem::path root_;
  std::ifstream manifest_;
  std::string manifest_name_;
  Index num_classes_;
  std::optional<Palette> palette_;
  Index line_no_ = 0;
};

/// Reads the whole manifest. `manifest` may be a file or a directory holding
/// `manifest.tsv`; a `palette.json` beside the manifest is used when present.
std::vector<SegSample> ingest_dataset(const std::filesystem::path& manifest, Index num_classes);

/// Synthetic shapes: class 0 is textured background; class c >= 1 draws
/// filled shapes (rectangles, discs, triangles by c mod 3) in a class colour.
std::vector<SegSample> make_synthetic(Index count, Index size, Index num_classes, std::uint64_t seed);

/// Writes images/, masks/ (single-channel id PNGs), manifest.tsv and palette.json.
void write_dataset(const std::filesystem::path& dir, const std::vector<SegSample>& samples,
                   const Palette& palette);

/// Stacks samples into a normalised (N, 3, H, W) tensor (ImageNet mean/std).
Tensor images_to_tensor(const std::vector<const RgbImage*>& images);
Tensor image_to_tensor(const RgbImage& image);

}  // namespace aerialformer
