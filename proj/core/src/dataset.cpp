#include "aerialformer/dataset.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <sstream>

#include <nlohmann/json.hpp>

namespace aerialformer {

namespace fs = std::filesystem;
using nlohmann::json;

RgbImage RgbImage::blank(Index h, Index w) {
  return {h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h * w * 3), 0)};
}

void SegSample::validate(Index num_classes) const {
  if (image.height != mask.height || image.width != mask.width) {
    throw DataError(id + ": image " + std::to_string(image.height) + "x" + std::to_string(image.width) +
                    " and mask " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                    " differ in size");
  }
  for (std::size_t i = 0; i < mask.ids.size(); ++i) {
    const std::uint8_t v = mask.ids[i];
    if (v != kIgnoreLabel && v >= num_classes) {
      const auto y = static_cast<Index>(i) / mask.width, x = static_cast<Index>(i) % mask.width;
      throw DataError(id + ": mask value " + std::to_string(v) + " at (" + std::to_string(y) + ", " +
                      std::to_string(x) + ") is outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

namespace {

struct PngImage {
  png_image img{};
  PngImage() {
    std::memset(&img, 0, sizeof img);
    img.version = PNG_IMAGE_VERSION;
  }
  ~PngImage() { png_image_free(&img); }
};

std::vector<std::uint8_t> read_png(const fs::path& path, std::uint32_t format, Index& h, Index& w,
                                   bool* was_gray = nullptr) {
  PngImage png;
  if (!png_image_begin_read_from_file(&png.img, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + png.img.message);
  }
  if (was_gray) *was_gray = (png.img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  png.img.format = format;
  std::vector<std::uint8_t> buf(PNG_IMAGE_SIZE(png.img));
  if (!png_image_finish_read(&png.img, nullptr, buf.data(), 0, nullptr)) {
    throw DataError("cannot decode PNG " + path.string() + ": " + png.img.message);
  }
  h = png.img.height;
  w = png.img.width;
  return buf;
}

void write_png(const fs::path& path, std::uint32_t format, Index h, Index w, const std::uint8_t* data) {
  PngImage png;
  png.img.width = static_cast<png_uint_32>(w);
  png.img.height = static_cast<png_uint_32>(h);
  png.img.format = format;
  if (!png_image_write_to_file(&png.img, path.c_str(), 0, data, 0, nullptr)) {
    throw DataError("cannot write PNG " + path.string() + ": " + png.img.message);
  }
}

}  // namespace

RgbImage read_png_rgb(const fs::path& path) {
  RgbImage out;
  out.pixels = read_png(path, PNG_FORMAT_RGB, out.height, out.width);
  return out;
}

void write_png_rgb(const fs::path& path, const RgbImage& image) {
  write_png(path, PNG_FORMAT_RGB, image.height, image.width, image.pixels.data());
}

void write_png_gray(const fs::path& path, const LabelMap& map) {
  write_png(path, PNG_FORMAT_GRAY, map.height, map.width, map.ids.data());
}

MaskPixels read_png_mask(const fs::path& path) {
  PngImage probe;
  if (!png_image_begin_read_from_file(&probe.img, path.c_str())) {
    throw DataError("cannot read PNG " + path.string() + ": " + probe.img.message);
  }
  const bool gray = (probe.img.format & PNG_FORMAT_FLAG_COLOR) == 0 &&
                    (probe.img.format & PNG_FORMAT_FLAG_COLORMAP) == 0;
  MaskPixels out;
  if (gray) {
    out.gray.ids = read_png(path, PNG_FORMAT_GRAY, out.gray.height, out.gray.width);
  } else {
    RgbImage rgb;
    rgb.pixels = read_png(path, PNG_FORMAT_RGB, rgb.height, rgb.width);
    out.rgb = std::move(rgb);
  }
  return out;
}

Palette Palette::load(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open palette " + path.string());
  Palette p;
  try {
    const json j = json::parse(is);
    for (const auto& c : j.at("classes")) {
      Entry e;
      e.id = c.at("id").get<std::uint8_t>();
      e.name = c.value("name", "class" + std::to_string(e.id));
      e.color = c.at("color").get<std::array<std::uint8_t, 3>>();
      p.classes.push_back(std::move(e));
    }
    if (j.contains("ignore_color")) p.ignore_color = j.at("ignore_color").get<std::array<std::uint8_t, 3>>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  std::sort(p.classes.begin(), p.classes.end(), [](const Entry& a, const Entry& b) { return a.id < b.id; });
  for (std::size_t i = 0; i < p.classes.size(); ++i) {
    if (p.classes[i].id != i) throw DataError(path.string() + ": class ids must be 0..L-1 without gaps");
  }
  return p;
}

void Palette::save(const fs::path& path) const {
  json j;
  j["classes"] = json::array();
  for (const auto& e : classes) j["classes"].push_back({{"id", e.id}, {"name", e.name}, {"color", e.color}});
  if (ignore_color) j["ignore_color"] = *ignore_color;
  std::ofstream os(path);
  if (!os) throw DataError("cannot write palette " + path.string());
  os << j.dump(2) << '\n';
}

Palette Palette::generate(Index n) {
  static constexpr std::array<std::array<std::uint8_t, 3>, 8> kBase{{{40, 40, 40},
                                                                     {220, 50, 50},
                                                                     {50, 90, 220},
                                                                     {230, 210, 40},
                                                                     {40, 200, 80},
                                                                     {200, 60, 200},
                                                                     {40, 200, 210},
                                                                     {240, 140, 30}}};
  Palette p;
  for (Index i = 0; i < n; ++i) {
    auto c = kBase[static_cast<std::size_t>(i) % kBase.size()];
    // Past the base set, darken so colours stay distinct.
    const auto round = static_cast<int>(i / static_cast<Index>(kBase.size()));
    for (auto& v : c) v = static_cast<std::uint8_t>(v / (1 + round));
    p.classes.push_back({static_cast<std::uint8_t>(i), i == 0 ? "background" : "class" + std::to_string(i), c});
  }
  p.ignore_color = std::array<std::uint8_t, 3>{255, 255, 255};
  return p;
}

std::array<std::uint8_t, 3> Palette::color_of(std::uint8_t id) const {
  if (id == kIgnoreLabel) return ignore_color.value_or(std::array<std::uint8_t, 3>{255, 255, 255});
  if (id >= classes.size()) throw DataError("class id " + std::to_string(id) + " has no palette colour");
  return classes[id].color;
}

LabelMap Palette::decode(const RgbImage& rgb, const std::string& source) const {
  std::map<std::array<std::uint8_t, 3>, std::uint8_t> lookup;
  for (const auto& e : classes) lookup[e.color] = e.id;
  if (ignore_color) lookup[*ignore_color] = kIgnoreLabel;
  LabelMap out{rgb.height, rgb.width, std::vector<std::uint8_t>(static_cast<std::size_t>(rgb.height * rgb.width))};
  for (Index y = 0; y < rgb.height; ++y) {
    for (Index x = 0; x < rgb.width; ++x) {
      const std::uint8_t* p = rgb.at(y, x);
      auto it = lookup.find({p[0], p[1], p[2]});
      if (it == lookup.end()) {
        throw DataError(source + ": unknown palette colour (" + std::to_string(p[0]) + ", " +
                        std::to_string(p[1]) + ", " + std::to_string(p[2]) + ") at (" +
                        std::to_string(y) + ", " + std::to_string(x) + ")");
      }
      out.ids[static_cast<std::size_t>(y * rgb.width + x)] = it->second;
    }
  }
  return out;
}

RgbImage Palette::encode(const LabelMap& ids) const {
  RgbImage out = RgbImage::blank(ids.height, ids.width);
  for (std::size_t i = 0; i < ids.ids.size(); ++i) {
    const auto c = color_of(ids.ids[i]);
    std::copy(c.begin(), c.end(), out.pixels.begin() + static_cast<std::ptrdiff_t>(3 * i));
  }
  return out;
}

DatasetReader::DatasetReader(const fs::path& manifest, Index num_classes, std::optional<Palette> palette)
    : root_(manifest.parent_path()),
      manifest_(manifest),
      manifest_name_(manifest.string()),
      num_classes_(num_classes),
      palette_(std::move(palette)) {
  if (!manifest_) throw DataError("cannot open manifest " + manifest_name_);
}

std::optional<SegSample> DatasetReader::next() {
  std::string line;
  while (std::getline(manifest_, line)) {
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw DataError(manifest_name_ + ":" + std::to_string(line_no_) + ": expected image<TAB>mask");
    }
    const fs::path image_path = root_ / line.substr(0, tab);
    const fs::path mask_path = root_ / line.substr(tab + 1);
    for (const auto& p : {image_path, mask_path}) {
      if (!fs::exists(p)) {
        throw DataError("missing file " + p.string() + " in pair (" + image_path.string() + ", " +
                        mask_path.string() + ")");
      }
    }
    SegSample s;
    s.id = image_path.stem().string();
    s.image = read_png_rgb(image_path);
    MaskPixels m = read_png_mask(mask_path);
    if (m.rgb) {
      if (!palette_) throw DataError(mask_path.string() + ": colour mask but no palette was given");
      s.mask = palette_->decode(*m.rgb, mask_path.string());
    } else {
      s.mask = std::move(m.gray);
    }
    try {
      s.validate(num_classes_);
    } catch (const DataError& e) {
      throw DataError(mask_path.string() + ": " + e.what());
    }
    return s;
  }
  return std::nullopt;
}

std::vector<SegSample> ingest_dataset(const fs::path& manifest, Index num_classes) {
  const fs::path file = fs::is_directory(manifest) ? manifest / "manifest.tsv" : manifest;
  const fs::path palette_path = file.parent_path() / "palette.json";
  std::optional<Palette> palette;
  if (fs::exists(palette_path)) palette = Palette::load(palette_path);
  DatasetReader reader(file, num_classes, palette);
  std::vector<SegSample> out;
  while (auto s = reader.next()) out.push_back(std::move(*s));
  if (out.empty()) throw DataError("manifest " + file.string() + " lists no samples");
  return out;
}

std::vector<SegSample> make_synthetic(Index count, Index size, Index num_classes, std::uint64_t seed) {
  if (count < 1 || size < 8 || num_classes < 2) {
    throw ConfigError("synthetic data needs count >= 1, size >= 8 and at least 2 classes");
  }
  const Palette palette = Palette::generate(num_classes);
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> noise(-12, 12);
  std::vector<SegSample> out;
  for (Index n = 0; n < count; ++n) {
    SegSample s;
    s.id = "synthetic_" + std::to_string(n);
    s.image = RgbImage::blank(size, size);
    s.mask = {size, size, std::vector<std::uint8_t>(static_cast<std::size_t>(size * size), 0)};
    // Extra shapes go down first; each required class then claims pixels no
    // other required shape owns, so every foreground class stays visible.
    std::vector<Index> shapes;
    std::uniform_int_distribution<Index> extra_class(1, num_classes - 1);
    for (int e = 0; e < 2; ++e) shapes.push_back(extra_class(rng));
    const std::size_t first_required = shapes.size();
    for (Index c = 1; c < num_classes; ++c) shapes.push_back(c);
    std::vector<bool> owned(static_cast<std::size_t>(size * size), false);
    std::uniform_int_distribution<Index> extent(size / 8, size / 3);
    for (std::size_t k = 0; k < shapes.size(); ++k) {
      const Index cls = shapes[k];
      const bool required = k >= first_required;
      const Index side = extent(rng);
      std::uniform_int_distribution<Index> pos(0, size - side);
      auto inside = [&](Index y, Index x) {
        switch (cls % 3) {
          case 1: return true;  // square
          case 2: {             // disc
            const double r = side / 2.0, dy = y + 0.5 - r, dx = x + 0.5 - r;
            return dy * dy + dx * dx <= r * r;
          }
          default: return x <= y;  // right triangle
        }
      };
      auto free_pixels = [&](Index oy, Index ox) {
        Index n = 0;
        for (Index y = 0; y < side; ++y)
          for (Index x = 0; x < side; ++x)
            n += inside(y, x) && !owned[static_cast<std::size_t>((oy + y) * size + ox + x)];
        return n;
      };
      Index oy = pos(rng), ox = pos(rng);
      for (int attempt = 0; required && attempt < 64 && free_pixels(oy, ox) == 0; ++attempt) {
        oy = pos(rng);
        ox = pos(rng);
      }
      if (required && free_pixels(oy, ox) == 0) {
        throw ConfigError("cannot fit " + std::to_string(num_classes) + " classes into a " + std::to_string(size) +
                          "x" + std::to_string(size) + " synthetic image");
      }
      for (Index y = 0; y < side; ++y) {
        for (Index x = 0; x < side; ++x) {
          const auto i = static_cast<std::size_t>((oy + y) * size + ox + x);
          if (!inside(y, x) || owned[i]) continue;
          s.mask.ids[i] = static_cast<std::uint8_t>(cls);
          owned[i] = required;
        }
      }
    }
    for (Index y = 0; y < size; ++y) {
      for (Index x = 0; x < size; ++x) {
        const auto cls = s.mask.ids[static_cast<std::size_t>(y * size + x)];
        auto base = palette.color_of(cls);
        if (cls == 0) {
          // Mild checker texture so the background is not a flat colour.
          const int t = ((y / 4 + x / 4) % 2) * 20;
          for (auto& v : base) v = static_cast<std::uint8_t>(std::min(255, v + t));
        }
        std::uint8_t* p = s.image.at(y, x);
        for (int ch = 0; ch < 3; ++ch) p[ch] = static_cast<std::uint8_t>(std::clamp(base[static_cast<std::size_t>(ch)] + noise(rng), 0, 255));
      }
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_dataset(const fs::path& dir, const std::vector<SegSample>& samples, const Palette& palette) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  std::ofstream manifest(dir / "manifest.tsv");
  if (!manifest) throw DataError("cannot write manifest in " + dir.string());
  for (const auto& s : samples) {
    const std::string name = s.id + ".png";
    write_png_rgb(dir / "images" / name, s.image);
    write_png_gray(dir / "masks" / name, s.mask);
    manifest << "images/" << name << '\t' << "masks/" << name << '\n';
  }
  palette.save(dir / "palette.json");
}

Tensor images_to_tensor(const std::vector<const RgbImage*>& images) {
  if (images.empty()) throw ShapeError("no images to stack");
  static constexpr std::array<double, 3> kMean{0.485, 0.456, 0.406};
  static constexpr std::array<double, 3> kStd{0.229, 0.224, 0.225};
  const Index h = images[0]->height, w = images[0]->width;
  const auto n = static_cast<Index>(images.size());
  Buffer data(static_cast<std::size_t>(n * 3 * h * w));
  for (Index b = 0; b < n; ++b) {
    const RgbImage& img = *images[static_cast<std::size_t>(b)];
    if (img.height != h || img.width != w) throw ShapeError("images in a batch must share a size");
    for (Index c = 0; c < 3; ++c) {
      for (Index i = 0; i < h * w; ++i) {
        const double v = img.pixels[static_cast<std::size_t>(i * 3 + c)] / 255.0;
        data[static_cast<std::size_t>(((b * 3 + c) * h * w) + i)] =
            (v - kMean[static_cast<std::size_t>(c)]) / kStd[static_cast<std::size_t>(c)];
      }
    }
  }
  return Tensor::from({n, 3, h, w}, std::move(data));
}

Tensor image_to_tensor(const RgbImage& image) { return images_to_tensor({&image}); }

}  // namespace aerialformer
