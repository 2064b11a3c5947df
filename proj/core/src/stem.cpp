#include "aerialformer/stem.hpp"

#include <string>

namespace aerialformer::stem {

void StemConfig::validate() const {
  if (in_channels < 1 || out_channels < 1) throw ConfigError("stem channel counts must be >= 1");
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("stem kernel must be odd");
}

CnnStem::CnnStem(const StemConfig& cfg, nn::Initializer& init) : cfg_(cfg) {
  cfg_.validate();
  const Index pad = cfg_.kernel / 2;
  for (int i = 0; i < kStemLayers; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    const Index in = i == 0 ? cfg_.in_channels : cfg_.out_channels;
    convs_[iu] = nn::Conv2d(in, cfg_.out_channels, cfg_.kernel, {i == 0 ? 2 : 1, pad, 1}, init);
    norms_[iu] = nn::BatchNorm2d(cfg_.out_channels);
  }
}

Tensor CnnStem::forward(const Tensor& image, nn::Mode mode) const {
  if (image.rank() != 4) throw ShapeError("stem expects (N, C, H, W), got " + shape_str(image.shape()));
  if (image.dim(2) % 2 != 0 || image.dim(3) % 2 != 0) {
    throw GeometryError("stem needs even spatial dims, got " + std::to_string(image.dim(2)) + "x" +
                        std::to_string(image.dim(3)));
  }
  Tensor x = image;
  for (std::size_t i = 0; i < kStemLayers; ++i) {
    x = ops::gelu(norms_[i].forward(convs_[i].forward(x), mode));
  }
  return x;
}

void CnnStem::collect(const std::string& prefix, nn::NamedTensors& out) const {
  for (std::size_t i = 0; i < kStemLayers; ++i) {
    const std::string p = prefix + ".conv" + std::to_string(i + 1);
    convs_[i].collect(p, out);
    norms_[i].collect(p + ".bn", out);
  }
}

}  // namespace aerialformer::stem
