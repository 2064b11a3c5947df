#pragma once

#include <array>

#include "aerialformer/nn.hpp"

namespace aerialformer::stem {

inline constexpr int kStemLayers = 4;

struct StemConfig {
  Index in_channels = 3;
  Index out_channels = 48;
  Index kernel = 3;
  void validate() const;
};

/// Four 3x3 conv -> BatchNorm -> GELU layers. Only the first downsamples
/// (stride 2), so the output is exactly half resolution for even inputs.
class CnnStem {
 public:
  CnnStem() = default;
  CnnStem(const StemConfig& cfg, nn::Initializer& init);

  Tensor forward(const Tensor& image, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  const StemConfig& config() const { return cfg_; }
  nn::Conv2d& conv(int i) { return convs_[static_cast<std::size_t>(i)]; }
  nn::BatchNorm2d& norm(int i) { return norms_[static_cast<std::size_t>(i)]; }

 private:
  StemConfig cfg_;
  std::array<nn::Conv2d, kStemLayers> convs_;
  std::array<nn::BatchNorm2d, kStemLayers> norms_;
};

}  // namespace aerialformer::stem
