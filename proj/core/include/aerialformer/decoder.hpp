#pragma once

#include <array>
#include <vector>

#include "aerialformer/encoder.hpp"
#include "aerialformer/nn.hpp"

namespace aerialformer::decoder {

inline constexpr int kBlocks = 5;
inline constexpr int kBranches = 3;

using ReceptiveFields = std::array<Index, kBranches>;

/// Receptive field side of a dilated kernel: d * (k - 1) + 1.
Index receptive_field(Index kernel, Index dilation);
/// Kernel side realising receptive field `r`: 1 for r == 1, else 3.
Index kernel_for(Index r);
/// Dilation realising receptive field `r` with `kernel_for(r)`.
Index dilation_for(Index r);

/// Receptive-field triples, deepest block first.
std::array<ReceptiveFields, kBlocks> default_schedule();

struct MdcBlockConfig {
  ReceptiveFields receptive_fields{3, 3, 3};
  Index in_channels = 0;
  Index working_channels = 0;  ///< multiple of 3, split evenly across branches
  Index out_channels = 0;
  void validate() const;
};

struct DecoderConfig {
  std::array<MdcBlockConfig, kBlocks> blocks;  ///< deepest -> shallowest
  Index num_classes = 0;

  /// Widths mirror the encoder pyramid: blocks emit 8C, 4C, 2C, C and
  /// `stem_channels`; each deconv halves its input width.
  static DecoderConfig build(Index embed_dim, Index stem_channels, Index num_classes,
                             const std::array<ReceptiveFields, kBlocks>& schedule);
  /// Output width of the deconv following block i.
  Index deconv_out(int i) const;
  void validate() const;
};

/// Three parallel dilated convolutions, each on one third of the channels,
/// concatenated back. Padding preserves spatial size.
struct DilatedConvLayer {
  DilatedConvLayer() = default;
  DilatedConvLayer(Index channels, const ReceptiveFields& rf, nn::Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  std::array<nn::Conv2d, kBranches> branches;
};

/// Pointwise pre-mixer (no norm or activation) -> dilated conv layer ->
/// post-mixer of pointwise and 3x3 convs, each followed by BN and ReLU.
struct MdcBlock {
  MdcBlock() = default;
  MdcBlock(const MdcBlockConfig& cfg, nn::Initializer& init);
  Tensor forward(const Tensor& x, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  MdcBlockConfig cfg;
  nn::Conv2d premixer;
  DilatedConvLayer dcl;
  nn::Conv2d post_pointwise;
  nn::BatchNorm2d post_pointwise_bn;
  nn::Conv2d post_conv;
  nn::BatchNorm2d post_conv_bn;
};

/// 2x2 stride-2 transposed conv halving channels, then BN and ReLU.
struct DeconvBlock {
  DeconvBlock() = default;
  DeconvBlock(Index in, Index out, nn::Initializer& init);
  Tensor forward(const Tensor& x, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  nn::ConvTranspose2d deconv;
  nn::BatchNorm2d bn;
};

class MdcDecoder {
 public:
  MdcDecoder() = default;
  MdcDecoder(const DecoderConfig& cfg, nn::Initializer& init);

  /// features: channels-last encoder pyramid; stem: (N, Cs, H/2, W/2).
  /// Returns logits (N, L, H, W).
  Tensor forward(const encoder::Pyramid& features, const Tensor& stem, nn::Mode mode) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  const DecoderConfig& config() const { return cfg_; }
  MdcBlock& block(int i) { return blocks_[static_cast<std::size_t>(i)]; }
  DeconvBlock& deconv(int i) { return deconvs_[static_cast<std::size_t>(i)]; }
  nn::Conv2d& head() { return head_; }

 private:
  DecoderConfig cfg_;
  std::array<MdcBlock, kBlocks> blocks_;
  std::array<DeconvBlock, kBlocks> deconvs_;
  nn::Conv2d head_;
};

}  // namespace aerialformer::decoder
