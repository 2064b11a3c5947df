#include "aerialformer/decoder.hpp"

#include <cmath>
#include <string>

namespace aerialformer::decoder {

namespace {

std::string chan(Index c) { return std::to_string(c); }

Tensor to_nchw(const Tensor& channels_last) { return ops::permute(channels_last, {0, 3, 1, 2}); }

}  // namespace

Index receptive_field(Index kernel, Index dilation) {
  if (kernel < 1 || dilation < 1) throw ConfigError("kernel and dilation must be >= 1");
  return dilation * (kernel - 1) + 1;
}

Index kernel_for(Index r) {
  if (r < 1 || r % 2 == 0) throw ConfigError("receptive field " + std::to_string(r) + " must be odd and >= 1");
  return r == 1 ? 1 : 3;
}

Index dilation_for(Index r) {
  const Index k = kernel_for(r);
  return k == 1 ? 1 : (r - 1) / (k - 1);
}

std::array<ReceptiveFields, kBlocks> default_schedule() {
  return {{{1, 3, 3}, {3, 3, 3}, {3, 5, 7}, {3, 5, 7}, {3, 5, 7}}};
}

void MdcBlockConfig::validate() const {
  for (Index r : receptive_fields) kernel_for(r);
  if (working_channels < kBranches || working_channels % kBranches != 0) {
    throw ConfigError("working channels " + chan(working_channels) + " must be a positive multiple of 3");
  }
  if (in_channels < 1 || out_channels < 1) throw ConfigError("MDC block channel counts must be >= 1");
}

DecoderConfig DecoderConfig::build(Index c, Index stem_channels, Index num_classes,
                                   const std::array<ReceptiveFields, kBlocks>& schedule) {
  if (c < 1 || stem_channels < 1 || num_classes < 1) {
    throw ConfigError("decoder needs positive embed dim, stem width and class count");
  }
  DecoderConfig cfg;
  cfg.num_classes = num_classes;
  const std::array<Index, kBlocks> outs{8 * c, 4 * c, 2 * c, c, stem_channels};
  const std::array<Index, kBlocks> skips{0, 4 * c, 2 * c, c, stem_channels};
  Index upsampled = 0;
  for (std::size_t i = 0; i < kBlocks; ++i) {
    MdcBlockConfig& b = cfg.blocks[i];
    b.receptive_fields = schedule[i];
    b.in_channels = i == 0 ? 8 * c : upsampled + skips[i];
    b.out_channels = outs[i];
    const auto thirds = static_cast<Index>(std::lround(static_cast<double>(outs[i]) / 3.0));
    b.working_channels = 3 * std::max<Index>(thirds, 1);
    upsampled = std::max<Index>(outs[i] / 2, 1);
  }
  cfg.validate();
  return cfg;
}

Index DecoderConfig::deconv_out(int i) const {
  return std::max<Index>(blocks[static_cast<std::size_t>(i)].out_channels / 2, 1);
}

void DecoderConfig::validate() const {
  if (num_classes < 1) throw ConfigError("class count must be >= 1");
  for (const auto& b : blocks) b.validate();
}

DilatedConvLayer::DilatedConvLayer(Index channels, const ReceptiveFields& rf, nn::Initializer& init) {
  if (channels % kBranches != 0) {
    throw ConfigError("dilated conv layer needs channels divisible by 3, got " + chan(channels));
  }
  const Index c = channels / kBranches;
  for (std::size_t j = 0; j < kBranches; ++j) {
    const Index k = kernel_for(rf[j]);
    const Index d = dilation_for(rf[j]);
    branches[j] = nn::Conv2d(c, c, k, {1, d * (k - 1) / 2, d}, init);
  }
}

Tensor DilatedConvLayer::forward(const Tensor& x) const {
  const Index channels = x.dim(1);
  if (channels % kBranches != 0) {
    throw ConfigError("dilated conv layer input has " + chan(channels) + " channels, not divisible by 3");
  }
  const Index c = channels / kBranches;
  std::vector<Tensor> parts;
  for (std::size_t j = 0; j < kBranches; ++j) {
    parts.push_back(branches[j].forward(ops::slice(x, 1, static_cast<Index>(j) * c, c)));
  }
  return ops::concat(parts, 1);
}

void DilatedConvLayer::collect(const std::string& prefix, nn::NamedTensors& out) const {
  for (std::size_t j = 0; j < kBranches; ++j) branches[j].collect(prefix + ".branch" + std::to_string(j + 1), out);
}

MdcBlock::MdcBlock(const MdcBlockConfig& cfg_, nn::Initializer& init)
    : cfg(cfg_),
      premixer(cfg_.in_channels, cfg_.working_channels, 1, {}, init),
      dcl(cfg_.working_channels, cfg_.receptive_fields, init),
      post_pointwise(cfg_.working_channels, cfg_.out_channels, 1, {}, init),
      post_pointwise_bn(cfg_.out_channels),
      post_conv(cfg_.out_channels, cfg_.out_channels, 3, {1, 1, 1}, init),
      post_conv_bn(cfg_.out_channels) {
  cfg.validate();
}

Tensor MdcBlock::forward(const Tensor& x, nn::Mode mode) const {
  if (x.rank() != 4 || x.dim(1) != cfg.in_channels) {
    throw WiringError("MDC block expects " + chan(cfg.in_channels) + " input channels, got " +
                      shape_str(x.shape()));
  }
  Tensor y = dcl.forward(premixer.forward(x));
  y = ops::relu(post_pointwise_bn.forward(post_pointwise.forward(y), mode));
  return ops::relu(post_conv_bn.forward(post_conv.forward(y), mode));
}

void MdcBlock::collect(const std::string& prefix, nn::NamedTensors& out) const {
  premixer.collect(prefix + ".premixer", out);
  dcl.collect(prefix + ".dcl", out);
  post_pointwise.collect(prefix + ".postmixer.pointwise", out);
  post_pointwise_bn.collect(prefix + ".postmixer.pointwise.bn", out);
  post_conv.collect(prefix + ".postmixer.conv", out);
  post_conv_bn.collect(prefix + ".postmixer.conv.bn", out);
}

DeconvBlock::DeconvBlock(Index in, Index out, nn::Initializer& init)
    : deconv(in, out, 2, 2, init), bn(out) {}

Tensor DeconvBlock::forward(const Tensor& x, nn::Mode mode) const {
  Tensor y = deconv.forward(x);
  if (y.dim(2) != 2 * x.dim(2) || y.dim(3) != 2 * x.dim(3)) {
    throw GeometryError("deconv block must upsample exactly 2x, got " + shape_str(x.shape()) +
                        " -> " + shape_str(y.shape()));
  }
  return ops::relu(bn.forward(y, mode));
}

void DeconvBlock::collect(const std::string& prefix, nn::NamedTensors& out) const {
  deconv.collect(prefix, out);
  bn.collect(prefix + ".bn", out);
}

MdcDecoder::MdcDecoder(const DecoderConfig& cfg, nn::Initializer& init) : cfg_(cfg) {
  cfg_.validate();
  for (int i = 0; i < kBlocks; ++i) {
    const auto iu = static_cast<std::size_t>(i);
    blocks_[iu] = MdcBlock(cfg_.blocks[iu], init);
    deconvs_[iu] = DeconvBlock(cfg_.blocks[iu].out_channels, cfg_.deconv_out(i), init);
  }
  head_ = nn::Conv2d(cfg_.deconv_out(kBlocks - 1), cfg_.num_classes, 1, {}, init);
}

Tensor MdcDecoder::forward(const encoder::Pyramid& features, const Tensor& stem, nn::Mode mode) const {
  // Skip sources, shallowest last: F3, F2, F1, stem.
  const std::array<Tensor, kBlocks - 1> skips{to_nchw(features[2]), to_nchw(features[1]),
                                              to_nchw(features[0]), stem};
  const std::array<const char*, kBlocks - 1> names{"F3", "F2", "F1", "stem"};
  Tensor x = to_nchw(features[3]);
  for (std::size_t i = 0; i < kBlocks; ++i) {
    if (i > 0) {
      const Tensor& skip = skips[i - 1];
      if (skip.rank() != 4 || skip.dim(0) != x.dim(0) || skip.dim(2) != x.dim(2) ||
          skip.dim(3) != x.dim(3) || x.dim(1) + skip.dim(1) != cfg_.blocks[i].in_channels) {
        throw WiringError("decoder block " + std::to_string(i + 1) + ": upsampled path " +
                          shape_str(x.shape()) + " + skip " + names[i - 1] + " " +
                          shape_str(skip.shape()) + " does not give " +
                          chan(cfg_.blocks[i].in_channels) + " channels at matching resolution");
      }
      x = ops::concat({x, skip}, 1);
    }
    x = blocks_[i].forward(x, mode);
    x = deconvs_[i].forward(x, mode);
  }
  return head_.forward(x);
}

void MdcDecoder::collect(const std::string& prefix, nn::NamedTensors& out) const {
  for (std::size_t i = 0; i < kBlocks; ++i) {
    blocks_[i].collect(prefix + ".block" + std::to_string(i + 1), out);
    deconvs_[i].collect(prefix + ".deconv" + std::to_string(i + 1), out);
  }
  head_.collect(prefix + ".head", out);
}

}  // namespace aerialformer::decoder
