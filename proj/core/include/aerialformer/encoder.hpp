#pragma once

#include <array>
#include <vector>

#include "aerialformer/nn.hpp"

namespace aerialformer::encoder {

inline constexpr int kStages = 4;

struct EncoderConfig {
  Index patch_size = 4;
  Index embed_dim = 96;
  Index window = 7;
  std::array<Index, kStages> depths{2, 2, 6, 2};
  std::array<Index, kStages> heads{3, 6, 12, 24};
  Index ffn_expansion = 4;

  /// Feature width of stage `s` (0-based): embed_dim * 2^s.
  Index stage_dim(int s) const { return embed_dim << s; }
  /// Input side length must be a multiple of this for every stage to tile
  /// into whole windows.
  Index required_multiple() const { return patch_size * 8 * window; }
  void validate() const;
};

/// Index of every (query, key) pair of an M x M window into the
/// (2M-1) x (2M-1) relative-position table, row-major over the M^2 x M^2 grid.
std::vector<Index> relative_position_index(Index window);

/// (N, h, w, d) -> (N * h/M * w/M, M*M, d); windows ordered row-major per image.
Tensor window_partition(const Tensor& x, Index window);
/// Inverse of `window_partition` for a batch of `n` images of size h x w.
Tensor window_reverse(const Tensor& windows, Index window, Index n, Index h, Index w);

/// Region label of every pixel of an h x w map after a cyclic shift by
/// `shift`: pixels sharing a label were contiguous before the shift.
std::vector<int> shift_region_labels(Index h, Index w, Index window, Index shift);

/// Additive attention mask (h/M * w/M, M^2, M^2): 0 within a region, -inf
/// across regions.
Tensor shifted_window_mask(Index h, Index w, Index window, Index shift);

/// Optional sink for post-softmax attention weights (B, heads, T, T).
struct AttentionProbe {
  Tensor probs;
};

/// Multi-head self-attention within each window, with a learned relative
/// position bias added to the scaled logits before the softmax.
struct WindowAttention {
  WindowAttention() = default;
  WindowAttention(Index dim, Index heads, Index window, nn::Initializer& init);

  /// windows: (B, M^2, d). mask: (nW, M^2, M^2) with B a multiple of nW, or
  /// undefined for no mask.
  Tensor forward(const Tensor& windows, const Tensor& mask, AttentionProbe* probe = nullptr) const;
  /// Bias table expanded through the index map: (heads, M^2, M^2).
  Tensor relative_bias() const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  nn::Linear qkv;
  nn::Linear proj;
  Tensor bias_table;  ///< ((2M-1)^2, heads)
  std::vector<Index> index;
  Index dim = 0;
  Index heads = 1;
  Index window = 1;
};

/// Pre-norm residual block: window attention, then a two-layer GELU FFN.
/// Odd-indexed blocks within a stage shift their windows by floor(M/2).
struct TransformerBlock {
  TransformerBlock() = default;
  TransformerBlock(Index dim, Index heads, Index window, Index shift, Index ffn_expansion,
                   nn::Initializer& init);
  Tensor forward(const Tensor& x, AttentionProbe* probe = nullptr) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  nn::LayerNorm norm1;
  WindowAttention attn;
  nn::LayerNorm norm2;
  nn::Linear fc1;
  nn::Linear fc2;
  Index window = 1;
  Index shift = 0;
  bool mask_enabled = true;
};

/// p x p stride-p projection to C channels; output is channels-last.
struct PatchEmbed {
  PatchEmbed() = default;
  PatchEmbed(Index patch, Index in_channels, Index dim, nn::Initializer& init);
  Tensor forward(const Tensor& image) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  nn::Conv2d proj;
  Index patch = 4;
};

/// Checkerboard 2x downsampling. The gather order along channels is
/// (even row, even col), (even row, odd col), (odd row, even col),
/// (odd row, odd col); a bias-free linear map then takes 4d -> 2d.
struct PatchMerge {
  PatchMerge() = default;
  PatchMerge(Index dim, nn::Initializer& init);
  static Tensor gather(const Tensor& x);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  nn::Linear reduction;
};

using Pyramid = std::array<Tensor, kStages>;

class SwinEncoder {
 public:
  SwinEncoder() = default;
  SwinEncoder(const EncoderConfig& cfg, nn::Initializer& init);

  /// image (N, 3, H, W) -> four channels-last features (N, H/4s, W/4s, 2^s C).
  Pyramid forward(const Tensor& image) const;
  void collect(const std::string& prefix, nn::NamedTensors& out) const;

  const EncoderConfig& config() const { return cfg_; }
  PatchEmbed& patch_embed() { return embed_; }
  std::vector<TransformerBlock>& stage(int s) { return stages_[static_cast<std::size_t>(s)]; }
  PatchMerge& merge(int s) { return merges_[static_cast<std::size_t>(s)]; }

 private:
  EncoderConfig cfg_;
  PatchEmbed embed_;
  std::array<std::vector<TransformerBlock>, kStages> stages_;
  std::array<PatchMerge, kStages - 1> merges_;
};

}  // namespace aerialformer::encoder
