#include "aerialformer/encoder.hpp"

#include <cmath>
#include <limits>
#include <string>

namespace aerialformer::encoder {

using ops::add;
using ops::permute;
using ops::reshape;

void EncoderConfig::validate() const {
  if (patch_size < 1) throw ConfigError("patch size must be >= 1");
  if (window < 1) throw ConfigError("window side must be >= 1");
  if (embed_dim < 1) throw ConfigError("embedding dim must be >= 1");
  if (ffn_expansion < 1) throw ConfigError("ffn expansion must be >= 1");
  for (int s = 0; s < kStages; ++s) {
    if (depths[static_cast<std::size_t>(s)] < 1) {
      throw ConfigError("stage " + std::to_string(s + 1) + " depth must be >= 1");
    }
    const Index h = heads[static_cast<std::size_t>(s)];
    if (h < 1 || stage_dim(s) % h != 0) {
      throw ConfigError("stage " + std::to_string(s + 1) + " dim " + std::to_string(stage_dim(s)) +
                        " is not divisible by " + std::to_string(h) + " heads");
    }
  }
}

std::vector<Index> relative_position_index(Index m) {
  const Index t = m * m;
  const Index side = 2 * m - 1;
  std::vector<Index> idx(static_cast<std::size_t>(t * t));
  for (Index i = 0; i < t; ++i) {
    for (Index j = 0; j < t; ++j) {
      const Index dy = i / m - j / m + (m - 1);
      const Index dx = i % m - j % m + (m - 1);
      idx[static_cast<std::size_t>(i * t + j)] = dy * side + dx;
    }
  }
  return idx;
}

Tensor window_partition(const Tensor& x, Index m) {
  if (x.rank() != 4) throw ShapeError("window_partition expects (N, h, w, d), got " + shape_str(x.shape()));
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  if (m < 1 || h % m != 0 || w % m != 0) {
    throw GeometryError("feature map " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not divisible into " + std::to_string(m) + "x" + std::to_string(m) +
                        " windows");
  }
  Tensor t = reshape(x, {n, h / m, m, w / m, m, d});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {n * (h / m) * (w / m), m * m, d});
}

Tensor window_reverse(const Tensor& windows, Index m, Index n, Index h, Index w) {
  if (m < 1 || h % m != 0 || w % m != 0) {
    throw GeometryError("cannot reassemble " + std::to_string(h) + "x" + std::to_string(w) +
                        " from " + std::to_string(m) + "x" + std::to_string(m) + " windows");
  }
  const Index d = windows.dim(-1);
  Tensor t = reshape(windows, {n, h / m, w / m, m, m, d});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {n, h, w, d});
}

std::vector<int> shift_region_labels(Index h, Index w, Index m, Index shift) {
  // Three bands per axis: [0, L-M), [L-M, L-shift), [L-shift, L).
  auto band = [m, shift](Index v, Index len) {
    if (v < len - m) return 0;
    if (v < len - shift) return 1;
    return 2;
  };
  std::vector<int> labels(static_cast<std::size_t>(h * w));
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) labels[static_cast<std::size_t>(y * w + x)] = band(y, h) * 3 + band(x, w);
  }
  return labels;
}

Tensor shifted_window_mask(Index h, Index w, Index m, Index shift) {
  const auto labels = shift_region_labels(h, w, m, shift);
  const Index t = m * m;
  const Index nwh = h / m, nww = w / m;
  Buffer mask(static_cast<std::size_t>(nwh * nww * t * t), 0.0);
  const double neg_inf = -std::numeric_limits<double>::infinity();
  for (Index wy = 0; wy < nwh; ++wy) {
    for (Index wx = 0; wx < nww; ++wx) {
      const Index win = wy * nww + wx;
      auto label = [&](Index p) {
        return labels[static_cast<std::size_t>((wy * m + p / m) * w + wx * m + p % m)];
      };
      for (Index i = 0; i < t; ++i) {
        for (Index j = 0; j < t; ++j) {
          if (label(i) != label(j)) mask[static_cast<std::size_t>((win * t + i) * t + j)] = neg_inf;
        }
      }
    }
  }
  return Tensor::from({nwh * nww, t, t}, std::move(mask));
}

WindowAttention::WindowAttention(Index dim_, Index heads_, Index window_, nn::Initializer& init)
    : qkv(dim_, 3 * dim_, true, init),
      proj(dim_, dim_, true, init),
      bias_table(init.trunc_normal({(2 * window_ - 1) * (2 * window_ - 1), heads_})),
      index(relative_position_index(window_)),
      dim(dim_),
      heads(heads_),
      window(window_) {
  if (heads < 1 || dim % heads != 0) {
    throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " +
                      std::to_string(heads) + " heads");
  }
  bias_table.set_requires_grad(true);
}

Tensor WindowAttention::relative_bias() const {
  const Index t = window * window;
  Tensor b = ops::gather_rows(bias_table, index);  // (T*T, heads)
  b = reshape(b, {t, t, heads});
  return permute(b, {2, 0, 1});
}

Tensor WindowAttention::forward(const Tensor& windows, const Tensor& mask, AttentionProbe* probe) const {
  if (windows.rank() != 3 || windows.dim(2) != dim) {
    throw ShapeError("window attention expects (B, T, " + std::to_string(dim) + "), got " +
                     shape_str(windows.shape()));
  }
  const Index b = windows.dim(0), t = windows.dim(1);
  if (t != window * window) {
    throw ShapeError("window attention built for " + std::to_string(window * window) +
                     " tokens per window, got " + std::to_string(t));
  }
  const Index dh = dim / heads;

  Tensor qkv_all = qkv.forward(windows);                   // (B, T, 3d)
  qkv_all = reshape(qkv_all, {b, t, 3, heads, dh});
  qkv_all = permute(qkv_all, {2, 0, 3, 1, 4});             // (3, B, heads, T, dh)
  auto part = [&](Index i) { return reshape(ops::slice(qkv_all, 0, i, 1), {b, heads, t, dh}); };
  Tensor q = ops::scale(part(0), 1.0 / std::sqrt(static_cast<double>(dh)));
  Tensor k = part(1);
  Tensor v = part(2);

  Tensor logits = ops::matmul(q, ops::transpose(k));     // (B, heads, T, T)
  logits = add(logits, relative_bias());
  if (mask.defined()) {
    const Index nw = mask.dim(0);
    if (b % nw != 0) {
      throw ShapeError("attention mask for " + std::to_string(nw) + " windows does not tile a batch of " +
                       std::to_string(b));
    }
    logits = reshape(logits, {b / nw, nw, heads, t, t});
    logits = add(logits, reshape(mask, {nw, 1, t, t}));
    logits = reshape(logits, {b, heads, t, t});
  }
  Tensor probs = ops::softmax(logits, -1);
  if (probe) probe->probs = probs;

  Tensor out = ops::matmul(probs, v);                      // (B, heads, T, dh)
  out = permute(out, {0, 2, 1, 3});
  out = reshape(out, {b, t, dim});
  return proj.forward(out);
}

void WindowAttention::collect(const std::string& prefix, nn::NamedTensors& out) const {
  qkv.collect(prefix + ".qkv", out);
  proj.collect(prefix + ".proj", out);
  out.push_back({prefix + ".relative_position_bias_table", bias_table, true, true});
}

TransformerBlock::TransformerBlock(Index dim, Index heads, Index window_, Index shift_,
                                   Index ffn_expansion, nn::Initializer& init)
    : norm1(dim),
      attn(dim, heads, window_, init),
      norm2(dim),
      fc1(dim, dim * ffn_expansion, true, init),
      fc2(dim * ffn_expansion, dim, true, init),
      window(window_),
      shift(shift_) {}

Tensor TransformerBlock::forward(const Tensor& x, AttentionProbe* probe) const {
  if (x.rank() != 4) throw ShapeError("transformer block expects (N, h, w, d), got " + shape_str(x.shape()));
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (h % window != 0 || w % window != 0) {
    throw GeometryError("feature map " + std::to_string(h) + "x" + std::to_string(w) +
                        " is not a multiple of window side " + std::to_string(window));
  }
  Tensor y = norm1.forward(x);
  Tensor mask;
  if (shift > 0) {
    y = ops::roll(y, {-shift, -shift}, {1, 2});
    if (mask_enabled) mask = shifted_window_mask(h, w, window, shift);
  }
  Tensor win = window_partition(y, window);
  win = attn.forward(win, mask, probe);
  y = window_reverse(win, window, n, h, w);
  if (shift > 0) y = ops::roll(y, {shift, shift}, {1, 2});
  Tensor z = add(x, y);
  Tensor ffn = fc2.forward(ops::gelu(fc1.forward(norm2.forward(z))));
  return add(z, ffn);
}

void TransformerBlock::collect(const std::string& prefix, nn::NamedTensors& out) const {
  norm1.collect(prefix + ".norm1", out);
  attn.collect(prefix + ".attn", out);
  norm2.collect(prefix + ".norm2", out);
  fc1.collect(prefix + ".ffn.fc1", out);
  fc2.collect(prefix + ".ffn.fc2", out);
}

PatchEmbed::PatchEmbed(Index patch_, Index in_channels, Index dim, nn::Initializer& init)
    : proj(in_channels, dim, patch_, {patch_, 0, 1}, init, true, nn::ConvInit::kTruncNormal), patch(patch_) {}

Tensor PatchEmbed::forward(const Tensor& image) const {
  if (image.rank() != 4) throw ShapeError("patch embedding expects (N, C, H, W), got " + shape_str(image.shape()));
  if (image.dim(2) % patch != 0 || image.dim(3) % patch != 0) {
    throw GeometryError("image " + std::to_string(image.dim(2)) + "x" + std::to_string(image.dim(3)) +
                        " is not divisible by patch size " + std::to_string(patch));
  }
  return permute(proj.forward(image), {0, 2, 3, 1});
}

void PatchEmbed::collect(const std::string& prefix, nn::NamedTensors& out) const {
  proj.collect(prefix + ".proj", out);
}

PatchMerge::PatchMerge(Index dim, nn::Initializer& init) : reduction(4 * dim, 2 * dim, false, init) {}

Tensor PatchMerge::gather(const Tensor& x) {
  if (x.rank() != 4) throw ShapeError("patch merge expects (N, h, w, d), got " + shape_str(x.shape()));
  const Index n = x.dim(0), h = x.dim(1), w = x.dim(2), d = x.dim(3);
  if (h % 2 != 0 || w % 2 != 0) {
    throw GeometryError("patch merge needs even spatial dims, got " + std::to_string(h) + "x" +
                        std::to_string(w));
  }
  // (N, h/2, 2[row parity], w/2, 2[col parity], d) -> (N, h/2, w/2, row, col, d)
  Tensor t = reshape(x, {n, h / 2, 2, w / 2, 2, d});
  t = permute(t, {0, 1, 3, 2, 4, 5});
  return reshape(t, {n, h / 2, w / 2, 4 * d});
}

Tensor PatchMerge::forward(const Tensor& x) const { return reduction.forward(gather(x)); }

void PatchMerge::collect(const std::string& prefix, nn::NamedTensors& out) const {
  reduction.collect(prefix + ".reduction", out);
}

SwinEncoder::SwinEncoder(const EncoderConfig& cfg, nn::Initializer& init) : cfg_(cfg) {
  cfg_.validate();
  embed_ = PatchEmbed(cfg_.patch_size, 3, cfg_.embed_dim, init);
  const Index shift = cfg_.window / 2;
  for (int s = 0; s < kStages; ++s) {
    const auto su = static_cast<std::size_t>(s);
    const Index dim = cfg_.stage_dim(s);
    for (Index l = 0; l < cfg_.depths[su]; ++l) {
      stages_[su].emplace_back(dim, cfg_.heads[su], cfg_.window, l % 2 == 1 ? shift : 0,
                               cfg_.ffn_expansion, init);
    }
    if (s + 1 < kStages) merges_[su] = PatchMerge(dim, init);
  }
}

Pyramid SwinEncoder::forward(const Tensor& image) const {
  if (image.rank() != 4 || image.dim(1) != 3) {
    throw ShapeError("encoder expects (N, 3, H, W), got " + shape_str(image.shape()));
  }
  const Index multiple = cfg_.required_multiple();
  if (image.dim(2) % multiple != 0 || image.dim(3) % multiple != 0) {
    throw GeometryError("encoder input " + std::to_string(image.dim(2)) + "x" +
                        std::to_string(image.dim(3)) + " must be a multiple of " +
                        std::to_string(multiple) + " (patch " + std::to_string(cfg_.patch_size) +
                        " x 8 x window " + std::to_string(cfg_.window) + ")");
  }
  Pyramid features;
  Tensor x = embed_.forward(image);
  for (int s = 0; s < kStages; ++s) {
    const auto su = static_cast<std::size_t>(s);
    for (const auto& block : stages_[su]) x = block.forward(x);
    features[su] = x;
    if (s + 1 < kStages) x = merges_[su].forward(x);
  }
  return features;
}

void SwinEncoder::collect(const std::string& prefix, nn::NamedTensors& out) const {
  embed_.collect(prefix + ".patch_embed", out);
  for (int s = 0; s < kStages; ++s) {
    const auto su = static_cast<std::size_t>(s);
    const std::string stage = prefix + ".stage" + std::to_string(s + 1);
    for (std::size_t l = 0; l < stages_[su].size(); ++l) {
      stages_[su][l].collect(stage + ".block" + std::to_string(l + 1), out);
    }
    if (s + 1 < kStages) merges_[su].collect(stage + ".merge", out);
  }
}

}  // namespace aerialformer::encoder
