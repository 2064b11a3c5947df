#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <set>

#include "aerialformer/encoder.hpp"
#include "support.hpp"

namespace af = aerialformer;
namespace enc = aerialformer::encoder;
namespace ops = aerialformer::ops;
using af::Index;
using af::Tensor;
using af::testing::random_tensor;

namespace {

void fill(Tensor& t, double v) {
  for (auto& x : t.mutable_data()) x = v;
}

// Plain-loop multi-head self-attention over all tokens of x (T, d), using the
// same packed qkv weight (d, 3d) and output projection (d, d) as the module.
std::vector<double> global_mhsa(const Tensor& x, const enc::WindowAttention& a) {
  const Index t = x.dim(0), d = x.dim(1), heads = a.heads, dh = d / heads;
  const Tensor& wq = a.qkv.weight;
  const Tensor& bq = a.qkv.bias;
  std::vector<double> qkv(static_cast<std::size_t>(t * 3 * d), 0.0);
  for (Index i = 0; i < t; ++i)
    for (Index o = 0; o < 3 * d; ++o) {
      double s = bq[o];
      for (Index c = 0; c < d; ++c) s += x.at({i, c}) * wq.at({c, o});
      qkv[static_cast<std::size_t>(i * 3 * d + o)] = s;
    }
  auto q = [&](Index i, Index h, Index c) { return qkv[static_cast<std::size_t>(i * 3 * d + h * dh + c)]; };
  auto k = [&](Index i, Index h, Index c) { return qkv[static_cast<std::size_t>(i * 3 * d + d + h * dh + c)]; };
  auto v = [&](Index i, Index h, Index c) { return qkv[static_cast<std::size_t>(i * 3 * d + 2 * d + h * dh + c)]; };
  std::vector<double> concat(static_cast<std::size_t>(t * d), 0.0);
  for (Index h = 0; h < heads; ++h) {
    for (Index i = 0; i < t; ++i) {
      std::vector<double> logit(static_cast<std::size_t>(t));
      double mx = -1e300;
      for (Index j = 0; j < t; ++j) {
        double s = 0.0;
        for (Index c = 0; c < dh; ++c) s += q(i, h, c) * k(j, h, c);
        logit[static_cast<std::size_t>(j)] = s / std::sqrt(static_cast<double>(dh));
        mx = std::max(mx, logit[static_cast<std::size_t>(j)]);
      }
      double z = 0.0;
      for (auto& l : logit) z += (l = std::exp(l - mx));
      for (Index c = 0; c < dh; ++c) {
        double s = 0.0;
        for (Index j = 0; j < t; ++j) s += logit[static_cast<std::size_t>(j)] / z * v(j, h, c);
        concat[static_cast<std::size_t>(i * d + h * dh + c)] = s;
      }
    }
  }
  std::vector<double> out(static_cast<std::size_t>(t * d), 0.0);
  for (Index i = 0; i < t; ++i)
    for (Index o = 0; o < d; ++o) {
      double s = a.proj.bias[o];
      for (Index c = 0; c < d; ++c) s += concat[static_cast<std::size_t>(i * d + c)] * a.proj.weight.at({c, o});
      out[static_cast<std::size_t>(i * d + o)] = s;
    }
  return out;
}

// Region label of every token of every window, in window_partition order.
std::vector<int> window_labels(Index h, Index w, Index m, Index shift) {
  const auto labels = enc::shift_region_labels(h, w, m, shift);
  std::vector<double> as_double(labels.begin(), labels.end());
  Tensor win = enc::window_partition(Tensor::from({1, h, w, 1}, std::move(as_double)), m);
  std::vector<int> out;
  for (double v : win.data()) out.push_back(static_cast<int>(v));
  return out;
}

}  // namespace

TEST(WindowPartitionTest, RoundTripIsBitwiseIdentity) {
  std::mt19937_64 rng(30);
  for (Index m : {1, 2, 3, 7}) {
    Tensor x = random_tensor({2, 2 * m, 3 * m, 5}, rng);
    Tensor w = enc::window_partition(x, m);
    EXPECT_EQ(w.shape(), (af::Shape{2 * 6, m * m, 5}));
    Tensor back = enc::window_reverse(w, m, 2, 2 * m, 3 * m);
    ASSERT_EQ(back.shape(), x.shape());
    for (Index i = 0; i < x.numel(); ++i) ASSERT_EQ(back[i], x[i]);
  }
}

TEST(WindowPartitionTest, PreservesMultisetAndSingleWindowIsFlatten) {
  std::mt19937_64 rng(31);
  Tensor x = random_tensor({1, 6, 6, 2}, rng);
  Tensor w = enc::window_partition(x, 3);
  std::vector<double> a(x.data().begin(), x.data().end()), b(w.data().begin(), w.data().end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());
  EXPECT_EQ(a, b);
  Tensor one = enc::window_partition(x, 6);
  EXPECT_EQ(one.shape(), (af::Shape{1, 36, 2}));
  for (Index i = 0; i < x.numel(); ++i) EXPECT_EQ(one[i], x[i]);
  EXPECT_THROW(enc::window_partition(x, 4), af::GeometryError);
}

TEST(RelativePositionTest, EqualDisplacementsShareOneTableEntry) {
  const Index m = 4, t = m * m;
  const auto idx = enc::relative_position_index(m);
  std::map<std::pair<Index, Index>, Index> seen;
  std::set<Index> distinct;
  for (Index i = 0; i < t; ++i) {
    for (Index j = 0; j < t; ++j) {
      const std::pair<Index, Index> disp{i / m - j / m, i % m - j % m};
      const Index e = idx[static_cast<std::size_t>(i * t + j)];
      auto [it, inserted] = seen.emplace(disp, e);
      EXPECT_EQ(it->second, e);
      distinct.insert(e);
    }
  }
  EXPECT_EQ(static_cast<Index>(distinct.size()), (2 * m - 1) * (2 * m - 1));
  EXPECT_EQ(seen.size(), distinct.size());
}

TEST(WindowAttentionTest, UniformAttentionAveragesTheWindow) {
  af::nn::Initializer init(1);
  const Index d = 4, m = 2;
  enc::WindowAttention a(d, 1, m, init);
  fill(a.qkv.weight, 0.0);
  fill(a.qkv.bias, 0.0);
  fill(a.proj.weight, 0.0);
  fill(a.proj.bias, 0.0);
  fill(a.bias_table, 0.0);
  auto wq = a.qkv.weight.mutable_data();
  auto wo = a.proj.weight.mutable_data();
  for (Index c = 0; c < d; ++c) {
    wq[static_cast<std::size_t>(c * 3 * d + 2 * d + c)] = 1.0;  // W^V = I
    wo[static_cast<std::size_t>(c * d + c)] = 1.0;              // W^O = I
  }
  std::mt19937_64 rng(32);
  Tensor x = random_tensor({3, m * m, d}, rng);
  Tensor y = a.forward(x, Tensor());
  for (Index b = 0; b < 3; ++b)
    for (Index c = 0; c < d; ++c) {
      double mean = 0.0;
      for (Index i = 0; i < m * m; ++i) mean += x.at({b, i, c}) / static_cast<double>(m * m);
      for (Index i = 0; i < m * m; ++i) EXPECT_NEAR(y.at({b, i, c}), mean, 1e-14);
    }
}

TEST(WindowAttentionTest, OneWindowWithoutBiasEqualsGlobalAttention) {
  af::nn::Initializer init(2);
  const Index d = 12, heads = 3, m = 3;
  enc::WindowAttention a(d, heads, m, init);
  // Larger weights than the init so the softmax is far from uniform.
  std::mt19937_64 rng(33);
  for (auto& v : a.qkv.weight.mutable_data()) v = std::uniform_real_distribution<double>(-0.6, 0.6)(rng);
  for (auto& v : a.qkv.bias.mutable_data()) v = std::uniform_real_distribution<double>(-0.2, 0.2)(rng);
  fill(a.bias_table, 0.0);
  Tensor x = random_tensor({1, m * m, d}, rng);
  Tensor y = a.forward(x, Tensor());
  const auto oracle = global_mhsa(ops::reshape(x, {m * m, d}), a);
  double err = 0.0;
  for (std::size_t i = 0; i < oracle.size(); ++i) err = std::max(err, std::abs(y.data()[i] - oracle[i]));
  EXPECT_LT(err, 1e-10);
}

TEST(WindowAttentionTest, AttentionRowsSumToOneAndHeadsMustDivide) {
  af::nn::Initializer init(3);
  enc::WindowAttention a(8, 2, 2, init);
  std::mt19937_64 rng(34);
  enc::AttentionProbe probe;
  a.forward(random_tensor({2, 4, 8}, rng), Tensor(), &probe);
  ASSERT_EQ(probe.probs.shape(), (af::Shape{2, 2, 4, 4}));
  for (Index r = 0; r < 16; ++r) {
    double s = 0.0;
    for (Index j = 0; j < 4; ++j) s += probe.probs[r * 4 + j];
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
  EXPECT_THROW(enc::WindowAttention(8, 3, 2, init), af::ConfigError);
}

TEST(ShiftedWindowTest, NoAttentionMassCrossesRegionBoundaries) {
  af::nn::Initializer init(4);
  const Index m = 4, shift = 2, h = 8, w = 12, d = 6;
  enc::TransformerBlock block(d, 2, m, shift, 2, init);
  std::mt19937_64 rng(35);
  enc::AttentionProbe probe;
  block.forward(random_tensor({2, h, w, d}, rng), &probe);
  const auto labels = window_labels(h, w, m, shift);
  const Index t = m * m, nw = (h / m) * (w / m);
  ASSERT_EQ(probe.probs.shape(), (af::Shape{2 * nw, 2, t, t}));
  Index cross = 0, same = 0;
  for (Index b = 0; b < 2 * nw; ++b) {
    const Index win = b % nw;
    for (Index head = 0; head < 2; ++head)
      for (Index i = 0; i < t; ++i)
        for (Index j = 0; j < t; ++j) {
          const double p = probe.probs.at({b, head, i, j});
          if (labels[static_cast<std::size_t>(win * t + i)] != labels[static_cast<std::size_t>(win * t + j)]) {
            ASSERT_EQ(p, 0.0) << "window " << win << " query " << i << " key " << j;
            ++cross;
          } else {
            EXPECT_GT(p, 0.0);
            ++same;
          }
        }
  }
  EXPECT_GT(cross, 0);
  EXPECT_GT(same, 0);
}

TEST(ShiftedWindowTest, MaskMatchesRegionLabels) {
  const Index m = 2, shift = 1;
  Tensor mask = enc::shifted_window_mask(4, 4, m, shift);
  ASSERT_EQ(mask.shape(), (af::Shape{4, 4, 4}));
  // Top-left window lies wholly in one region: no masking.
  for (Index i = 0; i < 16; ++i) EXPECT_EQ(mask[i], 0.0);
  // Bottom-right window mixes four regions: only the diagonal survives.
  for (Index i = 0; i < 4; ++i)
    for (Index j = 0; j < 4; ++j) {
      const double v = mask.at({3, i, j});
      if (i == j) {
        EXPECT_EQ(v, 0.0);
      } else {
        EXPECT_TRUE(std::isinf(v) && v < 0);
      }
    }
}

TEST(TransformerBlockTest, ZeroOutputProjectionsGiveIdentity) {
  af::nn::Initializer init(5);
  enc::TransformerBlock block(8, 2, 2, 1, 4, init);
  fill(block.attn.proj.weight, 0.0);
  fill(block.attn.proj.bias, 0.0);
  fill(block.fc2.weight, 0.0);
  fill(block.fc2.bias, 0.0);
  std::mt19937_64 rng(36);
  Tensor x = random_tensor({1, 4, 6, 8}, rng);
  Tensor y = block.forward(x);
  EXPECT_EQ(y.shape(), x.shape());
  for (Index i = 0; i < x.numel(); ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(TransformerBlockTest, ShiftIsInvisibleOnConstantFieldWithoutMask) {
  af::nn::Initializer ia(6), ib(6);
  enc::TransformerBlock plain(6, 3, 2, 0, 2, ia);
  enc::TransformerBlock shifted(6, 3, 2, 1, 2, ib);
  shifted.mask_enabled = false;
  std::mt19937_64 rng(37);
  Tensor token = random_tensor({1, 1, 1, 6}, rng);
  Tensor x = ops::add(Tensor::zeros({2, 4, 4, 6}), token);
  Tensor ya = plain.forward(x), yb = shifted.forward(x);
  EXPECT_LT(af::testing::max_abs_diff(ya, yb), 1e-13);
}

TEST(PatchEmbedTest, SinglePatchIsOneMatmul) {
  af::nn::Initializer init(7);
  const Index p = 4, c = 5;
  enc::PatchEmbed embed(p, 3, c, init);
  std::mt19937_64 rng(38);
  Tensor img = random_tensor({1, 3, p, p}, rng);
  Tensor y = embed.forward(img);
  ASSERT_EQ(y.shape(), (af::Shape{1, 1, 1, c}));
  // flatten(patch) . W^T + b with the kernel read as a (C, 3*p*p) matrix.
  Tensor w = ops::reshape(embed.proj.weight, {c, 3 * p * p});
  Tensor flat = ops::reshape(img, {1, 3 * p * p});
  Tensor expect = ops::add(ops::matmul(flat, ops::transpose(w)), embed.proj.bias);
  for (Index o = 0; o < c; ++o) EXPECT_NEAR(y[o], expect[o], 1e-14);
}

TEST(PatchEmbedTest, ConstantImageGivesIdenticalEmbeddings) {
  af::nn::Initializer init(8);
  enc::PatchEmbed embed(4, 3, 6, init);
  fill(embed.proj.bias, 0.0);
  Tensor y = embed.forward(Tensor::full({1, 3, 16, 12}, 0.7));
  ASSERT_EQ(y.shape(), (af::Shape{1, 4, 3, 6}));
  for (Index i = 0; i < y.numel(); ++i) EXPECT_EQ(y[i], y[i % 6]);
  EXPECT_THROW(embed.forward(Tensor::zeros({1, 3, 10, 12})), af::GeometryError);
}

TEST(PatchMergeTest, GatherIsCheckerboardPermutation) {
  Tensor x = Tensor::from({1, 2, 2, 1}, {1.0, 2.0, 3.0, 4.0});  // [[1,2],[3,4]]
  Tensor g = enc::PatchMerge::gather(x);
  ASSERT_EQ(g.shape(), (af::Shape{1, 1, 1, 4}));
  // (even,even), (even,odd), (odd,even), (odd,odd)
  EXPECT_EQ(std::vector<double>(g.data().begin(), g.data().end()), (std::vector<double>{1, 2, 3, 4}));
  EXPECT_THROW(enc::PatchMerge::gather(Tensor::zeros({1, 3, 2, 1})), af::GeometryError);
}

TEST(PatchMergeTest, IdentityBlockProjectionKeepsTwoSubgrids) {
  af::nn::Initializer init(9);
  const Index d = 3;
  enc::PatchMerge merge(d, init);
  fill(merge.reduction.weight, 0.0);
  auto w = merge.reduction.weight.mutable_data();
  for (Index k = 0; k < 2 * d; ++k) w[static_cast<std::size_t>(k * 2 * d + k)] = 1.0;
  std::mt19937_64 rng(39);
  Tensor x = random_tensor({2, 4, 6, d}, rng);
  Tensor y = merge.forward(x);
  ASSERT_EQ(y.shape(), (af::Shape{2, 2, 3, 2 * d}));
  for (Index n = 0; n < 2; ++n)
    for (Index i = 0; i < 2; ++i)
      for (Index j = 0; j < 3; ++j)
        for (Index c = 0; c < d; ++c) {
          EXPECT_EQ(y.at({n, i, j, c}), x.at({n, 2 * i, 2 * j, c}));
          EXPECT_EQ(y.at({n, i, j, d + c}), x.at({n, 2 * i, 2 * j + 1, c}));
        }
}

TEST(EncoderTest, ToyPyramidShapes) {
  enc::EncoderConfig cfg;
  cfg.embed_dim = 32;
  cfg.window = 2;
  cfg.heads = {1, 2, 4, 8};
  af::nn::Initializer init(10);
  enc::SwinEncoder encoder(cfg, init);
  std::mt19937_64 rng(40);
  const auto f = encoder.forward(random_tensor({2, 3, 64, 64}, rng));
  EXPECT_EQ(f[0].shape(), (af::Shape{2, 16, 16, 32}));
  EXPECT_EQ(f[1].shape(), (af::Shape{2, 8, 8, 64}));
  EXPECT_EQ(f[2].shape(), (af::Shape{2, 4, 4, 128}));
  EXPECT_EQ(f[3].shape(), (af::Shape{2, 2, 2, 256}));
  EXPECT_THROW(encoder.forward(Tensor::zeros({1, 3, 96, 64})), af::GeometryError);
}

TEST(EncoderTest, ShiftAlternatesStartingUnshifted) {
  enc::EncoderConfig cfg;
  cfg.embed_dim = 4;
  cfg.window = 4;
  cfg.depths = {2, 2, 3, 2};
  cfg.heads = {1, 1, 1, 1};
  af::nn::Initializer init(11);
  enc::SwinEncoder encoder(cfg, init);
  for (int s = 0; s < enc::kStages; ++s) {
    const auto& blocks = encoder.stage(s);
    for (std::size_t l = 0; l < blocks.size(); ++l) EXPECT_EQ(blocks[l].shift, l % 2 == 1 ? 2 : 0);
  }
  cfg.heads = {3, 1, 1, 1};
  EXPECT_THROW(cfg.validate(), af::ConfigError);
}

TEST(EncoderTest, DeepestFeatureGradientReachesPatchEmbedding) {
  enc::EncoderConfig cfg;
  cfg.embed_dim = 2;
  cfg.window = 2;
  cfg.depths = {1, 1, 1, 1};
  cfg.heads = {1, 1, 1, 2};
  cfg.ffn_expansion = 2;
  af::nn::Initializer init(12);
  enc::SwinEncoder encoder(cfg, init);
  std::mt19937_64 rng(41);
  Tensor img = random_tensor({1, 3, 64, 64}, rng);
  Tensor w = encoder.patch_embed().proj.weight;
  auto r = af::testing::check_gradients([&] { return af::testing::probe_loss(encoder.forward(img)[3]); }, {w});
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}
