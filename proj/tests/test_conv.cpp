#include <gtest/gtest.h>

#include "aerialformer/flops.hpp"
#include "aerialformer/ops.hpp"
#include "support.hpp"

namespace af = aerialformer;
namespace ops = aerialformer::ops;
using af::Index;
using af::Tensor;
using af::testing::check_gradients;
using af::testing::probe_loss;
using af::testing::random_tensor;

namespace {

// Direct-loop cross-correlation with zero padding.
Tensor naive_conv(const Tensor& x, const Tensor& w, const ops::ConvGeometry& g) {
  const Index n = x.dim(0), cin = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const Index cout = w.dim(0), k = w.dim(2);
  const Index oh = (h + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
  const Index ow = (wd + 2 * g.padding - g.dilation * (k - 1) - 1) / g.stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n * cout * oh * ow), 0.0);
  for (Index b = 0; b < n; ++b)
    for (Index o = 0; o < cout; ++o)
      for (Index y = 0; y < oh; ++y)
        for (Index xx = 0; xx < ow; ++xx) {
          double s = 0.0;
          for (Index c = 0; c < cin; ++c)
            for (Index i = 0; i < k; ++i)
              for (Index j = 0; j < k; ++j) {
                const Index iy = y * g.stride - g.padding + i * g.dilation;
                const Index ix = xx * g.stride - g.padding + j * g.dilation;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                s += x.at({b, c, iy, ix}) * w.at({o, c, i, j});
              }
          out[static_cast<std::size_t>(((b * cout + o) * oh + y) * ow + xx)] = s;
        }
  return Tensor::from({n, cout, oh, ow}, std::move(out));
}

// Dilation realised by inserting d-1 zeros between kernel taps.
Tensor zero_inserted(const Tensor& w, Index d) {
  const Index co = w.dim(0), ci = w.dim(1), k = w.dim(2), kk = d * (k - 1) + 1;
  Tensor out = Tensor::zeros({co, ci, kk, kk});
  auto o = out.mutable_data();
  for (Index a = 0; a < co; ++a)
    for (Index b = 0; b < ci; ++b)
      for (Index i = 0; i < k; ++i)
        for (Index j = 0; j < k; ++j)
          o[static_cast<std::size_t>(((a * ci + b) * kk + i * d) * kk + j * d)] = w.at({a, b, i, j});
  return out;
}

double dot(const Tensor& a, const Tensor& b) {
  double s = 0.0;
  for (Index i = 0; i < a.numel(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

TEST(ConvTest, MatchesLoopOracleAcrossGeometries) {
  std::mt19937_64 rng(20);
  Tensor x = random_tensor({2, 3, 9, 8}, rng);
  for (Index k : {1, 2, 3}) {
    for (const ops::ConvGeometry g : {ops::ConvGeometry{1, 0, 1}, ops::ConvGeometry{2, 1, 1},
                                      ops::ConvGeometry{1, 2, 2}, ops::ConvGeometry{3, 1, 2}}) {
      Tensor w = random_tensor({4, 3, k, k}, rng);
      Tensor y = ops::conv2d(x, w, Tensor(), g);
      EXPECT_LT(af::testing::max_abs_diff(y, naive_conv(x, w, g)), 1e-12)
          << "k=" << k << " s=" << g.stride << " p=" << g.padding << " d=" << g.dilation;
    }
  }
}

TEST(ConvTest, BiasAddsPerChannelConstant) {
  std::mt19937_64 rng(21);
  Tensor x = random_tensor({1, 2, 4, 4}, rng);
  Tensor w = random_tensor({3, 2, 3, 3}, rng);
  Tensor b = Tensor::from({3}, {1.0, -2.0, 0.5});
  Tensor y0 = ops::conv2d(x, w, Tensor(), {1, 1, 1});
  Tensor y1 = ops::conv2d(x, w, b, {1, 1, 1});
  for (Index c = 0; c < 3; ++c) EXPECT_NEAR(y1.at({0, c, 2, 1}) - y0.at({0, c, 2, 1}), b[c], 1e-14);
}

TEST(ConvTest, DilatedConvEqualsZeroInsertedKernel) {
  std::mt19937_64 rng(22);
  Tensor x = random_tensor({1, 2, 11, 11}, rng);
  for (Index k : {1, 3}) {
    for (Index d : {1, 2, 3}) {
      Tensor w = random_tensor({2, 2, k, k}, rng);
      const Index pad = d * (k - 1) / 2;
      Tensor dilated = ops::conv2d(x, w, Tensor(), {1, pad, d});
      Tensor dense = ops::conv2d(x, zero_inserted(w, d), Tensor(), {1, pad, 1});
      ASSERT_EQ(dilated.shape(), dense.shape());
      EXPECT_EQ(dilated.shape(), x.shape()) << "same padding keeps the size";
      EXPECT_LT(af::testing::max_abs_diff(dilated, dense), 1e-10) << "k=" << k << " d=" << d;
    }
  }
}

TEST(ConvTest, OutputSizeAndErrors) {
  EXPECT_EQ(ops::conv_output_size(64, 3, {2, 1, 1}), 32);
  EXPECT_EQ(ops::conv_output_size(7, 3, {1, 3, 3}), 7);
  EXPECT_THROW(ops::conv_output_size(2, 5, {1, 0, 1}), af::GeometryError);
  Tensor x = Tensor::zeros({1, 3, 4, 4});
  EXPECT_THROW(ops::conv2d(x, Tensor::zeros({2, 4, 3, 3}), Tensor(), {}), af::ShapeError);
}

TEST(ConvTest, FlopChargeMatchesFormula) {
  Tensor x = Tensor::zeros({2, 3, 8, 8});
  Tensor w = Tensor::zeros({5, 3, 3, 3});
  af::FlopCounter fc;
  ops::conv2d(x, w, Tensor(), {1, 1, 1});
  EXPECT_EQ(fc.count(), 2U * 2 * 5 * 3 * 9 * 64);
}

TEST(ConvTransposeTest, IsAdjointOfConv) {
  // <conv(x), y> == <x, conv_transpose(y)> with the same kernel.
  std::mt19937_64 rng(23);
  for (Index stride : {1, 2}) {
    for (Index k : {2, 3}) {
      for (Index pad : {0, 1}) {
        Tensor x = random_tensor({2, 3, 8, 8}, rng);
        Tensor w = random_tensor({4, 3, k, k}, rng);  // conv: 3 -> 4
        Tensor cx = ops::conv2d(x, w, Tensor(), {stride, pad, 1});
        Tensor y = random_tensor(cx.shape(), rng);
        Tensor ty = ops::conv_transpose2d(y, w, Tensor(), stride, pad);  // 4 -> 3
        if (ty.shape() != x.shape()) continue;  // output_padding cases are not modelled
        EXPECT_NEAR(dot(cx, y), dot(x, ty), 1e-10) << "stride " << stride << " k " << k << " pad " << pad;
      }
    }
  }
}

TEST(ConvTransposeTest, TwoByTwoStrideTwoDoublesSizeWithoutOverlap) {
  Tensor x = Tensor::from({1, 1, 1, 2}, {1.0, 2.0});
  Tensor w = Tensor::from({1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  Tensor y = ops::conv_transpose2d(x, w, Tensor(), 2, 0);
  ASSERT_EQ(y.shape(), (af::Shape{1, 1, 2, 4}));
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()),
            (std::vector<double>{1, 2, 2, 4, 3, 4, 6, 8}));
}

TEST(GradCheckTest, Conv2dAllGeometries) {
  std::mt19937_64 rng(24);
  Tensor x = random_tensor({2, 2, 6, 5}, rng);
  Tensor b = random_tensor({3}, rng);
  for (const auto& [k, g] : std::vector<std::pair<Index, ops::ConvGeometry>>{
           {1, {1, 0, 1}}, {3, {1, 1, 1}}, {3, {2, 1, 1}}, {3, {1, 2, 2}}, {3, {1, 3, 3}}, {4, {4, 0, 1}}}) {
    Tensor w = random_tensor({3, 2, k, k}, rng);
    auto r = check_gradients([&] { return probe_loss(ops::conv2d(x, w, b, g)); }, {x, w, b});
    EXPECT_LT(r.max_rel_err, 1e-4) << "k=" << k << " d=" << g.dilation << ": " << r.worst;
  }
}

TEST(GradCheckTest, ConvTranspose2d) {
  std::mt19937_64 rng(25);
  Tensor x = random_tensor({2, 3, 3, 4}, rng);
  Tensor w = random_tensor({3, 2, 2, 2}, rng);
  Tensor b = random_tensor({2}, rng);
  auto r = check_gradients([&] { return probe_loss(ops::conv_transpose2d(x, w, b, 2, 0)); }, {x, w, b});
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
  Tensor w3 = random_tensor({3, 2, 3, 3}, rng);
  r = check_gradients([&] { return probe_loss(ops::conv_transpose2d(x, w3, b, 2, 1)); }, {x, w3, b});
  EXPECT_LT(r.max_rel_err, 1e-4) << r.worst;
}
