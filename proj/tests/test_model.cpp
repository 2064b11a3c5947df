#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>

#include "aerialformer/checkpoint.hpp"
#include "aerialformer/model.hpp"
#include "support.hpp"

namespace af = aerialformer;
namespace ops = aerialformer::ops;
using af::Index;
using af::Tensor;
using af::nn::Mode;
using af::testing::random_tensor;

namespace {

// Brings every BatchNorm to a valid state so eval-mode forwards are legal.
void warm_up(const af::AerialFormer& model, Index side, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  model.forward(random_tensor({2, 3, side, side}, rng), Mode::kTrain);
}

Index instantiated_count(const af::ModelConfig& cfg) {
  return af::nn::count_trainable(af::AerialFormer(cfg).named_tensors());
}

}  // namespace

TEST(ModelConfigTest, PresetsMatchPublishedVariants) {
  const auto t = af::ModelConfig::preset("T");
  EXPECT_EQ(t.encoder.embed_dim, 96);
  EXPECT_EQ(t.encoder.window, 7);
  EXPECT_EQ(t.encoder.depths, (std::array<Index, 4>{2, 2, 6, 2}));
  const auto s = af::ModelConfig::preset("S");
  EXPECT_EQ(s.encoder.depths, (std::array<Index, 4>{2, 2, 18, 2}));
  const auto b = af::ModelConfig::preset("B");
  EXPECT_EQ(b.encoder.embed_dim, 128);
  EXPECT_EQ(b.encoder.window, 12);
  EXPECT_EQ(b.encoder.depths, (std::array<Index, 4>{2, 2, 18, 2}));
  EXPECT_THROW(af::ModelConfig::preset("XL"), af::ConfigError);
}

TEST(ModelConfigTest, JsonRoundTripAndPresetOverrides) {
  auto cfg = af::ModelConfig::preset("toy");
  cfg.num_classes = 7;
  cfg.seed = 42;
  const nlohmann::json j = cfg;
  const auto back = j.get<af::ModelConfig>();
  EXPECT_EQ(nlohmann::json(back), j);
  const auto over = nlohmann::json::parse(R"({"preset": "B", "num_classes": 3, "encoder": {"window": 7}})")
                        .get<af::ModelConfig>();
  EXPECT_EQ(over.encoder.embed_dim, 128);
  EXPECT_EQ(over.encoder.window, 7);
  EXPECT_EQ(over.num_classes, 3);
}

TEST(ModelTest, ToyForwardShape) {
  af::AerialFormer model(af::ModelConfig::preset("toy"));
  std::mt19937_64 rng(60);
  Tensor logits = model.forward(random_tensor({2, 3, 64, 64}, rng), Mode::kTrain);
  EXPECT_EQ(logits.shape(), (af::Shape{2, 4, 64, 64}));
}

TEST(ModelTest, EvalForwardIsDeterministicAndRowIndependent) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  warm_up(model, 64);
  std::mt19937_64 rng(61);
  Tensor one = random_tensor({1, 3, 64, 64}, rng);
  Tensor two = ops::concat({one, one}, 0);
  Tensor a = model.forward(one, Mode::kEval);
  Tensor b = model.forward(one, Mode::kEval);
  Tensor c = model.forward(two, Mode::kEval);
  const Index n = a.numel();
  for (Index i = 0; i < n; ++i) {
    ASSERT_EQ(a[i], b[i]);
    ASSERT_EQ(c[i], a[i]);
    ASSERT_EQ(c[n + i], a[i]);
  }
}

TEST(ModelTest, PixelSoftmaxSumsToOne) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  warm_up(model, 64);
  std::mt19937_64 rng(62);
  Tensor p = ops::softmax(model.forward(random_tensor({1, 3, 64, 64}, rng), Mode::kEval), 1);
  for (Index px = 0; px < 64 * 64; ++px) {
    double s = 0.0;
    for (Index c = 0; c < 3; ++c) s += p[c * 64 * 64 + px];
    ASSERT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(ModelTest, PredictPadsArbitrarySizes) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  warm_up(model, 64);
  std::mt19937_64 rng(63);
  Tensor img = random_tensor({1, 3, 50, 70}, rng);
  Tensor logits = model.predict(img);
  EXPECT_EQ(logits.shape(), (af::Shape{1, 3, 50, 70}));
  EXPECT_FALSE(logits.requires_grad());
  Tensor exact = random_tensor({1, 3, 64, 64}, rng);
  EXPECT_EQ(af::testing::max_abs_diff(model.predict(exact), model.forward(exact, Mode::kEval)), 0.0);
}

TEST(ModelTest, ReflectPadMirrorsWithoutRepeatingTheEdge) {
  Tensor x = Tensor::from({1, 1, 1, 3}, {1.0, 2.0, 3.0});
  Tensor y = af::pad_reflect(x, 1, 6);
  EXPECT_EQ(std::vector<double>(y.data().begin(), y.data().end()), (std::vector<double>{1, 2, 3, 2, 1, 2}));
}

TEST(ParamCountTest, ClosedFormMatchesInstantiatedModel) {
  for (const char* name : {"micro", "toy", "T"}) {
    const auto cfg = af::ModelConfig::preset(name);
    const auto closed = af::param_count(cfg);
    EXPECT_EQ(closed.total, instantiated_count(cfg)) << name;
    EXPECT_EQ(closed.total, closed.encoder + closed.stem + closed.decoder);
    Index items = 0;
    for (const auto& it : closed.items) items += it.count;
    EXPECT_EQ(items, closed.total) << name;
  }
}

TEST(ParamCountTest, ReportGroupsMatchClosedForm) {
  const auto cfg = af::ModelConfig::preset("toy");
  const auto report = af::AerialFormer(cfg).param_report();
  const auto closed = af::param_count(cfg);
  ASSERT_EQ(report.items.size(), closed.items.size());
  for (std::size_t i = 0; i < report.items.size(); ++i) {
    EXPECT_EQ(report.items[i].module, closed.items[i].module);
    EXPECT_EQ(report.items[i].count, closed.items[i].count) << closed.items[i].module;
  }
}

TEST(ParamCountTest, MicroStaysUnderTenThousand) {
  EXPECT_LE(af::param_count(af::ModelConfig::preset("micro")).total, 10000);
}

TEST(ParamCountTest, DoublingClassesOnlyGrowsTheHead) {
  auto cfg = af::ModelConfig::preset("toy");
  const auto base = af::param_count(cfg);
  cfg.num_classes *= 2;
  const auto doubled = af::param_count(cfg);
  const Index head_in = cfg.decoder_config().deconv_out(af::decoder::kBlocks - 1);
  const Index dl = cfg.num_classes / 2;
  EXPECT_EQ(doubled.total - base.total, head_in * dl + dl);
  EXPECT_EQ(doubled.encoder, base.encoder);
  EXPECT_EQ(doubled.stem, base.stem);
}

TEST(ModelTest, EveryParameterReceivesGradient) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  std::mt19937_64 rng(64);
  Tensor img = random_tensor({2, 3, 64, 64}, rng);
  {
    af::GradTape tape;
    tape.backward(af::testing::probe_loss(model.forward(img, Mode::kTrain)));
  }
  // A bias followed (through linear maps only) by a training-mode batch norm
  // is cancelled by the mean subtraction, so its gradient is zero up to rounding.
  const std::regex cancelled(R"((stem\.conv\d|dcl\.branch\d|postmixer\.(pointwise|conv)|decoder\.deconv\d)\.bias)");
  for (const auto& p : model.parameters()) {
    ASSERT_TRUE(p.tensor.has_grad()) << p.path;
    double mag = 0.0;
    for (double g : p.tensor.grad()) mag += std::abs(g);
    if (std::regex_search(p.path, cancelled)) {
      EXPECT_LT(mag, 1e-7) << p.path;
    } else {
      EXPECT_GT(mag, 0.0) << p.path;
    }
  }
}

TEST(CheckpointTest, RoundTripRestoresEveryTensor) {
  af::AerialFormer a(af::ModelConfig::preset("micro"));
  warm_up(a, 64);
  auto cfg = af::ModelConfig::preset("micro");
  cfg.seed = 9;
  af::AerialFormer b(cfg);
  std::stringstream buf;
  af::write_archive(buf, a.named_tensors());
  const auto archive = af::read_archive(buf);
  af::restore(archive, b.named_tensors());
  const auto ta = a.named_tensors(), tb = b.named_tensors();
  ASSERT_EQ(ta.size(), tb.size());
  for (std::size_t i = 0; i < ta.size(); ++i) {
    ASSERT_EQ(ta[i].path, tb[i].path);
    for (Index k = 0; k < ta[i].tensor.numel(); ++k) ASSERT_EQ(ta[i].tensor[k], tb[i].tensor[k]) << ta[i].path;
  }
  std::mt19937_64 rng(65);
  Tensor img = random_tensor({1, 3, 64, 64}, rng);
  EXPECT_EQ(af::testing::max_abs_diff(a.forward(img, Mode::kEval), b.forward(img, Mode::kEval)), 0.0);
}

TEST(CheckpointTest, PathsFollowDocumentedNaming) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  std::set<std::string> paths;
  for (const auto& t : model.named_tensors()) paths.insert(t.path);
  for (const char* p : {"encoder.patch_embed.proj.weight", "encoder.stage1.block2.attn.qkv.weight",
                        "encoder.stage1.block1.attn.relative_position_bias_table", "encoder.stage3.merge.reduction.weight",
                        "stem.conv1.weight", "stem.conv4.bn.running_var", "decoder.block1.premixer.weight",
                        "decoder.block5.dcl.branch3.weight", "decoder.block2.postmixer.conv.bn.weight",
                        "decoder.deconv5.weight", "decoder.head.weight", "decoder.head.bias"}) {
    EXPECT_TRUE(paths.count(p)) << p;
  }
}

TEST(CheckpointTest, RejectsMissingOrMisshapenEntries) {
  af::AerialFormer model(af::ModelConfig::preset("micro"));
  auto archive = af::TensorArchive{};
  EXPECT_THROW(af::restore(archive, model.named_tensors()), af::DataError);
  for (const auto& t : model.named_tensors()) archive[t.path] = t.tensor.clone();
  EXPECT_NO_THROW(af::restore(archive, model.named_tensors()));
  archive["decoder.extra.weight"] = Tensor::zeros({1});
  try {
    af::restore(archive, model.named_tensors());
    ADD_FAILURE() << "expected a data error for an unknown tensor";
  } catch (const af::DataError& e) {
    EXPECT_NE(std::string(e.what()).find("decoder.extra.weight"), std::string::npos);
  }
  archive.erase("decoder.extra.weight");
  archive["decoder.head.bias"] = Tensor::zeros({99});
  EXPECT_THROW(af::restore(archive, model.named_tensors()), af::DataError);
  std::stringstream junk("not a checkpoint");
  EXPECT_THROW(af::read_archive(junk), af::DataError);
}
