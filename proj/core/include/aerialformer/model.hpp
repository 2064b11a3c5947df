#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "aerialformer/decoder.hpp"
#include "aerialformer/encoder.hpp"
#include "aerialformer/stem.hpp"

namespace aerialformer {

struct ModelConfig {
  std::string variant = "T";
  encoder::EncoderConfig encoder;
  stem::StemConfig stem;
  std::array<decoder::ReceptiveFields, decoder::kBlocks> schedule = decoder::default_schedule();
  Index num_classes = 6;
  std::uint64_t seed = 0;

  decoder::DecoderConfig decoder_config() const;
  /// Spatial multiple every forward input must satisfy.
  Index input_multiple() const { return encoder.required_multiple(); }
  void validate() const;

  /// Named variants: "T", "S", "B" (published), plus "toy" (64x64 desk
  /// scale, C=32) and "micro" (gradient-check scale, under 10k parameters).
  static ModelConfig preset(const std::string& name);
};

void to_json(nlohmann::json& j, const ModelConfig& cfg);
void from_json(const nlohmann::json& j, ModelConfig& cfg);

ModelConfig load_model_config(const std::filesystem::path& path);
void save_model_config(const std::filesystem::path& path, const ModelConfig& cfg);

struct ParamItem {
  std::string module;
  Index count = 0;
};

struct ParamReport {
  std::vector<ParamItem> items;  ///< per top-level submodule, in model order
  Index encoder = 0;
  Index stem = 0;
  Index decoder = 0;
  Index total = 0;
};

/// Transformer encoder + CNN stem + multi-dilated decoder.
class AerialFormer {
 public:
  explicit AerialFormer(const ModelConfig& cfg);

  /// image (N, 3, H, W) with H, W multiples of `input_multiple()` -> logits
  /// (N, L, H, W). Train mode updates BatchNorm running statistics.
  Tensor forward(const Tensor& image, nn::Mode mode) const;

  /// Inference on any size: reflect-pads bottom/right to the input multiple,
  /// runs an eval-mode forward without recording, crops back.
  Tensor predict(const Tensor& image) const;

  nn::NamedTensors named_tensors() const;
  nn::NamedTensors parameters() const;  ///< trainable subset
  ParamReport param_report() const;

  const ModelConfig& config() const { return cfg_; }
  encoder::SwinEncoder& encoder() { return encoder_; }
  stem::CnnStem& stem() { return stem_; }
  decoder::MdcDecoder& decoder() { return decoder_; }

 private:
  ModelConfig cfg_;
  encoder::SwinEncoder encoder_;
  stem::CnnStem stem_;
  decoder::MdcDecoder decoder_;
};

/// Parameter count of `cfg` without instantiating a model.
ParamReport param_count(const ModelConfig& cfg);

/// Reflect-pads (N, C, H, W) on the bottom/right to (target_h, target_w).
Tensor pad_reflect(const Tensor& image, Index target_h, Index target_w);
/// Top-left (h, w) crop of an (N, C, H, W) tensor.
Tensor crop(const Tensor& x, Index h, Index w);

}  // namespace aerialformer
