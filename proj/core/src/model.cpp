#include "aerialformer/model.hpp"

#include <fstream>

namespace aerialformer {

using nlohmann::json;

decoder::DecoderConfig ModelConfig::decoder_config() const {
  return decoder::DecoderConfig::build(encoder.embed_dim, stem.out_channels, num_classes, schedule);
}

void ModelConfig::validate() const {
  encoder.validate();
  stem.validate();
  decoder_config().validate();
}

ModelConfig ModelConfig::preset(const std::string& name) {
  ModelConfig cfg;
  if (name == "T" || name == "t") {
    cfg.variant = "T";
  } else if (name == "S" || name == "s") {
    cfg.variant = "S";
    cfg.encoder.depths = {2, 2, 18, 2};
  } else if (name == "B" || name == "b") {
    cfg.variant = "B";
    cfg.encoder.embed_dim = 128;
    cfg.encoder.window = 12;
    cfg.encoder.depths = {2, 2, 18, 2};
    cfg.encoder.heads = {4, 8, 16, 32};
    cfg.stem.out_channels = 64;  // C / 2
  } else if (name == "toy") {
    cfg.variant = "toy";
    cfg.encoder.embed_dim = 32;
    cfg.encoder.window = 2;
    cfg.encoder.depths = {2, 2, 2, 2};
    cfg.encoder.heads = {1, 2, 4, 8};
    cfg.stem.out_channels = 16;
    cfg.num_classes = 4;
  } else if (name == "micro") {
    cfg.variant = "micro";
    cfg.encoder.embed_dim = 2;
    cfg.encoder.window = 2;
    cfg.encoder.depths = {2, 1, 1, 1};
    cfg.encoder.heads = {1, 1, 2, 2};
    cfg.encoder.ffn_expansion = 2;
    cfg.stem.out_channels = 1;
    cfg.num_classes = 3;
  } else {
    throw ConfigError("unknown model preset '" + name + "' (expected T, S, B, toy or micro)");
  }
  return cfg;
}

void to_json(json& j, const ModelConfig& cfg) {
  j = json{{"variant", cfg.variant},
           {"num_classes", cfg.num_classes},
           {"seed", cfg.seed},
           {"encoder",
            {{"patch_size", cfg.encoder.patch_size},
             {"embed_dim", cfg.encoder.embed_dim},
             {"window", cfg.encoder.window},
             {"depths", cfg.encoder.depths},
             {"heads", cfg.encoder.heads},
             {"ffn_expansion", cfg.encoder.ffn_expansion}}},
           {"stem", {{"out_channels", cfg.stem.out_channels}}},
           {"decoder", {{"receptive_fields", cfg.schedule}}}};
}

void from_json(const json& j, ModelConfig& cfg) {
  // A "preset" key seeds every field; explicit keys then override.
  if (j.contains("preset")) cfg = ModelConfig::preset(j.at("preset").get<std::string>());
  cfg.variant = j.value("variant", cfg.variant);
  cfg.num_classes = j.value("num_classes", cfg.num_classes);
  cfg.seed = j.value("seed", cfg.seed);
  if (j.contains("encoder")) {
    const json& e = j.at("encoder");
    cfg.encoder.patch_size = e.value("patch_size", cfg.encoder.patch_size);
    cfg.encoder.embed_dim = e.value("embed_dim", cfg.encoder.embed_dim);
    cfg.encoder.window = e.value("window", cfg.encoder.window);
    cfg.encoder.depths = e.value("depths", cfg.encoder.depths);
    cfg.encoder.heads = e.value("heads", cfg.encoder.heads);
    cfg.encoder.ffn_expansion = e.value("ffn_expansion", cfg.encoder.ffn_expansion);
  }
  if (j.contains("stem")) cfg.stem.out_channels = j.at("stem").value("out_channels", cfg.stem.out_channels);
  if (j.contains("decoder")) cfg.schedule = j.at("decoder").value("receptive_fields", cfg.schedule);
}

ModelConfig load_model_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open model config: " + path.string());
  ModelConfig cfg;
  try {
    const json j = json::parse(is);
    // Training configs nest the model under "model".
    cfg = j.contains("model") ? j.at("model").get<ModelConfig>() : j.get<ModelConfig>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  cfg.validate();
  return cfg;
}

void save_model_config(const std::filesystem::path& path, const ModelConfig& cfg) {
  std::ofstream os(path);
  if (!os) throw DataError("cannot write model config: " + path.string());
  os << json(cfg).dump(2) << '\n';
}

AerialFormer::AerialFormer(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  nn::Initializer init(cfg_.seed);
  encoder_ = encoder::SwinEncoder(cfg_.encoder, init);
  stem_ = stem::CnnStem(cfg_.stem, init);
  decoder_ = decoder::MdcDecoder(cfg_.decoder_config(), init);
}

Tensor AerialFormer::forward(const Tensor& image, nn::Mode mode) const {
  const encoder::Pyramid features = encoder_.forward(image);
  const Tensor low = stem_.forward(image, mode);
  return decoder_.forward(features, low, mode);
}

Tensor AerialFormer::predict(const Tensor& image) const {
  NoGradGuard no_grad;
  const Index h = image.dim(2), w = image.dim(3);
  const Index multiple = cfg_.input_multiple();
  const Index ph = (h + multiple - 1) / multiple * multiple;
  const Index pw = (w + multiple - 1) / multiple * multiple;
  if (ph == h && pw == w) return forward(image, nn::Mode::kEval);
  return crop(forward(pad_reflect(image, ph, pw), nn::Mode::kEval), h, w);
}

nn::NamedTensors AerialFormer::named_tensors() const {
  nn::NamedTensors out;
  encoder_.collect("encoder", out);
  stem_.collect("stem", out);
  decoder_.collect("decoder", out);
  return out;
}

nn::NamedTensors AerialFormer::parameters() const {
  nn::NamedTensors all = named_tensors();
  nn::NamedTensors out;
  for (auto& t : all) {
    if (t.trainable) out.push_back(std::move(t));
  }
  return out;
}

ParamReport AerialFormer::param_report() const {
  ParamReport report;
  auto add_item = [&report](const std::string& module, Index count) {
    if (!report.items.empty() && report.items.back().module == module) {
      report.items.back().count += count;
    } else {
      report.items.push_back({module, count});
    }
  };
  for (const auto& t : parameters()) {
    // Group by the first two path components, e.g. "encoder.stage3".
    const auto first = t.path.find('.');
    const auto second = t.path.find('.', first + 1);
    add_item(t.path.substr(0, second), t.tensor.numel());
    const std::string root = t.path.substr(0, first);
    if (root == "encoder") report.encoder += t.tensor.numel();
    if (root == "stem") report.stem += t.tensor.numel();
    if (root == "decoder") report.decoder += t.tensor.numel();
  }
  report.total = report.encoder + report.stem + report.decoder;
  return report;
}

ParamReport param_count(const ModelConfig& cfg) {
  cfg.validate();
  ParamReport r;
  const auto& e = cfg.encoder;
  const Index p = e.patch_size, c = e.embed_dim, m = e.window;
  r.items.push_back({"encoder.patch_embed", 3 * c * p * p + c});
  for (int s = 0; s < encoder::kStages; ++s) {
    const auto su = static_cast<std::size_t>(s);
    const Index d = e.stage_dim(s);
    const Index hidden = d * e.ffn_expansion;
    const Index block = 2 * d                          // norm1
                        + d * 3 * d + 3 * d            // qkv
                        + d * d + d                    // proj
                        + (2 * m - 1) * (2 * m - 1) * e.heads[su]
                        + 2 * d                        // norm2
                        + d * hidden + hidden + hidden * d + d;
    Index stage = e.depths[su] * block;
    if (s + 1 < encoder::kStages) stage += 4 * d * 2 * d;
    r.items.push_back({"encoder.stage" + std::to_string(s + 1), stage});
  }
  for (const auto& it : r.items) r.encoder += it.count;

  const Index cs = cfg.stem.out_channels, k = cfg.stem.kernel;
  r.stem = (cfg.stem.in_channels * cs * k * k + cs + 2 * cs) + 3 * (cs * cs * k * k + cs + 2 * cs);
  r.items.push_back({"stem.conv1", cfg.stem.in_channels * cs * k * k + 3 * cs});
  for (int i = 2; i <= stem::kStemLayers; ++i) r.items.push_back({"stem.conv" + std::to_string(i), cs * cs * k * k + 3 * cs});

  const decoder::DecoderConfig dc = cfg.decoder_config();
  for (int i = 0; i < decoder::kBlocks; ++i) {
    const auto& b = dc.blocks[static_cast<std::size_t>(i)];
    const Index w = b.working_channels, third = w / 3, out = b.out_channels;
    Index block = b.in_channels * w + w;
    for (Index rf : b.receptive_fields) {
      const Index kk = decoder::kernel_for(rf);
      block += third * third * kk * kk + third;
    }
    block += w * out + out + 2 * out;
    block += out * out * 9 + out + 2 * out;
    const Index up = dc.deconv_out(i);
    const Index deconv = out * up * 4 + up + 2 * up;
    r.items.push_back({"decoder.block" + std::to_string(i + 1), block});
    r.items.push_back({"decoder.deconv" + std::to_string(i + 1), deconv});
    r.decoder += block + deconv;
  }
  const Index head = dc.deconv_out(decoder::kBlocks - 1) * cfg.num_classes + cfg.num_classes;
  r.items.push_back({"decoder.head", head});
  r.decoder += head;
  r.total = r.encoder + r.stem + r.decoder;
  return r;
}

namespace {

// Index into [0, n) under repeated mirror reflection without edge repeat.
Index mirror(Index i, Index n) {
  if (n == 1) return 0;
  const Index period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace

Tensor pad_reflect(const Tensor& image, Index th, Index tw) {
  const Index n = image.dim(0), c = image.dim(1), h = image.dim(2), w = image.dim(3);
  if (th < h || tw < w) throw GeometryError("pad target smaller than image");
  Buffer out(static_cast<std::size_t>(n * c * th * tw));
  auto src = image.data();
  for (Index p = 0; p < n * c; ++p) {
    for (Index y = 0; y < th; ++y) {
      const Index sy = mirror(y, h);
      for (Index x = 0; x < tw; ++x) {
        out[static_cast<std::size_t>((p * th + y) * tw + x)] =
            src[static_cast<std::size_t>((p * h + sy) * w + mirror(x, w))];
      }
    }
  }
  return Tensor::from({n, c, th, tw}, std::move(out));
}

Tensor crop(const Tensor& x, Index h, Index w) {
  return ops::slice(ops::slice(x, 2, 0, h), 3, 0, w);
}

}  // namespace aerialformer
