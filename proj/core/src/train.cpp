#include "aerialformer/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>

#include "aerialformer/checkpoint.hpp"

namespace aerialformer::train {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lr >= 0.0)) throw ConfigError("lr must be >= 0");
  if (!(weight_decay >= 0.0)) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(eps > 0.0)) throw ConfigError("eps must be > 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (iterations < 0) throw ConfigError("iterations must be >= 0");
  if (!(jitter >= 0.0 && jitter < 1.0)) throw ConfigError("jitter must lie in [0, 1)");
  if (!(target_accuracy >= 0.0) || !(target_loss >= 0.0)) throw ConfigError("early-stop targets must be >= 0");
  if (checkpoint_every < 0 || eval_every < 1) throw ConfigError("checkpoint_every >= 0 and eval_every >= 1 required");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"lr", c.lr},
           {"weight_decay", c.weight_decay},
           {"betas", {c.beta1, c.beta2}},
           {"eps", c.eps},
           {"batch_size", c.batch_size},
           {"iterations", c.iterations},
           {"ignore_index", c.ignore_index},
           {"hflip", c.hflip},
           {"jitter", c.jitter},
           {"seed", c.seed},
           {"checkpoint_every", c.checkpoint_every},
           {"target_accuracy", c.target_accuracy},
           {"target_loss", c.target_loss},
           {"eval_every", c.eval_every}};
}

void from_json(const json& j, TrainConfig& c) {
  c.lr = j.value("lr", c.lr);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  if (j.contains("betas")) {
    const auto b = j.at("betas").get<std::array<double, 2>>();
    c.beta1 = b[0];
    c.beta2 = b[1];
  }
  c.eps = j.value("eps", c.eps);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.iterations = j.value("iterations", c.iterations);
  c.ignore_index = j.value("ignore_index", c.ignore_index);
  c.hflip = j.value("hflip", c.hflip);
  c.jitter = j.value("jitter", c.jitter);
  c.seed = j.value("seed", c.seed);
  c.checkpoint_every = j.value("checkpoint_every", c.checkpoint_every);
  c.target_accuracy = j.value("target_accuracy", c.target_accuracy);
  c.target_loss = j.value("target_loss", c.target_loss);
  c.eval_every = j.value("eval_every", c.eval_every);
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open config: " + path.string());
  RunConfig rc;
  try {
    const json j = json::parse(is);
    if (j.contains("model")) {
      rc.model = j.at("model").get<ModelConfig>();
    } else if (!j.contains("train")) {
      rc.model = j.get<ModelConfig>();
    }
    if (j.contains("train")) rc.train = j.at("train").get<TrainConfig>();
  } catch (const json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  }
  rc.model.validate();
  rc.train.validate();
  return rc;
}

LabelBatch stack_masks(const std::vector<const LabelMap*>& masks) {
  if (masks.empty()) throw ShapeError("no masks to stack");
  LabelBatch b{static_cast<Index>(masks.size()), masks[0]->height, masks[0]->width, {}};
  b.ids.reserve(static_cast<std::size_t>(b.n * b.height * b.width));
  for (const LabelMap* m : masks) {
    if (m->height != b.height || m->width != b.width) throw ShapeError("masks in a batch must share a size");
    b.ids.insert(b.ids.end(), m->ids.begin(), m->ids.end());
  }
  return b;
}

namespace {

void check_target(const Tensor& logits, const LabelBatch& t, std::uint8_t ignore) {
  if (logits.rank() != 4 || logits.dim(0) != t.n || logits.dim(2) != t.height || logits.dim(3) != t.width ||
      static_cast<Index>(t.ids.size()) != t.n * t.height * t.width) {
    throw ShapeError("logits " + shape_str(logits.shape()) + " do not match target (" + std::to_string(t.n) +
                     ", " + std::to_string(t.height) + ", " + std::to_string(t.width) + ")");
  }
  const Index classes = logits.dim(1);
  const Index plane = t.height * t.width;
  for (std::size_t i = 0; i < t.ids.size(); ++i) {
    const auto v = t.ids[i];
    if (v != ignore && v >= classes) {
      const auto flat = static_cast<Index>(i);
      throw DataError("target class " + std::to_string(v) + " outside [0, " + std::to_string(classes) +
                      ") at (n=" + std::to_string(flat / plane) + ", y=" + std::to_string(flat % plane / t.width) +
                      ", x=" + std::to_string(flat % t.width) + ")");
    }
  }
}

}  // namespace

Tensor cross_entropy(const Tensor& logits, const LabelBatch& target, std::uint8_t ignore) {
  check_target(logits, target, ignore);
  const Index n = target.n, classes = logits.dim(1), plane = target.height * target.width;
  const auto x = logits.data();
  // Softmax probabilities are kept for the backward rule.
  Buffer probs(x.size());
  double total = 0.0;
  Index counted = 0;
  for (Index b = 0; b < n; ++b) {
    for (Index p = 0; p < plane; ++p) {
      const Index base = b * classes * plane + p;
      double mx = -std::numeric_limits<double>::infinity();
      for (Index c = 0; c < classes; ++c) mx = std::max(mx, x[static_cast<std::size_t>(base + c * plane)]);
      double z = 0.0;
      for (Index c = 0; c < classes; ++c) {
        const double e = std::exp(x[static_cast<std::size_t>(base + c * plane)] - mx);
        probs[static_cast<std::size_t>(base + c * plane)] = e;
        z += e;
      }
      for (Index c = 0; c < classes; ++c) probs[static_cast<std::size_t>(base + c * plane)] /= z;
      const auto label = target.ids[static_cast<std::size_t>(b * plane + p)];
      if (label == ignore) continue;
      total += -(x[static_cast<std::size_t>(base + label * plane)] - mx - std::log(z));
      ++counted;
    }
  }
  const double loss = counted > 0 ? total / static_cast<double>(counted) : 0.0;
  Tensor lg = logits;
  return make_result("cross_entropy", {}, {loss}, {logits},
                     [lg, probs = std::move(probs), ids = target.ids, n, classes, plane, counted,
                      ignore](std::span<const double> g) mutable {
                       if (counted == 0) return;
                       const double s = g[0] / static_cast<double>(counted);
                       Buffer d(probs.size(), 0.0);
                       for (Index b = 0; b < n; ++b) {
                         for (Index p = 0; p < plane; ++p) {
                           const auto label = ids[static_cast<std::size_t>(b * plane + p)];
                           if (label == ignore) continue;
                           const Index base = b * classes * plane + p;
                           for (Index c = 0; c < classes; ++c) {
                             const auto k = static_cast<std::size_t>(base + c * plane);
                             d[k] = s * (probs[k] - (c == label ? 1.0 : 0.0));
                           }
                         }
                       }
                       accumulate_grad(lg, d);
                     });
}

double pixel_accuracy(const Tensor& logits, const LabelBatch& target, std::uint8_t ignore) {
  check_target(logits, target, ignore);
  const Index classes = logits.dim(1), plane = target.height * target.width;
  const auto x = logits.data();
  Index hit = 0, counted = 0;
  for (Index b = 0; b < target.n; ++b) {
    for (Index p = 0; p < plane; ++p) {
      const auto label = target.ids[static_cast<std::size_t>(b * plane + p)];
      if (label == ignore) continue;
      const Index base = b * classes * plane + p;
      Index best = 0;
      for (Index c = 1; c < classes; ++c) {
        if (x[static_cast<std::size_t>(base + c * plane)] > x[static_cast<std::size_t>(base + best * plane)]) best = c;
      }
      hit += best == label;
      ++counted;
    }
  }
  return counted > 0 ? static_cast<double>(hit) / static_cast<double>(counted) : 1.0;
}

Adam::Adam(nn::NamedTensors params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.tensor.numel()), 0.0);
  }
}

void Adam::step() {
  for (const auto& p : params_) {
    if (!p.tensor.has_grad()) throw TrainingError("parameter '" + p.path + "' has no gradient");
  }
  ++step_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Tensor& t = params_[i].tensor;
    const auto g = t.grad();
    auto w = t.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    const double shrink = params_[i].decay ? 1.0 - cfg_.lr * cfg_.weight_decay : 1.0;
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = cfg_.beta1 * m[k] + (1.0 - cfg_.beta1) * g[k];
      v[k] = cfg_.beta2 * v[k] + (1.0 - cfg_.beta2) * g[k] * g[k];
      const double mhat = m[k] / c1;
      const double vhat = v[k] / c2;
      w[k] = w[k] * shrink - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

SegSample hflip(const SegSample& s) {
  SegSample out = s;
  const Index h = s.image.height, w = s.image.width;
  for (Index y = 0; y < h; ++y) {
    for (Index x = 0; x < w; ++x) {
      const Index sx = w - 1 - x;
      std::copy_n(s.image.at(y, sx), 3, out.image.at(y, x));
      out.mask.ids[static_cast<std::size_t>(y * w + x)] = s.mask.ids[static_cast<std::size_t>(y * w + sx)];
    }
  }
  return out;
}

SegSample augment(const SegSample& sample, const TrainConfig& cfg, std::mt19937_64& rng) {
  // Draw every random decision up front so the stream does not depend on flags.
  std::bernoulli_distribution coin(0.5);
  std::uniform_real_distribution<double> factor(1.0 - cfg.jitter, 1.0 + cfg.jitter);
  const bool flip = coin(rng);
  const double brightness = factor(rng);
  const double contrast = factor(rng);

  SegSample out = cfg.hflip && flip ? hflip(sample) : sample;
  if (cfg.jitter > 0.0) {
    auto& px = out.image.pixels;
    const double mean = px.empty() ? 0.0 : std::accumulate(px.begin(), px.end(), 0.0) / static_cast<double>(px.size());
    for (auto& v : px) {
      const double y = ((v - mean) * contrast + mean) * brightness;
      v = static_cast<std::uint8_t>(std::clamp(std::lround(y), 0L, 255L));
    }
  }
  return out;
}

double evaluate_accuracy(const AerialFormer& model, const std::vector<SegSample>& data, std::uint8_t ignore) {
  Index hit = 0, counted = 0;
  for (const auto& s : data) {
    const Tensor logits = model.predict(image_to_tensor(s.image));
    const LabelBatch t = stack_masks({&s.mask});
    Index valid = 0;
    for (auto v : t.ids) valid += v != ignore;
    const double acc = pixel_accuracy(logits, t, ignore);
    hit += std::llround(acc * static_cast<double>(valid));
    counted += valid;
  }
  return counted > 0 ? static_cast<double>(hit) / static_cast<double>(counted) : 1.0;
}

TrainResult train_loop(AerialFormer& model, const std::vector<SegSample>& data, const TrainConfig& cfg,
                       const TrainOutputs& outputs) {
  cfg.validate();
  if (data.empty()) throw DataError("training set is empty");
  for (const auto& s : data) s.validate(model.config().num_classes);

  Adam adam(model.parameters(), {cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps});
  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0;

  if (!outputs.dir.empty()) std::filesystem::create_directories(outputs.dir);
  auto checkpoint = [&](const std::string& name) {
    if (!outputs.dir.empty()) save_checkpoint(outputs.dir / name, model.named_tensors());
  };

  TrainResult result;
  for (Index it = 1; it <= cfg.iterations; ++it) {
    std::vector<SegSample> batch;
    for (Index b = 0; b < cfg.batch_size; ++b) {
      if (cursor == order.size()) {
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(augment(data[order[cursor++]], cfg, rng));
    }
    std::vector<const RgbImage*> images;
    std::vector<const LabelMap*> masks;
    for (const auto& s : batch) {
      images.push_back(&s.image);
      masks.push_back(&s.mask);
    }
    const Tensor input = images_to_tensor(images);
    const LabelBatch target = stack_masks(masks);

    adam.zero_grad();
    double loss_value = 0.0, acc = 0.0;
    {
      GradTape tape;
      const Tensor logits = model.forward(input, nn::Mode::kTrain);
      const Tensor loss = cross_entropy(logits, target, cfg.ignore_index);
      loss_value = loss.item();
      if (!std::isfinite(loss_value)) {
        throw TrainingError("non-finite loss at iteration " + std::to_string(it) + "; model " +
                            json(model.config()).dump() + "; train " + json(cfg).dump());
      }
      acc = pixel_accuracy(logits, target, cfg.ignore_index);
      tape.backward(loss);
    }
    adam.step();

    result.trace.push_back({it, loss_value, acc});
    result.iterations_run = it;
    if (outputs.trace) {
      *outputs.trace << json{{"iteration", it}, {"loss", loss_value}, {"pixel_accuracy", acc}}.dump() << '\n';
    }
    if (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
      checkpoint("checkpoint_" + std::to_string(it) + ".afckpt");
    }
    if ((cfg.target_accuracy > 0.0 || cfg.target_loss > 0.0) && it % cfg.eval_every == 0) {
      bool done = cfg.target_loss <= 0.0 || loss_value < cfg.target_loss;
      if (cfg.target_accuracy > 0.0) {
        result.final_accuracy = evaluate_accuracy(model, data, cfg.ignore_index);
        done = done && result.final_accuracy >= cfg.target_accuracy;
      }
      if (done) break;
    }
  }
  checkpoint("model.afckpt");
  return result;
}

}  // namespace aerialformer::train
