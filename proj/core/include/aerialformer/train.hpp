#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "aerialformer/dataset.hpp"
#include "aerialformer/model.hpp"
#include "aerialformer/nn.hpp"

namespace aerialformer::train {

struct TrainConfig {
  double lr = 6e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index batch_size = 2;
  Index iterations = 1000;
  std::uint8_t ignore_index = kIgnoreLabel;
  bool hflip = true;
  double jitter = 0.25;  ///< brightness and contrast factors drawn from [1 - j, 1 + j]
  std::uint64_t seed = 0;
  Index checkpoint_every = 0;  ///< 0 keeps only the final checkpoint
  /// Early stop, checked every `eval_every` iterations: eval-mode pixel
  /// accuracy over the whole set reaches `target_accuracy` and the batch loss
  /// is below `target_loss`. A target of 0 is not required.
  double target_accuracy = 0.0;
  double target_loss = 0.0;
  Index eval_every = 50;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& cfg);
void from_json(const nlohmann::json& j, TrainConfig& cfg);

/// A run file: {"model": {...}, "train": {...}}. Either key may be absent.
struct RunConfig {
  ModelConfig model;
  TrainConfig train;
};
RunConfig load_run_config(const std::filesystem::path& path);

/// Class ids for a (N, H, W) batch, row-major.
struct LabelBatch {
  Index n = 0;
  Index height = 0;
  Index width = 0;
  std::vector<std::uint8_t> ids;
};
LabelBatch stack_masks(const std::vector<const LabelMap*>& masks);

/// Mean over non-ignored pixels of -log softmax(logits)[target]. All pixels
/// ignored gives 0 with zero gradient. Ids outside [0, L) that are not the
/// ignore label raise DataError naming (n, y, x).
Tensor cross_entropy(const Tensor& logits, const LabelBatch& target,
                     std::uint8_t ignore_index = kIgnoreLabel);

/// Fraction of non-ignored pixels whose argmax (lowest id on ties) matches.
double pixel_accuracy(const Tensor& logits, const LabelBatch& target,
                      std::uint8_t ignore_index = kIgnoreLabel);

struct AdamConfig {
  double lr = 6e-5;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam with decoupled weight decay: each step first shrinks
/// decaying parameters by (1 - lr * weight_decay), then applies the moment
/// update. Entries with `decay == false` are never shrunk.
class Adam {
 public:
  Adam(nn::NamedTensors params, AdamConfig cfg);

  /// Throws TrainingError naming the first parameter with no gradient.
  void step();
  void zero_grad();

  Index steps() const { return step_; }
  const AdamConfig& config() const { return cfg_; }
  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  nn::NamedTensors params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
  Index step_ = 0;
};

/// Mirrors image and mask left to right.
SegSample hflip(const SegSample& sample);

/// Joint horizontal flip with probability 0.5 when enabled, then brightness
/// and contrast jitter on the image only. The mask's ids are never changed.
SegSample augment(const SegSample& sample, const TrainConfig& cfg, std::mt19937_64& rng);

struct TraceRecord {
  Index iteration = 0;
  double loss = 0.0;
  double pixel_accuracy = 0.0;
};

struct TrainResult {
  std::vector<TraceRecord> trace;
  Index iterations_run = 0;
  double final_accuracy = -1.0;  ///< last eval-mode accuracy, -1 if never measured
};

struct TrainOutputs {
  std::filesystem::path dir;      ///< checkpoints land here when non-empty
  std::ostream* trace = nullptr;  ///< one JSON object per iteration
};

/// Eval-mode pixel accuracy of `model` over `data`.
double evaluate_accuracy(const AerialFormer& model, const std::vector<SegSample>& data,
                         std::uint8_t ignore_index = kIgnoreLabel);

/// Iterates sample -> augment -> forward -> loss -> backward -> Adam step.
/// Batches walk a seeded shuffle of the data. A non-finite loss raises
/// TrainingError carrying the iteration and the configuration.
TrainResult train_loop(AerialFormer& model, const std::vector<SegSample>& data, const TrainConfig& cfg,
                       const TrainOutputs& outputs = {});

}  // namespace aerialformer::train
