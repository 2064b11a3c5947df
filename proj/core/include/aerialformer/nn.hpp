#pragma once

#include <random>
#include <string>
#include <vector>

#include "aerialformer/ops.hpp"
#include "aerialformer/tensor.hpp"

namespace aerialformer::nn {

enum class Mode { kTrain, kEval };

/// A named tensor owned by some layer. `trainable` entries are optimised;
/// the rest (BatchNorm running statistics) are only checkpointed.
struct NamedTensor {
  std::string path;
  Tensor tensor;
  bool trainable = true;
  bool decay = true;  ///< receives weight decay when trainable
};

using NamedTensors = std::vector<NamedTensor>;

/// Parameter initialisation source. Transformer weights draw from a normal
/// distribution with std 0.02 truncated at two standard deviations; the
/// convolutional stem and decoder use He initialisation over the fan-out.
/// Biases start at zero.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  Tensor trunc_normal(Shape shape, double std = 0.02);
  /// Normal with std sqrt(2 / fan_out), where fan_out = dim0 * kernel area.
  Tensor kaiming_normal(Shape shape);
  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

/// y = x W + b over the last axis; W is stored (in, out).
struct Linear {
  Linear() = default;
  Linear(Index in, Index out, bool with_bias, Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  Index in_features() const { return weight.dim(0); }
  Index out_features() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;
};

struct LayerNorm {
  LayerNorm() = default;
  explicit LayerNorm(Index dim, double eps = 1e-5);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;

  Tensor gamma;
  Tensor beta;
  double eps = 1e-5;
};

enum class ConvInit { kHe, kTruncNormal };

struct Conv2d {
  Conv2d() = default;
  Conv2d(Index in, Index out, Index kernel, ops::ConvGeometry geom, Initializer& init,
         bool with_bias = true, ConvInit scheme = ConvInit::kHe);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  Index in_channels() const { return weight.dim(1); }
  Index out_channels() const { return weight.dim(0); }
  Index kernel() const { return weight.dim(2); }

  Tensor weight;
  Tensor bias;
  ops::ConvGeometry geom;
};

struct ConvTranspose2d {
  ConvTranspose2d() = default;
  ConvTranspose2d(Index in, Index out, Index kernel, Index stride, Initializer& init);
  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  Index in_channels() const { return weight.dim(0); }
  Index out_channels() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;
  Index stride = 2;
  Index padding = 0;
};

/// Per-channel batch normalisation with running statistics.
///
/// Running statistics start unset; an eval-mode forward before any
/// train-mode forward (or checkpoint load) raises StateError. The first
/// train-mode batch initialises the statistics; later batches blend with
/// `momentum`. A train-mode forward writes the statistics through the
/// shared handles and must not run concurrently with other forwards.
struct BatchNorm2d {
  BatchNorm2d() = default;
  explicit BatchNorm2d(Index channels, double eps = 1e-5, double momentum = 0.1);
  Tensor forward(const Tensor& x, Mode mode) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
  bool has_statistics() const { return initialized.data()[0] != 0.0; }

  Tensor gamma;
  Tensor beta;
  Tensor running_mean;
  Tensor running_var;
  Tensor initialized;  ///< one-element flag, 1 once statistics exist
  double eps = 1e-5;
  double momentum = 0.1;
};

Index count_trainable(const NamedTensors& tensors);

}  // namespace aerialformer::nn
