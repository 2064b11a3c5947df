#include "aerialformer/nn.hpp"

#include <cmath>

namespace aerialformer::nn {

Tensor Initializer::trunc_normal(Shape shape, double std) {
  std::normal_distribution<double> dist(0.0, std);
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) {
    double s;
    do {
      s = dist(rng_);
    } while (std::abs(s) > 2.0 * std);
    v = s;
  }
  return t;
}

Tensor Initializer::kaiming_normal(Shape shape) {
  Index fan_out = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 1) fan_out *= shape[i];
  }
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_out)));
  Tensor t = Tensor::zeros(std::move(shape));
  for (double& v : t.mutable_data()) v = dist(rng_);
  return t;
}

Linear::Linear(Index in, Index out, bool with_bias, Initializer& init)
    : weight(init.trunc_normal({in, out})) {
  weight.set_requires_grad(true);
  if (with_bias) bias = Tensor::zeros({out}).set_requires_grad(true);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.dim(-1) != in_features()) {
    throw ShapeError("linear layer expects last dim " + std::to_string(in_features()) +
                     ", got " + shape_str(x.shape()));
  }
  // Collapse leading axes so the product is a single GEMM.
  Shape lead(x.shape().begin(), x.shape().end() - 1);
  Tensor flat = ops::reshape(x, {numel(lead), in_features()});
  Tensor y = ops::matmul(flat, weight);
  if (bias.defined()) y = ops::add(y, bias);
  lead.push_back(out_features());
  return ops::reshape(y, lead);
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true, false});
}

LayerNorm::LayerNorm(Index dim, double eps_)
    : gamma(Tensor::full({dim}, 1.0).set_requires_grad(true)),
      beta(Tensor::zeros({dim}).set_requires_grad(true)),
      eps(eps_) {}

Tensor LayerNorm::forward(const Tensor& x) const { return ops::layer_norm(x, gamma, beta, eps); }

void LayerNorm::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", gamma, true, false});
  out.push_back({prefix + ".bias", beta, true, false});
}

Conv2d::Conv2d(Index in, Index out, Index kernel, ops::ConvGeometry g, Initializer& init,
               bool with_bias, ConvInit scheme)
    : weight(scheme == ConvInit::kHe ? init.kaiming_normal({out, in, kernel, kernel})
                                     : init.trunc_normal({out, in, kernel, kernel})),
      geom(g) {
  weight.set_requires_grad(true);
  if (with_bias) bias = Tensor::zeros({out}).set_requires_grad(true);
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, geom); }

void Conv2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true, true});
  if (bias.defined()) out.push_back({prefix + ".bias", bias, true, false});
}

ConvTranspose2d::ConvTranspose2d(Index in, Index out, Index kernel, Index stride_,
                                 Initializer& init)
    : weight(init.kaiming_normal({in, out, kernel, kernel})),
      bias(Tensor::zeros({out})),
      stride(stride_) {
  weight.set_requires_grad(true);
  bias.set_requires_grad(true);
}

Tensor ConvTranspose2d::forward(const Tensor& x) const {
  return ops::conv_transpose2d(x, weight, bias, stride, padding);
}

void ConvTranspose2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", weight, true, true});
  out.push_back({prefix + ".bias", bias, true, false});
}

BatchNorm2d::BatchNorm2d(Index channels, double eps_, double momentum_)
    : gamma(Tensor::full({channels}, 1.0).set_requires_grad(true)),
      beta(Tensor::zeros({channels}).set_requires_grad(true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1.0)),
      initialized(Tensor::zeros({1})),
      eps(eps_),
      momentum(momentum_) {}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) const {
  if (mode == Mode::kEval) {
    if (!has_statistics()) {
      throw StateError("batch norm with " + std::to_string(gamma.numel()) +
                       " channels used in inference mode before any statistics were recorded");
    }
    return ops::batch_norm_eval(x, gamma, beta, running_mean.data(), running_var.data(), eps);
  }
  ops::ChannelStats stats;
  Tensor y = ops::batch_norm_train(x, gamma, beta, eps, &stats);
  // Running variance uses the unbiased estimate.
  const double m = static_cast<double>(x.dim(0) * x.dim(2) * x.dim(3));
  const double unbias = m / (m - 1.0);
  Tensor rm = running_mean;
  Tensor rv = running_var;
  Tensor flag = initialized;
  auto mean = rm.mutable_data();
  auto var = rv.mutable_data();
  const bool first = !has_statistics();
  for (std::size_t c = 0; c < mean.size(); ++c) {
    const double v = stats.var[c] * unbias;
    if (first) {
      mean[c] = stats.mean[c];
      var[c] = v;
    } else {
      mean[c] = (1.0 - momentum) * mean[c] + momentum * stats.mean[c];
      var[c] = (1.0 - momentum) * var[c] + momentum * v;
    }
  }
  flag.mutable_data()[0] = 1.0;
  return y;
}

void BatchNorm2d::collect(const std::string& prefix, NamedTensors& out) const {
  out.push_back({prefix + ".weight", gamma, true, false});
  out.push_back({prefix + ".bias", beta, true, false});
  out.push_back({prefix + ".running_mean", running_mean, false, false});
  out.push_back({prefix + ".running_var", running_var, false, false});
  out.push_back({prefix + ".initialized", initialized, false, false});
}

Index count_trainable(const NamedTensors& tensors) {
  Index n = 0;
  for (const auto& t : tensors) {
    if (t.trainable) n += t.tensor.numel();
  }
  return n;
}

}  // namespace aerialformer::nn
