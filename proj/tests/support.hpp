#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "aerialformer/nn.hpp"
#include "aerialformer/ops.hpp"
#include "aerialformer/tensor.hpp"

namespace aerialformer::testing {

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = u(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

inline Tensor param(Tensor t) {
  t.set_requires_grad(true);
  return t;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  double m = 0.0;
  for (Index i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

/// Moves trainable parameters to a generic point: weights, biases and
/// position tables U(-0.5, 0.5), norm scales 1 + U(-0.5, 0.5). At the default
/// initialisation deep features are near zero and normalisation layers sit at
/// their eps-dominated, strongly curved regime.
inline void randomize_parameters(const nn::NamedTensors& params, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (const auto& p : params) {
    Tensor t = p.tensor;
    const bool norm_scale = t.shape().size() == 1 && p.path.ends_with(".weight");
    for (double& v : t.mutable_data()) v = norm_scale ? 1.0 + u(rng) : u(rng);
  }
}

/// Reduces any tensor to a scalar with fixed random weights so every output
/// element contributes a distinct sensitivity.
inline Tensor probe_loss(const Tensor& out, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return ops::sum(ops::mul(out, random_tensor(out.shape(), rng)));
}

struct GradCheck {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::string worst;  ///< "<input>[<flat index>]: analytic vs numeric"
};

/// Central finite differences of `f` against reverse mode for every element
/// of every tensor in `inputs`. Relative error is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                                 double h = 1e-5, double floor = 1e-7,
                                 const std::vector<std::string>& names = {}) {
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  {
    GradTape tape;
    const Tensor loss = f();
    tape.backward(loss);
  }
  GradCheck out;
  NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Tensor& t = inputs[k];
    const std::vector<double> analytic(t.grad().begin(), t.grad().end());
    auto data = t.mutable_data();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double saved = data[i];
      data[i] = saved + h;
      const double up = f().item();
      data[i] = saved - h;
      const double down = f().item();
      data[i] = saved;
      const double numeric = (up - down) / (2.0 * h);
      const double a = analytic[i];
      const double rel = std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), floor});
      ++out.checked;
      if (rel > out.max_rel_err || out.worst.empty()) {
        out.max_rel_err = std::max(out.max_rel_err, rel);
        if (rel >= out.max_rel_err) {
          out.worst = (k < names.size() ? names[k] : "input" + std::to_string(k)) + "[" + std::to_string(i) +
                      "]: " + std::to_string(a) + " vs " + std::to_string(numeric);
        }
      }
    }
  }
  return out;
}

}  // namespace aerialformer::testing
