#include "aerialformer/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace aerialformer {

struct Tensor::Impl {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool requires_grad = false;
};

namespace {
thread_local GradTape* g_active_tape = nullptr;
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0); }

Tensor Tensor::full(Shape shape, double value) {
  for (Index d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<Impl>();
  impl->data.assign(static_cast<std::size_t>(aerialformer::numel(shape)), value);
  impl->shape = std::move(shape);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, Buffer values) {
  if (aerialformer::numel(shape) != static_cast<Index>(values.size())) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(values.size()) + " values");
  }
  auto impl = std::make_shared<Impl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::from(Shape shape, std::span<const double> values) {
  return from(std::move(shape), Buffer(values.begin(), values.end()));
}

Tensor Tensor::from(Shape shape, std::initializer_list<double> values) {
  return from(std::move(shape), Buffer(values.begin(), values.end()));
}

Tensor Tensor::scalar(double value) { return from({}, Buffer{value}); }

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return impl_ ? impl_->shape : kEmpty;
}

Index Tensor::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

Index Tensor::numel() const { return impl_ ? static_cast<Index>(impl_->data.size()) : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) return {};
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) return {};
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw RankError("item() requires a single-element tensor, got shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<Index> idx) const {
  if (idx.size() != rank()) throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
  Index flat = 0;
  std::size_t i = 0;
  for (Index v : idx) {
    const Index d = impl_->shape[i++];
    if (v < 0 || v >= d) throw ShapeError("index out of range for shape " + shape_str(shape()));
    flat = flat * d + v;
  }
  return impl_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool value) {
  if (impl_) impl_->requires_grad = value;
  return *this;
}

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) return {};
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

std::span<double> Tensor::mutable_grad() const {
  if (!impl_) return {};
  if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) impl_->grad.clear();
}

Tensor Tensor::grad_tensor() const {
  auto g = grad();
  return from(shape(), Buffer(g.begin(), g.end()));
}

Tensor Tensor::clone() const {
  if (!impl_) return {};
  return from(impl_->shape, impl_->data);
}

GradTape::GradTape() : previous_(g_active_tape) { g_active_tape = this; }

GradTape::~GradTape() { g_active_tape = previous_; }

GradTape* GradTape::active() { return g_active_tape; }

void GradTape::record(std::string_view name, const std::vector<Tensor>& /*inputs*/,
                      const Tensor& output, BackwardFn fn) {
  entries_.push_back({output, std::move(fn)});
  names_.emplace_back(name);
}

std::vector<std::string> GradTape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw RankError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  std::vector<std::string> visited;
  if (!loss.requires_grad()) return visited;
  Tensor seed = loss;
  seed.mutable_grad()[0] += 1.0;
  for (std::size_t i = entries_.size(); i-- > 0;) {
    Entry& e = entries_[i];
    if (!e.output.has_grad()) continue;
    e.fn(e.output.grad());
    visited.push_back(names_[i]);
  }
  entries_.clear();
  names_.clear();
  return visited;
}

NoGradGuard::NoGradGuard() : saved_(g_active_tape) { g_active_tape = nullptr; }

NoGradGuard::~NoGradGuard() { g_active_tape = saved_; }

bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!g_active_tape) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.requires_grad(); });
}

Tensor make_result(std::string_view name, Shape shape, Buffer values,
                   const std::vector<Tensor>& inputs, BackwardFn fn) {
  Tensor out = Tensor::from(std::move(shape), std::move(values));
  if (needs_grad(inputs)) {
    out.set_requires_grad(true);
    g_active_tape->record(name, inputs, out, std::move(fn));
  }
  return out;
}

void attach(std::string_view name, const std::vector<Tensor>& inputs, Tensor& out, BackwardFn fn) {
  if (!needs_grad(inputs)) return;
  out.set_requires_grad(true);
  g_active_tape->record(name, inputs, out, std::move(fn));
}

void accumulate_grad(const Tensor& t, std::span<const double> delta) {
  if (!t.requires_grad()) return;
  auto g = t.mutable_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace aerialformer
