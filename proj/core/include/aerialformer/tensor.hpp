#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "aerialformer/errors.hpp"

namespace aerialformer {

using Index = std::int64_t;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);

/// Allocates on 64-byte boundaries. Vectorised kernels split work by buffer
/// alignment, so a fixed alignment keeps results bitwise reproducible.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

/// Contiguous storage for tensor values and gradients.
using Buffer = std::vector<double, AlignedAllocator<double>>;
std::string shape_str(const Shape& shape);

/// Dense row-major tensor of 64-bit floats.
///
/// A Tensor is a shared handle: copies refer to the same storage, so a
/// parameter held by a layer and the same parameter held by an optimizer
/// observe each other's updates. Forward operators never modify their
/// inputs; only gradient accumulation and explicit `mutable_data()` writes
/// (initialisation, optimiser steps) touch existing storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from(Shape shape, Buffer values);
  static Tensor from(Shape shape, std::span<const double> values);
  static Tensor from(Shape shape, std::initializer_list<double> values);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  /// Size of dimension `axis`; negative axes count from the back.
  Index dim(int axis) const;
  Index numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double operator[](Index flat) const { return data()[static_cast<std::size_t>(flat)]; }
  double at(std::initializer_list<Index> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool value);

  bool has_grad() const;
  /// Gradient storage, allocated lazily at zero on first access.
  std::span<const double> grad() const;
  /// Gradients live on the shared storage, so a const handle may accumulate.
  std::span<double> mutable_grad() const;
  void zero_grad();
  /// Copy of the gradient as a standalone tensor.
  Tensor grad_tensor() const;

  /// Deep copy without gradient or graph history.
  Tensor clone() const;
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<Impl> impl_;
};

/// Called during backward with the gradient flowing into an op's output.
using BackwardFn = std::function<void(std::span<const double> grad_out)>;

/// Ordered record of differentiable ops executed while the tape is active.
///
/// Constructing a tape makes it the active recorder for the calling thread
/// (tapes nest; destruction restores the previous one). Ops executed with no
/// active tape are not recorded and their results do not require grad.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* active();

  void record(std::string_view name, const std::vector<Tensor>& inputs, const Tensor& output,
              BackwardFn fn);
  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& names() const { return names_; }

  /// Reverse-mode sweep from a single-element `loss`. Gradients accumulate
  /// additively into every reachable tensor that requires grad. The tape is
  /// consumed. Returns the names of visited ops in visitation order.
  std::vector<std::string> backward(const Tensor& loss);

 private:
  struct Entry {
    Tensor output;
    BackwardFn fn;
  };
  std::vector<Entry> entries_;
  std::vector<std::string> names_;
  GradTape* previous_ = nullptr;
};

/// Suspends recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradTape* saved_;
};

/// Builds an op result. If a tape is active and any input requires grad the
/// result requires grad and `fn` is recorded; otherwise `fn` is dropped.
Tensor make_result(std::string_view name, Shape shape, Buffer values,
                   const std::vector<Tensor>& inputs, BackwardFn fn);

/// Records `fn` for an already-built `out` (for rules that read the output).
/// Callers check `needs_grad(inputs)` first.
void attach(std::string_view name, const std::vector<Tensor>& inputs, Tensor& out, BackwardFn fn);

/// True when an op over `inputs` would be recorded.
bool needs_grad(const std::vector<Tensor>& inputs);

/// Adds `delta` into `t`'s gradient when `t` requires grad.
void accumulate_grad(const Tensor& t, std::span<const double> delta);

}  // namespace aerialformer
