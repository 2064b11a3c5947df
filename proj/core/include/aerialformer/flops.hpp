#pragma once

#include <cstdint>

namespace aerialformer {

/// Counts floating-point operations issued by forward operators on the
/// current thread while in scope. Scopes nest; an inner scope's work is also
/// charged to enclosing scopes.
///
/// Charging convention: a multiply-add counts as 2, every other arithmetic
/// op or transcendental evaluation counts as 1 per element.
class FlopCounter {
 public:
  FlopCounter();
  ~FlopCounter();
  FlopCounter(const FlopCounter&) = delete;
  FlopCounter& operator=(const FlopCounter&) = delete;

  std::uint64_t count() const { return count_; }

  /// Charges `n` operations to every active counter on this thread.
  static void charge(std::uint64_t n);

 private:
  std::uint64_t count_ = 0;
  FlopCounter* parent_ = nullptr;
};

}  // namespace aerialformer
