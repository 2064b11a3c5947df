#include "aerialformer/flops.hpp"

namespace aerialformer {

namespace {
thread_local FlopCounter* g_counter = nullptr;
}

FlopCounter::FlopCounter() : parent_(g_counter) { g_counter = this; }

FlopCounter::~FlopCounter() { g_counter = parent_; }

void FlopCounter::charge(std::uint64_t n) {
  for (FlopCounter* c = g_counter; c != nullptr; c = c->parent_) c->count_ += n;
}

}  // namespace aerialformer
