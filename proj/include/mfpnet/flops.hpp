#pragma once

#include <cstdint>

namespace mfpnet::flops {

// Runtime tally of floating-point work performed by the kernels, using the same
// convention as the analytic accounting: 1 multiply-accumulate = 2 FLOPs,
// batch-norm and bilinear resize 2 per output element, ReLU/add/scale 1 per
// element, sigmoid/softmax 4 per element, pooling 1 per input element read.
// Only forward kernels report; backward passes are not counted.
struct Counter {
  std::uint64_t total = 0;
  bool enabled = false;
};

inline Counter& counter() {
  thread_local Counter c;
  return c;
}

inline void add(std::uint64_t n) {
  auto& c = counter();
  if (c.enabled) c.total += n;
}

// Enables counting for its lifetime and restores the previous state after.
class Scope {
 public:
  Scope() : saved_(counter()) {
    counter().enabled = true;
    counter().total = 0;
  }
  ~Scope() { counter() = saved_; }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  std::uint64_t total() const { return counter().total; }

 private:
  Counter saved_;
};

}  // namespace mfpnet::flops
