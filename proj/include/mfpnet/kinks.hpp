#pragma once

#include <cstdint>

namespace mfpnet::kinks {

// Fingerprint of every ReLU's active/inactive pattern during a forward pass.
// Two evaluations with equal fingerprints lie on the same linear piece of
// every ReLU, so a central difference between them crosses no kink.
struct Tracker {
  std::uint64_t hash = 0;
  std::uint64_t units = 0;
  bool enabled = false;
};

inline Tracker& tracker() {
  thread_local Tracker t;
  return t;
}

inline void mix(std::uint64_t word) {
  auto& t = tracker();
  std::uint64_t z = t.hash ^ (word + 0x9E3779B97F4A7C15ULL + (t.hash << 6) + (t.hash >> 2));
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  t.hash = z ^ (z >> 31);
}

template <class Positive>
inline void record(std::uint64_t n, Positive&& positive) {
  auto& t = tracker();
  if (!t.enabled) return;
  std::uint64_t word = 0;
  for (std::uint64_t i = 0; i < n; ++i) {
    word = (word << 1) | (positive(i) ? 1u : 0u);
    if ((i & 63) == 63) {
      mix(word);
      word = 0;
    }
  }
  mix(word ^ (n << 1));
  t.units += n;
}

class Scope {
 public:
  Scope() : saved_(tracker()) { tracker() = Tracker{0, 0, true}; }
  ~Scope() { tracker() = saved_; }
  Scope(const Scope&) = delete;
  Scope& operator=(const Scope&) = delete;

  std::uint64_t signature() const { return tracker().hash; }
  std::uint64_t units() const { return tracker().units; }

 private:
  Tracker saved_;
};

}  // namespace mfpnet::kinks
