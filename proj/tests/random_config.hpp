#pragma once

#include "mfpnet/network.hpp"

namespace fixture {

inline mfpnet::ModelConfig random_config(std::uint64_t seed) {
  using namespace mfpnet;
  Rng rng(seed);
  auto pick = [&](std::initializer_list<std::size_t> xs) {
    return *(xs.begin() + rng.integer(0, static_cast<std::int64_t>(xs.size() - 1)));
  };
  std::array<std::vector<std::size_t>, 3> dil;
  for (auto& d : dil) {
    const auto n = static_cast<std::size_t>(rng.integer(1, 3));
    for (std::size_t i = 0; i < n; ++i) d.push_back(pick({1, 2, 4, 8}));
  }
  ModelConfig c = make_config(static_cast<std::size_t>(rng.integer(1, 21)), pick({4, 8, 12, 16}),
                              {pick({8, 16}), pick({8, 16, 24}), pick({16, 32})}, dil, {32, 32});
  c.sgcn_enabled = rng.uniform() < 0.7;
  c.gcn_layers = static_cast<std::size_t>(rng.integer(1, 2));
  c.head.type = static_cast<HeadType>(rng.integer(0, 3));
  c.head.rates = {1, 2};
  c.head.reduction = pick({2, 4});
  c.se_reduction = pick({2, 4});
  return c;
}

}  // namespace fixture
