#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <numeric>
#include <string>
#include <unordered_set>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

struct ParamEntry {
  std::string name;
  Var var;
  std::vector<std::size_t> dims;  // logical extent written to weight files
};

struct BufferEntry {
  std::string name;
  std::shared_ptr<RunningStats> stats;
  bool is_mean = true;

  std::vector<double>& values() const { return is_mean ? stats->mean : stats->var; }
};

/// Ordered registry of trainable tensors and non-trainable buffers. Parameters
/// are initialized from one seeded stream in registration order, so the same
/// config and seed always produce the same weights.
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : rng_(seed) {}

  /// Uniform(-bound, bound) initialization.
  Var uniform(const std::string& name, Shape shape, std::vector<std::size_t> dims, double bound) {
    Tensor t(shape);
    for (auto& v : t.data()) v = rng_.uniform(-bound, bound);
    return add(name, std::move(t), std::move(dims));
  }

  Var constant(const std::string& name, Shape shape, std::vector<std::size_t> dims, double value) {
    return add(name, Tensor(shape, value), std::move(dims));
  }

  std::shared_ptr<RunningStats> running_stats(const std::string& prefix, std::size_t channels) {
    auto stats = std::make_shared<RunningStats>(channels);
    add_buffer(prefix + ".running_mean", stats, true);
    add_buffer(prefix + ".running_var", stats, false);
    return stats;
  }

  const std::vector<ParamEntry>& params() const { return params_; }
  const std::vector<BufferEntry>& buffers() const { return buffers_; }

  std::vector<Var> vars() const {
    std::vector<Var> out;
    out.reserve(params_.size());
    for (const auto& p : params_) out.push_back(p.var);
    return out;
  }

  std::size_t total_scalars() const {
    std::size_t total = 0;
    for (const auto& p : params_) total += p.var.numel();
    return total;
  }

  void zero_grad() {
    for (auto& p : params_) p.var.zero_grad();
  }

 private:
  Var add(const std::string& name, Tensor t, std::vector<std::size_t> dims) {
    check_unique(name);
    const std::size_t count =
        std::accumulate(dims.begin(), dims.end(), std::size_t{1}, std::multiplies<>());
    if (count != t.numel()) {
      throw ShapeError("parameter '" + name + "': logical dims disagree with tensor extent");
    }
    Var v(std::move(t), true);
    params_.push_back({name, v, std::move(dims)});
    return v;
  }

  void add_buffer(const std::string& name, std::shared_ptr<RunningStats> stats, bool is_mean) {
    check_unique(name);
    buffers_.push_back({name, std::move(stats), is_mean});
  }

  void check_unique(const std::string& name) {
    if (!names_.insert(name).second) throw Error("duplicate registry entry '" + name + "'");
  }

  Rng rng_;
  std::vector<ParamEntry> params_;
  std::vector<BufferEntry> buffers_;
  std::unordered_set<std::string> names_;
};

/// Layer that owns a registry entry: everything before the last '.'.
inline std::string layer_of(const std::string& param_name) {
  const auto dot = param_name.rfind('.');
  return dot == std::string::npos ? param_name : param_name.substr(0, dot);
}

}  // namespace mfpnet
