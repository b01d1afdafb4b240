#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "mfpnet/autograd.hpp"
#include "mfpnet/error.hpp"
#include "mfpnet/kinks.hpp"
#include "mfpnet/tensor.hpp"

namespace mfpnet {

struct GradCheckOptions {
  double eps = 1e-5;
  std::uint64_t seed = 0;
  // 0 checks every element; otherwise at most this many per leaf, evenly strided
  // from a seeded offset.
  std::size_t max_checks_per_input = 0;
  // Drop probes whose +eps or -eps evaluation flips any ReLU on/off.
  bool skip_kinks = true;
};

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  std::size_t checked = 0;
  std::size_t skipped = 0;  // probes that crossed a ReLU kink
};

/// Maps an op output to the scalar that is differentiated.
using Reduction = std::function<Var(const Var&)>;

inline double relative_error(double a, double b) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-8});
}

namespace detail {

inline std::vector<std::size_t> check_indices(std::size_t numel, std::size_t limit,
                                              std::uint64_t seed) {
  std::vector<std::size_t> idx;
  if (limit == 0 || numel <= limit) {
    idx.resize(numel);
    for (std::size_t i = 0; i < numel; ++i) idx[i] = i;
    return idx;
  }
  Rng rng(seed);
  const double stride = static_cast<double>(numel) / static_cast<double>(limit);
  const double start = rng.uniform() * stride;
  for (std::size_t k = 0; k < limit; ++k) {
    idx.push_back(std::min(numel - 1, static_cast<std::size_t>(start + stride * static_cast<double>(k))));
  }
  return idx;
}

inline double scalar_of(const Var& v) {
  if (v.numel() != 1) throw ShapeError("grad_check: reduction must produce a scalar");
  return v.value()[0];
}

}  // namespace detail

/// Compares reverse-mode gradients of reduce(fn()) with respect to `leaves`
/// against central differences (f(x+eps) - f(x-eps)) / (2 eps). Leaves are
/// perturbed in place and restored.
///
/// With no reduction given, the output is contracted against fixed random
/// weights so every output element contributes.
inline GradCheckResult grad_check_leaves(const std::function<Var()>& fn, std::vector<Var> leaves,
                                         const GradCheckOptions& opts = {},
                                         Reduction reduce = {}) {
  if (!(opts.eps >= 1e-6 && opts.eps <= 1e-3)) {
    throw NumericError("grad_check: eps must lie in [1e-6, 1e-3], got " + std::to_string(opts.eps));
  }
  for (std::size_t i = 0; i < leaves.size(); ++i) {
    if (!leaves[i].value().all_finite()) {
      throw NumericError("grad_check: input " + std::to_string(i) + " contains non-finite values");
    }
    leaves[i].node()->requires_grad = true;
    leaves[i].zero_grad();
  }

  std::uint64_t base_signature = 0;
  Var out;
  {
    kinks::Scope k;
    out = fn();
    base_signature = k.signature();
  }
  if (!reduce) {
    Tensor weights = random_tensor(out.shape(), mix_seed(opts.seed, 0xC0FFEE), -1.0, 1.0);
    reduce = [weights](const Var& y) { return weighted_sum(y, weights); };
  }
  Var loss = reduce(out);
  if (!std::isfinite(detail::scalar_of(loss))) {
    throw NumericError("grad_check: non-finite value at the unperturbed inputs");
  }
  backward(loss);

  std::vector<std::vector<double>> analytic;
  analytic.reserve(leaves.size());
  for (auto& leaf : leaves) {
    if (leaf.has_grad()) {
      analytic.emplace_back(leaf.grad().begin(), leaf.grad().end());
    } else {
      analytic.emplace_back(leaf.numel(), 0.0);
    }
  }
  out = Var();
  loss = Var();

  GradCheckResult result;
  NoGradGuard no_grad;
  for (std::size_t li = 0; li < leaves.size(); ++li) {
    auto& value = leaves[li].mutable_value();
    const auto idx = detail::check_indices(value.numel(), opts.max_checks_per_input,
                                           mix_seed(opts.seed, li));
    for (std::size_t k : idx) {
      const double orig = value[k];
      auto probe = [&](double v, bool& crossed) {
        value[k] = v;
        kinks::Scope ks;
        const double f = detail::scalar_of(reduce(fn()));
        crossed = crossed || ks.signature() != base_signature;
        return f;
      };
      bool crossed = false;
      const double fp = probe(orig + opts.eps, crossed);
      const double fm = probe(orig - opts.eps, crossed);
      value[k] = orig;
      if (!std::isfinite(fp) || !std::isfinite(fm)) {
        throw NumericError("grad_check: non-finite value when perturbing input " +
                           std::to_string(li) + " element " + std::to_string(k));
      }
      if (crossed && opts.skip_kinks) {
        ++result.skipped;
        continue;
      }
      const double numeric = (fp - fm) / (2.0 * opts.eps);
      const double err = relative_error(analytic[li][k], numeric);
      ++result.checked;
      if (result.checked == 1 || err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = li;
        result.worst_index = k;
        result.worst_analytic = analytic[li][k];
        result.worst_numeric = numeric;
      }
    }
  }
  for (auto& leaf : leaves) leaf.zero_grad();
  return result;
}

/// Tensor-input form: `op` receives one leaf Var per input tensor.
inline GradCheckResult grad_check(const std::function<Var(std::span<const Var>)>& op,
                                  const std::vector<Tensor>& inputs,
                                  const GradCheckOptions& opts = {}, Reduction reduce = {}) {
  std::vector<Var> leaves;
  leaves.reserve(inputs.size());
  for (const auto& t : inputs) leaves.emplace_back(t, true);
  return grad_check_leaves([&] { return op(leaves); }, leaves, opts, std::move(reduce));
}

}  // namespace mfpnet
