#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <type_traits>
#include <vector>

#include "qrbsa/tensor.hpp"

namespace qrbsa {

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;  // index into the inputs vector
  std::size_t worst_element = 0;
};

// Compares the reverse-mode gradient of a scalar-valued function against
// central finite differences. Runs in 64-bit only; 32-bit storage has too
// little headroom for the 1e-6 perturbation.
//
// The function must rebuild its graph from the given leaves on every call;
// leaf values are perturbed in place between evaluations.
template <typename T>
GradCheckResult grad_check(
    const std::function<Tensor<T>(std::vector<Tensor<T>>&)>& fn,
    std::vector<Tensor<T>>& inputs, double h = 1e-6) {
  static_assert(std::is_same_v<T, double>,
                "grad_check requires the 64-bit verification mode");

  for (auto& t : inputs) t.zero_grad();
  Tensor<T> out = fn(inputs);
  out.backward();

  std::vector<std::vector<T>> analytic;
  analytic.reserve(inputs.size());
  for (auto& t : inputs) {
    auto g = t.grad();
    analytic.emplace_back(g.begin(), g.end());
  }

  GradCheckResult result;
  NoGradGuard no_tape;  // finite-difference evaluations need values only
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    if (!inputs[ti].requires_grad()) continue;
    auto vals = inputs[ti].values();
    for (std::size_t j = 0; j < vals.size(); ++j) {
      const T orig = vals[j];
      vals[j] = orig + static_cast<T>(h);
      const T fp = fn(inputs).item();
      vals[j] = orig - static_cast<T>(h);
      const T fm = fn(inputs).item();
      vals[j] = orig;
      const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) /
                             (2.0 * h);
      const double a = static_cast<double>(analytic[ti][j]);
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      const double rel = std::abs(a - numeric) / denom;
      if (rel > result.max_rel_error) {
        result.max_rel_error = rel;
        result.worst_input = ti;
        result.worst_element = j;
      }
    }
  }
  return result;
}

}  // namespace qrbsa
