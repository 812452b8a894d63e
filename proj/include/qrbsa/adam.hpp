#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "qrbsa/tensor.hpp"

namespace qrbsa {

struct AdamConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.99;
  double epsilon = 1e-8;
  double weight_decay = 0.0;  // off unless configured
  double grad_clip = 0.0;     // global-norm clip, off unless configured
};

// Raised when a parameter gradient is non-finite; the step is not applied.
class NanGradientError : public std::runtime_error {
 public:
  explicit NanGradientError(const std::string& name)
      : std::runtime_error("non-finite gradient in parameter '" + name + "'") {}
};

// Bias-corrected Adam over a fixed ordered parameter list.
template <typename T>
class Adam {
 public:
  Adam(std::vector<std::pair<std::string, Tensor<T>>> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    slots_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      slots_[i].m.assign(params_[i].second.size(), T(0));
      slots_[i].v.assign(params_[i].second.size(), T(0));
    }
  }

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t step_count() const { return step_count_; }

  void zero_grad() {
    for (auto& [name, p] : params_) p.zero_grad();
  }

  void step() {
    // Validate all gradients before touching any state so a bad step leaves
    // parameters and moments unmodified.
    for (auto& [name, p] : params_) {
      for (T g : p.grad())
        if (!std::isfinite(static_cast<double>(g))) throw NanGradientError(name);
    }

    double clip_factor = 1.0;
    if (cfg_.grad_clip > 0.0) {
      double sq = 0.0;
      for (auto& [name, p] : params_)
        for (T g : p.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
      const double norm = std::sqrt(sq);
      if (norm > cfg_.grad_clip) clip_factor = cfg_.grad_clip / norm;
    }

    ++step_count_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_count_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_count_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto vals = params_[i].second.values();
      auto grads = params_[i].second.grad();
      auto& slot = slots_[i];
      for (std::size_t j = 0; j < vals.size(); ++j) {
        double g = static_cast<double>(grads[j]) * clip_factor;
        if (cfg_.weight_decay > 0.0)
          g += cfg_.weight_decay * static_cast<double>(vals[j]);
        const double m = cfg_.beta1 * static_cast<double>(slot.m[j]) +
                         (1.0 - cfg_.beta1) * g;
        const double v = cfg_.beta2 * static_cast<double>(slot.v[j]) +
                         (1.0 - cfg_.beta2) * g * g;
        slot.m[j] = static_cast<T>(m);
        slot.v[j] = static_cast<T>(v);
        const double update =
            cfg_.lr * (m / bc1) / (std::sqrt(v / bc2) + cfg_.epsilon);
        vals[j] = static_cast<T>(static_cast<double>(vals[j]) - update);
      }
    }
  }

  // Serialization hooks for checkpoints.
  std::size_t n_params() const { return params_.size(); }
  const std::vector<T>& first_moment(std::size_t i) const { return slots_[i].m; }
  const std::vector<T>& second_moment(std::size_t i) const { return slots_[i].v; }
  void restore(std::size_t i, std::vector<T> m, std::vector<T> v) {
    if (m.size() != slots_[i].m.size() || v.size() != slots_[i].v.size())
      throw std::invalid_argument("optimizer state size mismatch");
    slots_[i].m = std::move(m);
    slots_[i].v = std::move(v);
  }
  void set_step_count(std::uint64_t s) { step_count_ = s; }

 private:
  struct Slot {
    std::vector<T> m, v;
  };

  std::vector<std::pair<std::string, Tensor<T>>> params_;
  std::vector<Slot> slots_;
  AdamConfig cfg_;
  std::uint64_t step_count_ = 0;
};

}  // namespace qrbsa
