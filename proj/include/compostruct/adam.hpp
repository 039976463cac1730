#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "compostruct/tensor.hpp"

namespace compostruct {

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moment buffers for a fixed list of tensors, bound on the first step.
class AdamState {
 public:
  explicit AdamState(AdamConfig cfg = {}) : cfg_(cfg) {}

  const AdamConfig& config() const { return cfg_; }
  std::uint64_t steps() const { return step_; }

  /// One bias-corrected Adam update of every tensor from its grad buffer.
  /// Tensors without a grad buffer are treated as having zero gradient.
  /// Throws NonFiniteError (and leaves all tensors untouched) on a NaN/Inf gradient.
  void step(std::span<Tensor* const> params);

 private:
  AdamConfig cfg_;
  std::uint64_t step_ = 0;
  std::vector<std::vector<double>> m_;
  std::vector<std::vector<double>> v_;
};

}  // namespace compostruct
