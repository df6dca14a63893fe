#pragma once

#include <cstdint>
#include <vector>

#include "wayrvs/tensor.hpp"

namespace wayrvs {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  // Global gradient-norm clip; 0 disables clipping.
  double clip_norm = 0.0;
};

// Bias-corrected Adam. Moment buffers mirror the parameter shapes.
class Adam {
 public:
  explicit Adam(std::vector<NamedParam> params, AdamConfig config = {});

  // Applies one update from the accumulated gradients, then zeroes them.
  // Throws std::invalid_argument naming any parameter without a gradient.
  void step();
  // Allocates zeroed gradient buffers for every parameter.
  void zero_grad();

  std::uint64_t step_count() const noexcept { return step_count_; }
  const AdamConfig& config() const noexcept { return config_; }
  const std::vector<Tensor>& first_moment() const noexcept { return m_; }
  const std::vector<Tensor>& second_moment() const noexcept { return v_; }
  const std::vector<NamedParam>& params() const noexcept { return params_; }

 private:
  std::vector<NamedParam> params_;
  AdamConfig config_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  std::uint64_t step_count_ = 0;
};

}  // namespace wayrvs
