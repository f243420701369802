#pragma once

#include "gssm/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace gssm::ad {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed list of parameter tensors. Each tensor
/// is one group: a group whose gradient holds NaN/Inf is left untouched for
/// that step and counted in skipped_groups().
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<Param*> params, AdamConfig config);

  void step();
  void zero_grad();

  [[nodiscard]] const AdamConfig& config() const { return config_; }
  void set_lr(double lr) { config_.lr = lr; }
  [[nodiscard]] std::uint64_t steps() const { return steps_; }
  [[nodiscard]] std::uint64_t skipped_groups() const { return skipped_; }
  [[nodiscard]] const std::vector<Param*>& params() const { return params_; }

  /// Optimizer steps taken by every Adam instance in this process.
  static std::uint64_t global_step_count();

 private:
  struct Moments {
    Matrix m;
    Matrix v;
    std::uint64_t t = 0;
  };

  std::vector<Param*> params_;
  std::vector<Moments> state_;
  AdamConfig config_;
  std::uint64_t steps_ = 0;
  std::uint64_t skipped_ = 0;
};

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(const std::vector<Param*>& params, double max_norm);

double global_grad_norm(const std::vector<Param*>& params);

}  // namespace gssm::ad
