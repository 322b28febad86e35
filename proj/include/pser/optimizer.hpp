#pragma once

#include "pser/autodiff.hpp"

#include <vector>

namespace pser {

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adam over shared parameter leaves. step() consumes whatever gradients the
// last backward pass accumulated; a parameter outside the last graph simply
// has a zero gradient.
class Adam {
 public:
  explicit Adam(std::vector<ad::NodePtr> params, AdamConfig config = {});

  void step(double lr);
  void zero_grad();

 private:
  std::vector<ad::NodePtr> params_;
  std::vector<Matrix> m_, v_;
  AdamConfig config_;
  long t_ = 0;
};

// 0-based step index. Linear ramp to lr_max over the warmup steps, then
// linear decay toward zero at total_steps.
double scheduled_lr(long step, long total_steps, double lr_max, double warmup_fraction);

// Scales all gradients so their joint L2 norm is at most max_norm.
// Returns the pre-clip norm.
double clip_grad_norm(const std::vector<ad::NodePtr>& params, double max_norm);

}  // namespace pser
