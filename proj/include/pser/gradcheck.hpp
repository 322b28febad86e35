#pragma once

#include "pser/encoder.hpp"
#include "pser/pretrain.hpp"

#include <functional>
#include <map>
#include <string>
#include <vector>

namespace pser {

struct GradcheckReport {
  std::map<std::string, double> rel_err;  // per parameter tensor
  double max_rel_err = 0.0;
  std::vector<std::string> failed;  // parameters with non-finite gradients

  bool ok(double tol) const { return failed.empty() && max_rel_err < tol; }
};

// Compares backprop gradients of a scalar loss against central finite
// differences, parameter tensor by parameter tensor. `build_loss` must
// re-evaluate the loss from the parameters' current values.
GradcheckReport gradcheck(const std::vector<std::pair<std::string, ad::NodePtr>>& params,
                          const std::function<ad::NodePtr()>& build_loss, double h = 1e-5);

// Masked pre-training loss path.
GradcheckReport gradcheck_papt(EncoderModel& model,
                               const std::vector<const UtteranceRecord*>& batch,
                               const PseudoLabelSet& labels, const MaskPlan& plan,
                               double h = 1e-5);

// Pooled-features -> interpreter -> CCC loss path (dropout disabled,
// batch-norm in training mode).
GradcheckReport gradcheck_ccc(EncoderModel& model,
                              const std::vector<const UtteranceRecord*>& batch, double h = 1e-5);

std::size_t count_parameters(const EncoderModel& model);

}  // namespace pser
