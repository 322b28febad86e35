#include "pser/gradcheck.hpp"

#include "pser/downstream.hpp"

#include <cmath>
#include <limits>

namespace pser {

namespace {

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace

GradcheckReport gradcheck(const std::vector<std::pair<std::string, ad::NodePtr>>& params,
                          const std::function<ad::NodePtr()>& build_loss, double h) {
  if (params.empty()) throw ValidationError("no parameters to check");
  if (!(h > 0.0)) throw ConfigError("finite-difference step must be positive");

  for (const auto& [name, p] : params) {
    p->grad.resize(p->value.rows(), p->value.cols());
    p->grad.setZero();
  }
  ad::NodePtr root = build_loss();
  if (root->value.size() != 1) throw ShapeError("gradcheck loss must be scalar");
  ad::backward(root);

  std::vector<Matrix> analytic;
  analytic.reserve(params.size());
  for (const auto& [name, p] : params) {
    if (p->grad.rows() == p->value.rows() && p->grad.cols() == p->value.cols())
      analytic.push_back(p->grad);
    else
      analytic.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }

  auto eval = [&]() { return build_loss()->value(0, 0); };

  GradcheckReport report;
  for (std::size_t gi = 0; gi < params.size(); ++gi) {
    const auto& name = params[gi].first;
    auto& value = params[gi].second->value;
    Matrix fd(value.rows(), value.cols());
    for (Eigen::Index i = 0; i < value.rows(); ++i) {
      for (Eigen::Index j = 0; j < value.cols(); ++j) {
        const double orig = value(i, j);
        value(i, j) = orig + h;
        const double lp = eval();
        value(i, j) = orig - h;
        const double lm = eval();
        value(i, j) = orig;
        fd(i, j) = (lp - lm) / (2.0 * h);
      }
    }

    double rel;
    if (!all_finite(analytic[gi]) || !all_finite(fd)) {
      rel = std::numeric_limits<double>::infinity();
      report.failed.push_back(name);
    } else {
      const double num = (analytic[gi] - fd).norm();
      // Structurally inert parameters (a key bias under softmax, a pure shift
      // ahead of batch norm) have true gradient zero on both sides; the floor
      // keeps their finite-difference noise from reading as O(1) error.
      const double den = std::max({analytic[gi].norm(), fd.norm(), 1e-6});
      rel = num / den;
    }
    report.rel_err[name] = rel;
    report.max_rel_err = std::max(report.max_rel_err, rel);
  }
  return report;
}

GradcheckReport gradcheck_papt(EncoderModel& model,
                               const std::vector<const UtteranceRecord*>& batch,
                               const PseudoLabelSet& labels, const MaskPlan& plan, double h) {
  auto build = [&]() { return papt_loss(model, batch, labels, plan); };
  return gradcheck(model.named_parameters(), build, h);
}

GradcheckReport gradcheck_ccc(EncoderModel& model,
                              const std::vector<const UtteranceRecord*>& batch, double h) {
  if (batch.size() < 2) throw ValidationError("CCC gradcheck needs at least 2 utterances");
  Vector truth(static_cast<Eigen::Index>(batch.size()));
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (!batch[i]->label)
      throw ValidationError("utterance '" + batch[i]->id + "' has no label");
    truth(static_cast<Eigen::Index>(i)) = *batch[i]->label;
  }

  auto build = [&]() {
    std::vector<ad::NodePtr> pooled;
    pooled.reserve(batch.size());
    for (const auto* rec : batch) {
      const int ordinal = model.speaker_ordinal(rec->speaker_id);
      auto feats = forward_features_node(model, rec->samples, ordinal);
      pooled.push_back(ad::mean_rows(feats));
    }
    auto stacked = ad::concat_rows(pooled);
    auto pred = interpreter_forward(model, stacked, /*training=*/true);
    return ccc_loss(pred, truth);
  };
  return gradcheck(model.named_parameters(), build, h);
}

std::size_t count_parameters(const EncoderModel& model) {
  std::size_t n = 0;
  for (const auto& [name, p] : model.named_parameters()) n += static_cast<std::size_t>(p->value.size());
  return n;
}

}  // namespace pser
