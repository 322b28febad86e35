#include "pser/optimizer.hpp"

#include <cmath>

namespace pser {

Adam::Adam(std::vector<ad::NodePtr> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  m_.reserve(params_.size());
  v_.reserve(params_.size());
  for (const auto& p : params_) {
    m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
}

void Adam::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    ad::Node& p = *params_[i];
    Matrix g = (p.grad.size() == p.value.size())
                   ? p.grad
                   : Matrix::Zero(p.value.rows(), p.value.cols());
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * g;
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * g.cwiseProduct(g);
    Matrix m_hat = m_[i] / bc1;
    Matrix v_hat = v_[i] / bc2;
    p.value.array() -= lr * m_hat.array() / (v_hat.array().sqrt() + config_.eps);
  }
}

void Adam::zero_grad() {
  for (const auto& p : params_) {
    if (p->grad.size() == p->value.size()) p->grad.setZero();
  }
}

double clip_grad_norm(const std::vector<ad::NodePtr>& params, double max_norm) {
  if (!(max_norm > 0.0)) throw ConfigError("clip_grad_norm needs a positive max_norm");
  double sq = 0.0;
  for (const auto& p : params) {
    if (p->grad.size() == p->value.size()) sq += p->grad.squaredNorm();
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const double scale = max_norm / norm;
    for (const auto& p : params) {
      if (p->grad.size() == p->value.size()) p->grad *= scale;
    }
  }
  return norm;
}

double scheduled_lr(long step, long total_steps, double lr_max, double warmup_fraction) {
  if (total_steps < 1) throw ConfigError("schedule needs at least one step");
  if (!(warmup_fraction > 0.0 && warmup_fraction < 1.0)) {
    throw ConfigError("warmup_fraction must be in (0, 1)");
  }
  long warmup = std::max<long>(1, std::lround(warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) {
    return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup);
  }
  if (total_steps <= warmup) return lr_max;
  double frac =
      static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warmup);
  return lr_max * std::max(0.0, frac);
}

}  // namespace pser
