#include "wayrvs/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace wayrvs {

Adam::Adam(std::vector<NamedParam> params, AdamConfig config)
    : params_(std::move(params)), config_(config) {
  if (config_.learning_rate <= 0.0) throw std::invalid_argument("adam: learning rate must be > 0");
  for (const auto& p : params_) {
    m_.emplace_back(p.tensor->shape());
    v_.emplace_back(p.tensor->shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.tensor->zero_grad();
}

void Adam::step() {
  std::string missing;
  for (const auto& p : params_) {
    if (!p.tensor->has_grad()) missing += (missing.empty() ? "" : ", ") + p.name;
  }
  if (!missing.empty()) throw std::invalid_argument("adam: missing gradient for " + missing);

  double clip = 1.0;
  if (config_.clip_norm > 0.0) {
    double sq = 0.0;
    for (const auto& p : params_) {
      for (double g : p.tensor->grad()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm > config_.clip_norm) clip = config_.clip_norm / norm;
  }

  ++step_count_;
  const double b1 = config_.beta1;
  const double b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& w = *params_[k].tensor;
    auto grad = w.grad();
    for (std::size_t i = 0; i < w.numel(); ++i) {
      const double g = grad[i] * clip;
      m_[k][i] = b1 * m_[k][i] + (1.0 - b1) * g;
      v_[k][i] = b2 * v_[k][i] + (1.0 - b2) * g * g;
      const double mhat = m_[k][i] / c1;
      const double vhat = v_[k][i] / c2;
      w[i] -= config_.learning_rate * mhat / (std::sqrt(vhat) + config_.epsilon);
      grad[i] = 0.0;
    }
  }
}

}  // namespace wayrvs
