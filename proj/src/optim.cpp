#include "lmas/optim.hpp"

#include <cmath>

#include "lmas/error.hpp"

namespace lmas {

std::string optimizer_name(OptimizerKind kind) { return kind == OptimizerKind::Adam ? "adam" : "sgd-momentum"; }

OptimizerKind parse_optimizer(const std::string& text) {
  if (text == "adam") return OptimizerKind::Adam;
  if (text == "sgd-momentum") return OptimizerKind::SgdMomentum;
  fail(ErrorCategory::Config, "unknown optimizer '" + text + "' (expected adam or sgd-momentum)");
}

void Optimizer::step(const ParameterList& params) {
  if (first_.empty()) {
    for (const Parameter* p : params) {
      first_.emplace_back(p->value.shape(), 0.0);
      second_.emplace_back(p->value.shape(), 0.0);
    }
  }
  if (first_.size() != params.size()) {
    fail(ErrorCategory::Contract, "optimizer was built for " + std::to_string(first_.size()) + " parameters, got " +
                                      std::to_string(params.size()));
  }
  ++steps_;
  const auto& s = settings_;
  const double t = static_cast<double>(steps_);
  const double correction1 = 1.0 - std::pow(s.beta1, t);
  const double correction2 = 1.0 - std::pow(s.beta2, t);
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    if (!first_[k].same_shape(p.value) || !p.grad.same_shape(p.value)) {
      fail(ErrorCategory::Dimension, "optimizer buffer shape mismatch for " + p.name);
    }
    auto& value = p.value.values();
    const auto& grad = p.grad.values();
    auto& m = first_[k].values();
    if (s.kind == OptimizerKind::SgdMomentum) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        m[i] = s.momentum * m[i] + grad[i];
        value[i] -= s.learning_rate * m[i];
      }
      continue;
    }
    auto& v = second_[k].values();
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = s.beta1 * m[i] + (1.0 - s.beta1) * grad[i];
      v[i] = s.beta2 * v[i] + (1.0 - s.beta2) * grad[i] * grad[i];
      const double m_hat = m[i] / correction1;
      const double v_hat = v[i] / correction2;
      value[i] -= s.learning_rate * m_hat / (std::sqrt(v_hat) + s.eps);
    }
  }
}

double global_grad_norm(const ParameterList& params) {
  double total = 0.0;
  for (const Parameter* p : params)
    for (double g : p->grad.values()) total += g * g;
  return std::sqrt(total);
}

double clip_grad_norm(const ParameterList& params, double max_norm) {
  const double norm = global_grad_norm(params);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (Parameter* p : params)
      for (double& g : p->grad.values()) g *= factor;
  }
  return norm;
}

void zero_grads(const ParameterList& params) {
  for (Parameter* p : params) p->zero_grad();
}

}  // namespace lmas
