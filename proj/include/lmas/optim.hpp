#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "lmas/autodiff.hpp"

namespace lmas {

enum class OptimizerKind { Adam, SgdMomentum };

std::string optimizer_name(OptimizerKind kind);
OptimizerKind parse_optimizer(const std::string& text);

struct OptimizerSettings {
  OptimizerKind kind = OptimizerKind::Adam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double momentum = 0.9;
};

/// Per-parameter buffers, matched to the parameter list by position.
class Optimizer {
 public:
  explicit Optimizer(OptimizerSettings settings) : settings_(settings) {}

  void step(const ParameterList& params);

  std::size_t steps() const { return steps_; }
  const OptimizerSettings& settings() const { return settings_; }

 private:
  OptimizerSettings settings_;
  std::size_t steps_ = 0;
  std::vector<Tensor> first_;
  std::vector<Tensor> second_;
};

double global_grad_norm(const ParameterList& params);

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const ParameterList& params, double max_norm);

void zero_grads(const ParameterList& params);

}  // namespace lmas
