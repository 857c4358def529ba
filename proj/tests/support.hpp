#pragma once

#include <functional>
#include <string>

#include "lmas/autodiff.hpp"
#include "lmas/rng.hpp"

namespace testing {

inline lmas::Tensor random_tensor(lmas::Shape shape, lmas::Rng& rng, double bound = 1.0) {
  lmas::Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

struct GradReport {
  double worst = 0.0;
  std::string where;
};

/// Compares backward() gradients of every listed parameter with central
/// differences of the same loss. `loss` builds a fresh graph on the tape it
/// is given and must be deterministic.
inline GradReport check_gradients(const lmas::ParameterList& params,
                                  const std::function<lmas::Var(lmas::Tape&)>& loss, double step = 1e-5) {
  {
    lmas::Tape tape;
    for (auto* p : params) p->zero_grad();
    tape.backward(loss(tape));
  }
  GradReport report;
  for (auto* p : params) {
    const lmas::Tensor analytic = p->grad;
    const lmas::Tensor saved = p->value;
    const lmas::Tensor numeric = lmas::finite_diff_grad(
        [&](const lmas::Tensor& x) {
          p->value = x;
          lmas::Tape tape;
          return loss(tape).value().item();
        },
        saved, step);
    p->value = saved;
    const double err = lmas::max_relative_error(analytic, numeric);
    if (err > report.worst) {
      report.worst = err;
      report.where = p->name;
    }
  }
  return report;
}

/// Gradient of sum(out ⊙ weights) with respect to one leaf, checked against
/// central differences.
inline double leaf_grad_error(const lmas::Tensor& x0, const std::function<lmas::Var(lmas::Var)>& op, std::uint64_t seed) {
  lmas::Rng rng(seed);
  lmas::Tensor weights;
  {
    lmas::Tape probe;
    weights = random_tensor(op(probe.constant(x0)).shape(), rng);
  }
  lmas::Tape tape;
  lmas::Var x = tape.variable(x0);
  tape.backward(lmas::sum(lmas::mul(op(x), tape.constant(weights))));
  const lmas::Tensor analytic = tape.grad(x);
  const lmas::Tensor numeric = lmas::finite_diff_grad(
      [&](const lmas::Tensor& v) {
        lmas::Tape t;
        return lmas::sum(lmas::mul(op(t.constant(v)), t.constant(weights))).value().item();
      },
      x0, 1e-5);
  return lmas::max_relative_error(analytic, numeric);
}

}  // namespace testing
