// gradcheck.hpp -- central-difference verification of analytic gradients.
//
// Runs in double precision regardless of what the training path uses. The
// caller provides two closures over the same parameter storage: one that
// recomputes the scalar objective from the current parameter values, and one
// that runs a forward/backward pass and leaves gradients in each parameter's
// grad buffer.
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "rpmlab/errors.hpp"
#include "rpmlab/tensor.hpp"

namespace rpmlab {

struct GradCheckParam {
  std::string name;
  Tensor<double>* value = nullptr;
  const Tensor<double>* grad = nullptr;
};

struct GradCheckReport {
  double max_rel_err = 0.0;
  std::string worst_param;
  int64_t worst_index = -1;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  int64_t entries_checked = 0;
  int64_t entries_failed = 0;
  bool pass = false;
};

// Per-entry step h_i = base_h * max(1, |theta_i|); relative error
// |a - n| / max(|a|, |n|, 1e-8). Throws NonFiniteError if any probe or
// analytic entry is not finite.
inline GradCheckReport grad_check(const std::function<double()>& eval_loss,
                                  const std::function<void()>& compute_grads,
                                  std::vector<GradCheckParam> params,
                                  double base_h = 1e-3, double tol = 1e-4) {
  compute_grads();
  std::vector<Tensor<double>> analytic;
  analytic.reserve(params.size());
  for (const auto& p : params) {
    if (p.grad == nullptr || p.grad->data.empty())
      analytic.emplace_back(p.value->shape);
    else
      analytic.push_back(*p.grad);
  }
  GradCheckReport rep;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<double>& theta = *params[pi].value;
    for (int64_t i = 0; i < theta.numel(); ++i) {
      double orig = theta[i];
      double h = base_h * std::max(1.0, std::abs(orig));
      theta[i] = orig + h;
      double lp = eval_loss();
      theta[i] = orig - h;
      double lm = eval_loss();
      theta[i] = orig;
      double numeric = (lp - lm) / (2.0 * h);
      double a = analytic[pi][i];
      if (!std::isfinite(numeric) || !std::isfinite(a))
        throw NonFiniteError("gradient probe for " + params[pi].name + "[" + std::to_string(i) +
                             "] is not finite");
      double rel = std::abs(a - numeric) /
                   std::max(std::abs(a), std::max(std::abs(numeric), 1e-8));
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = params[pi].name;
        rep.worst_index = i;
        rep.analytic_at_worst = a;
        rep.numeric_at_worst = numeric;
      }
      if (rel > tol) ++rep.entries_failed;
      ++rep.entries_checked;
    }
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace rpmlab
