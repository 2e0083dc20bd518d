#pragma once

#include <functional>
#include <string>
#include <vector>

#include "densesiam/tensor.hpp"

namespace dsiam {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  std::size_t coordinates = 0;
  std::size_t worst_input = 0, worst_index = 0;  // location of max_rel_err
  // Empty on success; otherwise why the check failed.
  std::string failure;
};

struct GradCheckOptions {
  double tolerance = 1e-4;
  // Multiplies the analytic gradient before comparison. Anything other than
  // 1 is a negative control that must make the check fail.
  double analytic_scale = 1.0;
  // Relative finite-difference step; see grad_check.
  double step = 1e-4;
};

using TensorProgram = std::function<TensorD(const std::vector<TensorD>&)>;

/// Compares backprop gradients of a scalar program against fourth-order
/// central finite differences (five-point stencil). Step per coordinate:
/// h = step * max(1, |x|); error per coordinate: |a - n| / max(1e-6, |a| + |n|). The program is evaluated twice
/// on the unperturbed inputs first; any difference marks it as
/// non-deterministic and fails the report. Finite differences run with every
/// stop_gradient output frozen at its unperturbed value (StopGradientTape).
GradCheckReport grad_check(const TensorProgram& fn, const std::vector<TensorD>& inputs,
                           const GradCheckOptions& options = {});

}  // namespace dsiam
