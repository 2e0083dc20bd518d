#include "densesiam/grad_check.hpp"

#include <algorithm>
#include <cmath>

#include "densesiam/errors.hpp"
#include "densesiam/ops.hpp"

namespace dsiam {

namespace {

// Keeps rounding noise of near-zero gradients (about 1e-11) from reading as a relative error.
constexpr double kRelFloor = 1e-6;

std::vector<TensorD> fresh_leaves(const std::vector<TensorD>& inputs, bool requires_grad) {
  std::vector<TensorD> out;
  out.reserve(inputs.size());
  for (const auto& t : inputs) out.push_back(t.clone(requires_grad));
  return out;
}

double evaluate(const TensorProgram& fn, const std::vector<TensorD>& inputs) {
  TensorD y = fn(inputs);
  if (y.numel() != 1) throw UsageError("grad_check: program must return a scalar");
  return y.item();
}

}  // namespace

GradCheckReport grad_check(const TensorProgram& fn, const std::vector<TensorD>& inputs,
                           const GradCheckOptions& options) {
  GradCheckReport report;

  auto leaves = fresh_leaves(inputs, true);
  TensorD y = fn(leaves);
  if (y.numel() != 1) throw UsageError("grad_check: program must return a scalar");
  y.backward();

  auto probe = fresh_leaves(inputs, false);
  StopGradientTape tape;
  tape.record();
  const double base0 = evaluate(fn, probe);
  tape.replay();
  const double base1 = evaluate(fn, probe);
  if (base0 != base1 || base0 != y.item()) {
    report.failure = "non-deterministic program: repeated evaluation differs";
    report.max_rel_err = INFINITY;
    return report;
  }

  for (std::size_t t = 0; t < probe.size(); ++t) {
    auto values = probe[t].data_mut();
    auto analytic = leaves[t].grad();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double x = values[i];
      const double h = options.step * std::max(1.0, std::abs(x));
      auto at = [&](double offset) {
        values[i] = x + offset;
        tape.replay();
        return evaluate(fn, probe);
      };
      const double numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
      values[i] = x;
      const double a = (analytic.empty() ? 0.0 : analytic[i]) * options.analytic_scale;
      const double rel = std::abs(a - numeric) / std::max(kRelFloor, std::abs(a) + std::abs(numeric));
      if (!std::isfinite(rel)) {
        report.failure = "non-finite gradient at input " + std::to_string(t) + " index " + std::to_string(i);
        report.max_rel_err = INFINITY;
        return report;
      }
      if (rel > report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst_input = t;
        report.worst_index = i;
      }
      ++report.coordinates;
    }
  }
  report.pass = report.max_rel_err < options.tolerance;
  if (!report.pass) {
    report.failure = "max relative error " + std::to_string(report.max_rel_err) + " exceeds " +
                     std::to_string(options.tolerance) + " at input " + std::to_string(report.worst_input) +
                     " index " + std::to_string(report.worst_index);
  }
  return report;
}

}  // namespace dsiam
