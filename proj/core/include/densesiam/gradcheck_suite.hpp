#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "densesiam/grad_check.hpp"

namespace dsiam {

struct SuiteOptions {
  int seeds = 20;
  double tolerance = 1e-4;
  double analytic_scale = 1.0;  // != 1 injects a fault into every comparison
  std::uint64_t seed = 0;
  std::vector<std::string> only;  // empty = every case
};

struct SuiteResult {
  std::string name;
  std::string group;  // "primitive" or "loss"
  int seeds = 0;
  int passed = 0;
  double max_rel_err = 0.0;
  std::string first_failure;
  bool pass() const { return passed == seeds; }
};

// Names of every case, primitives first.
std::vector<std::string> gradcheck_case_names();

/// Each case builds a random f64 program per seed and reduces its output to
/// sum(out * R) with a fixed random R, so every output element is tested.
/// Inputs are drawn away from kinks (ReLU at 0, bilinear cell edges, ties in
/// pseudo-label argmax).
std::vector<SuiteResult> run_gradcheck_suite(const SuiteOptions& options);

}  // namespace dsiam
