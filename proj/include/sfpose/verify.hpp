#pragma once

// Self-check suites runnable from the CLI and the acceptance gate.

#include <cstdint>
#include <string>
#include <vector>

namespace sfpose {

struct CheckResult {
  std::string name;
  bool pass = false;
  std::string detail;
};

struct SuiteReport {
  std::string suite;
  std::vector<CheckResult> checks;
  double seconds = 0.0;

  bool pass() const;
  std::string format() const;  // one line per check
};

// "gradcheck", "procrustes", "renderer".
const std::vector<std::string>& verify_suite_names();
// Runs one suite, or every suite for "all". Throws std::invalid_argument
// for unknown names.
std::vector<SuiteReport> run_verify(const std::string& suite);

// ---- individual checks ---------------------------------------------------------

// Noiseless weighted instances (rotations up to 30 degrees) recovered to 1e-9.
CheckResult check_procrustes_exact(std::size_t instances = 100, std::size_t points = 500, std::uint64_t seed = 1);
// Closed form against iterative 6-dof minimization of the weighted objective.
CheckResult check_procrustes_vs_minimizer(std::size_t instances = 20, std::uint64_t seed = 2);
// Near-planar noisy clouds always yield det(R) = +1.
CheckResult check_reflection_guard(std::size_t instances = 50, std::uint64_t seed = 3);

// Constant medium opacity, hard-surface termination, and convergence order.
std::vector<CheckResult> renderer_checks();

// Central-difference checks of every differentiable op, the sampler, the
// compositor and the SVD; the end-to-end loss when `pipeline` is set.
std::vector<CheckResult> gradient_checks(bool pipeline = true);

}  // namespace sfpose
