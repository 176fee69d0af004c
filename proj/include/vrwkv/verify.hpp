#pragma once

#include "vrwkv/core.hpp"

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace vrwkv::verify {

enum class Group { equivalence, gradient, invariant };

std::string group_name(Group g);
/// Throws ConfigError for an unknown name.
Group parse_group(const std::string& name);

struct Options {
  std::uint64_t seed = 0;
  /// Groups to run; empty runs all of them.
  std::vector<Group> groups;
  /// Multiply one forward decay step of the scan by 1 + 1e-3.
  bool perturb_scan = false;
};

struct CheckResult {
  Group group = Group::equivalence;
  std::string name;
  /// Largest error seen across the check's cases.
  double worst = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

std::vector<CheckResult> run_checks(const Options& options);

/// One line per check, `PASS|FAIL <group>/<name> worst=<e> tol=<t>`, then a
/// `failures:` line listing failed checks by name, comma separated.
void print_results(std::ostream& out, const std::vector<CheckResult>& results);
bool all_pass(const std::vector<CheckResult>& results);

/// Seeded uniform matrix in [lo, hi].
Matrix uniform_matrix(std::uint64_t seed, Index rows, Index cols, double lo = -1.0, double hi = 1.0);

/// Central differences of a scalar function, perturbing `x` in place and
/// restoring it.
Matrix numeric_gradient(const std::function<double()>& f, Eigen::Ref<Matrix> x, double h = 1e-5);

/// max |a - n| / max(|a|, |n|, floor).
double gradient_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-6);

/// max |a - b| / max(|b|, floor).
double relative_error(const Matrix& a, const Matrix& b, double floor = 1e-8);

}  // namespace vrwkv::verify
