// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference suite over every differentiable kernel and both
// end-to-end losses, in double precision at tiny dimensions.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "capctl/nn.hpp"

namespace capctl::gradcheck {

constexpr double kTolerance = 1e-4;

struct Row {
  std::string name;
  nn::GradCheckReport report;

  bool passed() const { return report.passed(kTolerance); }
};

/// Four-point stencil at step 1e-3: roundoff and truncation both near 1e-12.
inline nn::GradCheckOptions suite_options() {
  nn::GradCheckOptions o;
  o.step = 1e-3;
  o.fourth_order = true;
  return o;
}

std::vector<Row> run_suite(std::uint64_t seed, nn::GradCheckOptions options = suite_options());

bool all_passed(const std::vector<Row>& rows);

/// One line per check: name, elements checked, max relative and absolute error.
std::string format_table(const std::vector<Row>& rows);

}  // namespace capctl::gradcheck
