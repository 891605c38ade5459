// SPDX-License-Identifier: Apache-2.0
#include <algorithm>

#include "capctl/gradcheck.hpp"
#include "doctest.h"

using namespace capctl;

TEST_CASE("gradient suite passes at the default seed") {
  auto rows = gradcheck::run_suite(1);
  REQUIRE(rows.size() > 20);
  for (const auto& r : rows) {
    INFO(r.name);
    CHECK(r.report.finite);
    CHECK(r.report.checked > 0);
    CHECK(r.report.max_rel_error < gradcheck::kTolerance);
  }
  CHECK(gradcheck::all_passed(rows));
  const auto table = gradcheck::format_table(rows);
  CHECK(std::count(table.begin(), table.end(), '\n') == static_cast<long>(rows.size()) + 1);
  for (const char* name : {"matmul", "softmax_rows", "lstm_cell_h", "gru_cell", "concat_cols", "xe_loss_forward",
                           "xe_loss_backward", "triplet_loss"}) {
    CHECK(table.find(name) != std::string::npos);
  }
}

TEST_CASE("a corrupted gradient fails the suite") {
  auto bad = gradcheck::suite_options();
  bad.analytic_offset = 1e-2;
  auto rows = gradcheck::run_suite(1, bad);
  CHECK_FALSE(gradcheck::all_passed(rows));
  for (const auto& r : rows) CHECK_FALSE(r.passed());
}

TEST_CASE("four-point stencil is exact on quartics") {
  auto x = tensor::Tensor<double>::from_vector({1}, {0.7}, true);
  // d/dx x^4 = 4 x^3; the stencil's error term is the fifth derivative.
  auto quartic = [&] {
    auto x2 = tensor::mul(x, x);
    return tensor::sum(tensor::mul(x2, x2));
  };
  nn::GradCheckOptions o;
  o.step = 0.1;
  o.fourth_order = true;
  CHECK(nn::finite_diff_check(quartic, {x}, o).max_rel_error < 1e-12);
  o.fourth_order = false;
  CHECK(nn::finite_diff_check(quartic, {x}, o).max_rel_error > 1e-4);
}
