#include <cmath>
#include <random>

#include "capctl/nn.hpp"
#include "capctl/tensor.hpp"
#include "doctest.h"

using capctl::Rng;
using capctl::tensor::Tensor;
namespace t = capctl::tensor;
namespace nn = capctl::nn;

namespace {

using TD = Tensor<double>;

TD random_tensor(t::Shape shape, Rng& rng, bool requires_grad = true) {
  std::normal_distribution<double> dist(0.0, 1.0);
  std::vector<double> v(t::shape_numel(shape));
  for (auto& x : v) x = dist(rng);
  return TD::from_vector(std::move(shape), std::move(v), requires_grad);
}

// Loss that weights every output element differently so no gradient is
// trivially constant.
TD weighted_sum(const TD& out, const TD& weights) { return t::sum(t::mul(out, weights)); }

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("matmul values") {
  auto a = TD::from_vector({2, 2}, {1, 2, 3, 4});
  auto eye = TD::from_vector({2, 2}, {1, 0, 0, 1});
  auto out = t::matmul(a, eye);
  CHECK(std::vector<double>(out.data().begin(), out.data().end()) ==
        std::vector<double>{1, 2, 3, 4});

  auto row = TD::from_vector({1, 2}, {1, 2});
  auto col = TD::from_vector({2, 1}, {3, 4});
  CHECK(t::matmul(row, col).item() == 11.0);
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = TD::zeros({2, 3});
  auto b = TD::zeros({2, 3});
  try {
    (void)t::matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const capctl::DimensionError& e) {
    std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
  }
}

TEST_CASE("matmul gradient of sum against finite differences") {
  Rng rng(11);
  auto a = random_tensor({3, 4}, rng);
  auto b = random_tensor({4, 2}, rng);
  auto report = nn::finite_diff_check([&] { return t::sum(t::matmul(a, b)); }, {a, b});
  CHECK(report.max_abs_error < 1e-6);
  CHECK(report.passed(1e-6));
}

TEST_CASE("softmax values") {
  auto s = t::softmax(TD::from_vector({2}, {0.0, 0.0}), 0);
  CHECK(s.at(0) == doctest::Approx(0.5));
  CHECK(s.at(1) == doctest::Approx(0.5));

  // exp(ln 2) / (exp(ln 2) + exp(0)) = 2 / 3
  s = t::softmax(TD::from_vector({2}, {std::log(2.0), 0.0}), 0);
  CHECK(s.at(0) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(s.at(1) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  s = t::softmax(TD::from_vector({2}, {1000.0, 0.0}), 0);
  CHECK(std::isfinite(s.at(0)));
  CHECK(s.at(0) == doctest::Approx(1.0));
  CHECK(s.at(1) == doctest::Approx(0.0));

  auto sf = t::softmax(Tensor<float>::from_vector({2}, {1000.0f, 0.0f}), 0);
  CHECK(std::isfinite(sf.at(0)));
}

TEST_CASE("softmax rejects non-finite input") {
  auto x = TD::from_vector({2}, {std::nan(""), 0.0});
  CHECK_THROWS_AS((void)t::softmax(x, 0), capctl::NumericError);
}

TEST_CASE("softmax slices are positive and sum to one along either axis") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    std::uniform_int_distribution<int> ext(1, 6);
    const std::size_t m = ext(rng), n = ext(rng);
    auto x = random_tensor({m, n}, rng, false);
    for (std::size_t axis = 0; axis < 2; ++axis) {
      auto s = t::softmax(x, axis);
      const std::size_t outer = axis == 0 ? n : m, extent = axis == 0 ? m : n;
      for (std::size_t o = 0; o < outer; ++o) {
        double total = 0;
        for (std::size_t e = 0; e < extent; ++e) {
          double v = axis == 0 ? s.at(e, o) : s.at(o, e);
          CHECK(v > 0.0);
          total += v;
        }
        CHECK(std::abs(total - 1.0) < 1e-6);
      }
    }
  }
}

TEST_CASE("lstm cell with all-zero weights stays at zero") {
  auto p = nn::LstmParams<double>::zeros(3, 2);
  auto [h, c] = nn::lstm_cell(TD::zeros({1, 3}), TD::zeros({1, 2}), TD::zeros({1, 2}), p);
  for (double v : h.data()) CHECK(v == 0.0);
  for (double v : c.data()) CHECK(v == 0.0);
}

TEST_CASE("scalar lstm cell matches hand evaluation") {
  auto p = nn::LstmParams<double>::zeros(1, 1);
  // rows: [x; h], columns: input, forget, candidate, output
  const double w[2][4] = {{0.5, -0.3, 0.8, 0.1}, {0.2, 0.4, -0.6, 0.7}};
  const double b[4] = {0.1, 0.2, -0.1, 0.05};
  for (int r = 0; r < 2; ++r)
    for (int k = 0; k < 4; ++k) p.weight.mutable_data()[r * 4 + k] = w[r][k];
  for (int k = 0; k < 4; ++k) p.bias.mutable_data()[k] = b[k];
  const double x = 0.7, h0 = 0.3, c0 = -0.4;

  double pre[4];
  for (int k = 0; k < 4; ++k) pre[k] = w[0][k] * x + w[1][k] * h0 + b[k];
  const double c_expected = sigmoid(pre[1]) * c0 + sigmoid(pre[0]) * std::tanh(pre[2]);
  const double h_expected = sigmoid(pre[3]) * std::tanh(c_expected);

  auto [h, c] = nn::lstm_cell(TD::from_vector({1, 1}, {x}), TD::from_vector({1, 1}, {h0}),
                              TD::from_vector({1, 1}, {c0}), p);
  CHECK(c.item() == doctest::Approx(c_expected).epsilon(1e-14));
  CHECK(h.item() == doctest::Approx(h_expected).epsilon(1e-14));
}

TEST_CASE("lstm cell width mismatch") {
  auto p = nn::LstmParams<double>::zeros(3, 2);
  CHECK_THROWS_AS((void)nn::lstm_cell(TD::zeros({1, 4}), TD::zeros({1, 2}), TD::zeros({1, 2}), p),
                  capctl::DimensionError);
}

TEST_CASE("lstm cell gradient of sum(h) against finite differences") {
  Rng rng(5);
  auto p = nn::LstmParams<double>::create(3, 4, rng);
  for (auto& v : p.bias.mutable_data()) v = std::normal_distribution<double>(0, 0.5)(rng);
  auto x = random_tensor({2, 3}, rng);
  auto h0 = random_tensor({2, 4}, rng);
  auto c0 = random_tensor({2, 4}, rng);
  auto report = nn::finite_diff_check(
      [&] { return t::sum(nn::lstm_cell(x, h0, c0, p).first); }, {p.weight, p.bias, x, h0, c0});
  CHECK(report.max_abs_error < 1e-6);
  CHECK(report.passed(1e-6));
}

TEST_CASE("gru cell zero weights and scalar hand evaluation") {
  auto zero = nn::GruParams<double>::zeros(2, 3);
  auto h = nn::gru_cell(TD::zeros({1, 2}), TD::zeros({1, 3}), zero);
  for (double v : h.data()) CHECK(v == 0.0);

  auto p = nn::GruParams<double>::zeros(1, 1);
  const double wx[3] = {0.4, -0.7, 0.9};  // z, r, n
  const double wh[2] = {0.3, 0.5};        // z, r
  const double un = -0.8;
  const double b[3] = {0.05, -0.1, 0.2};
  for (int k = 0; k < 3; ++k) p.w_input.mutable_data()[k] = wx[k];
  for (int k = 0; k < 2; ++k) p.w_hidden.mutable_data()[k] = wh[k];
  p.w_candidate.mutable_data()[0] = un;
  for (int k = 0; k < 3; ++k) p.bias.mutable_data()[k] = b[k];
  const double x = 0.6, h0 = -0.25;

  const double z = sigmoid(wx[0] * x + wh[0] * h0 + b[0]);
  const double r = sigmoid(wx[1] * x + wh[1] * h0 + b[1]);
  const double n = std::tanh(wx[2] * x + un * (r * h0) + b[2]);
  const double expected = (1.0 - z) * n + z * h0;

  auto out = nn::gru_cell(TD::from_vector({1, 1}, {x}), TD::from_vector({1, 1}, {h0}), p);
  CHECK(out.item() == doctest::Approx(expected).epsilon(1e-14));
}

TEST_CASE("gru cell gradient against finite differences") {
  Rng rng(8);
  auto p = nn::GruParams<double>::create(3, 4, rng);
  for (auto& v : p.bias.mutable_data()) v = std::normal_distribution<double>(0, 0.5)(rng);
  auto x = random_tensor({2, 3}, rng);
  auto h0 = random_tensor({2, 4}, rng);
  auto report = nn::finite_diff_check([&] { return t::sum(nn::gru_cell(x, h0, p)); },
                                      {p.w_input, p.w_hidden, p.w_candidate, p.bias, x, h0});
  CHECK(report.max_abs_error < 1e-6);
  CHECK(report.passed(1e-6));
}

TEST_CASE("concat values, identity and gradient routing") {
  auto a = TD::from_vector({1}, {1}, true);
  auto b = TD::from_vector({2}, {2, 3}, true);
  auto c = t::concat<double>({a, b}, 0);
  CHECK(std::vector<double>(c.data().begin(), c.data().end()) == std::vector<double>{1, 2, 3});

  auto single = t::concat<double>({b}, 0);
  CHECK(single.shape() == b.shape());
  CHECK(std::vector<double>(single.data().begin(), single.data().end()) ==
        std::vector<double>{2, 3});

  t::backward(t::sum(c));
  CHECK(a.grad()[0] == 1.0);
  CHECK(b.grad()[0] == 1.0);
  CHECK(b.grad()[1] == 1.0);

  CHECK_THROWS_AS((void)t::concat<double>({TD::zeros({2, 2}), TD::zeros({3, 3})}, 1),
                  capctl::DimensionError);
}

TEST_CASE("backward basics") {
  auto x = TD::scalar(3.0, true);
  t::backward(t::mul(x, x));
  CHECK(x.grad()[0] == 6.0);

  auto y = TD::scalar(5.0, true);
  t::backward(t::add(y, y));
  CHECK(y.grad()[0] == 2.0);

  auto z = TD::scalar(2.0, true);
  t::backward(z);
  CHECK(z.grad()[0] == 1.0);

  // Accumulates across calls on leaves.
  t::backward(z);
  CHECK(z.grad()[0] == 2.0);

  CHECK_THROWS_AS(t::backward(TD::zeros({2}, true)), capctl::ContractError);
}

TEST_CASE("two-step lstm unroll gradients against finite differences") {
  Rng rng(21);
  auto p = nn::LstmParams<double>::create(2, 3, rng);
  auto x1 = random_tensor({1, 2}, rng);
  auto x2 = random_tensor({1, 2}, rng);
  auto w = random_tensor({1, 3}, rng, false);
  auto build = [&] {
    auto h = TD::zeros({1, 3});
    auto c = TD::zeros({1, 3});
    std::tie(h, c) = nn::lstm_cell(x1, h, c, p);
    std::tie(h, c) = nn::lstm_cell(x2, h, c, p);
    return weighted_sum(h, w);
  };
  auto report = nn::finite_diff_check(build, {p.weight, p.bias, x1, x2});
  CHECK(report.max_abs_error < 1e-6);
}

TEST_CASE("adam step hand evaluation") {
  const double lr = 5e-4, eps = 1e-8;
  SUBCASE("zero gradient leaves the parameter unchanged") {
    std::vector<TD> params{TD::from_vector({1}, {0.7}, true)};
    params[0].mutable_grad()[0] = 0.0;
    nn::AdamState<double> state;
    nn::adam_step<double>(params, state);
    CHECK(params[0].at(0) == 0.7);
    CHECK(state.step == 1);
    CHECK_FALSE(params[0].has_grad());
  }
  SUBCASE("unit gradient at step one moves by lr") {
    std::vector<TD> params{TD::from_vector({1}, {1.0}, true)};
    params[0].mutable_grad()[0] = 1.0;
    nn::AdamState<double> state;
    nn::adam_step<double>(params, state);
    CHECK(params[0].at(0) == doctest::Approx(1.0 - lr / (1.0 + eps)).epsilon(1e-15));
  }
  SUBCASE("second step on a quadratic shrinks per the moment recurrences") {
    // loss = theta^2, gradient 2 theta
    std::vector<TD> params{TD::from_vector({1}, {1.0}, true)};
    nn::AdamState<double> state;
    double theta = 1.0, m = 0.0, v = 0.0;
    std::vector<double> deltas;
    for (int step = 1; step <= 2; ++step) {
      const double g = 2.0 * theta;
      params[0].mutable_grad()[0] = g;
      const double before = params[0].at(0);
      nn::adam_step<double>(params, state);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, step));
      const double vh = v / (1.0 - std::pow(0.999, step));
      theta -= lr * mh / (std::sqrt(vh) + eps);
      CHECK(params[0].at(0) == doctest::Approx(theta).epsilon(1e-14));
      deltas.push_back(std::abs(params[0].at(0) - before));
    }
    CHECK(deltas[1] < deltas[0]);
  }
  SUBCASE("missing gradient is a contract error") {
    std::vector<TD> params{TD::from_vector({1}, {1.0}, true)};
    nn::AdamState<double> state;
    CHECK_THROWS_AS(nn::adam_step<double>(params, state), capctl::ContractError);
  }
}

TEST_CASE("learning-rate schedule") {
  CHECK(nn::scheduled_lr(5e-4, 0.8, 3, 0) == doctest::Approx(5e-4));
  CHECK(nn::scheduled_lr(5e-4, 0.8, 3, 2) == doctest::Approx(5e-4));
  CHECK(nn::scheduled_lr(5e-4, 0.8, 3, 6) == doctest::Approx(3.2e-4).epsilon(1e-12));
}

TEST_CASE("gradient clipping bounds the global norm") {
  std::vector<TD> params{TD::from_vector({2}, {0, 0}, true), TD::from_vector({1}, {0}, true)};
  params[0].mutable_grad()[0] = 3.0;
  params[0].mutable_grad()[1] = 4.0;
  params[1].mutable_grad()[0] = 12.0;
  const double norm = nn::clip_grad_norm<double>(params, 5.0);
  CHECK(norm == doctest::Approx(13.0));
  CHECK(params[0].grad()[0] == doctest::Approx(3.0 * 5.0 / 13.0));
  CHECK(params[1].grad()[0] == doctest::Approx(12.0 * 5.0 / 13.0));
}

TEST_CASE("finite-difference checker on a quadratic") {
  auto x = TD::from_vector({3}, {0.5, -1.5, 2.0}, true);
  auto report = nn::finite_diff_check([&] { return t::sum(t::mul(x, x)); }, {x});
  CHECK(report.max_rel_error < 1e-10);

  nn::GradCheckOptions faulty;
  faulty.analytic_offset = 1e-2;
  auto bad = nn::finite_diff_check([&] { return t::sum(t::mul(x, x)); }, {x}, faulty);
  CHECK_FALSE(bad.passed(1e-4));
}

TEST_CASE("kernel gradients over random shapes and seeds") {
  // Step 1e-4 keeps central-difference round-off below the tolerance for
  // elements whose true gradient is tiny.
  nn::GradCheckOptions opts;
  opts.step = 1e-4;
  for (std::uint64_t seed = 1; seed <= 12; ++seed) {
    Rng rng(seed);
    std::uniform_int_distribution<int> ext(1, 5);
    const std::size_t m = ext(rng), k = ext(rng), n = ext(rng);
    CAPTURE(seed);

    auto a = random_tensor({m, k}, rng);
    auto b = random_tensor({k, n}, rng);
    auto wmn = random_tensor({m, n}, rng, false);
    CHECK(nn::finite_diff_check([&] { return weighted_sum(t::matmul(a, b), wmn); }, {a, b}, opts)
              .passed(1e-4));

    auto x = random_tensor({m, n}, rng);
    for (std::size_t axis = 0; axis < 2; ++axis) {
      CHECK(nn::finite_diff_check([&] { return weighted_sum(t::softmax(x, axis), wmn); }, {x}, opts)
                .passed(1e-4));
      CHECK(nn::finite_diff_check([&] { return weighted_sum(t::log_softmax(x, axis), wmn); }, {x}, opts)
                .passed(1e-4));
    }

    auto y = random_tensor({m, k}, rng);
    auto wcat = random_tensor({m, n + k}, rng, false);
    CHECK(nn::finite_diff_check([&] { return weighted_sum(t::concat<double>({x, y}, 1), wcat); },
                                {x, y}, opts)
              .passed(1e-4));

    auto hp = random_tensor({m, n}, rng);
    auto cp = random_tensor({m, n}, rng);
    auto lstm = nn::LstmParams<double>::create(k, n, rng);
    CHECK(nn::finite_diff_check(
              [&] {
                auto [h, c] = nn::lstm_cell(a, hp, cp, lstm);
                return t::add(weighted_sum(h, wmn), weighted_sum(c, wmn));
              },
              {lstm.weight, lstm.bias, a, hp, cp}, opts)
              .passed(1e-4));

    auto gru = nn::GruParams<double>::create(k, n, rng);
    CHECK(nn::finite_diff_check([&] { return weighted_sum(nn::gru_cell(a, hp, gru), wmn); },
                                {gru.w_input, gru.w_hidden, gru.w_candidate, gru.bias, a, hp}, opts)
              .passed(1e-4));

    CHECK(nn::finite_diff_check([&] { return weighted_sum(t::normalize_rows(x), wmn); }, {x}, opts)
              .passed(1e-4));

    auto alpha = random_tensor({m, 3}, rng);
    auto values = random_tensor({m * 3, n}, rng);
    CHECK(nn::finite_diff_check([&] { return weighted_sum(t::weighted_row_sum(alpha, values), wmn); },
                                {alpha, values}, opts)
              .passed(1e-4));

    auto q = random_tensor({m, n}, rng);
    auto wrep = random_tensor({m * 2, n}, rng, false);
    CHECK(nn::finite_diff_check([&] { return weighted_sum(t::repeat_rows(q, 2), wrep); }, {q}, opts)
              .passed(1e-4));
  }
}

TEST_CASE("recording can be disabled") {
  auto x = TD::scalar(2.0, true);
  t::NoGradGuard guard;
  auto y = t::mul(x, x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("fixed seed gives bit-identical results") {
  auto run = [] {
    Rng rng(99);
    auto p = nn::LstmParams<float>::create(4, 8, rng);
    auto x = Tensor<float>::full({2, 4}, 0.25f);
    auto [h, c] = nn::lstm_cell(x, Tensor<float>::zeros({2, 8}), Tensor<float>::zeros({2, 8}), p);
    return std::vector<float>(h.data().begin(), h.data().end());
  };
  CHECK(run() == run());
}

TEST_CASE("embedding gathers rows and scatters gradients") {
  auto table = Tensor<double>::from_vector({3, 2}, {1, 2, 3, 4, 5, 6}, true);
  std::vector<int> ids = {2, 0, 2};
  auto e = t::embedding(table, ids);
  REQUIRE(e.rows() == 3);
  REQUIRE(e.cols() == 2);
  CHECK(e.at(0, 1) == 6.0);
  CHECK(e.at(1, 0) == 1.0);
  t::backward(t::sum(e));
  auto g = table.grad();
  CHECK(g[0] == 1.0);
  CHECK(g[2] == 0.0);
  CHECK(g[4] == 2.0);
  std::vector<int> bad = {3};
  CHECK_THROWS_AS(t::embedding(table, bad), capctl::ContractError);
}
