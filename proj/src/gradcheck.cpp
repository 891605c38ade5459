// SPDX-License-Identifier: Apache-2.0
#include "capctl/gradcheck.hpp"

#include <cstdio>
#include <functional>
#include <random>

#include "capctl/captioner.hpp"
#include "capctl/matcher.hpp"
#include "capctl/rng.hpp"

namespace capctl::gradcheck {

namespace t = capctl::tensor;
using TD = t::Tensor<double>;

namespace {

TD random(t::Shape shape, Rng& rng, double lo_abs = 0.0) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(t::shape_numel(shape));
  for (auto& x : v) {
    x = g(rng);
    // Keeps inputs of kinked or log kernels away from the kink.
    if (lo_abs > 0.0) x = (x < 0 ? -1.0 : 1.0) * (std::abs(x) + lo_abs);
  }
  return TD::from_vector(std::move(shape), std::move(v), true);
}

TD positive(t::Shape shape, Rng& rng) {
  std::uniform_real_distribution<double> u(0.5, 2.0);
  std::vector<double> v(t::shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return TD::from_vector(std::move(shape), std::move(v), true);
}

// Weighted sum with fixed random weights, so no output gradient is constant.
TD probe(const TD& out, const TD& weights) { return t::sum(t::mul(out, weights)); }

TD weights_like(const TD& out, Rng& rng) {
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> v(out.data().size());
  for (auto& x : v) x = g(rng);
  return TD::from_vector(out.shape(), std::move(v));
}

template <typename P>
void randomize(P& params, Rng& rng, double spread) {
  std::normal_distribution<double> g(0.0, spread);
  for (auto& [name, tensor] : params.named()) {
    (void)name;
    auto copy = tensor;
    for (auto& x : copy.mutable_data()) x = g(rng);
  }
}

}  // namespace

std::vector<Row> run_suite(std::uint64_t seed, nn::GradCheckOptions options) {
  std::vector<Row> rows;
  Rng rng(derive_seed(seed, "gradcheck"));

  auto kernel = [&](const std::string& name, std::vector<TD> inputs, const std::function<TD()>& forward) {
    TD w;
    {
      t::NoGradGuard guard;
      w = weights_like(forward(), rng);
    }
    rows.push_back({name, nn::finite_diff_check([&] { return probe(forward(), w); }, std::move(inputs), options)});
  };

  {
    auto a = random({3, 4}, rng), b = random({4, 2}, rng);
    kernel("matmul", {a, b}, [=] { return t::matmul(a, b); });
  }
  {
    auto a = random({3, 2}, rng);
    kernel("transpose", {a}, [=] { return t::transpose(a); });
  }
  {
    auto a = random({2, 3}, rng), b = random({2, 3}, rng);
    kernel("add", {a, b}, [=] { return t::add(a, b); });
    kernel("sub", {a, b}, [=] { return t::sub(a, b); });
    kernel("mul", {a, b}, [=] { return t::mul(a, b); });
  }
  {
    auto a = random({3, 4}, rng), bias = random({4}, rng), c = random({3, 1}, rng);
    kernel("add_bias", {a, bias}, [=] { return t::add_bias(a, bias); });
    kernel("mul_colwise", {a, c}, [=] { return t::mul_colwise(a, c); });
    kernel("scale", {a}, [=] { return t::scale(a, -1.7); });
    kernel("add_scalar", {a}, [=] { return t::add_scalar(a, 0.3); });
  }
  {
    auto a = random({3, 4}, rng);
    kernel("sigmoid", {a}, [=] { return t::sigmoid(a); });
    kernel("tanh", {a}, [=] { return t::tanh(a); });
    auto k = random({3, 4}, rng, 0.1);
    kernel("relu", {k}, [=] { return t::relu(k); });
    auto p = positive({3, 4}, rng);
    kernel("log", {p}, [=] { return t::log(p); });
  }
  {
    auto a = random({2, 3}, rng), b = random({2, 2}, rng), c = random({1, 3}, rng);
    kernel("concat_cols", {a, b}, [=] { return t::concat(std::vector<TD>{a, b}, 1); });
    kernel("concat_rows", {a, c}, [=] { return t::concat(std::vector<TD>{a, c}, 0); });
    kernel("slice", {a}, [=] { return t::slice(a, 1, 1, 3); });
    kernel("reshape", {a}, [=] { return t::reshape(a, {3, 2}); });
  }
  {
    auto a = random({3, 4}, rng);
    kernel("softmax_rows", {a}, [=] { return t::softmax(a, 1); });
    kernel("softmax_cols", {a}, [=] { return t::softmax(a, 0); });
    kernel("log_softmax", {a}, [=] { return t::log_softmax(a, 1); });
    kernel("sum_axis", {a}, [=] { return t::sum_axis(a, 0); });
    kernel("mean", {a}, [=] { return t::mean(a); });
  }
  {
    auto table = random({5, 3}, rng), logits = random({3, 5}, rng);
    const std::vector<int> ids = {4, 1, 4};
    kernel("embedding", {table}, [=] { return t::embedding(table, std::span<const int>(ids)); });
    kernel("pick", {logits}, [=] { return t::pick(logits, std::span<const int>(ids)); });
    kernel("repeat_rows", {table}, [=] { return t::repeat_rows(table, 2); });
  }
  {
    auto w = random({2, 3}, rng), v = random({6, 4}, rng);
    kernel("weighted_row_sum", {w, v}, [=] { return t::weighted_row_sum(w, v); });
    kernel("normalize_rows", {v}, [=] { return t::normalize_rows(v); });
  }
  {
    auto p = nn::LstmParams<double>::create(3, 4, rng);
    for (auto& x : p.bias.mutable_data()) x = std::normal_distribution<double>(0.0, 0.5)(rng);
    auto x = random({2, 3}, rng), h = random({2, 4}, rng), c = random({2, 4}, rng);
    kernel("lstm_cell_h", {p.weight, p.bias, x, h, c}, [=] { return nn::lstm_cell(x, h, c, p).first; });
    kernel("lstm_cell_c", {p.weight, p.bias, x, h, c}, [=] { return nn::lstm_cell(x, h, c, p).second; });
  }
  {
    auto p = nn::GruParams<double>::create(3, 4, rng);
    for (auto& x : p.bias.mutable_data()) x = std::normal_distribution<double>(0.0, 0.5)(rng);
    auto x = random({2, 3}, rng), h = random({2, 4}, rng);
    kernel("gru_cell", {p.w_input, p.w_hidden, p.w_candidate, p.bias, x, h},
           [=] { return nn::gru_cell(x, h, p); });
  }

  {
    captioner::CaptionerDims d;
    d.feature_dim = 3;
    d.model_dim = 2;
    d.embed_dim = 2;
    d.hidden = 3;
    d.attention = 2;
    d.vocab = 6;
    d.beta_dim = 2;
    auto p = captioner::CaptionerParams<double>::zeros(d, corpus::ControlLayout::parse("quality,length"),
                                                       captioner::Direction::Forward);
    randomize(p, rng, 0.5);
    std::normal_distribution<double> g(0.0, 1.0);
    auto scene = [&](std::size_t k) {
      captioner::Features f(k, std::vector<float>(3));
      for (auto& r : f)
        for (auto& x : r) x = static_cast<float>(g(rng));
      return f;
    };
    const std::vector<captioner::Features> scenes = {scene(2), scene(3)};
    const std::vector<corpus::Tokens> caps = {{3, 4}, {5, 0, 3}};
    const auto beta = captioner::beta_rows<double>({{1.0f, 3.0f}, {2.0f, 0.0f}});
    auto loss = [&](const captioner::CaptionerParams<double>& m) {
      std::vector<const captioner::Features*> ptrs = {&scenes[0], &scenes[1]};
      return captioner::xe_loss(m, captioner::project_features(m, std::span<const captioner::Features* const>(ptrs)),
                                beta, caps);
    };
    rows.push_back({"xe_loss_forward", nn::finite_diff_check([&] { return loss(p); }, p.trainable(), options)});
    auto b = captioner::CaptionerParams<double>::zeros(d, p.control, captioner::Direction::Backward);
    randomize(b, rng, 0.5);
    rows.push_back({"xe_loss_backward", nn::finite_diff_check([&] { return loss(b); }, b.trainable(), options)});
  }

  {
    matcher::MatcherDims d;
    d.feature_dim = 3;
    d.embed_dim = 2;
    d.hidden = 4;
    d.vocab = 6;
    d.project = true;
    auto p = matcher::MatcherParams<double>::zeros(d, 2.5, 9.0);  // wide margin keeps the hinge active
    randomize(p, rng, 0.8);
    std::normal_distribution<double> g(0.0, 1.0);
    captioner::Features scene(3, std::vector<float>(3));
    for (auto& r : scene)
      for (auto& x : r) x = static_cast<float>(g(rng));
    rows.push_back({"triplet_loss",
                    nn::finite_diff_check(
                        [&] {
                          auto pos = matcher::score(p, scene, {1, 4, 2, 3});
                          auto neg = matcher::score(p, scene, {5, 0});
                          return matcher::triplet_loss(pos, neg, p.margin);
                        },
                        p.trainable(), options)});
  }
  return rows;
}

bool all_passed(const std::vector<Row>& rows) {
  if (rows.empty()) return false;
  for (const auto& r : rows)
    if (!r.passed()) return false;
  return true;
}

std::string format_table(const std::vector<Row>& rows) {
  std::string out;
  char line[160];
  std::snprintf(line, sizeof line, "%-20s %8s %14s %14s  %s\n", "check", "elements", "max_rel_err", "max_abs_err",
                "status");
  out += line;
  for (const auto& r : rows) {
    std::snprintf(line, sizeof line, "%-20s %8zu %14.3e %14.3e  %s\n", r.name.c_str(), r.report.checked,
                  r.report.max_rel_error, r.report.max_abs_error, r.passed() ? "PASS" : "FAIL");
    out += line;
  }
  return out;
}

}  // namespace capctl::gradcheck
