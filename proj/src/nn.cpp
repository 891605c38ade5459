// SPDX-License-Identifier: Apache-2.0
#include "capctl/nn.hpp"

#include <cmath>
#include <limits>

namespace capctl::nn {

namespace t = capctl::tensor;

template <typename T>
std::vector<Tensor<T>> tensors_of(const NamedParams<T>& named) {
  std::vector<Tensor<T>> out;
  out.reserve(named.size());
  for (const auto& [name, tensor] : named) out.push_back(tensor);
  return out;
}

template <typename T>
void xavier_uniform(Tensor<T>& w, Rng& rng) {
  const double fan_in = static_cast<double>(w.rows());
  const double fan_out = static_cast<double>(w.cols());
  const double bound = std::sqrt(6.0 / (fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (auto& x : w.mutable_data()) x = static_cast<T>(dist(rng));
}

// ---------------------------------------------------------------------------
// LSTM
// ---------------------------------------------------------------------------

template <typename T>
LstmParams<T> LstmParams<T>::zeros(std::size_t input, std::size_t hidden) {
  LstmParams p;
  p.input = input;
  p.hidden = hidden;
  p.weight = Tensor<T>::zeros({input + hidden, 4 * hidden}, true);
  p.bias = Tensor<T>::zeros({4 * hidden}, true);
  return p;
}

template <typename T>
LstmParams<T> LstmParams<T>::create(std::size_t input, std::size_t hidden, Rng& rng) {
  auto p = zeros(input, hidden);
  xavier_uniform(p.weight, rng);
  return p;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(const Tensor<T>& x, const Tensor<T>& h_prev,
                                          const Tensor<T>& c_prev, const LstmParams<T>& p) {
  if (x.rank() != 2 || x.cols() != p.input || h_prev.rank() != 2 || h_prev.cols() != p.hidden ||
      c_prev.shape() != h_prev.shape() || x.rows() != h_prev.rows()) {
    throw DimensionError("lstm_cell: x " + t::shape_str(x.shape()) + ", h " +
                         t::shape_str(h_prev.shape()) + ", c " + t::shape_str(c_prev.shape()) +
                         " do not fit input " + std::to_string(p.input) + " hidden " +
                         std::to_string(p.hidden));
  }
  const std::size_t h = p.hidden;
  auto gates = t::add_bias(t::matmul(t::concat<T>({x, h_prev}, 1), p.weight), p.bias);
  auto i = t::sigmoid(t::slice(gates, 1, 0, h));
  auto f = t::sigmoid(t::slice(gates, 1, h, 2 * h));
  auto g = t::tanh(t::slice(gates, 1, 2 * h, 3 * h));
  auto o = t::sigmoid(t::slice(gates, 1, 3 * h, 4 * h));
  auto c = t::add(t::mul(f, c_prev), t::mul(i, g));
  auto out = t::mul(o, t::tanh(c));
  return {out, c};
}

// ---------------------------------------------------------------------------
// GRU
// ---------------------------------------------------------------------------

template <typename T>
GruParams<T> GruParams<T>::zeros(std::size_t input, std::size_t hidden) {
  GruParams p;
  p.input = input;
  p.hidden = hidden;
  p.w_input = Tensor<T>::zeros({input, 3 * hidden}, true);
  p.w_hidden = Tensor<T>::zeros({hidden, 2 * hidden}, true);
  p.w_candidate = Tensor<T>::zeros({hidden, hidden}, true);
  p.bias = Tensor<T>::zeros({3 * hidden}, true);
  return p;
}

template <typename T>
GruParams<T> GruParams<T>::create(std::size_t input, std::size_t hidden, Rng& rng) {
  auto p = zeros(input, hidden);
  xavier_uniform(p.w_input, rng);
  xavier_uniform(p.w_hidden, rng);
  xavier_uniform(p.w_candidate, rng);
  return p;
}

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h_prev, const GruParams<T>& p) {
  if (x.rank() != 2 || x.cols() != p.input || h_prev.rank() != 2 || h_prev.cols() != p.hidden ||
      x.rows() != h_prev.rows()) {
    throw DimensionError("gru_cell: x " + t::shape_str(x.shape()) + ", h " +
                         t::shape_str(h_prev.shape()) + " do not fit input " +
                         std::to_string(p.input) + " hidden " + std::to_string(p.hidden));
  }
  const std::size_t h = p.hidden;
  auto xs = t::add_bias(t::matmul(x, p.w_input), p.bias);
  auto hs = t::matmul(h_prev, p.w_hidden);
  auto z = t::sigmoid(t::add(t::slice(xs, 1, 0, h), t::slice(hs, 1, 0, h)));
  auto r = t::sigmoid(t::add(t::slice(xs, 1, h, 2 * h), t::slice(hs, 1, h, 2 * h)));
  auto n = t::tanh(t::add(t::slice(xs, 1, 2 * h, 3 * h), t::matmul(t::mul(r, h_prev), p.w_candidate)));
  return t::add(n, t::mul(z, t::sub(h_prev, n)));
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), T(0));
      state.v.emplace_back(p.numel(), T(0));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: optimizer state tracks " + std::to_string(state.m.size()) +
                        " parameters, got " + std::to_string(params.size()));
  }
  for (std::size_t k = 0; k < params.size(); ++k) {
    if (!params[k].has_grad()) {
      throw ContractError("adam_step: parameter " + std::to_string(k) + " has no gradient");
    }
    if (state.m[k].size() != params[k].numel()) {
      throw ContractError("adam_step: state shape mismatch for parameter " + std::to_string(k));
    }
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto value = params[k].mutable_data();
    auto grad = params[k].grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < value.size(); ++i) {
      m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
      v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
      const double m_hat = m[i] / bc1;
      const double v_hat = v[i] / bc2;
      value[i] -= static_cast<T>(state.lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
    params[k].zero_grad();
  }
}

template <typename T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm) {
  double ss = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad()) ss += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(ss);
  if (max_norm > 0.0 && norm > max_norm) {
    const T factor = static_cast<T>(max_norm / norm);
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

template <typename T>
void zero_grads(std::span<Tensor<T>> params) {
  for (auto& p : params) p.zero_grad();
}

double scheduled_lr(double lr0, double factor, int interval, int epoch) {
  if (interval <= 0) return lr0;
  return lr0 * std::pow(factor, epoch / interval);
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& build_loss,
                                  std::vector<Tensor<double>> params, GradCheckOptions options) {
  GradCheckReport report;
  for (auto& p : params) p.zero_grad();
  auto loss = build_loss();
  tensor::backward(loss);

  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) analytic.assign(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double offset) {
        tensor::NoGradGuard guard;
        values[i] = saved + offset;
        return build_loss().item();
      };
      const double h = options.step;
      const double numeric = options.fourth_order
                                 ? (8.0 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12.0 * h)
                                 : (at(h) - at(-h)) / (2.0 * h);
      values[i] = saved;
      const double a = analytic[i] + options.analytic_offset;
      report.checked += 1;
      if (!std::isfinite(numeric) || !std::isfinite(a)) {
        report.finite = false;
        report.max_rel_error = std::numeric_limits<double>::infinity();
        continue;
      }
      const double abs_err = std::abs(a - numeric);
      const double rel = abs_err / std::max(1e-12, std::abs(a) + std::abs(numeric));
      report.max_abs_error = std::max(report.max_abs_error, abs_err);
      report.max_rel_error = std::max(report.max_rel_error, rel);
    }
    p.zero_grad();
  }
  return report;
}

#define CAPCTL_INSTANTIATE(T)                                                                 \
  template std::vector<Tensor<T>> tensors_of<T>(const NamedParams<T>&);                       \
  template void xavier_uniform<T>(Tensor<T>&, Rng&);                                          \
  template struct LstmParams<T>;                                                              \
  template struct GruParams<T>;                                                               \
  template std::pair<Tensor<T>, Tensor<T>> lstm_cell<T>(const Tensor<T>&, const Tensor<T>&,   \
                                                        const Tensor<T>&, const LstmParams<T>&); \
  template Tensor<T> gru_cell<T>(const Tensor<T>&, const Tensor<T>&, const GruParams<T>&);    \
  template void adam_step<T>(std::span<Tensor<T>>, AdamState<T>&);                            \
  template double clip_grad_norm<T>(std::span<Tensor<T>>, double);                            \
  template void zero_grads<T>(std::span<Tensor<T>>);

CAPCTL_INSTANTIATE(float)
CAPCTL_INSTANTIATE(double)

#undef CAPCTL_INSTANTIATE

}  // namespace capctl::nn
