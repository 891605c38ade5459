// SPDX-License-Identifier: Apache-2.0
//
// Recurrent cells, parameter initialization, the Adam optimizer and the
// finite-difference gradient checker.
#pragma once

#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capctl/rng.hpp"
#include "capctl/tensor.hpp"

namespace capctl::nn {

using tensor::Tensor;

template <typename T>
using NamedParams = std::vector<std::pair<std::string, Tensor<T>>>;

template <typename T>
std::vector<Tensor<T>> tensors_of(const NamedParams<T>& named);

/// Xavier-uniform fill of a rank-2 tensor (fan-in = rows, fan-out = cols).
template <typename T>
void xavier_uniform(Tensor<T>& t, Rng& rng);

/// Standard LSTM with fused gate weights. Rows of `weight` are the
/// concatenated [input; hidden] features; columns are the gates in the
/// order input, forget, candidate, output.
template <typename T>
struct LstmParams {
  Tensor<T> weight;  // [(input + hidden) x 4*hidden]
  Tensor<T> bias;    // [4*hidden]
  std::size_t input = 0;
  std::size_t hidden = 0;

  static LstmParams create(std::size_t input, std::size_t hidden, Rng& rng);
  static LstmParams zeros(std::size_t input, std::size_t hidden);
};

/// One LSTM step on a batch: returns (h, c).
///   c = f * c_prev + i * g,  h = o * tanh(c)
template <typename T>
std::pair<Tensor<T>, Tensor<T>> lstm_cell(const Tensor<T>& x, const Tensor<T>& h_prev,
                                          const Tensor<T>& c_prev, const LstmParams<T>& p);

/// GRU with update gate z, reset gate r and candidate n:
///   n = tanh(x Wn + (r * h_prev) Un + bn),  h = (1 - z) * n + z * h_prev
template <typename T>
struct GruParams {
  Tensor<T> w_input;      // [input x 3*hidden], columns z, r, n
  Tensor<T> w_hidden;     // [hidden x 2*hidden], columns z, r
  Tensor<T> w_candidate;  // [hidden x hidden]
  Tensor<T> bias;         // [3*hidden]
  std::size_t input = 0;
  std::size_t hidden = 0;

  static GruParams create(std::size_t input, std::size_t hidden, Rng& rng);
  static GruParams zeros(std::size_t input, std::size_t hidden);
};

template <typename T>
Tensor<T> gru_cell(const Tensor<T>& x, const Tensor<T>& h_prev, const GruParams<T>& p);

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

template <typename T>
struct AdamState {
  std::uint64_t step = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update in place; clears gradients afterwards.
/// Throws ContractError if a registered parameter has no gradient.
template <typename T>
void adam_step(std::span<Tensor<T>> params, AdamState<T>& state);

/// Scales all gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
template <typename T>
double clip_grad_norm(std::span<Tensor<T>> params, double max_norm);

template <typename T>
void zero_grads(std::span<Tensor<T>> params);

/// lr0 * factor^floor(epoch / interval), epochs counted from 0.
double scheduled_lr(double lr0, double factor, int interval, int epoch);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t checked = 0;
  bool finite = true;

  bool passed(double tolerance) const { return finite && max_rel_error < tolerance; }
};

struct GradCheckOptions {
  double step = 1e-5;
  /// Four-point central stencil, error O(step^4) instead of O(step^2).
  bool fourth_order = false;
  /// Added to every analytic gradient entry; a fault-injection hook.
  double analytic_offset = 0.0;
};

/// Compares backward() against central differences for every element of
/// `params`. Relative error per element is
///   |analytic - numeric| / max(1e-12, |analytic| + |numeric|).
GradCheckReport finite_diff_check(const std::function<Tensor<double>()>& build_loss,
                                  std::vector<Tensor<double>> params,
                                  GradCheckOptions options = {});

}  // namespace capctl::nn
