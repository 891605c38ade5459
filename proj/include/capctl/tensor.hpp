// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a recorded computation graph and reverse-mode
// differentiation. Every operation that consumes a tensor requiring
// gradients appends a node to the graph; `backward` replays the nodes in
// reverse creation order. The graph is owned by the tensors themselves, so
// it disappears once the last handle to the loss goes out of scope.
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "capctl/errors.hpp"

namespace capctl::tensor {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

/// Whether new operations are recorded on the current thread.
bool grad_enabled();

/// Disables recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  T* grad_data() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad.data();
  }
};

template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T fill, bool requires_grad = false);
  static Tensor from_vector(Shape shape, std::vector<T> values, bool requires_grad = false);
  static Tensor scalar(T value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t dim(std::size_t axis) const;
  /// Extents of a rank-2 tensor; rank-1 tensors read as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return node_->value; }
  /// In-place access for optimizers and initializers; never used while a
  /// graph that depends on this tensor is alive.
  std::span<T> mutable_data() { return node_->value; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return {node_->grad_data(), node_->value.size()}; }
  void zero_grad() { node_->grad.clear(); }

  T item() const;
  T at(std::size_t i) const { return node_->value.at(i); }
  T at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  /// A new leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Populates gradients of every requires_grad tensor reachable from `loss`.
/// Gradients accumulate (+=) into leaves across calls.
template <typename T>
void backward(const Tensor<T>& loss);

// ---------------------------------------------------------------------------
// Operations. Rank-2 operations name their operands [rows x cols].
// ---------------------------------------------------------------------------

template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> transpose(const Tensor<T>& a);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
/// a[m x n] + bias[n] broadcast over rows.
template <typename T> Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias);
/// a[m x n] * c[m x 1] broadcast over columns.
template <typename T> Tensor<T> mul_colwise(const Tensor<T>& a, const Tensor<T>& c);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& a, T offset);

template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> tanh(const Tensor<T>& a);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> log(const Tensor<T>& a);

template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);
template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Max-subtracted softmax along `axis`; throws NumericError on non-finite input.
template <typename T> Tensor<T> softmax(const Tensor<T>& a, std::size_t axis);
template <typename T> Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis);

template <typename T> Tensor<T> sum(const Tensor<T>& a);
template <typename T> Tensor<T> mean(const Tensor<T>& a);
/// Reduces one axis of a rank-2 tensor, keeping it with extent 1.
template <typename T> Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis);

/// Rows of `table` selected by `ids`: [ids.size() x E].
template <typename T> Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids);
/// out[r] = a[r, ids[r]] as [m x 1].
template <typename T> Tensor<T> pick(const Tensor<T>& a, std::span<const int> ids);
/// Each row of a[m x n] repeated `times` consecutively: [m*times x n].
template <typename T> Tensor<T> repeat_rows(const Tensor<T>& a, std::size_t times);
/// out[b] = sum_i weights[b, i] * values[b*K + i] for weights[B x K], values[B*K x D].
template <typename T>
Tensor<T> weighted_row_sum(const Tensor<T>& weights, const Tensor<T>& values);
/// Each row scaled to unit L2 norm; all-zero rows stay zero.
template <typename T> Tensor<T> normalize_rows(const Tensor<T>& a);

}  // namespace capctl::tensor
