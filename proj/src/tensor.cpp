// SPDX-License-Identifier: Apache-2.0
#include "capctl/tensor.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace capctl::tensor {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<std::uint64_t> g_seq{0};

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
std::shared_ptr<Node<T>> new_node(Shape shape, std::vector<T> value) {
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->seq = g_seq.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Wraps a freshly computed value; records parents and the backward rule only
// when recording is on and some input needs a gradient.
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> value, std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(Node<T>&)> fn) {
  auto node = new_node<T>(std::move(shape), std::move(value));
  if (g_grad_enabled) {
    bool any = false;
    for (const auto* in : inputs) any = any || in->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> record_many(Shape shape, std::vector<T> value, const std::vector<Tensor<T>>& inputs,
                      std::function<void(Node<T>&)> fn) {
  auto node = new_node<T>(std::move(shape), std::move(value));
  if (g_grad_enabled) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward_fn = std::move(fn);
    }
  }
  return Tensor<T>(std::move(node));
}

void require_rank2(const Shape& s, const char* op) {
  if (s.size() != 2) {
    throw DimensionError(std::string(op) + ": expected rank-2 tensor, got " + shape_str(s));
  }
}

void require_same(const Shape& a, const Shape& b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                         shape_str(b));
  }
}

// Splits a shape around `axis` into (outer, extent, inner) products.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis, const char* op) {
  if (axis >= s.size()) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for " + shape_str(s));
  }
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.extent = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

template <typename T, typename F, typename G>
Tensor<T> unary(const Tensor<T>& a, F forward, G local_grad) {
  std::vector<T> out(a.numel());
  auto in = a.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = forward(in[i]);
  return record<T>(a.shape(), std::move(out), {&a}, [local_grad](Node<T>& self) {
    auto& p = *self.parents[0];
    T* g = p.grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      g[i] += self.grad[i] * local_grad(p.value[i], self.value[i]);
    }
  });
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T fill, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  auto n = shape_numel(shape);
  auto node = new_node<T>(std::move(shape), std::vector<T>(n, fill));
  node->requires_grad = requires_grad;
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::from_vector(Shape shape, std::vector<T> values, bool requires_grad) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                         std::to_string(values.size()) + " values");
  }
  auto node = new_node<T>(std::move(shape), std::move(values));
  node->requires_grad = requires_grad;
  return Tensor<T>(std::move(node));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return from_vector({1}, {value}, requires_grad);
}

template <typename T>
std::size_t Tensor<T>::dim(std::size_t axis) const {
  if (axis >= rank()) throw DimensionError("axis out of range for " + shape_str(shape()));
  return shape()[axis];
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return rank() == 1 ? 1 : dim(0);
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return rank() == 1 ? dim(0) : dim(1);
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
T Tensor<T>::at(std::size_t r, std::size_t c) const {
  return node_->value.at(r * cols() + c);
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return from_vector(shape(), node_->value, false);
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " +
                        (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<Node<T>*> stack{loss.node()};
  seen.insert(loss.node());
  while (!stack.empty()) {
    Node<T>* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  // Creation order is a topological order of the graph.
  std::sort(order.begin(), order.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

  loss.node()->grad_data()[0] += T(1);
  for (Node<T>* n : order) {
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2(a.shape(), "matmul");
  require_rank2(b.shape(), "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw DimensionError("matmul: inner extents differ for " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), m, n).noalias() =
      ConstMap<T>(a.data().data(), m, k) * ConstMap<T>(b.data().data(), k, n);
  return record<T>({m, n}, std::move(out), {&a, &b}, [m, k, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    ConstMap<T> g(self.grad.data(), m, n);
    if (pa.requires_grad) {
      MutMap<T>(pa.grad_data(), m, k).noalias() += g * ConstMap<T>(pb.value.data(), k, n).transpose();
    }
    if (pb.requires_grad) {
      MutMap<T>(pb.grad_data(), k, n).noalias() += ConstMap<T>(pa.value.data(), m, k).transpose() * g;
    }
  });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  require_rank2(a.shape(), "transpose");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * n);
  MutMap<T>(out.data(), n, m) = ConstMap<T>(a.data().data(), m, n).transpose();
  return record<T>({n, m}, std::move(out), {&a}, [m, n](Node<T>& self) {
    auto& p = *self.parents[0];
    MutMap<T>(p.grad_data(), m, n) += ConstMap<T>(self.grad.data(), n, m).transpose();
  });
}

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "add");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
  return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    for (auto& p : self.parents) {
      if (!p->requires_grad) continue;
      T* g = p->grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
  return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
  return record<T>(a.shape(), std::move(out), {&a, &b}, [](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pb.value[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * pa.value[i];
    }
  });
}

template <typename T>
Tensor<T> add_bias(const Tensor<T>& a, const Tensor<T>& bias) {
  require_rank2(a.shape(), "add_bias");
  const auto m = a.dim(0), n = a.dim(1);
  if (bias.numel() != n) {
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not match " +
                         shape_str(a.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] + bias.data()[c];
  }
  return record<T>(a.shape(), std::move(out), {&a, &bias}, [m, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pb = *self.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_data();
      for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    }
    if (pb.requires_grad) {
      T* g = pb.grad_data();
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t c = 0; c < n; ++c) g[c] += self.grad[r * n + c];
      }
    }
  });
}

template <typename T>
Tensor<T> mul_colwise(const Tensor<T>& a, const Tensor<T>& c) {
  require_rank2(a.shape(), "mul_colwise");
  const auto m = a.dim(0), n = a.dim(1);
  if (c.numel() != m) {
    throw DimensionError("mul_colwise: column " + shape_str(c.shape()) + " does not match " +
                         shape_str(a.shape()));
  }
  std::vector<T> out(a.numel());
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = a.data()[r * n + j] * c.data()[r];
  }
  return record<T>(a.shape(), std::move(out), {&a, &c}, [m, n](Node<T>& self) {
    auto& pa = *self.parents[0];
    auto& pc = *self.parents[1];
    if (pa.requires_grad) {
      T* g = pa.grad_data();
      for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < n; ++j) g[r * n + j] += self.grad[r * n + j] * pc.value[r];
      }
    }
    if (pc.requires_grad) {
      T* g = pc.grad_data();
      for (std::size_t r = 0; r < m; ++r) {
        T acc = 0;
        for (std::size_t j = 0; j < n; ++j) acc += self.grad[r * n + j] * pa.value[r * n + j];
        g[r] += acc;
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary(
      a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary(
      a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return T(1) / (T(1) + std::exp(-x)); },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  return unary(
      a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

// ---------------------------------------------------------------------------
// Structural
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat of zero tensors");
  const Shape& first = parts.front().shape();
  auto base = split_axis(first, axis, "concat");
  Shape out_shape = first;
  out_shape[axis] = 0;
  std::vector<std::size_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    bool ok = s.size() == first.size();
    for (std::size_t i = 0; ok && i < s.size(); ++i) ok = (i == axis) || s[i] == first[i];
    if (!ok) {
      throw DimensionError("concat: non-axis extents differ between " + shape_str(first) +
                           " and " + shape_str(s));
    }
    extents.push_back(s[axis]);
    out_shape[axis] += s[axis];
  }
  const std::size_t outer = base.outer, inner = base.inner, total = out_shape[axis];
  std::vector<T> out(shape_numel(out_shape));
  std::size_t offset = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto src = parts[k].data();
    const std::size_t block = extents[k] * inner;
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(src.data() + o * block, block, out.data() + (o * total + offset) * inner);
    }
    offset += extents[k];
  }
  return record_many<T>(out_shape, std::move(out), parts,
                        [outer, inner, total, extents](Node<T>& self) {
                          std::size_t off = 0;
                          for (std::size_t k = 0; k < self.parents.size(); ++k) {
                            auto& p = *self.parents[k];
                            const std::size_t block = extents[k] * inner;
                            if (p.requires_grad) {
                              T* g = p.grad_data();
                              for (std::size_t o = 0; o < outer; ++o) {
                                const T* src = self.grad.data() + (o * total + off) * inner;
                                for (std::size_t i = 0; i < block; ++i) g[o * block + i] += src[i];
                              }
                            }
                            off += extents[k];
                          }
                        });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, std::size_t axis, std::size_t begin, std::size_t end) {
  auto sp = split_axis(a.shape(), axis, "slice");
  if (begin >= end || end > sp.extent) {
    throw DimensionError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for " + shape_str(a.shape()) + " axis " +
                         std::to_string(axis));
  }
  Shape out_shape = a.shape();
  out_shape[axis] = end - begin;
  const std::size_t outer = sp.outer, inner = sp.inner, extent = sp.extent, width = end - begin;
  std::vector<T> out(shape_numel(out_shape));
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(a.data().data() + (o * extent + begin) * inner, width * inner,
                out.data() + o * width * inner);
  }
  return record<T>(out_shape, std::move(out), {&a},
                   [outer, inner, extent, width, begin](Node<T>& self) {
                     T* g = self.parents[0]->grad_data();
                     for (std::size_t o = 0; o < outer; ++o) {
                       T* dst = g + (o * extent + begin) * inner;
                       const T* src = self.grad.data() + o * width * inner;
                       for (std::size_t i = 0; i < width * inner; ++i) dst[i] += src[i];
                     }
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " cannot become " +
                         shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return record<T>(std::move(shape), std::move(out), {&a}, [](Node<T>& self) {
    T* g = self.parents[0]->grad_data();
    for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  auto sp = split_axis(a.shape(), axis, "softmax");
  const auto in = a.data();
  for (T x : in) {
    if (!std::isfinite(x)) throw NumericError("softmax: non-finite input");
  }
  const std::size_t outer = sp.outer, extent = sp.extent, inner = sp.inner;
  std::vector<T> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T mx = in[base];
      for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, in[base + e * inner]);
      T total = 0;
      for (std::size_t e = 0; e < extent; ++e) {
        T v = std::exp(in[base + e * inner] - mx);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }
  return record<T>(a.shape(), std::move(out), {&a}, [outer, extent, inner](Node<T>& self) {
    T* g = self.parents[0]->grad_data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        T dot = 0;
        for (std::size_t e = 0; e < extent; ++e) {
          dot += self.grad[base + e * inner] * self.value[base + e * inner];
        }
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t j = base + e * inner;
          g[j] += self.value[j] * (self.grad[j] - dot);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, std::size_t axis) {
  auto sp = split_axis(a.shape(), axis, "log_softmax");
  const auto in = a.data();
  for (T x : in) {
    if (!std::isfinite(x)) throw NumericError("log_softmax: non-finite input");
  }
  const std::size_t outer = sp.outer, extent = sp.extent, inner = sp.inner;
  std::vector<T> out(a.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      T mx = in[base];
      for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, in[base + e * inner]);
      T total = 0;
      for (std::size_t e = 0; e < extent; ++e) total += std::exp(in[base + e * inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] = in[base + e * inner] - lse;
    }
  }
  return record<T>(a.shape(), std::move(out), {&a}, [outer, extent, inner](Node<T>& self) {
    T* g = self.parents[0]->grad_data();
    for (std::size_t o = 0; o < outer; ++o) {
      for (std::size_t i = 0; i < inner; ++i) {
        const std::size_t base = o * extent * inner + i;
        T gsum = 0;
        for (std::size_t e = 0; e < extent; ++e) gsum += self.grad[base + e * inner];
        for (std::size_t e = 0; e < extent; ++e) {
          const std::size_t j = base + e * inner;
          g[j] += self.grad[j] - std::exp(self.value[j]) * gsum;
        }
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T total = 0;
  for (T x : a.data()) total += x;
  return record<T>({1}, {total}, {&a}, [](Node<T>& self) {
    auto& p = *self.parents[0];
    T* g = p.grad_data();
    for (std::size_t i = 0; i < p.value.size(); ++i) g[i] += self.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> sum_axis(const Tensor<T>& a, std::size_t axis) {
  require_rank2(a.shape(), "sum_axis");
  if (axis > 1) throw DimensionError("sum_axis: axis must be 0 or 1");
  const auto m = a.dim(0), n = a.dim(1);
  Shape out_shape = axis == 0 ? Shape{1, n} : Shape{m, 1};
  std::vector<T> out(axis == 0 ? n : m, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t c = 0; c < n; ++c) out[axis == 0 ? c : r] += a.data()[r * n + c];
  }
  return record<T>(out_shape, std::move(out), {&a}, [m, n, axis](Node<T>& self) {
    T* g = self.parents[0]->grad_data();
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t c = 0; c < n; ++c) g[r * n + c] += self.grad[axis == 0 ? c : r];
    }
  });
}

// ---------------------------------------------------------------------------
// Indexing and attention helpers
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> embedding(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2(table.shape(), "embedding");
  const auto vocab = table.dim(0), width = table.dim(1);
  if (ids.empty()) throw ContractError("embedding: empty id list");
  std::vector<int> rows(ids.begin(), ids.end());
  std::vector<T> out(rows.size() * width);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || static_cast<std::size_t>(rows[r]) >= vocab) {
      throw ContractError("embedding: id " + std::to_string(rows[r]) + " outside table of " +
                          std::to_string(vocab) + " rows");
    }
    std::copy_n(table.data().data() + rows[r] * width, width, out.data() + r * width);
  }
  const std::size_t n = rows.size();
  return record<T>({n, width}, std::move(out), {&table},
                   [rows = std::move(rows), width](Node<T>& self) {
                     T* g = self.parents[0]->grad_data();
                     for (std::size_t r = 0; r < rows.size(); ++r) {
                       T* dst = g + rows[r] * width;
                       const T* src = self.grad.data() + r * width;
                       for (std::size_t c = 0; c < width; ++c) dst[c] += src[c];
                     }
                   });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& a, std::span<const int> ids) {
  require_rank2(a.shape(), "pick");
  const auto m = a.dim(0), n = a.dim(1);
  if (ids.size() != m) {
    throw DimensionError("pick: " + std::to_string(ids.size()) + " ids for " +
                         shape_str(a.shape()));
  }
  std::vector<int> cols(ids.begin(), ids.end());
  std::vector<T> out(m);
  for (std::size_t r = 0; r < m; ++r) {
    if (cols[r] < 0 || static_cast<std::size_t>(cols[r]) >= n) {
      throw ContractError("pick: id " + std::to_string(cols[r]) + " outside " +
                          std::to_string(n) + " columns");
    }
    out[r] = a.data()[r * n + cols[r]];
  }
  return record<T>({m, 1}, std::move(out), {&a}, [cols = std::move(cols), n](Node<T>& self) {
    T* g = self.parents[0]->grad_data();
    for (std::size_t r = 0; r < cols.size(); ++r) g[r * n + cols[r]] += self.grad[r];
  });
}

template <typename T>
Tensor<T> repeat_rows(const Tensor<T>& a, std::size_t times) {
  require_rank2(a.shape(), "repeat_rows");
  if (times == 0) throw DimensionError("repeat_rows: zero repetitions");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<T> out(m * times * n);
  for (std::size_t r = 0; r < m; ++r) {
    for (std::size_t t = 0; t < times; ++t) {
      std::copy_n(a.data().data() + r * n, n, out.data() + (r * times + t) * n);
    }
  }
  return record<T>({m * times, n}, std::move(out), {&a}, [m, n, times](Node<T>& self) {
    T* g = self.parents[0]->grad_data();
    for (std::size_t r = 0; r < m; ++r) {
      for (std::size_t t = 0; t < times; ++t) {
        const T* src = self.grad.data() + (r * times + t) * n;
        for (std::size_t c = 0; c < n; ++c) g[r * n + c] += src[c];
      }
    }
  });
}

template <typename T>
Tensor<T> weighted_row_sum(const Tensor<T>& weights, const Tensor<T>& values) {
  require_rank2(weights.shape(), "weighted_row_sum");
  require_rank2(values.shape(), "weighted_row_sum");
  const auto batch = weights.dim(0), k = weights.dim(1), d = values.dim(1);
  if (values.dim(0) != batch * k) {
    throw DimensionError("weighted_row_sum: weights " + shape_str(weights.shape()) +
                         " incompatible with values " + shape_str(values.shape()));
  }
  std::vector<T> out(batch * d, T(0));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t i = 0; i < k; ++i) {
      const T w = weights.data()[b * k + i];
      const T* v = values.data().data() + (b * k + i) * d;
      for (std::size_t c = 0; c < d; ++c) out[b * d + c] += w * v[c];
    }
  }
  return record<T>({batch, d}, std::move(out), {&weights, &values},
                   [batch, k, d](Node<T>& self) {
                     auto& pw = *self.parents[0];
                     auto& pv = *self.parents[1];
                     for (std::size_t b = 0; b < batch; ++b) {
                       const T* g = self.grad.data() + b * d;
                       for (std::size_t i = 0; i < k; ++i) {
                         const std::size_t row = b * k + i;
                         if (pw.requires_grad) {
                           T acc = 0;
                           for (std::size_t c = 0; c < d; ++c) acc += g[c] * pv.value[row * d + c];
                           pw.grad_data()[row] += acc;
                         }
                         if (pv.requires_grad) {
                           const T w = pw.value[row];
                           T* gv = pv.grad_data() + row * d;
                           for (std::size_t c = 0; c < d; ++c) gv[c] += w * g[c];
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& a) {
  require_rank2(a.shape(), "normalize_rows");
  const auto m = a.dim(0), n = a.dim(1);
  std::vector<T> out(a.numel(), T(0));
  std::vector<T> norms(m, T(0));
  for (std::size_t r = 0; r < m; ++r) {
    T ss = 0;
    for (std::size_t c = 0; c < n; ++c) ss += a.data()[r * n + c] * a.data()[r * n + c];
    norms[r] = std::sqrt(ss);
    if (norms[r] > T(0)) {
      for (std::size_t c = 0; c < n; ++c) out[r * n + c] = a.data()[r * n + c] / norms[r];
    }
  }
  return record<T>(a.shape(), std::move(out), {&a},
                   [m, n, norms = std::move(norms)](Node<T>& self) {
                     T* g = self.parents[0]->grad_data();
                     for (std::size_t r = 0; r < m; ++r) {
                       if (norms[r] == T(0)) continue;
                       const T* u = self.value.data() + r * n;
                       const T* gy = self.grad.data() + r * n;
                       T dot = 0;
                       for (std::size_t c = 0; c < n; ++c) dot += gy[c] * u[c];
                       for (std::size_t c = 0; c < n; ++c) {
                         g[r * n + c] += (gy[c] - u[c] * dot) / norms[r];
                       }
                     }
                   });
}

// ---------------------------------------------------------------------------
// Instantiations
// ---------------------------------------------------------------------------

#define CAPCTL_INSTANTIATE(T)                                                              \
  template class Tensor<T>;                                                                \
  template void backward<T>(const Tensor<T>&);                                             \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                       \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                           \
  template Tensor<T> add_bias<T>(const Tensor<T>&, const Tensor<T>&);                      \
  template Tensor<T> mul_colwise<T>(const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                        \
  template Tensor<T> add_scalar<T>(const Tensor<T>&, T);                                   \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                         \
  template Tensor<T> tanh<T>(const Tensor<T>&);                                            \
  template Tensor<T> relu<T>(const Tensor<T>&);                                            \
  template Tensor<T> log<T>(const Tensor<T>&);                                             \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                \
  template Tensor<T> slice<T>(const Tensor<T>&, std::size_t, std::size_t, std::size_t);    \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                  \
  template Tensor<T> softmax<T>(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> log_softmax<T>(const Tensor<T>&, std::size_t);                        \
  template Tensor<T> sum<T>(const Tensor<T>&);                                             \
  template Tensor<T> mean<T>(const Tensor<T>&);                                            \
  template Tensor<T> sum_axis<T>(const Tensor<T>&, std::size_t);                           \
  template Tensor<T> embedding<T>(const Tensor<T>&, std::span<const int>);                 \
  template Tensor<T> pick<T>(const Tensor<T>&, std::span<const int>);                      \
  template Tensor<T> repeat_rows<T>(const Tensor<T>&, std::size_t);                        \
  template Tensor<T> weighted_row_sum<T>(const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> normalize_rows<T>(const Tensor<T>&);

CAPCTL_INSTANTIATE(float)
CAPCTL_INSTANTIATE(double)

#undef CAPCTL_INSTANTIATE

}  // namespace capctl::tensor
