// SPDX-License-Identifier: Apache-2.0
//
// Image-text matcher: a bidirectional GRU sentence encoder scored against
// region features with stacked cross attention (text to image).
//
//   s_it    = cos(v_i, e_t)
//   sbar_it = [s_it]_+ / sqrt(sum_t [s_it]_+^2)
//   alpha_t = softmax_i(tau * sbar_it),  a_t = sum_i alpha_it v_i
//   S       = mean_t cos(e_t, a_t)
#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "capctl/captioner.hpp"
#include "capctl/checkpoint.hpp"
#include "capctl/nn.hpp"
#include "capctl/rng.hpp"
#include "capctl/tensor.hpp"

namespace capctl::matcher {

using captioner::Features;
using corpus::Tokens;
using tensor::Tensor;

struct MatcherConfig {
  int embed_dim = 64;
  int hidden = 128;
  double margin = 0.2;
  double tau = 9.0;
  // Linear map of regions into the word-feature width. Required whenever
  // feature_dim != hidden.
  bool project_regions = true;

  static MatcherConfig desk() { return {}; }
  static MatcherConfig paper() { return {300, 1024, 0.2, 9.0, true}; }

  void validate() const;

  template <typename S, typename F>
  static void fields(S& s, F&& f) {
    f("embed_dim", s.embed_dim);
    f("hidden", s.hidden);
    f("margin", s.margin);
    f("tau", s.tau);
    f("project_regions", s.project_regions);
  }
};

struct MatcherDims {
  std::size_t feature_dim = 64;
  std::size_t embed_dim = 64;
  std::size_t hidden = 128;
  std::size_t vocab = 0;
  bool project = true;

  bool operator==(const MatcherDims&) const = default;
};

MatcherDims make_dims(const MatcherConfig& config, std::size_t feature_dim, std::size_t vocab);

template <typename T>
struct MatcherParams {
  MatcherDims dims;
  double margin = 0.2;
  double tau = 9.0;

  Tensor<T> embed;            // [W x E]
  nn::GruParams<T> fwd, bwd;  // input E, hidden H
  Tensor<T> w_r, b_r;         // [D_f x H], [H]; empty without projection

  static MatcherParams create(const MatcherDims& dims, double margin, double tau, Rng& rng);
  static MatcherParams zeros(const MatcherDims& dims, double margin, double tau);

  nn::NamedParams<T> named() const;
  std::vector<Tensor<T>> trainable() const { return nn::tensors_of(named()); }
};

template <typename To, typename From>
MatcherParams<To> cast_params(const MatcherParams<From>& p);

/// Word features [n x H], e_t = (forward_t + backward_t) / 2.
template <typename T>
Tensor<T> encode_text(const MatcherParams<T>& p, const Tokens& tokens);

/// Encodes several captions at once; same values as encode_text per caption.
template <typename T>
std::vector<Tensor<T>> encode_texts(const MatcherParams<T>& p, const std::vector<Tokens>& captions);

/// Region features in the joint space [k x H].
template <typename T>
Tensor<T> encode_regions(const MatcherParams<T>& p, const Features& features);

template <typename T>
struct SimilarityBreakdown {
  Tensor<T> s;      // [k x n]
  Tensor<T> s_bar;  // [k x n]
  Tensor<T> alpha;  // [k x n], columns sum to 1
  Tensor<T> a_v;    // [n x width]
  Tensor<T> r;      // [n x 1]
  Tensor<T> S;      // scalar
};

template <typename T>
SimilarityBreakdown<T> similarity(const Tensor<T>& regions, const Tensor<T>& words, T tau);

/// S(I, T) for one scene and one non-empty caption.
template <typename T>
Tensor<T> score(const MatcherParams<T>& p, const Features& features, const Tokens& tokens);

/// [margin - S_pos + S_neg]_+
template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& s_pos, const Tensor<T>& s_neg, T margin);
double triplet_loss(double s_pos, double s_neg, double margin);

/// Score given to an empty candidate, below every attainable similarity.
constexpr double kEmptyCaptionScore = -2.0;

struct Selection {
  std::size_t index = 0;
  std::vector<double> scores;
};

/// Highest-scoring candidate; ties go to the lowest index.
Selection select_caption(const MatcherParams<float>& p, const Features& features, const std::vector<Tokens>& candidates);
/// The argmax rule applied to precomputed scores.
std::size_t argmax_first(std::span<const double> scores);

void save_params(checkpoint::Checkpoint& ck, const MatcherParams<float>& p, std::uint32_t vocab_hash);
MatcherParams<float> load_params(const checkpoint::Checkpoint& ck);

}  // namespace capctl::matcher
