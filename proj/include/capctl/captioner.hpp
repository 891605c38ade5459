// SPDX-License-Identifier: Apache-2.0
//
// Attention LSTM captioner conditioned on a control signal beta.
//
//   v_i   = W_v f_i + b_v                     v_bar = mean_i v_i
//   h1_t  = LSTM1([beta; h2_{t-1}; v_bar; X y_{t-1}], h1_{t-1})
//   z_i   = w_a^T tanh(W_va v_i + W_ha h1_t)   alpha = softmax(z)
//   v_hat = sum_i alpha_i v_i
//   h2_t  = LSTM2([v_hat; h1_t], h2_{t-1})
//   p_t   = softmax(W_p h2_t + b_p)
//
// A backward model is trained on reversed captions; its decoders return
// captions in natural order.
#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "capctl/checkpoint.hpp"
#include "capctl/corpus.hpp"
#include "capctl/nn.hpp"
#include "capctl/rng.hpp"
#include "capctl/tensor.hpp"

namespace capctl::captioner {

using corpus::Tokens;
using tensor::Tensor;

enum class Direction : std::uint8_t { Forward = 0, Backward = 1 };

std::string direction_name(Direction d);
Direction parse_direction(std::string_view name);

/// Region features of one scene: k rows of width D_f.
using Features = std::vector<std::vector<float>>;

struct CaptionerConfig {
  int model_dim = 64;   // D, projected region width
  int embed_dim = 64;   // E
  int hidden = 128;     // H, both LSTMs
  int attention = 64;   // A
  int max_len = 20;

  static CaptionerConfig desk() { return {}; }
  static CaptionerConfig paper() { return {1000, 1000, 1000, 512, 20}; }

  template <typename S, typename F>
  static void fields(S& s, F&& f) {
    f("model_dim", s.model_dim);
    f("embed_dim", s.embed_dim);
    f("hidden", s.hidden);
    f("attention", s.attention);
    f("max_len", s.max_len);
  }
};

struct CaptionerDims {
  std::size_t feature_dim = 64;
  std::size_t model_dim = 64;
  std::size_t embed_dim = 64;
  std::size_t hidden = 128;
  std::size_t attention = 64;
  std::size_t vocab = 0;
  std::size_t beta_dim = 1;

  bool operator==(const CaptionerDims&) const = default;
};

CaptionerDims make_dims(const CaptionerConfig& config, std::size_t feature_dim, std::size_t vocab,
                        std::size_t beta_dim);

template <typename T>
struct CaptionerParams {
  CaptionerDims dims;
  Direction direction = Direction::Forward;
  corpus::ControlLayout control;

  Tensor<T> w_v, b_v;          // [D_f x D], [D]
  Tensor<T> embed;             // [W x E]
  nn::LstmParams<T> lstm1;     // input beta + H + D + E
  Tensor<T> w_va, w_ha, w_a;   // [D x A], [H x A], [A x 1]
  nn::LstmParams<T> lstm2;     // input D + H
  Tensor<T> w_p, b_p;          // [H x W], [W]

  static CaptionerParams create(const CaptionerDims& dims, const corpus::ControlLayout& control,
                                Direction direction, Rng& rng);
  static CaptionerParams zeros(const CaptionerDims& dims, const corpus::ControlLayout& control,
                               Direction direction);

  nn::NamedParams<T> named() const;
  std::vector<Tensor<T>> trainable() const { return nn::tensors_of(named()); }

  /// Rows of LSTM1's input weight that read beta.
  void zero_beta_weights();
};

/// Converts parameters between precisions (fresh leaves, same values).
template <typename To, typename From>
CaptionerParams<To> cast_params(const CaptionerParams<From>& p);

/// Projected regions of a batch of scenes, padded to the largest region
/// count K. Padded rows are zero and masked out of the attention softmax.
template <typename T>
struct ImageBatch {
  std::size_t batch = 0;
  std::size_t regions = 0;
  Tensor<T> v;      // [B*K x D]
  Tensor<T> v_bar;  // [B x D]
  Tensor<T> att_v;  // [B*K x A], W_va v_i
  Tensor<T> mask;   // [B x K], 0 for real regions, -1e9 for padding

  /// Rows [0, n) of the batch.
  ImageBatch head(std::size_t n) const;
};

template <typename T>
ImageBatch<T> project_features(const CaptionerParams<T>& p, std::span<const Features* const> scenes);

template <typename T>
struct DecoderState {
  Tensor<T> h1, c1, h2, c2;  // [B x H]

  static DecoderState zeros(std::size_t batch, std::size_t hidden);
  /// Rows of the state selected by `rows`.
  DecoderState gather(std::span<const int> rows) const;
};

template <typename T>
struct StepResult {
  Tensor<T> log_probs;  // [B x W]
  Tensor<T> alpha;      // [B x K]
  DecoderState<T> state;
};

/// beta: [B x beta_dim].
template <typename T>
StepResult<T> decode_step(const CaptionerParams<T>& p, const ImageBatch<T>& img, const DecoderState<T>& state,
                          const Tensor<T>& beta, std::span<const int> prev_tokens);

/// Broadcasts one control vector over a batch.
template <typename T>
Tensor<T> beta_batch(std::span<const float> values, std::size_t batch);
template <typename T>
Tensor<T> beta_rows(const std::vector<std::vector<float>>& rows);

Tokens reverse_caption(Tokens tokens);

/// Sum over the batch of weight_b * (-sum_t log p(y_t | y_<t, beta)),
/// end token included. Captions are in natural order; backward models
/// reverse them before teacher forcing. Empty weights mean all ones.
template <typename T>
Tensor<T> xe_loss(const CaptionerParams<T>& p, const ImageBatch<T>& img, const Tensor<T>& beta,
                  const std::vector<Tokens>& captions, std::span<const T> weights = {});

/// Argmax decoding (ties to the lowest id) for every scene in the batch.
template <typename T>
std::vector<Tokens> greedy_decode(const CaptionerParams<T>& p, const ImageBatch<T>& img, const Tensor<T>& beta,
                                  int max_len);

struct Sampled {
  Tokens tokens;
  double log_prob = 0.0;
  bool finished = false;  // emitted the end token before max_len
};

template <typename T>
std::vector<Sampled> sample_decode(const CaptionerParams<T>& p, const ImageBatch<T>& img, const Tensor<T>& beta,
                                   int max_len, Rng& rng);

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

struct Hypothesis {
  Tokens tokens;  // emitted tokens without the end token
  double log_prob = 0.0;
};

/// Incremental model driven by beam_search.
class BeamStepper {
 public:
  virtual ~BeamStepper() = default;
  /// Log-probabilities over the vocabulary for each live hypothesis after
  /// feeding its last token.
  virtual std::vector<std::vector<double>> advance(std::span<const int> last_tokens) = 0;
  /// The new live set is `parents[i]` of the previous one.
  virtual void reorder(std::span<const int> parents) = 0;
};

/// Top-k expansion over summed log-probabilities; hypotheses that emit the
/// end token retire. At max_len the live hypotheses retire unfinished.
/// Results sorted by log-prob, ties by lexicographic token order.
std::vector<Hypothesis> beam_search(BeamStepper& model, int k, int max_len, int bos = corpus::kBos,
                                    int eos = corpus::kEos);

/// Beam search over one scene; tokens returned in natural order.
template <typename T>
std::vector<Hypothesis> beam_decode(const CaptionerParams<T>& p, const Features& scene,
                                    std::span<const float> beta, int k, int max_len);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void put_tensor(checkpoint::Checkpoint& ck, const std::string& name, const Tensor<float>& tensor);
/// Copies a stored entry into `dst`; FormatError when missing or misshapen.
void read_tensor(const checkpoint::Checkpoint& ck, const std::string& name, Tensor<float>& dst);
void put_vocab_hash(checkpoint::Checkpoint& ck, std::uint32_t vocab_hash);

void save_params(checkpoint::Checkpoint& ck, const CaptionerParams<float>& p, std::uint32_t vocab_hash);
CaptionerParams<float> load_params(const checkpoint::Checkpoint& ck);
std::uint32_t stored_vocab_hash(const checkpoint::Checkpoint& ck);

void save_optimizer(checkpoint::Checkpoint& ck, const nn::AdamState<float>& state,
                    const nn::NamedParams<float>& named, const std::string& prefix);
nn::AdamState<float> load_optimizer(const checkpoint::Checkpoint& ck, const nn::NamedParams<float>& named,
                                    const std::string& prefix);

}  // namespace capctl::captioner
