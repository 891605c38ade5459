// SPDX-License-Identifier: Apache-2.0
#include "capctl/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace capctl::captioner {

namespace t = capctl::tensor;

std::string direction_name(Direction d) { return d == Direction::Forward ? "fwd" : "bwd"; }

Direction parse_direction(std::string_view name) {
  if (name == "fwd" || name == "forward") return Direction::Forward;
  if (name == "bwd" || name == "backward") return Direction::Backward;
  throw ConfigError("direction must be fwd or bwd, got '" + std::string(name) + "'");
}

CaptionerDims make_dims(const CaptionerConfig& config, std::size_t feature_dim, std::size_t vocab,
                        std::size_t beta_dim) {
  if (config.model_dim <= 0 || config.embed_dim <= 0 || config.hidden <= 0 || config.attention <= 0) {
    throw ConfigError("captioner: dimensions must be positive");
  }
  if (config.max_len < 1) throw ConfigError("captioner: max_len must be >= 1");
  if (beta_dim < 1 || beta_dim > 4) throw ConfigError("captioner: beta_dim must be 1..4");
  CaptionerDims d;
  d.feature_dim = feature_dim;
  d.model_dim = static_cast<std::size_t>(config.model_dim);
  d.embed_dim = static_cast<std::size_t>(config.embed_dim);
  d.hidden = static_cast<std::size_t>(config.hidden);
  d.attention = static_cast<std::size_t>(config.attention);
  d.vocab = vocab;
  d.beta_dim = beta_dim;
  return d;
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <typename T>
CaptionerParams<T> CaptionerParams<T>::zeros(const CaptionerDims& dims, const corpus::ControlLayout& control,
                                             Direction direction) {
  if (control.size() != dims.beta_dim) throw ContractError("captioner: control layout does not match beta_dim");
  CaptionerParams p;
  p.dims = dims;
  p.direction = direction;
  p.control = control;
  const auto D = dims.model_dim, H = dims.hidden, A = dims.attention, W = dims.vocab;
  p.w_v = Tensor<T>::zeros({dims.feature_dim, D}, true);
  p.b_v = Tensor<T>::zeros({D}, true);
  p.embed = Tensor<T>::zeros({W, dims.embed_dim}, true);
  p.lstm1 = nn::LstmParams<T>::zeros(dims.beta_dim + H + D + dims.embed_dim, H);
  p.w_va = Tensor<T>::zeros({D, A}, true);
  p.w_ha = Tensor<T>::zeros({H, A}, true);
  p.w_a = Tensor<T>::zeros({A, 1}, true);
  p.lstm2 = nn::LstmParams<T>::zeros(D + H, H);
  p.w_p = Tensor<T>::zeros({H, W}, true);
  p.b_p = Tensor<T>::zeros({W}, true);
  return p;
}

template <typename T>
CaptionerParams<T> CaptionerParams<T>::create(const CaptionerDims& dims, const corpus::ControlLayout& control,
                                              Direction direction, Rng& rng) {
  auto p = zeros(dims, control, direction);
  // w_p stays zero: an untrained model predicts the uniform distribution.
  for (auto* w : {&p.w_v, &p.embed, &p.lstm1.weight, &p.w_va, &p.w_ha, &p.w_a, &p.lstm2.weight}) {
    nn::xavier_uniform(*w, rng);
  }
  return p;
}

template <typename T>
nn::NamedParams<T> CaptionerParams<T>::named() const {
  return {{"captioner/w_v", w_v},   {"captioner/b_v", b_v},
          {"captioner/embed", embed}, {"captioner/lstm1/weight", lstm1.weight},
          {"captioner/lstm1/bias", lstm1.bias}, {"captioner/w_va", w_va},
          {"captioner/w_ha", w_ha}, {"captioner/w_a", w_a},
          {"captioner/lstm2/weight", lstm2.weight}, {"captioner/lstm2/bias", lstm2.bias},
          {"captioner/w_p", w_p},   {"captioner/b_p", b_p}};
}

template <typename T>
void CaptionerParams<T>::zero_beta_weights() {
  auto w = lstm1.weight.mutable_data();
  const auto cols = lstm1.weight.cols();
  std::fill(w.begin(), w.begin() + static_cast<std::ptrdiff_t>(dims.beta_dim * cols), T(0));
}

template <typename To, typename From>
CaptionerParams<To> cast_params(const CaptionerParams<From>& p) {
  auto out = CaptionerParams<To>::zeros(p.dims, p.control, p.direction);
  auto src = p.named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].second.mutable_data();
    auto s = src[i].second.data();
    std::transform(s.begin(), s.end(), d.begin(), [](From x) { return static_cast<To>(x); });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Images and state
// ---------------------------------------------------------------------------

template <typename T>
ImageBatch<T> ImageBatch<T>::head(std::size_t n) const {
  if (n == batch) return *this;
  ImageBatch out;
  out.batch = n;
  out.regions = regions;
  out.v = t::slice(v, 0, 0, n * regions);
  out.v_bar = t::slice(v_bar, 0, 0, n);
  out.att_v = t::slice(att_v, 0, 0, n * regions);
  out.mask = t::slice(mask, 0, 0, n);
  return out;
}

template <typename T>
ImageBatch<T> project_features(const CaptionerParams<T>& p, std::span<const Features* const> scenes) {
  if (scenes.empty()) throw ContractError("project_features: empty batch");
  const std::size_t B = scenes.size();
  const std::size_t Df = p.dims.feature_dim;
  std::size_t K = 0;
  for (const auto* s : scenes) {
    if (s->empty()) throw DimensionError("project_features: scene without regions");
    K = std::max(K, s->size());
  }
  std::vector<T> f(B * K * Df, T(0)), keep(B * K, T(0)), pool(B * K, T(0)), mask(B * K, T(-1e9));
  for (std::size_t b = 0; b < B; ++b) {
    const auto& regions = *scenes[b];
    for (std::size_t i = 0; i < regions.size(); ++i) {
      if (regions[i].size() != Df) {
        throw DimensionError("project_features: region width " + std::to_string(regions[i].size()) +
                             " != feature_dim " + std::to_string(Df));
      }
      std::copy(regions[i].begin(), regions[i].end(), f.begin() + static_cast<std::ptrdiff_t>((b * K + i) * Df));
      keep[b * K + i] = T(1);
      pool[b * K + i] = T(1) / static_cast<T>(regions.size());
      mask[b * K + i] = T(0);
    }
  }
  ImageBatch<T> img;
  img.batch = B;
  img.regions = K;
  auto projected = t::add_bias(t::matmul(Tensor<T>::from_vector({B * K, Df}, std::move(f)), p.w_v), p.b_v);
  img.v = t::mul_colwise(projected, Tensor<T>::from_vector({B * K, 1}, std::move(keep)));
  img.v_bar = t::weighted_row_sum(Tensor<T>::from_vector({B, K}, std::move(pool)), img.v);
  img.att_v = t::matmul(img.v, p.w_va);
  img.mask = Tensor<T>::from_vector({B, K}, std::move(mask));
  return img;
}

template <typename T>
DecoderState<T> DecoderState<T>::zeros(std::size_t batch, std::size_t hidden) {
  DecoderState s;
  s.h1 = Tensor<T>::zeros({batch, hidden});
  s.c1 = Tensor<T>::zeros({batch, hidden});
  s.h2 = Tensor<T>::zeros({batch, hidden});
  s.c2 = Tensor<T>::zeros({batch, hidden});
  return s;
}

template <typename T>
DecoderState<T> DecoderState<T>::gather(std::span<const int> rows) const {
  return {t::embedding(h1, rows), t::embedding(c1, rows), t::embedding(h2, rows), t::embedding(c2, rows)};
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

template <typename T>
StepResult<T> decode_step(const CaptionerParams<T>& p, const ImageBatch<T>& img, const DecoderState<T>& state,
                          const Tensor<T>& beta, std::span<const int> prev_tokens) {
  const std::size_t B = img.batch;
  if (beta.rank() != 2 || beta.rows() != B || beta.cols() != p.dims.beta_dim) {
    throw ContractError("decode_step: beta " + t::shape_str(beta.shape()) + " but model expects [" +
                        std::to_string(B) + " x " + std::to_string(p.dims.beta_dim) + "]");
  }
  if (prev_tokens.size() != B) throw ContractError("decode_step: one previous token per batch row required");
  for (int tok : prev_tokens) {
    if (tok < 0 || static_cast<std::size_t>(tok) >= p.dims.vocab) {
      throw ContractError("decode_step: token id " + std::to_string(tok) + " outside vocabulary");
    }
  }
  auto x = t::concat<T>({beta, state.h2, img.v_bar, t::embedding(p.embed, prev_tokens)}, 1);
  auto [h1, c1] = nn::lstm_cell(x, state.h1, state.c1, p.lstm1);
  auto scores = t::tanh(t::add(img.att_v, t::repeat_rows(t::matmul(h1, p.w_ha), img.regions)));
  auto z = t::add(t::reshape(t::matmul(scores, p.w_a), {B, img.regions}), img.mask);
  auto alpha = t::softmax(z, 1);
  auto v_hat = t::weighted_row_sum(alpha, img.v);
  auto [h2, c2] = nn::lstm_cell(t::concat<T>({v_hat, h1}, 1), state.h2, state.c2, p.lstm2);
  auto log_probs = t::log_softmax(t::add_bias(t::matmul(h2, p.w_p), p.b_p), 1);
  return {log_probs, alpha, {h1, c1, h2, c2}};
}

template <typename T>
Tensor<T> beta_batch(std::span<const float> values, std::size_t batch) {
  std::vector<T> data;
  data.reserve(batch * values.size());
  for (std::size_t b = 0; b < batch; ++b) {
    for (float v : values) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from_vector({batch, values.size()}, std::move(data));
}

template <typename T>
Tensor<T> beta_rows(const std::vector<std::vector<float>>& rows) {
  if (rows.empty()) throw ContractError("beta_rows: empty batch");
  std::vector<T> data;
  for (const auto& r : rows) {
    if (r.size() != rows.front().size()) throw ContractError("beta_rows: ragged control vectors");
    for (float v : r) data.push_back(static_cast<T>(v));
  }
  return Tensor<T>::from_vector({rows.size(), rows.front().size()}, std::move(data));
}

Tokens reverse_caption(Tokens tokens) {
  std::reverse(tokens.begin(), tokens.end());
  return tokens;
}

template <typename T>
Tensor<T> xe_loss(const CaptionerParams<T>& p, const ImageBatch<T>& img, const Tensor<T>& beta,
                  const std::vector<Tokens>& captions, std::span<const T> weights) {
  const std::size_t B = img.batch;
  if (captions.size() != B) throw ContractError("xe_loss: caption count does not match the image batch");
  if (!weights.empty() && weights.size() != B) throw ContractError("xe_loss: one weight per caption required");
  std::vector<Tokens> seqs;
  std::size_t steps = 0;
  for (const auto& c : captions) {
    for (int tok : c) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= p.dims.vocab) {
        throw ContractError("xe_loss: token id " + std::to_string(tok) + " outside vocabulary");
      }
    }
    seqs.push_back(p.direction == Direction::Backward ? reverse_caption(c) : c);
    steps = std::max(steps, c.size() + 1);
  }

  auto state = DecoderState<T>::zeros(B, p.dims.hidden);
  std::vector<int> prev(B, corpus::kBos), target(B);
  std::vector<Tensor<T>> picked;
  std::vector<T> mask(B * steps, T(0));
  for (std::size_t s = 0; s < steps; ++s) {
    auto step = decode_step(p, img, state, beta, prev);
    for (std::size_t b = 0; b < B; ++b) {
      const auto len = seqs[b].size();
      target[b] = s < len ? seqs[b][s] : s == len ? corpus::kEos : corpus::kPad;
      if (s <= len) mask[b * steps + s] = weights.empty() ? T(1) : weights[b];
    }
    picked.push_back(t::pick(step.log_probs, target));
    state = step.state;
    prev = target;
  }
  auto all = t::concat<T>(picked, 1);  // [B x steps]
  return t::scale(t::sum(t::mul(all, Tensor<T>::from_vector({B, steps}, std::move(mask)))), T(-1));
}

namespace {

template <typename T>
std::span<const T> row_of(const Tensor<T>& m, std::size_t r) {
  return m.data().subspan(r * m.cols(), m.cols());
}

template <typename T>
int argmax(std::span<const T> row) {
  // max_element returns the first maximum, i.e. the lowest id on ties.
  return static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
}

}  // namespace

template <typename T>
std::vector<Tokens> greedy_decode(const CaptionerParams<T>& p, const ImageBatch<T>& img, const Tensor<T>& beta,
                                  int max_len) {
  t::NoGradGuard guard;
  const std::size_t B = img.batch;
  std::vector<Tokens> out(B);
  std::vector<bool> done(B, false);
  std::vector<int> prev(B, corpus::kBos);
  auto state = DecoderState<T>::zeros(B, p.dims.hidden);
  for (int s = 0; s < max_len; ++s) {
    auto step = decode_step(p, img, state, beta, prev);
    state = step.state;
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (done[b]) continue;
      const int tok = argmax(row_of(step.log_probs, b));
      prev[b] = tok;
      if (tok == corpus::kEos) {
        done[b] = true;
      } else {
        out[b].push_back(tok);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  if (p.direction == Direction::Backward) {
    for (auto& c : out) c = reverse_caption(std::move(c));
  }
  return out;
}

template <typename T>
std::vector<Sampled> sample_decode(const CaptionerParams<T>& p, const ImageBatch<T>& img, const Tensor<T>& beta,
                                   int max_len, Rng& rng) {
  t::NoGradGuard guard;
  const std::size_t B = img.batch;
  std::vector<Sampled> out(B);
  std::vector<bool> done(B, false);
  std::vector<int> prev(B, corpus::kBos);
  auto state = DecoderState<T>::zeros(B, p.dims.hidden);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (int s = 0; s < max_len; ++s) {
    auto step = decode_step(p, img, state, beta, prev);
    state = step.state;
    bool all_done = true;
    for (std::size_t b = 0; b < B; ++b) {
      if (done[b]) continue;
      const auto row = row_of(step.log_probs, b);
      const double u = unit(rng);
      double acc = 0.0;
      int tok = -1;
      for (std::size_t w = 0; w < row.size(); ++w) {
        const double pw = std::exp(static_cast<double>(row[w]));
        if (pw > 0.0) tok = static_cast<int>(w);
        acc += pw;
        if (u < acc) break;
      }
      out[b].log_prob += row[static_cast<std::size_t>(tok)];
      prev[b] = tok;
      if (tok == corpus::kEos) {
        done[b] = true;
        out[b].finished = true;
      } else {
        out[b].tokens.push_back(tok);
        all_done = false;
      }
    }
    if (all_done) break;
  }
  if (p.direction == Direction::Backward) {
    for (auto& c : out) c.tokens = reverse_caption(std::move(c.tokens));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Beam search
// ---------------------------------------------------------------------------

std::vector<Hypothesis> beam_search(BeamStepper& model, int k, int max_len, int bos, int eos) {
  if (k < 1) throw ContractError("beam_search: k must be >= 1");
  struct Live {
    Tokens tokens;
    double log_prob;
  };
  auto better = [](double la, const Tokens& ta, double lb, const Tokens& tb) {
    if (la != lb) return la > lb;
    return ta < tb;
  };
  std::vector<Live> live = {{{}, 0.0}};
  std::vector<Hypothesis> finished;
  std::vector<int> last = {bos};
  for (int step = 0; step < max_len && !live.empty(); ++step) {
    const auto log_probs = model.advance(last);
    struct Cand {
      int parent;
      int token;
      double log_prob;
      Tokens tokens;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < live.size(); ++b) {
      for (std::size_t w = 0; w < log_probs[b].size(); ++w) {
        auto tokens = live[b].tokens;
        tokens.push_back(static_cast<int>(w));
        cands.push_back({static_cast<int>(b), static_cast<int>(w), live[b].log_prob + log_probs[b][w],
                         std::move(tokens)});
      }
    }
    const auto keep = std::min(cands.size(), static_cast<std::size_t>(k));
    std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(keep), cands.end(),
                      [&](const Cand& a, const Cand& b) { return better(a.log_prob, a.tokens, b.log_prob, b.tokens); });
    std::vector<Live> next;
    std::vector<int> parents;
    last.clear();
    for (std::size_t i = 0; i < keep; ++i) {
      auto& c = cands[i];
      if (c.token == eos) {
        c.tokens.pop_back();
        finished.push_back({std::move(c.tokens), c.log_prob});
      } else {
        parents.push_back(c.parent);
        last.push_back(c.token);
        next.push_back({std::move(c.tokens), c.log_prob});
      }
    }
    live = std::move(next);
    if (live.empty()) break;
    model.reorder(parents);
    // Scores only fall as hypotheses grow, so once k finished ones beat
    // every live one the result is settled.
    if (finished.size() >= static_cast<std::size_t>(k)) {
      std::vector<double> scores;
      for (const auto& h : finished) scores.push_back(h.log_prob);
      std::nth_element(scores.begin(), scores.begin() + (k - 1), scores.end(), std::greater<>());
      const double kth = scores[static_cast<std::size_t>(k - 1)];
      const double best_live = std::max_element(live.begin(), live.end(), [](const Live& a, const Live& b) {
                                 return a.log_prob < b.log_prob;
                               })->log_prob;
      if (best_live < kth) {
        live.clear();
        break;
      }
    }
  }
  for (auto& l : live) finished.push_back({std::move(l.tokens), l.log_prob});
  std::sort(finished.begin(), finished.end(), [&](const Hypothesis& a, const Hypothesis& b) {
    return better(a.log_prob, a.tokens, b.log_prob, b.tokens);
  });
  if (finished.size() > static_cast<std::size_t>(k)) finished.resize(static_cast<std::size_t>(k));
  return finished;
}

namespace {

template <typename T>
class CaptionerStepper : public BeamStepper {
 public:
  CaptionerStepper(const CaptionerParams<T>& p, const Features& scene, std::span<const float> beta, int k)
      : p_(p), state_(DecoderState<T>::zeros(1, p.dims.hidden)) {
    std::vector<const Features*> copies(static_cast<std::size_t>(k), &scene);
    img_ = project_features(p, std::span<const Features* const>(copies));
    beta_ = beta_batch<T>(beta, static_cast<std::size_t>(k));
  }

  std::vector<std::vector<double>> advance(std::span<const int> last) override {
    const auto n = last.size();
    auto step = decode_step(p_, img_.head(n), state_, t::slice(beta_, 0, 0, n), last);
    state_ = step.state;
    std::vector<std::vector<double>> out(n);
    for (std::size_t b = 0; b < n; ++b) {
      const auto row = row_of(step.log_probs, b);
      out[b].assign(row.begin(), row.end());
    }
    return out;
  }

  void reorder(std::span<const int> parents) override { state_ = state_.gather(parents); }

 private:
  const CaptionerParams<T>& p_;
  ImageBatch<T> img_;
  Tensor<T> beta_;
  DecoderState<T> state_;
};

}  // namespace

template <typename T>
std::vector<Hypothesis> beam_decode(const CaptionerParams<T>& p, const Features& scene, std::span<const float> beta,
                                    int k, int max_len) {
  t::NoGradGuard guard;
  CaptionerStepper<T> stepper(p, scene, beta, k);
  auto out = beam_search(stepper, k, max_len);
  if (p.direction == Direction::Backward) {
    for (auto& h : out) h.tokens = reverse_caption(std::move(h.tokens));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint32_t> shape_u32(const tensor::Shape& s) { return {s.begin(), s.end()}; }

}  // namespace

void put_tensor(checkpoint::Checkpoint& ck, const std::string& name, const Tensor<float>& tensor) {
  ck.put(name, shape_u32(tensor.shape()), {tensor.data().begin(), tensor.data().end()});
}

void read_tensor(const checkpoint::Checkpoint& ck, const std::string& name, Tensor<float>& dst) {
  const auto& e = ck.at(name);
  if (std::vector<std::size_t>(e.shape.begin(), e.shape.end()) != dst.shape()) {
    throw FormatError("checkpoint: entry '" + e.name + "' has shape " +
                      t::shape_str({e.shape.begin(), e.shape.end()}) + ", expected " + t::shape_str(dst.shape()));
  }
  std::copy(e.data.begin(), e.data.end(), dst.mutable_data().begin());
}

void put_vocab_hash(checkpoint::Checkpoint& ck, std::uint32_t vocab_hash) {
  ck.put_vector("meta/vocab_hash", {static_cast<float>(vocab_hash >> 16), static_cast<float>(vocab_hash & 0xFFFF)});
}

void save_params(checkpoint::Checkpoint& ck, const CaptionerParams<float>& p, std::uint32_t vocab_hash) {
  for (const auto& [name, tensor] : p.named()) put_tensor(ck, name, tensor);
  const auto& d = p.dims;
  ck.put_scalar("meta/beta_dim", static_cast<float>(d.beta_dim));
  ck.put_scalar("meta/direction", static_cast<float>(p.direction));
  ck.put_vector("meta/dims", {static_cast<float>(d.feature_dim), static_cast<float>(d.model_dim),
                              static_cast<float>(d.embed_dim), static_cast<float>(d.hidden),
                              static_cast<float>(d.attention), static_cast<float>(d.vocab)});
  std::vector<float> control;
  for (auto a : p.control.dims) control.push_back(static_cast<float>(a));
  ck.put_vector("meta/control", control);
  put_vocab_hash(ck, vocab_hash);
}

std::uint32_t stored_vocab_hash(const checkpoint::Checkpoint& ck) {
  const auto& e = ck.at("meta/vocab_hash");
  if (e.data.size() != 2) throw FormatError("checkpoint: malformed meta/vocab_hash");
  return (static_cast<std::uint32_t>(e.data[0]) << 16) | static_cast<std::uint32_t>(e.data[1]);
}

CaptionerParams<float> load_params(const checkpoint::Checkpoint& ck) {
  const auto& dims = ck.at("meta/dims").data;
  if (dims.size() != 6) throw FormatError("checkpoint: malformed meta/dims");
  CaptionerDims d;
  d.feature_dim = static_cast<std::size_t>(dims[0]);
  d.model_dim = static_cast<std::size_t>(dims[1]);
  d.embed_dim = static_cast<std::size_t>(dims[2]);
  d.hidden = static_cast<std::size_t>(dims[3]);
  d.attention = static_cast<std::size_t>(dims[4]);
  d.vocab = static_cast<std::size_t>(dims[5]);
  d.beta_dim = static_cast<std::size_t>(ck.scalar("meta/beta_dim"));
  corpus::ControlLayout control;
  for (float a : ck.at("meta/control").data) {
    if (a < 0 || a > 3) throw FormatError("checkpoint: unknown control attribute code");
    control.dims.push_back(static_cast<corpus::Attribute>(static_cast<int>(a)));
  }
  if (control.size() != d.beta_dim || d.beta_dim < 1 || d.beta_dim > 4) {
    throw FormatError("checkpoint: control layout does not match meta/beta_dim");
  }
  const float dir = ck.scalar("meta/direction");
  if (dir != 0.0f && dir != 1.0f) throw FormatError("checkpoint: meta/direction must be 0 or 1");
  auto p = CaptionerParams<float>::zeros(d, control, dir == 0.0f ? Direction::Forward : Direction::Backward);
  for (auto& [name, tensor] : p.named()) {
    auto copy = tensor;
    read_tensor(ck, name, copy);
  }
  return p;
}

void save_optimizer(checkpoint::Checkpoint& ck, const nn::AdamState<float>& state,
                    const nn::NamedParams<float>& named, const std::string& prefix) {
  ck.put_scalar(prefix + "step", static_cast<float>(state.step));
  ck.put_scalar(prefix + "lr", static_cast<float>(state.lr));
  if (state.m.empty()) return;
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto shape = shape_u32(named[i].second.shape());
    ck.put(prefix + "m/" + named[i].first, shape, state.m[i]);
    ck.put(prefix + "v/" + named[i].first, shape, state.v[i]);
  }
}

nn::AdamState<float> load_optimizer(const checkpoint::Checkpoint& ck, const nn::NamedParams<float>& named,
                                    const std::string& prefix) {
  nn::AdamState<float> state;
  if (!ck.contains(prefix + "step")) return state;
  state.step = static_cast<std::uint64_t>(ck.scalar(prefix + "step"));
  state.lr = ck.scalar(prefix + "lr");
  if (!ck.contains(prefix + "m/" + named.front().first)) return state;
  for (const auto& [name, tensor] : named) {
    const auto& m = ck.at(prefix + "m/" + name);
    const auto& v = ck.at(prefix + "v/" + name);
    if (m.data.size() != tensor.numel() || v.data.size() != tensor.numel()) {
      throw FormatError("checkpoint: optimizer state for '" + name + "' has the wrong size");
    }
    state.m.push_back(m.data);
    state.v.push_back(v.data);
  }
  return state;
}

// ---------------------------------------------------------------------------

#define CAPCTL_INSTANTIATE(T)                                                                                   \
  template struct CaptionerParams<T>;                                                                           \
  template struct ImageBatch<T>;                                                                                \
  template struct DecoderState<T>;                                                                              \
  template ImageBatch<T> project_features<T>(const CaptionerParams<T>&, std::span<const Features* const>);      \
  template StepResult<T> decode_step<T>(const CaptionerParams<T>&, const ImageBatch<T>&, const DecoderState<T>&, \
                                        const Tensor<T>&, std::span<const int>);                                \
  template Tensor<T> beta_batch<T>(std::span<const float>, std::size_t);                                        \
  template Tensor<T> beta_rows<T>(const std::vector<std::vector<float>>&);                                      \
  template Tensor<T> xe_loss<T>(const CaptionerParams<T>&, const ImageBatch<T>&, const Tensor<T>&,              \
                                const std::vector<Tokens>&, std::span<const T>);                                \
  template std::vector<Tokens> greedy_decode<T>(const CaptionerParams<T>&, const ImageBatch<T>&,                \
                                                const Tensor<T>&, int);                                         \
  template std::vector<Sampled> sample_decode<T>(const CaptionerParams<T>&, const ImageBatch<T>&,               \
                                                 const Tensor<T>&, int, Rng&);                                  \
  template std::vector<Hypothesis> beam_decode<T>(const CaptionerParams<T>&, const Features&,                   \
                                                  std::span<const float>, int, int);

CAPCTL_INSTANTIATE(float)
CAPCTL_INSTANTIATE(double)

#undef CAPCTL_INSTANTIATE

template CaptionerParams<double> cast_params<double, float>(const CaptionerParams<float>&);
template CaptionerParams<float> cast_params<float, double>(const CaptionerParams<double>&);
template CaptionerParams<float> cast_params<float, float>(const CaptionerParams<float>&);

}  // namespace capctl::captioner
