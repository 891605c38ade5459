// SPDX-License-Identifier: Apache-2.0
#include "capctl/matcher.hpp"

#include <algorithm>
#include <string>

namespace capctl::matcher {

namespace t = capctl::tensor;

void MatcherConfig::validate() const {
  if (embed_dim <= 0 || hidden <= 0) throw ConfigError("matcher: dimensions must be positive");
  if (!(margin > 0.0)) throw ConfigError("matcher: margin must be > 0");
  if (!(tau > 0.0)) throw ConfigError("matcher: tau must be > 0");
}

MatcherDims make_dims(const MatcherConfig& config, std::size_t feature_dim, std::size_t vocab) {
  config.validate();
  MatcherDims d;
  d.feature_dim = feature_dim;
  d.embed_dim = static_cast<std::size_t>(config.embed_dim);
  d.hidden = static_cast<std::size_t>(config.hidden);
  d.vocab = vocab;
  d.project = config.project_regions;
  if (!d.project && d.feature_dim != d.hidden) {
    throw ConfigError("matcher: feature_dim " + std::to_string(feature_dim) + " != hidden " +
                      std::to_string(d.hidden) + " requires project_regions = true");
  }
  return d;
}

template <typename T>
MatcherParams<T> MatcherParams<T>::zeros(const MatcherDims& dims, double margin, double tau) {
  if (!(margin > 0.0) || !(tau > 0.0)) throw ContractError("matcher: margin and tau must be positive");
  if (!dims.project && dims.feature_dim != dims.hidden) {
    throw ContractError("matcher: unprojected regions must have the hidden width");
  }
  MatcherParams p;
  p.dims = dims;
  p.margin = margin;
  p.tau = tau;
  p.embed = Tensor<T>::zeros({dims.vocab, dims.embed_dim}, true);
  p.fwd = nn::GruParams<T>::zeros(dims.embed_dim, dims.hidden);
  p.bwd = nn::GruParams<T>::zeros(dims.embed_dim, dims.hidden);
  if (dims.project) {
    p.w_r = Tensor<T>::zeros({dims.feature_dim, dims.hidden}, true);
    p.b_r = Tensor<T>::zeros({dims.hidden}, true);
  }
  return p;
}

template <typename T>
MatcherParams<T> MatcherParams<T>::create(const MatcherDims& dims, double margin, double tau, Rng& rng) {
  auto p = zeros(dims, margin, tau);
  std::vector<Tensor<T>*> init = {&p.embed, &p.fwd.w_input, &p.fwd.w_hidden, &p.fwd.w_candidate,
                                  &p.bwd.w_input, &p.bwd.w_hidden, &p.bwd.w_candidate};
  if (dims.project) init.push_back(&p.w_r);
  for (auto* w : init) nn::xavier_uniform(*w, rng);
  return p;
}

template <typename T>
nn::NamedParams<T> MatcherParams<T>::named() const {
  nn::NamedParams<T> out = {{"matcher/embed", embed},
                            {"matcher/gru_fwd/w_input", fwd.w_input},
                            {"matcher/gru_fwd/w_hidden", fwd.w_hidden},
                            {"matcher/gru_fwd/w_candidate", fwd.w_candidate},
                            {"matcher/gru_fwd/bias", fwd.bias},
                            {"matcher/gru_bwd/w_input", bwd.w_input},
                            {"matcher/gru_bwd/w_hidden", bwd.w_hidden},
                            {"matcher/gru_bwd/w_candidate", bwd.w_candidate},
                            {"matcher/gru_bwd/bias", bwd.bias}};
  if (dims.project) {
    out.emplace_back("matcher/w_r", w_r);
    out.emplace_back("matcher/b_r", b_r);
  }
  return out;
}

template <typename To, typename From>
MatcherParams<To> cast_params(const MatcherParams<From>& p) {
  auto out = MatcherParams<To>::zeros(p.dims, p.margin, p.tau);
  auto src = p.named();
  auto dst = out.named();
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto d = dst[i].second.mutable_data();
    auto s = src[i].second.data();
    std::transform(s.begin(), s.end(), d.begin(), [](From x) { return static_cast<To>(x); });
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> encode_texts(const MatcherParams<T>& p, const std::vector<Tokens>& captions) {
  if (captions.empty()) throw ContractError("encode_texts: no captions");
  const std::size_t B = captions.size();
  std::size_t L = 0;
  for (const auto& c : captions) {
    if (c.empty()) throw ContractError("encode_text: empty token sequence");
    for (int tok : c) {
      if (tok < 0 || static_cast<std::size_t>(tok) >= p.dims.vocab) {
        throw ContractError("encode_text: token id " + std::to_string(tok) + " outside vocabulary");
      }
    }
    L = std::max(L, c.size());
  }
  // Sequences are left-aligned in both directions, so padding only ever
  // follows the real tokens and never reaches a state that is read.
  std::vector<Tensor<T>> fwd_states, bwd_states;
  auto hf = Tensor<T>::zeros({B, p.dims.hidden});
  auto hb = Tensor<T>::zeros({B, p.dims.hidden});
  std::vector<int> ids_f(B), ids_b(B);
  for (std::size_t step = 0; step < L; ++step) {
    for (std::size_t b = 0; b < B; ++b) {
      const auto& c = captions[b];
      const bool real = step < c.size();
      ids_f[b] = real ? c[step] : 0;
      ids_b[b] = real ? c[c.size() - 1 - step] : 0;
    }
    hf = nn::gru_cell(t::embedding(p.embed, ids_f), hf, p.fwd);
    hb = nn::gru_cell(t::embedding(p.embed, ids_b), hb, p.bwd);
    fwd_states.push_back(hf);
    bwd_states.push_back(hb);
  }
  const auto all_f = L == 1 ? fwd_states[0] : t::concat<T>(fwd_states, 0);  // row step*B + b
  const auto all_b = L == 1 ? bwd_states[0] : t::concat<T>(bwd_states, 0);
  std::vector<Tensor<T>> out;
  out.reserve(B);
  for (std::size_t b = 0; b < B; ++b) {
    const auto n = captions[b].size();
    std::vector<int> rows_f(n), rows_b(n);
    for (std::size_t i = 0; i < n; ++i) {
      rows_f[i] = static_cast<int>(i * B + b);
      rows_b[i] = static_cast<int>((n - 1 - i) * B + b);
    }
    out.push_back(t::scale(t::add(t::embedding(all_f, rows_f), t::embedding(all_b, rows_b)), T(0.5)));
  }
  return out;
}

template <typename T>
Tensor<T> encode_text(const MatcherParams<T>& p, const Tokens& tokens) {
  return encode_texts(p, std::vector<Tokens>{tokens})[0];
}

template <typename T>
Tensor<T> encode_regions(const MatcherParams<T>& p, const Features& features) {
  if (features.empty()) throw DimensionError("encode_regions: scene without regions");
  const std::size_t k = features.size(), Df = p.dims.feature_dim;
  std::vector<T> flat;
  flat.reserve(k * Df);
  for (const auto& r : features) {
    if (r.size() != Df) {
      throw DimensionError("encode_regions: region width " + std::to_string(r.size()) + " != feature_dim " +
                           std::to_string(Df));
    }
    flat.insert(flat.end(), r.begin(), r.end());
  }
  auto f = Tensor<T>::from_vector({k, Df}, std::move(flat));
  if (!p.dims.project) return f;
  return t::add_bias(t::matmul(f, p.w_r), p.b_r);
}

template <typename T>
SimilarityBreakdown<T> similarity(const Tensor<T>& regions, const Tensor<T>& words, T tau) {
  if (regions.rank() != 2 || words.rank() != 2 || regions.cols() != words.cols()) {
    throw DimensionError("similarity: regions " + t::shape_str(regions.shape()) + " and words " +
                         t::shape_str(words.shape()) + " differ in width");
  }
  SimilarityBreakdown<T> out;
  const auto v_unit = t::normalize_rows(regions);
  const auto e_unit = t::normalize_rows(words);
  out.s = t::matmul(v_unit, t::transpose(e_unit));
  out.s_bar = t::normalize_rows(t::relu(out.s));
  out.alpha = t::softmax(t::scale(out.s_bar, tau), 0);
  out.a_v = t::matmul(t::transpose(out.alpha), regions);
  out.r = t::sum_axis(t::mul(e_unit, t::normalize_rows(out.a_v)), 1);
  out.S = t::mean(out.r);
  return out;
}

template <typename T>
Tensor<T> score(const MatcherParams<T>& p, const Features& features, const Tokens& tokens) {
  return similarity(encode_regions(p, features), encode_text(p, tokens), static_cast<T>(p.tau)).S;
}

template <typename T>
Tensor<T> triplet_loss(const Tensor<T>& s_pos, const Tensor<T>& s_neg, T margin) {
  return t::relu(t::add_scalar(t::sub(s_neg, s_pos), margin));
}

double triplet_loss(double s_pos, double s_neg, double margin) { return std::max(0.0, margin - s_pos + s_neg); }

std::size_t argmax_first(std::span<const double> scores) {
  if (scores.empty()) throw ContractError("select_caption: no candidates");
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i) {
    if (scores[i] > scores[best]) best = i;
  }
  return best;
}

Selection select_caption(const MatcherParams<float>& p, const Features& features,
                         const std::vector<Tokens>& candidates) {
  if (candidates.empty()) throw ContractError("select_caption: no candidates");
  t::NoGradGuard guard;
  Selection sel;
  sel.scores.assign(candidates.size(), kEmptyCaptionScore);
  std::vector<Tokens> nonempty;
  std::vector<std::size_t> where;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (candidates[i].empty()) continue;
    nonempty.push_back(candidates[i]);
    where.push_back(i);
  }
  if (!nonempty.empty()) {
    const auto regions = encode_regions(p, features);
    const auto words = encode_texts(p, nonempty);
    for (std::size_t j = 0; j < words.size(); ++j) {
      sel.scores[where[j]] = similarity(regions, words[j], static_cast<float>(p.tau)).S.item();
    }
  }
  sel.index = argmax_first(sel.scores);
  return sel;
}

void save_params(checkpoint::Checkpoint& ck, const MatcherParams<float>& p, std::uint32_t vocab_hash) {
  for (const auto& [name, tensor] : p.named()) captioner::put_tensor(ck, name, tensor);
  const auto& d = p.dims;
  ck.put_vector("meta/matcher_dims", {static_cast<float>(d.feature_dim), static_cast<float>(d.embed_dim),
                                      static_cast<float>(d.hidden), static_cast<float>(d.vocab),
                                      d.project ? 1.0f : 0.0f});
  ck.put_scalar("meta/tau", static_cast<float>(p.tau));
  ck.put_scalar("meta/margin", static_cast<float>(p.margin));
  captioner::put_vocab_hash(ck, vocab_hash);
}

MatcherParams<float> load_params(const checkpoint::Checkpoint& ck) {
  const auto& dims = ck.at("meta/matcher_dims").data;
  if (dims.size() != 5) throw FormatError("checkpoint: malformed meta/matcher_dims");
  MatcherDims d;
  d.feature_dim = static_cast<std::size_t>(dims[0]);
  d.embed_dim = static_cast<std::size_t>(dims[1]);
  d.hidden = static_cast<std::size_t>(dims[2]);
  d.vocab = static_cast<std::size_t>(dims[3]);
  d.project = dims[4] != 0.0f;
  const double tau = ck.scalar("meta/tau"), margin = ck.scalar("meta/margin");
  if (!(tau > 0.0) || !(margin > 0.0)) throw FormatError("checkpoint: matcher tau and margin must be positive");
  if (!d.project && d.feature_dim != d.hidden) throw FormatError("checkpoint: inconsistent matcher dims");
  auto p = MatcherParams<float>::zeros(d, margin, tau);
  for (auto& [name, tensor] : p.named()) {
    auto copy = tensor;
    captioner::read_tensor(ck, name, copy);
  }
  return p;
}

#define CAPCTL_INSTANTIATE(T)                                                                         \
  template struct MatcherParams<T>;                                                                   \
  template Tensor<T> encode_text<T>(const MatcherParams<T>&, const Tokens&);                          \
  template std::vector<Tensor<T>> encode_texts<T>(const MatcherParams<T>&, const std::vector<Tokens>&); \
  template Tensor<T> encode_regions<T>(const MatcherParams<T>&, const Features&);                     \
  template SimilarityBreakdown<T> similarity<T>(const Tensor<T>&, const Tensor<T>&, T);               \
  template Tensor<T> score<T>(const MatcherParams<T>&, const Features&, const Tokens&);               \
  template Tensor<T> triplet_loss<T>(const Tensor<T>&, const Tensor<T>&, T);

CAPCTL_INSTANTIATE(float)
CAPCTL_INSTANTIATE(double)

#undef CAPCTL_INSTANTIATE

template MatcherParams<double> cast_params<double, float>(const MatcherParams<float>&);
template MatcherParams<float> cast_params<float, double>(const MatcherParams<double>&);

}  // namespace capctl::matcher
