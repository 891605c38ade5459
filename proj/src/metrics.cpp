// SPDX-License-Identifier: Apache-2.0
#include "capctl/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <limits>

#include "json.hpp"

namespace capctl::metrics {

std::uint64_t pack_ngram(std::span<const int> ids) {
  if (ids.empty() || ids.size() > static_cast<std::size_t>(kMaxOrder)) {
    throw ContractError("pack_ngram: order must be 1..4");
  }
  std::uint64_t key = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] > 0xFFFF) throw ContractError("pack_ngram: token id out of range");
    key |= static_cast<std::uint64_t>(ids[i]) << (16 * i);
  }
  return key;
}

std::vector<int> unpack_ngram(std::uint64_t key, int order) {
  std::vector<int> ids(static_cast<std::size_t>(order));
  for (int i = 0; i < order; ++i) ids[i] = static_cast<int>((key >> (16 * i)) & 0xFFFF);
  return ids;
}

NGramCounts count_ngrams(const Tokens& tokens, int order) {
  NGramCounts counts;
  if (tokens.size() < static_cast<std::size_t>(order)) return counts;
  std::span<const int> all(tokens);
  for (std::size_t i = 0; i + order <= tokens.size(); ++i) {
    counts[pack_ngram(all.subspan(i, order))] += 1;
  }
  return counts;
}

// ---------------------------------------------------------------------------
// IdfStats
// ---------------------------------------------------------------------------

IdfStats IdfStats::from_references(const std::vector<std::vector<Tokens>>& documents) {
  std::array<NGramCounts, kMaxOrder> df;
  for (const auto& refs : documents) {
    for (int n = 1; n <= kMaxOrder; ++n) {
      NGramCounts seen;
      for (const auto& r : refs) {
        for (const auto& [key, c] : count_ngrams(r, n)) seen[key] = 1;
      }
      for (const auto& [key, c] : seen) df[n - 1][key] += 1;
    }
  }
  return from_document_frequencies(documents.size(), std::move(df));
}

IdfStats IdfStats::from_document_frequencies(std::size_t num_docs,
                                             std::array<NGramCounts, kMaxOrder> df) {
  if (num_docs == 0) throw ContractError("IdfStats: reference corpus is empty");
  for (const auto& table : df) {
    for (const auto& [key, count] : table) {
      if (count < 1 || static_cast<std::size_t>(count) > num_docs) {
        throw ContractError("IdfStats: document frequency outside [1, N]");
      }
    }
  }
  IdfStats s;
  s.num_docs_ = num_docs;
  s.log_docs_ = std::log(static_cast<double>(num_docs));
  s.df_ = std::move(df);
  return s;
}

int IdfStats::document_frequency(int order, std::uint64_t key) const {
  const auto& table = df_.at(order - 1);
  auto it = table.find(key);
  return it == table.end() ? 0 : it->second;
}

double IdfStats::weight(int order, std::uint64_t key) const {
  const int df = std::max(1, document_frequency(order, key));
  return log_docs_ - std::log(static_cast<double>(df));
}

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

namespace {

struct BleuStats {
  std::array<double, kMaxOrder> matched{};
  std::array<double, kMaxOrder> total{};
  double cand_len = 0.0;
  double ref_len = 0.0;
};

std::size_t closest_ref_length(std::size_t cand_len, const std::vector<Tokens>& refs) {
  std::size_t best = refs.front().size();
  for (const auto& r : refs) {
    const auto d = std::llabs(static_cast<long long>(r.size()) - static_cast<long long>(cand_len));
    const auto bd = std::llabs(static_cast<long long>(best) - static_cast<long long>(cand_len));
    if (d < bd || (d == bd && r.size() < best)) best = r.size();
  }
  return best;
}

void accumulate_bleu(const Tokens& cand, const std::vector<Tokens>& refs, int n, BleuStats& s) {
  if (refs.empty()) throw ContractError("bleu: references must be non-empty");
  for (int k = 1; k <= n; ++k) {
    NGramCounts max_ref;
    for (const auto& r : refs) {
      for (const auto& [key, c] : count_ngrams(r, k)) max_ref[key] = std::max(max_ref[key], c);
    }
    for (const auto& [key, c] : count_ngrams(cand, k)) {
      auto it = max_ref.find(key);
      s.matched[k - 1] += it == max_ref.end() ? 0 : std::min(c, it->second);
      s.total[k - 1] += c;
    }
  }
  s.cand_len += static_cast<double>(cand.size());
  s.ref_len += static_cast<double>(closest_ref_length(cand.size(), refs));
}

double bleu_from_stats(const BleuStats& s, int n) {
  if (s.cand_len == 0.0) return 0.0;
  double log_sum = 0.0;
  for (int k = 0; k < n; ++k) {
    if (s.matched[k] == 0.0) return 0.0;
    log_sum += std::log(s.matched[k] / s.total[k]);
  }
  const double bp = std::exp(std::min(0.0, 1.0 - s.ref_len / s.cand_len));
  return bp * std::exp(log_sum / n);
}

void check_order(int n) {
  if (n < 1 || n > kMaxOrder) throw ContractError("bleu: n must be in 1..4");
}

}  // namespace

BleuResult bleu_n(const Tokens& candidate, const std::vector<Tokens>& references, int n) {
  check_order(n);
  if (candidate.empty()) return {0.0, true};
  BleuStats s;
  accumulate_bleu(candidate, references, n, s);
  return {bleu_from_stats(s, n), false};
}

double corpus_bleu(const std::vector<Tokens>& candidates,
                   const std::vector<std::vector<Tokens>>& references, int n) {
  check_order(n);
  if (candidates.size() != references.size()) {
    throw ContractError("corpus_bleu: candidate and reference counts differ");
  }
  BleuStats s;
  for (std::size_t i = 0; i < candidates.size(); ++i) accumulate_bleu(candidates[i], references[i], n, s);
  return bleu_from_stats(s, n);
}

// ---------------------------------------------------------------------------
// CIDEr-D
// ---------------------------------------------------------------------------

namespace {

struct WeightedVec {
  std::unordered_map<std::uint64_t, double> w;
  double norm = 0.0;
};

WeightedVec weighted(const Tokens& tokens, int order, const IdfStats& idf) {
  WeightedVec v;
  double ss = 0.0;
  for (const auto& [key, tf] : count_ngrams(tokens, order)) {
    const double x = tf * idf.weight(order, key);
    v.w[key] = x;
    ss += x * x;
  }
  v.norm = std::sqrt(ss);
  return v;
}

}  // namespace

double cider_d(const Tokens& candidate, const std::vector<Tokens>& references,
               const IdfStats& idf, double sigma) {
  if (references.empty()) throw ContractError("cider_d: references must be non-empty");
  std::array<WeightedVec, kMaxOrder> cand;
  for (int n = 1; n <= kMaxOrder; ++n) cand[n - 1] = weighted(candidate, n, idf);

  double total = 0.0;
  for (const auto& ref : references) {
    const double delta = static_cast<double>(candidate.size()) - static_cast<double>(ref.size());
    const double penalty = std::exp(-(delta * delta) / (2.0 * sigma * sigma));
    for (int n = 1; n <= kMaxOrder; ++n) {
      const auto r = weighted(ref, n, idf);
      const auto& c = cand[n - 1];
      double dot = 0.0;
      for (const auto& [key, cx] : c.w) {
        auto it = r.w.find(key);
        if (it != r.w.end()) dot += std::min(cx, it->second) * it->second;
      }
      if (c.norm > 0.0 && r.norm > 0.0) dot /= c.norm * r.norm;
      total += penalty * dot;
    }
  }
  return 10.0 * total / (kMaxOrder * static_cast<double>(references.size()));
}

// ---------------------------------------------------------------------------
// Aggregates
// ---------------------------------------------------------------------------

double poor_quality_fraction(std::span<const double> scores, double threshold) {
  if (scores.empty()) throw ContractError("poor_quality_fraction: empty input");
  const auto below = std::count_if(scores.begin(), scores.end(), [&](double s) { return s < threshold; });
  return static_cast<double>(below) / static_cast<double>(scores.size());
}

double median(std::vector<double> values) {
  if (values.empty()) throw ContractError("median: empty input");
  std::sort(values.begin(), values.end());
  const std::size_t m = values.size() / 2;
  return values.size() % 2 ? values[m] : 0.5 * (values[m - 1] + values[m]);
}

std::string EvalReport::to_json(int indent) const {
  nlohmann::ordered_json j;
  j["bleu1"] = bleu1;
  j["bleu4"] = bleu4;
  j["cider"] = cider;
  j["poor_quality_fraction"] = poor_quality_fraction;
  j["compliance"] = nlohmann::ordered_json::object();
  for (const auto& [attr, value] : compliance) j["compliance"][attr] = value;
  return j.dump(indent);
}

EvalReport EvalReport::from_json(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("EvalReport: ") + e.what());
  }
  if (!j.is_object() || j.size() != 5) throw FormatError("EvalReport: expected exactly five fields");
  EvalReport r;
  try {
    r.bleu1 = j.at("bleu1").get<double>();
    r.bleu4 = j.at("bleu4").get<double>();
    r.cider = j.at("cider").get<double>();
    r.poor_quality_fraction = j.at("poor_quality_fraction").get<double>();
    for (const auto& [attr, value] : j.at("compliance").items()) r.compliance[attr] = value.get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("EvalReport: ") + e.what());
  }
  return r;
}

bool EvalReport::valid() const {
  auto unit = [](double x) { return x >= 0.0 && x <= 1.0; };
  if (!unit(bleu1) || !unit(bleu4) || !unit(poor_quality_fraction) || !(cider >= 0.0)) return false;
  return std::all_of(compliance.begin(), compliance.end(), [&](const auto& kv) { return unit(kv.second); });
}

}  // namespace capctl::metrics
