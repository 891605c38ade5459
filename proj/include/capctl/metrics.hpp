// SPDX-License-Identifier: Apache-2.0
//
// BLEU and CIDEr-D over token-id sequences, plus the aggregate measures
// reported by the evaluator.
#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "capctl/errors.hpp"

namespace capctl::metrics {

using Tokens = std::vector<int>;

constexpr int kMaxOrder = 4;

/// n-gram of up to four ids below 2^16 packed into one integer; the order
/// is implied by the table it is stored in.
std::uint64_t pack_ngram(std::span<const int> ids);
std::vector<int> unpack_ngram(std::uint64_t key, int order);

using NGramCounts = std::unordered_map<std::uint64_t, int>;

/// Counts of every n-gram of the given order.
NGramCounts count_ngrams(const Tokens& tokens, int order);

/// Document frequencies over a reference corpus, one document per image.
/// weight(g) = log(N / df(g)); n-grams never seen get df = 1.
class IdfStats {
 public:
  IdfStats() = default;

  static IdfStats from_references(const std::vector<std::vector<Tokens>>& documents);
  static IdfStats from_document_frequencies(std::size_t num_docs,
                                            std::array<NGramCounts, kMaxOrder> df);

  std::size_t num_docs() const { return num_docs_; }
  /// Document frequency of an n-gram of order `order` (1-based), 0 if unseen.
  int document_frequency(int order, std::uint64_t key) const;
  double weight(int order, std::uint64_t key) const;
  const NGramCounts& table(int order) const { return df_.at(order - 1); }

 private:
  std::size_t num_docs_ = 0;
  double log_docs_ = 0.0;
  std::array<NGramCounts, kMaxOrder> df_;
};

struct BleuResult {
  double score = 0.0;
  bool empty_candidate = false;
};

/// Sentence BLEU-n: geometric mean of clipped precisions for orders 1..n
/// times the brevity penalty against the closest reference length.
BleuResult bleu_n(const Tokens& candidate, const std::vector<Tokens>& references, int n);

/// Corpus BLEU-n with statistics pooled over all candidates.
double corpus_bleu(const std::vector<Tokens>& candidates,
                   const std::vector<std::vector<Tokens>>& references, int n);

/// CIDEr-D on the native 0-10 scale.
double cider_d(const Tokens& candidate, const std::vector<Tokens>& references,
               const IdfStats& idf, double sigma = 6.0);

/// Reports quote CIDEr x100 ("paper scale"): 120.3 there is 1.203 here.
constexpr double kPaperScale = 100.0;
constexpr double to_paper_scale(double native) { return native * kPaperScale; }
constexpr double to_native_scale(double paper_value) { return paper_value / kPaperScale; }

/// Fraction of scores strictly below `threshold`.
double poor_quality_fraction(std::span<const double> scores, double threshold);

/// Fraction of (requested, observed) pairs that match exactly.
template <typename V>
double control_compliance(std::span<const std::pair<V, V>> pairs) {
  if (pairs.empty()) throw ContractError("control_compliance: empty input");
  std::size_t hits = 0;
  for (const auto& [requested, observed] : pairs) hits += requested == observed ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(pairs.size());
}

double median(std::vector<double> values);

struct EvalReport {
  double bleu1 = 0.0;
  double bleu4 = 0.0;
  double cider = 0.0;
  double poor_quality_fraction = 0.0;
  std::map<std::string, double> compliance;

  /// Serialized with exactly the five field names above.
  std::string to_json(int indent = 2) const;
  static EvalReport from_json(const std::string& text);
  bool valid() const;
};

}  // namespace capctl::metrics
