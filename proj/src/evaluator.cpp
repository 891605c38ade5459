// SPDX-License-Identifier: Apache-2.0
#include "capctl/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "capctl/parallel.hpp"
#include "capctl/trainer.hpp"
#include "json.hpp"

namespace capctl::evaluator {

namespace t = capctl::tensor;
using corpus::SceneRecord;

namespace {

constexpr std::size_t kChunk = 64;

std::vector<float> beta_for(const CaptionerParams<float>& p, const SystemUnderTest& sut, const SceneRecord& record) {
  auto beta = trainer::scene_beta(record, p.control, sut.quality_beta);
  for (std::size_t d = 0; d < p.control.size(); ++d) {
    auto it = sut.requests.find(p.control.dims[d]);
    if (it != sut.requests.end()) beta[d] = it->second;
  }
  return beta;
}

std::vector<Tokens> greedy_all(const CaptionerParams<float>& p, const SystemUnderTest& sut,
                               const std::vector<const SceneRecord*>& scenes, int max_len) {
  std::vector<Tokens> out(scenes.size());
  const std::size_t chunks = (scenes.size() + kChunk - 1) / kChunk;
  parallel_for(chunks, [&](std::size_t c) {
    t::NoGradGuard guard;
    const std::size_t lo = c * kChunk, hi = std::min(scenes.size(), lo + kChunk);
    std::vector<const captioner::Features*> feats;
    std::vector<std::vector<float>> betas;
    for (std::size_t i = lo; i < hi; ++i) {
      feats.push_back(&scenes[i]->features);
      betas.push_back(beta_for(p, sut, *scenes[i]));
    }
    const auto img = captioner::project_features(p, std::span<const captioner::Features* const>(feats));
    auto caps = captioner::greedy_decode(p, img, captioner::beta_rows<float>(betas), max_len);
    for (std::size_t i = lo; i < hi; ++i) out[i] = std::move(caps[i - lo]);
  });
  return out;
}

void check_vocab(const CaptionerParams<float>& p, const corpus::Dataset& dataset) {
  if (p.dims.vocab != dataset.vocab.size())
    throw ContractError("captioner vocabulary size " + std::to_string(p.dims.vocab) + " does not match dataset " +
                        std::to_string(dataset.vocab.size()));
  if (p.dims.feature_dim != static_cast<std::size_t>(dataset.config.feature_dim))
    throw ContractError("captioner feature width does not match dataset");
}

std::vector<std::vector<Tokens>> references_of(const std::vector<const SceneRecord*>& scenes) {
  std::vector<std::vector<Tokens>> refs;
  refs.reserve(scenes.size());
  for (const auto* r : scenes) refs.push_back(r->reference_tokens());
  return refs;
}

bool can_realize(const corpus::RealizableAttributes& r, Attribute a, int value) {
  switch (a) {
    case Attribute::Length: return r.lengths.count(value) > 0;
    case Attribute::Tense: return r.tenses.count(value) > 0;
    case Attribute::Nouns: return r.noun_counts.count(value) > 0;
    case Attribute::Quality: break;
  }
  return false;
}

int requested_int(float v) { return static_cast<int>(std::lround(v)); }

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

}  // namespace

void EvalConfig::validate() const {
  if (beam < 1) throw ConfigError("eval.beam must be >= 1");
  if (max_len < 1) throw ConfigError("eval.max_len must be >= 1");
  if (threshold != "median" && threshold != "paper")
    throw ConfigError("eval.threshold must be median or paper, got '" + threshold + "'");
  if (max_scenes < 0) throw ConfigError("eval.max_scenes must be >= 0");
  if (!std::isfinite(beta)) throw ConfigError("eval.beta must be finite");
}

void SystemUnderTest::validate() const {
  if (forward == nullptr) throw ContractError("system needs a forward model");
  if (beam < 1) throw ContractError("beam width must be >= 1");
  if (matcher != nullptr && backward == nullptr && beam == 1)
    throw ContractError("a matcher needs a backward model or beam width > 1");
  if (backward != nullptr && backward->dims.vocab != forward->dims.vocab)
    throw ContractError("forward and backward vocabularies differ");
  if (matcher != nullptr && matcher->dims.vocab != forward->dims.vocab)
    throw ContractError("matcher vocabulary differs from the captioner's");
  for (const auto& [a, v] : requests) {
    (void)v;
    if (a == Attribute::Quality) throw ContractError("quality is set through quality_beta, not requests");
  }
}

std::vector<const SceneRecord*> eval_scenes(const std::vector<SceneRecord>& split, int max_scenes) {
  std::size_t n = split.size();
  if (max_scenes > 0) n = std::min(n, static_cast<std::size_t>(max_scenes));
  std::vector<const SceneRecord*> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) out.push_back(&split[i]);
  return out;
}

std::vector<float> system_beta(const SystemUnderTest& sut, const SceneRecord& record) {
  sut.validate();
  return beta_for(*sut.forward, sut, record);
}

std::vector<SceneResult> run_system(const SystemUnderTest& sut, const std::vector<const SceneRecord*>& scenes,
                                    int max_len) {
  sut.validate();
  std::vector<SceneResult> out(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) out[i].scene_id = static_cast<int>(scenes[i]->scene.scene_id);

  if (sut.beam > 1) {
    parallel_for(scenes.size(), [&](std::size_t i) {
      t::NoGradGuard guard;
      const auto beta = beta_for(*sut.forward, sut, *scenes[i]);
      auto hyps = captioner::beam_decode(*sut.forward, scenes[i]->features, beta, sut.beam, max_len);
      auto& r = out[i];
      for (auto& h : hyps) r.candidates.push_back(std::move(h.tokens));
      std::size_t pick = 0;
      if (sut.matcher != nullptr && r.candidates.size() > 1) {
        auto sel = matcher::select_caption(*sut.matcher, scenes[i]->features, r.candidates);
        pick = sel.index;
        r.scores = std::move(sel.scores);
      }
      r.caption = r.candidates.empty() ? Tokens{} : r.candidates[pick];
      r.source = "beam_" + std::to_string(pick);
    });
    return out;
  }

  const auto fwd = greedy_all(*sut.forward, sut, scenes, max_len);
  if (sut.backward == nullptr) {
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      out[i].candidates = {fwd[i]};
      out[i].caption = fwd[i];
      out[i].source = "fwd";
    }
    return out;
  }
  const auto bwd = greedy_all(*sut.backward, sut, scenes, max_len);
  parallel_for(scenes.size(), [&](std::size_t i) {
    auto& r = out[i];
    r.candidates = {fwd[i], bwd[i]};
    std::size_t pick = 0;
    if (sut.matcher != nullptr) {
      auto sel = matcher::select_caption(*sut.matcher, scenes[i]->features, r.candidates);
      pick = sel.index;
      r.scores = std::move(sel.scores);
    }
    r.caption = r.candidates[pick];
    r.source = pick == 0 ? "fwd" : "bwd";
  });
  return out;
}

double median_threshold(const CaptionerParams<float>& forward, const corpus::Dataset& dataset,
                        const std::string& split, const EvalConfig& config) {
  config.validate();
  check_vocab(forward, dataset);
  const auto scenes = eval_scenes(dataset.split(split), config.max_scenes);
  if (scenes.empty()) throw ContractError("split '" + split + "' is empty");
  SystemUnderTest sut;
  sut.forward = &forward;
  sut.quality_beta = config.beta;
  const auto caps = greedy_all(forward, sut, scenes, config.max_len);
  const auto refs = references_of(scenes);
  const auto idf = metrics::IdfStats::from_references(refs);
  std::vector<double> scores(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) scores[i] = metrics::cider_d(caps[i], refs[i], idf);
  return metrics::median(scores);
}

double resolve_threshold(const CaptionerParams<float>& forward, const corpus::Dataset& dataset,
                         const std::string& split, const EvalConfig& config) {
  config.validate();
  if (config.threshold == "paper") return metrics::to_native_scale(config.paper_threshold);
  return median_threshold(forward, dataset, split, config);
}

SystemResult eval_system(const SystemUnderTest& sut, const corpus::Dataset& dataset, const std::string& split,
                         const EvalConfig& config, double threshold) {
  config.validate();
  sut.validate();
  check_vocab(*sut.forward, dataset);
  if (sut.backward != nullptr) check_vocab(*sut.backward, dataset);
  const auto scenes = eval_scenes(dataset.split(split), config.max_scenes);
  if (scenes.empty()) throw ContractError("split '" + split + "' is empty");

  SystemResult result;
  result.threshold = threshold;
  result.scenes = run_system(sut, scenes, config.max_len);
  const auto refs = references_of(scenes);
  const auto idf = metrics::IdfStats::from_references(refs);

  std::vector<Tokens> caps;
  std::vector<double> ciders(scenes.size());
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    result.scenes[i].cider = ciders[i] = metrics::cider_d(result.scenes[i].caption, refs[i], idf);
    caps.push_back(result.scenes[i].caption);
  }
  auto& rep = result.report;
  rep.bleu1 = metrics::corpus_bleu(caps, refs, 1);
  rep.bleu4 = metrics::corpus_bleu(caps, refs, 4);
  double total = 0.0;
  for (double c : ciders) total += c;
  rep.cider = total / static_cast<double>(ciders.size());
  rep.poor_quality_fraction = metrics::poor_quality_fraction(ciders, threshold);

  for (const auto& [attr, value] : sut.requests) {
    const int want = requested_int(value);
    std::vector<std::pair<int, int>> pairs;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      if (!can_realize(corpus::realizable(scenes[i]->scene, dataset.config, dataset.vocab), attr, want)) continue;
      const auto observed = corpus::attribute_value(corpus::annotate(caps[i], dataset.vocab), attr);
      pairs.emplace_back(want, static_cast<int>(std::lround(observed)));
    }
    if (!pairs.empty())
      rep.compliance[corpus::attribute_name(attr)] =
          metrics::control_compliance(std::span<const std::pair<int, int>>(pairs));
  }
  return result;
}

std::vector<SweepPoint> beta_sweep(const CaptionerParams<float>& forward, const std::vector<double>& values,
                                   const corpus::Dataset& dataset, const std::string& split, const EvalConfig& config,
                                   double threshold) {
  if (values.empty()) throw ConfigError("beta sweep needs at least one value");
  if (std::find(forward.control.dims.begin(), forward.control.dims.end(), Attribute::Quality) ==
      forward.control.dims.end())
    throw ContractError("beta sweep needs a model with a quality control dimension");
  std::vector<SweepPoint> out;
  for (double b : values) {
    SystemUnderTest sut;
    sut.forward = &forward;
    sut.quality_beta = b;
    out.push_back({b, eval_system(sut, dataset, split, config, threshold).report});
  }
  return out;
}

std::vector<ControlRow> control_study(const CaptionerParams<float>& model, Attribute attribute,
                                      const std::vector<int>& values, const corpus::Dataset& dataset,
                                      const std::string& split, const EvalConfig& config) {
  config.validate();
  check_vocab(model, dataset);
  if (attribute == Attribute::Quality) throw ConfigError("control study takes length, tense or nouns");
  if (std::find(model.control.dims.begin(), model.control.dims.end(), attribute) == model.control.dims.end())
    throw ContractError("model has no '" + corpus::attribute_name(attribute) + "' control dimension");
  const auto scenes = eval_scenes(dataset.split(split), config.max_scenes);
  if (scenes.empty()) throw ContractError("split '" + split + "' is empty");
  const auto refs = references_of(scenes);
  const auto idf = metrics::IdfStats::from_references(refs);
  std::vector<corpus::RealizableAttributes> reach(scenes.size());
  parallel_for(scenes.size(), [&](std::size_t i) {
    reach[i] = corpus::realizable(scenes[i]->scene, dataset.config, dataset.vocab);
  });

  std::vector<ControlRow> rows;
  for (int v : values) {
    SystemUnderTest sut;
    sut.forward = &model;
    sut.quality_beta = config.beta;
    sut.requests[attribute] = static_cast<float>(v);
    const auto caps = greedy_all(model, sut, scenes, config.max_len);
    ControlRow row;
    row.requested = v;
    row.scenes = scenes.size();
    std::size_t hits = 0;
    for (std::size_t i = 0; i < scenes.size(); ++i) {
      const double observed = corpus::attribute_value(corpus::annotate(caps[i], dataset.vocab), attribute);
      row.mean_observed += observed;
      row.mean_cider += metrics::cider_d(caps[i], refs[i], idf);
      if (can_realize(reach[i], attribute, v)) {
        ++row.realizable;
        hits += std::lround(observed) == v ? 1 : 0;
      }
    }
    row.mean_observed /= static_cast<double>(scenes.size());
    row.mean_cider /= static_cast<double>(scenes.size());
    row.compliance = row.realizable == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(row.realizable);
    rows.push_back(row);
  }
  return rows;
}

double spearman(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size()) throw ContractError("spearman: length mismatch");
  const std::size_t n = x.size();
  if (n < 2) return 0.0;
  auto ranks = [n](const std::vector<double>& v) {
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return v[a] < v[b]; });
    std::vector<double> r(n);
    for (std::size_t i = 0; i < n;) {
      std::size_t j = i;
      while (j + 1 < n && v[idx[j + 1]] == v[idx[i]]) ++j;
      const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
      for (std::size_t k = i; k <= j; ++k) r[idx[k]] = avg;
      i = j + 1;
    }
    return r;
  };
  const auto rx = ranks(x), ry = ranks(y);
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < n; ++i) {
    mx += rx[i];
    my += ry[i];
  }
  mx /= static_cast<double>(n);
  my /= static_cast<double>(n);
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0 || syy == 0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

std::string sweep_to_json(const std::vector<SweepPoint>& sweep) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& p : sweep) {
    nlohmann::ordered_json j;
    j["beta"] = p.beta;
    j["report"] = nlohmann::ordered_json::parse(p.report.to_json());
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

std::string study_to_json(Attribute attribute, const std::vector<ControlRow>& rows) {
  nlohmann::ordered_json j;
  j["attribute"] = corpus::attribute_name(attribute);
  auto arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    arr.push_back({{"requested", r.requested},
                   {"compliance", r.compliance},
                   {"mean_cider", r.mean_cider},
                   {"mean_observed", r.mean_observed},
                   {"realizable", r.realizable},
                   {"scenes", r.scenes}});
  }
  j["rows"] = std::move(arr);
  return j.dump(2);
}

void write_scene_csv(const std::filesystem::path& path, const std::vector<SceneResult>& scenes,
                     const corpus::Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  out << "scene_id,caption,cider,selected_source\n";
  char buf[32];
  for (const auto& s : scenes) {
    std::snprintf(buf, sizeof buf, "%.6f", s.cider);
    out << s.scene_id << ',' << csv_field(vocab.decode(s.caption)) << ',' << buf << ',' << s.source << '\n';
  }
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace capctl::evaluator
