// SPDX-License-Identifier: Apache-2.0
#include "capctl/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "capctl/config.hpp"
#include "json.hpp"

namespace capctl::corpus {

namespace {

struct NounEntry {
  std::string word;
  NounKind kind;
  std::vector<std::string> place;  // preposition when the noun is a location
};

const std::vector<NounEntry>& nouns() {
  static const std::vector<NounEntry> table = {
      {"man", NounKind::Person, {"near"}},       {"woman", NounKind::Person, {"near"}},
      {"boy", NounKind::Person, {"near"}},       {"girl", NounKind::Person, {"near"}},
      {"dog", NounKind::Animal, {"near"}},       {"cat", NounKind::Animal, {"near"}},
      {"horse", NounKind::Animal, {"near"}},     {"frisbee", NounKind::Item, {"near"}},
      {"ball", NounKind::Item, {"near"}},        {"kite", NounKind::Item, {"near"}},
      {"tennis", NounKind::Item, {"near"}},      {"bag", NounKind::Item, {"near"}},
      {"bike", NounKind::Item, {"near"}},        {"tree", NounKind::Landmark, {"near"}},
      {"car", NounKind::Landmark, {"next", "to"}}, {"bench", NounKind::Landmark, {"on"}},
      {"table", NounKind::Landmark, {"at"}},     {"field", NounKind::Landmark, {"in"}},
      {"street", NounKind::Landmark, {"on"}},    {"mouth", NounKind::Part, {"in"}},
  };
  return table;
}

const std::vector<std::string>& colors() {
  static const std::vector<std::string> table = {"red", "blue", "green", "white",
                                                 "black", "brown", "yellow", "gray"};
  return table;
}

const std::vector<std::string>& function_words() {
  static const std::vector<std::string> table = {"a",    "the",  "its", "is", "with", "near",
                                                 "on",   "in",   "next", "to", "at"};
  return table;
}

struct VerbEntry {
  std::string base, third, ing, past, participle;
};

const std::vector<VerbEntry>& verbs() {
  static const std::vector<VerbEntry> table = {
      {"hold", "holds", "holding", "held", "held"},
      {"carry", "carries", "carrying", "carried", "carried"},
      {"play", "plays", "playing", "played", "played"},
      {"ride", "rides", "riding", "rode", "ridden"},
      {"chase", "chases", "chasing", "chased", "chased"},
      {"watch", "watches", "watching", "watched", "watched"},
      {"throw", "throws", "throwing", "threw", "thrown"},
      {"fly", "flies", "flying", "flew", "flown"},
      {"stand", "stands", "standing", "stood", "stood"},
  };
  return table;
}

struct RelationEntry {
  std::string name;
  int progressive;  // verb used with -ing
  int finite;       // verb used for present and past
  std::string bare_prep;  // "a man with a kite"; empty: use the object's place
  bool transitive;
};

const std::vector<RelationEntry>& relations() {
  static const std::vector<RelationEntry> table = {
      {"hold", 0, 1, "with", true},  {"play", 2, 2, "at", true},     {"ride", 3, 3, "on", true},
      {"chase", 4, 4, "near", true}, {"watch", 5, 5, "near", true},  {"throw", 6, 6, "with", true},
      {"fly", 7, 7, "with", true},   {"stand", 8, 8, "", false},
  };
  return table;
}

constexpr int kTennis = 10;
constexpr int kHorse = 6;
constexpr int kMouth = 19;

struct LexEntry {
  WordClass cls;
  std::optional<VerbForm> form;
};

const std::unordered_map<std::string, LexEntry>& lexicon() {
  static const auto table = [] {
    std::unordered_map<std::string, LexEntry> m;
    for (const auto& w : function_words()) m[w] = {WordClass::Function, std::nullopt};
    m["is"] = {WordClass::Copula, std::nullopt};
    for (const auto& n : nouns()) m[n.word] = {WordClass::Noun, std::nullopt};
    for (const auto& c : colors()) m[c] = {WordClass::Color, std::nullopt};
    m["young"] = {WordClass::Adjective, std::nullopt};
    for (const auto& v : verbs()) {
      m[v.base] = {WordClass::Verb, VerbForm::Base};
      m[v.third] = {WordClass::Verb, VerbForm::Third};
      m[v.ing] = {WordClass::Verb, VerbForm::Ing};
      if (v.past == v.participle) {
        m[v.past] = {WordClass::Verb, VerbForm::PastParticiple};
      } else {
        m[v.past] = {WordClass::Verb, VerbForm::Past};
        m[v.participle] = {WordClass::Verb, VerbForm::Participle};
      }
    }
    return m;
  }();
  return table;
}

bool is_agent(int noun) {
  const auto k = noun_kind(noun);
  return k == NounKind::Person || k == NounKind::Animal;
}

}  // namespace

// ---------------------------------------------------------------------------
// Lexicon
// ---------------------------------------------------------------------------

const std::string& noun_word(int noun) { return nouns().at(static_cast<std::size_t>(noun)).word; }
NounKind noun_kind(int noun) { return nouns().at(static_cast<std::size_t>(noun)).kind; }
const std::string& color_word(int color) { return colors().at(static_cast<std::size_t>(color)); }
const std::string& relation_name(int relation) {
  return relations().at(static_cast<std::size_t>(relation)).name;
}

int relation_id(std::string_view name) {
  for (std::size_t i = 0; i < relations().size(); ++i) {
    if (relations()[i].name == name) return static_cast<int>(i);
  }
  throw LexiconError("unknown relation '" + std::string(name) + "'");
}

int noun_id(std::string_view word) {
  for (std::size_t i = 0; i < nouns().size(); ++i) {
    if (nouns()[i].word == word) return static_cast<int>(i);
  }
  throw LexiconError("unknown noun '" + std::string(word) + "'");
}

int color_id(std::string_view word) {
  for (std::size_t i = 0; i < colors().size(); ++i) {
    if (colors()[i] == word) return static_cast<int>(i);
  }
  throw LexiconError("unknown color '" + std::string(word) + "'");
}

int relation_between(int subject_noun, int object_noun) {
  if (!is_agent(subject_noun)) throw ContractError("relation_between: subject must be a person or animal");
  const bool person = noun_kind(subject_noun) == NounKind::Person;
  const std::string& o = noun_word(object_noun);
  switch (noun_kind(object_noun)) {
    case NounKind::Landmark:
      return relation_id("stand");
    case NounKind::Part:
      throw ContractError("relation_between: '" + o + "' cannot be an object");
    case NounKind::Person:
    case NounKind::Animal:
      if (!person) return relation_id("chase");
      return relation_id(object_noun == kHorse ? "ride" : "watch");
    case NounKind::Item:
      break;
  }
  if (o == "tennis") return relation_id("play");
  if (o == "bag") return relation_id("hold");
  if (o == "frisbee") return relation_id(person ? "throw" : "hold");
  if (o == "ball") return relation_id(person ? "throw" : "chase");
  if (o == "kite") return relation_id(person ? "fly" : "chase");
  return relation_id(person ? "ride" : "chase");  // bike
}

Vocabulary Vocabulary::standard() {
  std::vector<std::string> tokens = {"<pad>", "<bos>", "<eos>", "<unk>"};
  for (const auto& w : function_words()) tokens.push_back(w);
  for (const auto& n : nouns()) tokens.push_back(n.word);
  for (const auto& c : colors()) tokens.push_back(c);
  tokens.push_back("young");
  for (const auto& v : verbs()) {
    for (const auto* w : {&v.base, &v.third, &v.ing, &v.past, &v.participle}) {
      if (std::find(tokens.begin(), tokens.end(), *w) == tokens.end()) tokens.push_back(*w);
    }
  }
  return from_tokens(std::move(tokens));
}

Vocabulary Vocabulary::from_tokens(std::vector<std::string> tokens) {
  static const std::array<std::string, kNumReserved> reserved = {"<pad>", "<bos>", "<eos>", "<unk>"};
  if (tokens.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens.begin())) {
    throw FormatError("vocabulary: ids 0-3 must be <pad> <bos> <eos> <unk>");
  }
  Vocabulary v;
  v.tokens_ = std::move(tokens);
  for (std::size_t i = 0; i < v.tokens_.size(); ++i) {
    const auto& w = v.tokens_[i];
    if (w.empty() || w.find_first_of(" \t\r\n") != std::string::npos) {
      throw FormatError("vocabulary: malformed token at id " + std::to_string(i));
    }
    if (!v.ids_.emplace(w, static_cast<int>(i)).second) {
      throw FormatError("vocabulary: duplicate token '" + w + "'");
    }
    if (i < reserved.size()) {
      v.classes_.push_back(WordClass::Reserved);
      v.forms_.push_back(std::nullopt);
      continue;
    }
    auto it = lexicon().find(w);
    v.classes_.push_back(it == lexicon().end() ? WordClass::Function : it->second.cls);
    v.forms_.push_back(it == lexicon().end() ? std::nullopt : it->second.form);
  }
  return v;
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("vocabulary: cannot read " + path.string());
  std::vector<std::string> tokens;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    tokens.push_back(line);
  }
  return from_tokens(std::move(tokens));
}

void Vocabulary::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("vocabulary: cannot write " + path.string());
  for (const auto& t : tokens_) out << t << '\n';
  if (!out) throw IoError("vocabulary: write failed for " + path.string());
}

std::optional<int> Vocabulary::find(std::string_view word) const {
  auto it = ids_.find(std::string(word));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

int Vocabulary::id(std::string_view word) const {
  if (auto i = find(word)) return *i;
  throw LexiconError("word '" + std::string(word) + "' is not in the vocabulary");
}

void Vocabulary::check(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw LexiconError("token id " + std::to_string(id) + " outside vocabulary of " +
                       std::to_string(tokens_.size()));
  }
}

const std::string& Vocabulary::word(int id) const {
  check(id);
  return tokens_[static_cast<std::size_t>(id)];
}

WordClass Vocabulary::word_class(int id) const {
  check(id);
  return classes_[static_cast<std::size_t>(id)];
}

std::optional<VerbForm> Vocabulary::verb_form(int id) const {
  check(id);
  return forms_[static_cast<std::size_t>(id)];
}

Tokens Vocabulary::encode(std::string_view sentence) const {
  Tokens out;
  std::istringstream in{std::string(sentence)};
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return std::tolower(c); });
    out.push_back(id(w));
  }
  return out;
}

std::string Vocabulary::decode(const Tokens& tokens) const {
  std::string out;
  for (int t : tokens) {
    if (t == kPad || t == kBos || t == kEos) continue;
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

std::uint32_t Vocabulary::hash() const {
  std::string joined;
  for (const auto& t : tokens_) joined += t + '\n';
  const auto h = fnv1a(joined);
  return static_cast<std::uint32_t>(h ^ (h >> 32));
}

int tag_tense(const Tokens& tokens, const Vocabulary& vocab) {
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (vocab.word_class(tokens[i]) != WordClass::Verb) continue;
    const auto form = *vocab.verb_form(tokens[i]);
    const bool after_copula = i > 0 && vocab.word_class(tokens[i - 1]) == WordClass::Copula;
    if (after_copula && (form == VerbForm::Ing || form == VerbForm::Participle ||
                         form == VerbForm::PastParticiple)) {
      return 2;
    }
    switch (form) {
      case VerbForm::Ing:
        return 3;
      case VerbForm::Base:
      case VerbForm::Third:
        return 4;
      default:
        return 5;
    }
  }
  return 1;
}

int count_nouns(const Tokens& tokens, const Vocabulary& vocab) {
  return static_cast<int>(std::count_if(tokens.begin(), tokens.end(), [&](int t) {
    return vocab.word_class(t) == WordClass::Noun;
  }));
}

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

void CorpusConfig::validate() const {
  if (num_nouns <= 0 || num_colors <= 0) throw ConfigError("corpus: noun and color lexicons must be non-empty");
  if (num_nouns > kNumObjectNouns) throw ConfigError("corpus: num_nouns must be at most 19");
  if (num_colors > kNumColors) throw ConfigError("corpus: num_colors must be at most 8");
  if (min_objects < 2 || max_objects > 6 || min_objects > max_objects) {
    throw ConfigError("corpus: object counts must satisfy 2 <= min_objects <= max_objects <= 6");
  }
  if (feature_dim <= 0) throw ConfigError("corpus: feature_dim must be positive");
  if (!(noise_sigma >= 0.0)) throw ConfigError("corpus: noise_sigma must be >= 0");
  if (!(ref_noise >= 0.0 && ref_noise <= 1.0)) throw ConfigError("corpus: ref_noise must be in [0, 1]");
  if (max_extras < 0) throw ConfigError("corpus: max_extras must be >= 0");
  if (refs_per_scene < 2) throw ConfigError("corpus: refs_per_scene must be at least 2");
  if (train_size <= 0 || val_size <= 0 || test_size <= 0) throw ConfigError("corpus: split sizes must be positive");
}

Scene generate_scene(std::int64_t scene_id, Rng& rng, const CorpusConfig& config) {
  config.validate();
  std::vector<int> agents;
  for (int n = 0; n < config.num_nouns; ++n) {
    if (is_agent(n)) agents.push_back(n);
  }
  std::uniform_int_distribution<int> count(config.min_objects, config.max_objects);
  std::uniform_int_distribution<std::size_t> agent(0, agents.size() - 1);
  std::uniform_int_distribution<int> noun(0, config.num_nouns - 1);
  std::uniform_int_distribution<int> color(0, config.num_colors - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Scene scene;
  scene.scene_id = scene_id;
  const int k = count(rng);
  for (int i = 0; i < k; ++i) {
    SceneObject o;
    o.noun = i == 0 ? agents[agent(rng)] : noun(rng);
    o.color = color(rng);
    // Subject largest, related object second, extras smaller still.
    const double lo = i == 0 ? 0.55 : i == 1 ? 0.35 : 0.10;
    const double hi = i == 0 ? 0.80 : i == 1 ? 0.50 : 0.30;
    const double w = lo + (hi - lo) * unit(rng);
    const double h = lo + (hi - lo) * unit(rng);
    const double x = (1.0 - w) * unit(rng);
    const double y = (1.0 - h) * unit(rng);
    o.box = {static_cast<float>(x), static_cast<float>(y), static_cast<float>(w), static_cast<float>(h)};
    scene.objects.push_back(o);
  }
  std::stable_sort(scene.objects.begin() + 2, scene.objects.end(), [](const auto& a, const auto& b) {
    return a.box[2] * a.box[3] > b.box[2] * b.box[3];
  });
  scene.relations.push_back({0, relation_between(scene.objects[0].noun, scene.objects[1].noun), 1});
  return scene;
}

std::vector<std::vector<float>> region_features(const Scene& scene, const CorpusConfig& config, Rng& rng) {
  const auto d = static_cast<std::size_t>(config.feature_dim);
  Rng prng = make_rng(config.seed, "projection");
  std::normal_distribution<double> pdist(0.0, std::sqrt(0.5));
  std::vector<double> proj(d * kSymbolicDim);
  for (auto& p : proj) p = pdist(prng);

  std::normal_distribution<double> noise(0.0, 1.0);
  std::vector<std::vector<float>> out;
  for (const auto& o : scene.objects) {
    std::array<double, kSymbolicDim> u{};
    u[static_cast<std::size_t>(o.noun)] = 1.0;
    u[static_cast<std::size_t>(kNumNouns + o.color)] = 1.0;
    for (int j = 0; j < 4; ++j) u[static_cast<std::size_t>(kNumNouns + kNumColors + j)] = o.box[j];
    std::vector<float> f(d);
    for (std::size_t r = 0; r < d; ++r) {
      double acc = 0.0;
      for (std::size_t c = 0; c < kSymbolicDim; ++c) acc += proj[r * kSymbolicDim + c] * u[c];
      f[r] = static_cast<float>(acc + config.noise_sigma * noise(rng));
    }
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

bool has_complement(const Scene& scene) {
  if (scene.relations.empty()) return false;
  const auto& r = scene.relations.front();
  return relation_name(r.relation) == "hold" &&
         noun_kind(scene.objects[static_cast<std::size_t>(r.subject)].noun) == NounKind::Animal;
}

int max_extras(const Scene& scene, const CorpusConfig& config) {
  return std::max(0, std::min(config.max_extras, static_cast<int>(scene.objects.size()) - 2));
}

namespace {

void noun_phrase(Tokens& out, const SceneObject& o, bool definite, bool adjective, const Vocabulary& vocab) {
  if (o.noun == kTennis) {
    out.push_back(vocab.id("tennis"));
    return;
  }
  out.push_back(vocab.id(definite ? "the" : "a"));
  if (adjective) {
    out.push_back(vocab.id(noun_kind(o.noun) == NounKind::Person ? "young" : color_word(o.color)));
  }
  out.push_back(vocab.id(noun_word(o.noun)));
}

void place(Tokens& out, int noun, const Vocabulary& vocab) {
  for (const auto& w : nouns().at(static_cast<std::size_t>(noun)).place) out.push_back(vocab.id(w));
}

}  // namespace

Tokens realize(const Scene& scene, const RealizationChoice& choice, const Vocabulary& vocab) {
  if (scene.objects.size() < 2 || scene.relations.empty()) throw ContractError("realize: scene has no relation");
  if (choice.tense < 1 || choice.tense > 5) throw ContractError("realize: tense must be 1..5");
  if (choice.extras.size() + 2 > scene.objects.size()) throw ContractError("realize: more extras than objects");
  const auto& rel = scene.relations.front();
  const auto& entry = relations().at(static_cast<std::size_t>(rel.relation));
  const auto& subject = scene.objects.at(static_cast<std::size_t>(rel.subject));
  const auto& object = scene.objects.at(static_cast<std::size_t>(rel.object));

  Tokens out;
  noun_phrase(out, subject, choice.subject_definite, choice.subject_adjective, vocab);
  if (choice.tense == 1) {
    if (entry.transitive) out.push_back(vocab.id(entry.bare_prep));
    else place(out, object.noun, vocab);
  } else {
    const auto& progressive = verbs()[static_cast<std::size_t>(entry.progressive)];
    const auto& finite = verbs()[static_cast<std::size_t>(entry.finite)];
    switch (choice.tense) {
      case 2:
        out.push_back(vocab.id("is"));
        out.push_back(vocab.id(progressive.ing));
        break;
      case 3:
        out.push_back(vocab.id(progressive.ing));
        break;
      case 4:
        out.push_back(vocab.id(finite.third));
        break;
      default:
        out.push_back(vocab.id(finite.past));
        break;
    }
    if (!entry.transitive) place(out, object.noun, vocab);
  }
  noun_phrase(out, object, choice.object_definite, choice.object_adjective, vocab);
  if (choice.complement && has_complement(scene)) {
    for (const char* w : {"in", "its", "mouth"}) out.push_back(vocab.id(w));
  }
  for (std::size_t j = 0; j < choice.extras.size(); ++j) {
    const auto& o = scene.objects[j + 2];
    place(out, o.noun, vocab);
    noun_phrase(out, o, choice.extras[j].definite, choice.extras[j].adjective, vocab);
  }
  return out;
}

RealizationChoice sample_choice(const Scene& scene, const CorpusConfig& config, Rng& rng) {
  std::uniform_int_distribution<int> tense(1, 5);
  std::uniform_int_distribution<int> extras(0, max_extras(scene, config));
  std::bernoulli_distribution definite(0.3), adjective(0.5), complement(0.5);
  RealizationChoice c;
  c.tense = tense(rng);
  c.subject_definite = definite(rng);
  c.subject_adjective = adjective(rng);
  c.object_definite = definite(rng);
  c.object_adjective = adjective(rng);
  c.complement = has_complement(scene) && complement(rng);
  const int n = extras(rng);
  for (int j = 0; j < n; ++j) {
    ExtraChoice e;
    e.definite = definite(rng);
    e.adjective = adjective(rng);
    c.extras.push_back(e);
  }
  return c;
}

Caption annotate(Tokens tokens, const Vocabulary& vocab) {
  Caption c;
  c.length = static_cast<int>(tokens.size());
  c.tense = tag_tense(tokens, vocab);
  c.noun_count = count_nouns(tokens, vocab);
  c.tokens = std::move(tokens);
  return c;
}

void corrupt(Tokens& tokens, const Vocabulary& vocab, Rng& rng) {
  std::vector<std::size_t> slots;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    const auto cls = vocab.word_class(tokens[i]);
    if (cls == WordClass::Color) slots.push_back(i);
    if (cls == WordClass::Noun) {
      const int n = noun_id(vocab.word(tokens[i]));
      if (n != kTennis && n != kMouth) slots.push_back(i);
    }
  }
  if (slots.empty()) return;
  const std::size_t i = slots[std::uniform_int_distribution<std::size_t>(0, slots.size() - 1)(rng)];
  std::vector<std::string> pool;
  const auto& current = vocab.word(tokens[i]);
  if (vocab.word_class(tokens[i]) == WordClass::Color) {
    for (const auto& c : colors()) {
      if (c != current) pool.push_back(c);
    }
  } else {
    const auto kind = noun_kind(noun_id(current));
    for (int n = 0; n < kNumObjectNouns; ++n) {
      if (n != kTennis && noun_kind(n) == kind && noun_word(n) != current) pool.push_back(noun_word(n));
    }
  }
  tokens[i] = vocab.id(pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)]);
}

std::vector<Caption> render_references(const Scene& scene, const CorpusConfig& config,
                                       const Vocabulary& vocab, Rng& rng) {
  std::bernoulli_distribution noisy(config.ref_noise);
  std::vector<Caption> out;
  for (int r = 0; r < config.refs_per_scene; ++r) {
    auto tokens = realize(scene, sample_choice(scene, config, rng), vocab);
    if (noisy(rng)) corrupt(tokens, vocab, rng);
    out.push_back(annotate(std::move(tokens), vocab));
  }
  return out;
}

double assign_quality(const Tokens& caption, const std::vector<Tokens>& other_references,
                      const metrics::IdfStats& idf) {
  if (other_references.empty()) throw ContractError("assign_quality: needs at least one other reference");
  return metrics::cider_d(caption, other_references, idf);
}

RealizableAttributes realizable(const Scene& scene, const CorpusConfig& config, const Vocabulary& vocab) {
  RealizableAttributes out;
  const int extras = max_extras(scene, config);
  const int complements = has_complement(scene) ? 2 : 1;
  for (int tense = 1; tense <= 5; ++tense) {
    for (int adj = 0; adj < 4; ++adj) {
      for (int comp = 0; comp < complements; ++comp) {
        for (int n = 0; n <= extras; ++n) {
          for (int mask = 0; mask < (1 << n); ++mask) {
            RealizationChoice c;
            c.tense = tense;
            c.subject_adjective = adj & 1;
            c.object_adjective = adj & 2;
            c.complement = comp == 1;
            for (int j = 0; j < n; ++j) c.extras.push_back({false, ((mask >> j) & 1) != 0});
            const auto cap = annotate(realize(scene, c, vocab), vocab);
            out.lengths.insert(cap.length);
            out.tenses.insert(cap.tense);
            out.noun_counts.insert(cap.noun_count);
          }
        }
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Control signals
// ---------------------------------------------------------------------------

std::string attribute_name(Attribute a) {
  switch (a) {
    case Attribute::Quality:
      return "quality";
    case Attribute::Length:
      return "length";
    case Attribute::Tense:
      return "tense";
    case Attribute::Nouns:
      return "nouns";
  }
  return "?";
}

Attribute parse_attribute(std::string_view name) {
  for (auto a : {Attribute::Quality, Attribute::Length, Attribute::Tense, Attribute::Nouns}) {
    if (attribute_name(a) == name) return a;
  }
  throw ConfigError("unknown control attribute '" + std::string(name) + "'");
}

ControlLayout ControlLayout::parse(std::string_view spec) {
  ControlLayout layout;
  while (!spec.empty()) {
    const auto comma = spec.find(',');
    layout.dims.push_back(parse_attribute(spec.substr(0, comma)));
    spec = comma == std::string_view::npos ? std::string_view{} : spec.substr(comma + 1);
  }
  if (layout.dims.empty() || layout.dims.size() > 4) {
    throw ConfigError("control layout must name 1 to 4 attributes");
  }
  return layout;
}

std::string ControlLayout::str() const {
  std::string out;
  for (auto a : dims) out += (out.empty() ? "" : ",") + attribute_name(a);
  return out;
}

double attribute_value(const Caption& caption, Attribute a) {
  switch (a) {
    case Attribute::Quality:
      return caption.quality;
    case Attribute::Length:
      return caption.length;
    case Attribute::Tense:
      return caption.tense;
    case Attribute::Nouns:
      return caption.noun_count;
  }
  return 0.0;
}

std::vector<float> control_values(const Caption& caption, const ControlLayout& layout) {
  std::vector<float> out;
  for (auto a : layout.dims) out.push_back(static_cast<float>(attribute_value(caption, a)));
  return out;
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

std::vector<Tokens> SceneRecord::reference_tokens() const {
  std::vector<Tokens> out;
  for (const auto& c : captions) out.push_back(c.tokens);
  return out;
}

const std::vector<SceneRecord>& Dataset::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "val") return val;
  if (name == "test") return test;
  throw ConfigError("unknown split '" + std::string(name) + "'");
}

metrics::IdfStats idf_of(const std::vector<SceneRecord>& records) {
  std::vector<std::vector<Tokens>> docs;
  docs.reserve(records.size());
  for (const auto& r : records) docs.push_back(r.reference_tokens());
  return metrics::IdfStats::from_references(docs);
}

Dataset build_dataset(const CorpusConfig& config) {
  config.validate();
  Dataset ds;
  ds.config = config;
  ds.vocab = Vocabulary::standard();
  const std::uint64_t scene_seed = derive_seed(config.seed, "scene");
  std::int64_t next_id = 0;
  for (auto [split, size] : {std::pair{&ds.train, config.train_size}, std::pair{&ds.val, config.val_size},
                             std::pair{&ds.test, config.test_size}}) {
    for (int i = 0; i < size; ++i, ++next_id) {
      Rng rng(derive_seed(scene_seed, static_cast<std::uint64_t>(next_id)));
      SceneRecord rec;
      rec.scene = generate_scene(next_id, rng, config);
      rec.features = region_features(rec.scene, config, rng);
      rec.captions = render_references(rec.scene, config, ds.vocab, rng);
      split->push_back(std::move(rec));
    }
  }
  ds.idf = idf_of(ds.train);
  for (auto* split : {&ds.train, &ds.val, &ds.test}) {
    for (auto& rec : *split) {
      const auto refs = rec.reference_tokens();
      for (std::size_t i = 0; i < refs.size(); ++i) {
        std::vector<Tokens> others;
        for (std::size_t j = 0; j < refs.size(); ++j) {
          if (j != i || config.quality_include_self) others.push_back(refs[j]);
        }
        rec.captions[i].quality = static_cast<float>(assign_quality(refs[i], others, ds.idf));
      }
    }
  }
  return ds;
}

namespace {

using Json = nlohmann::basic_json<nlohmann::ordered_map, std::vector, std::string, bool, std::int64_t,
                                  std::uint64_t, float>;

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot read " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string ngram_text(std::uint64_t key, int order, const Vocabulary& vocab) {
  std::string out;
  for (int id : metrics::unpack_ngram(key, order)) out += (out.empty() ? "" : " ") + vocab.word(id);
  return out;
}

}  // namespace

std::string record_to_json(const SceneRecord& record, const Vocabulary& vocab) {
  Json j;
  j["scene_id"] = record.scene.scene_id;
  j["features"] = Json::array();
  for (const auto& f : record.features) j["features"].push_back(f);
  j["captions"] = Json::array();
  for (const auto& c : record.captions) {
    Json cj;
    cj["tokens"] = Json::array();
    for (int t : c.tokens) cj["tokens"].push_back(vocab.word(t));
    cj["tense"] = c.tense;
    cj["noun_count"] = c.noun_count;
    cj["length"] = c.length;
    cj["quality"] = c.quality;
    j["captions"].push_back(std::move(cj));
  }
  j["objects"] = Json::array();
  for (const auto& o : record.scene.objects) {
    Json oj;
    oj["noun"] = noun_word(o.noun);
    oj["color"] = color_word(o.color);
    oj["box"] = o.box;
    j["objects"].push_back(std::move(oj));
  }
  j["relations"] = Json::array();
  for (const auto& r : record.scene.relations) {
    j["relations"].push_back(Json::array({r.subject, relation_name(r.relation), r.object}));
  }
  return j.dump();
}

SceneRecord record_from_json(std::string_view line, const Vocabulary& vocab) {
  SceneRecord rec;
  try {
    const auto j = Json::parse(line);
    rec.scene.scene_id = j.at("scene_id").get<std::int64_t>();
    for (const auto& f : j.at("features")) rec.features.push_back(f.get<std::vector<float>>());
    for (const auto& cj : j.at("captions")) {
      Tokens tokens;
      for (const auto& w : cj.at("tokens")) tokens.push_back(vocab.id(w.get<std::string>()));
      auto c = annotate(std::move(tokens), vocab);
      if (c.length != cj.at("length").get<int>() || c.tense != cj.at("tense").get<int>() ||
          c.noun_count != cj.at("noun_count").get<int>()) {
        throw FormatError("scene " + std::to_string(rec.scene.scene_id) +
                          ": stored caption attributes disagree with the annotators");
      }
      c.quality = cj.at("quality").get<float>();
      rec.captions.push_back(std::move(c));
    }
    if (j.contains("objects")) {
      for (const auto& oj : j.at("objects")) {
        SceneObject o;
        o.noun = noun_id(oj.at("noun").get<std::string>());
        o.color = color_id(oj.at("color").get<std::string>());
        o.box = oj.at("box").get<std::array<float, 4>>();
        rec.scene.objects.push_back(o);
      }
    }
    if (j.contains("relations")) {
      for (const auto& rj : j.at("relations")) {
        rec.scene.relations.push_back(
            {rj.at(0).get<int>(), relation_id(rj.at(1).get<std::string>()), rj.at(2).get<int>()});
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("dataset record: ") + e.what());
  }
  if (!rec.scene.objects.empty() && rec.features.size() != rec.scene.objects.size()) {
    throw FormatError("scene " + std::to_string(rec.scene.scene_id) + ": feature and object counts differ");
  }
  if (rec.features.empty() || rec.captions.empty()) {
    throw FormatError("scene " + std::to_string(rec.scene.scene_id) + ": no features or captions");
  }
  for (const auto& f : rec.features) {
    if (f.size() != rec.features.front().size()) throw FormatError("ragged feature matrix");
    for (float x : f) {
      if (!std::isfinite(x)) throw FormatError("non-finite feature value");
    }
  }
  return rec;
}

void write_dataset(const Dataset& dataset, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  dataset.vocab.save(dir / "vocab.txt");
  write_text(dir / "config.txt", config::dump(dataset.config, "corpus."));

  nlohmann::json idf;
  idf["num_docs"] = dataset.idf.num_docs();
  std::map<std::string, int> df;
  for (int n = 1; n <= metrics::kMaxOrder; ++n) {
    for (const auto& [key, count] : dataset.idf.table(n)) df[ngram_text(key, n, dataset.vocab)] = count;
  }
  idf["df"] = df;
  write_text(dir / "idf.json", idf.dump(1) + "\n");

  for (const char* name : {"train", "val", "test"}) {
    std::string text;
    for (const auto& rec : dataset.split(name)) text += record_to_json(rec, dataset.vocab) + "\n";
    write_text(dir / (std::string(name) + ".jsonl"), text);
  }
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.vocab = Vocabulary::load(dir / "vocab.txt");
  const auto kv = config::KeyValues::load(dir / "config.txt");
  config::apply(ds.config, "corpus.", kv);
  kv.reject_unused();

  try {
    const auto j = nlohmann::json::parse(read_text(dir / "idf.json"));
    std::array<metrics::NGramCounts, metrics::kMaxOrder> df;
    for (const auto& [text, count] : j.at("df").items()) {
      const auto tokens = ds.vocab.encode(text);
      if (tokens.empty() || tokens.size() > static_cast<std::size_t>(metrics::kMaxOrder)) {
        throw FormatError("idf: bad n-gram '" + text + "'");
      }
      df[tokens.size() - 1][metrics::pack_ngram(tokens)] = count.get<int>();
    }
    ds.idf = metrics::IdfStats::from_document_frequencies(j.at("num_docs").get<std::size_t>(), std::move(df));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("idf.json: ") + e.what());
  }

  for (auto [name, split] : {std::pair{"train", &ds.train}, std::pair{"val", &ds.val}, std::pair{"test", &ds.test}}) {
    const auto path = dir / (std::string(name) + ".jsonl");
    if (!std::filesystem::exists(path)) continue;
    std::istringstream in(read_text(path));
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty()) split->push_back(record_from_json(line, ds.vocab));
    }
  }
  return ds;
}

}  // namespace capctl::corpus
