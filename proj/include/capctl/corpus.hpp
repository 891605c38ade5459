// SPDX-License-Identifier: Apache-2.0
//
// Synthetic scenes, their region features, and reference captions from a
// closed grammar, together with the attribute annotators (tense category,
// noun count, caption quality).
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "capctl/errors.hpp"
#include "capctl/metrics.hpp"
#include "capctl/rng.hpp"

namespace capctl::corpus {

using metrics::Tokens;

constexpr int kPad = 0;
constexpr int kBos = 1;
constexpr int kEos = 2;
constexpr int kUnk = 3;
constexpr int kNumReserved = 4;

enum class WordClass : std::uint8_t { Reserved, Function, Copula, Noun, Color, Adjective, Verb };
enum class VerbForm : std::uint8_t { Base, Third, Ing, Past, Participle, PastParticiple };
enum class NounKind : std::uint8_t { Person, Animal, Item, Landmark, Part };

// ---------------------------------------------------------------------------
// Lexicon
// ---------------------------------------------------------------------------

constexpr int kNumNouns = 20;
constexpr int kNumObjectNouns = 19;  // every noun except "mouth"
constexpr int kNumColors = 8;
constexpr int kNumRelations = 8;

const std::string& noun_word(int noun);
NounKind noun_kind(int noun);
const std::string& color_word(int color);
const std::string& relation_name(int relation);
int relation_id(std::string_view name);
int noun_id(std::string_view word);
int color_id(std::string_view word);

/// Relation a subject takes towards an object, fixed by their nouns.
int relation_between(int subject_noun, int object_noun);

class Vocabulary {
 public:
  /// Every word the grammar can produce, reserved tokens first.
  static Vocabulary standard();
  /// Rebuilds a vocabulary from its token list; word classes come from the
  /// built-in lexicon.
  static Vocabulary from_tokens(std::vector<std::string> tokens);
  static Vocabulary load(const std::filesystem::path& path);
  void save(const std::filesystem::path& path) const;

  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<int> find(std::string_view word) const;
  /// Throws LexiconError for words outside the vocabulary.
  int id(std::string_view word) const;
  const std::string& word(int id) const;
  WordClass word_class(int id) const;
  std::optional<VerbForm> verb_form(int id) const;

  Tokens encode(std::string_view sentence) const;
  std::string decode(const Tokens& tokens) const;
  std::uint32_t hash() const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  void check(int id) const;

  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> ids_;
  std::vector<WordClass> classes_;
  std::vector<std::optional<VerbForm>> forms_;
};

/// Tense category: 1 no verb, 2 copula + participle/-ing, 3 -ing,
/// 4 base/third person, 5 -ed. Decided by the first verb.
int tag_tense(const Tokens& tokens, const Vocabulary& vocab);
int count_nouns(const Tokens& tokens, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Scenes
// ---------------------------------------------------------------------------

struct CorpusConfig {
  std::uint64_t seed = 1;
  int min_objects = 2;
  int max_objects = 6;
  int num_nouns = kNumObjectNouns;
  int num_colors = kNumColors;
  int feature_dim = 64;
  double noise_sigma = 0.05;
  /// Probability that a reference has one noun or color swapped for a wrong one.
  double ref_noise = 0.2;
  /// Location phrases for extra objects per caption.
  int max_extras = 2;
  int refs_per_scene = 5;
  bool quality_include_self = false;
  int train_size = 2000;
  int val_size = 200;
  int test_size = 200;

  void validate() const;

  template <typename S, typename F>
  static void fields(S& s, F&& f) {
    f("seed", s.seed);
    f("min_objects", s.min_objects);
    f("max_objects", s.max_objects);
    f("num_nouns", s.num_nouns);
    f("num_colors", s.num_colors);
    f("feature_dim", s.feature_dim);
    f("noise_sigma", s.noise_sigma);
    f("ref_noise", s.ref_noise);
    f("max_extras", s.max_extras);
    f("refs_per_scene", s.refs_per_scene);
    f("quality_include_self", s.quality_include_self);
    f("train_size", s.train_size);
    f("val_size", s.val_size);
    f("test_size", s.test_size);
  }
};

struct SceneObject {
  int noun = 0;
  int color = 0;
  std::array<float, 4> box{};  // x, y, width, height

  bool operator==(const SceneObject&) const = default;
};

struct Relation {
  int subject = 0;
  int relation = 0;
  int object = 0;

  bool operator==(const Relation&) const = default;
};

/// Object 0 is the subject (always a person or animal), object 1 the
/// thing it relates to; the rest are sorted by decreasing area.
struct Scene {
  std::int64_t scene_id = 0;
  std::vector<SceneObject> objects;
  std::vector<Relation> relations;

  bool operator==(const Scene&) const = default;
};

Scene generate_scene(std::int64_t scene_id, Rng& rng, const CorpusConfig& config);

/// Width of the symbolic vector each region feature is projected from.
constexpr int kSymbolicDim = kNumNouns + kNumColors + 4;

/// f_i = P (onehot(noun) ++ onehot(color) ++ box) + noise, with P drawn
/// once from the corpus seed.
std::vector<std::vector<float>> region_features(const Scene& scene, const CorpusConfig& config,
                                                Rng& rng);

// ---------------------------------------------------------------------------
// Captions
// ---------------------------------------------------------------------------

struct ExtraChoice {
  bool definite = false;
  bool adjective = false;
};

/// Every free choice a realization makes.
struct RealizationChoice {
  int tense = 3;
  bool subject_definite = false;
  bool subject_adjective = false;
  bool object_definite = false;
  bool object_adjective = false;
  bool complement = false;  // "in its mouth"
  std::vector<ExtraChoice> extras;
};

bool has_complement(const Scene& scene);
int max_extras(const Scene& scene, const CorpusConfig& config);

Tokens realize(const Scene& scene, const RealizationChoice& choice, const Vocabulary& vocab);
RealizationChoice sample_choice(const Scene& scene, const CorpusConfig& config, Rng& rng);

struct Caption {
  Tokens tokens;
  int length = 0;
  int tense = 1;
  int noun_count = 0;
  float quality = 0.0f;
};

/// Caption with length, tense and noun count filled in; quality left at 0.
Caption annotate(Tokens tokens, const Vocabulary& vocab);

/// Swaps one noun or color for another of the same kind.
void corrupt(Tokens& tokens, const Vocabulary& vocab, Rng& rng);

std::vector<Caption> render_references(const Scene& scene, const CorpusConfig& config,
                                       const Vocabulary& vocab, Rng& rng);

/// CIDEr-D of a caption against the other references of its scene.
double assign_quality(const Tokens& caption, const std::vector<Tokens>& other_references,
                      const metrics::IdfStats& idf);

/// Attribute values some grammar realization of the scene attains.
struct RealizableAttributes {
  std::set<int> lengths;
  std::set<int> tenses;
  std::set<int> noun_counts;
};

RealizableAttributes realizable(const Scene& scene, const CorpusConfig& config, const Vocabulary& vocab);

// ---------------------------------------------------------------------------
// Control signals
// ---------------------------------------------------------------------------

enum class Attribute : std::uint8_t { Quality, Length, Tense, Nouns };

std::string attribute_name(Attribute a);
Attribute parse_attribute(std::string_view name);

/// Which attribute each control dimension carries.
struct ControlLayout {
  std::vector<Attribute> dims;

  static ControlLayout parse(std::string_view spec);  // e.g. "quality,length"
  std::string str() const;
  std::size_t size() const { return dims.size(); }
  bool operator==(const ControlLayout&) const = default;
};

double attribute_value(const Caption& caption, Attribute a);
std::vector<float> control_values(const Caption& caption, const ControlLayout& layout);

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct SceneRecord {
  Scene scene;
  std::vector<std::vector<float>> features;
  std::vector<Caption> captions;

  std::vector<Tokens> reference_tokens() const;
};

struct Dataset {
  CorpusConfig config;
  Vocabulary vocab;
  std::vector<SceneRecord> train;
  std::vector<SceneRecord> val;
  std::vector<SceneRecord> test;
  metrics::IdfStats idf;  // train references only

  const std::vector<SceneRecord>& split(std::string_view name) const;
};

/// Pure function of the config (seed included).
Dataset build_dataset(const CorpusConfig& config);

metrics::IdfStats idf_of(const std::vector<SceneRecord>& records);

/// Writes vocab.txt, config.txt, idf.json and {train,val,test}.jsonl.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

std::string record_to_json(const SceneRecord& record, const Vocabulary& vocab);
SceneRecord record_from_json(std::string_view line, const Vocabulary& vocab);

}  // namespace capctl::corpus
