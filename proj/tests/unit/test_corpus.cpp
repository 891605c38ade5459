// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "capctl/corpus.hpp"
#include "doctest.h"

using namespace capctl;
using namespace capctl::corpus;

namespace {

Scene two_object_scene(const char* subject, const char* object) {
  Scene s;
  s.objects.push_back({noun_id(subject), color_id("brown"), {0.1f, 0.1f, 0.7f, 0.7f}});
  s.objects.push_back({noun_id(object), color_id("red"), {0.2f, 0.2f, 0.4f, 0.4f}});
  s.relations.push_back({0, relation_between(s.objects[0].noun, s.objects[1].noun), 1});
  return s;
}

std::string say(const Scene& s, RealizationChoice c, const Vocabulary& v) { return v.decode(realize(s, c, v)); }

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

CorpusConfig small_config() {
  CorpusConfig c;
  c.train_size = 20;
  c.val_size = 5;
  c.test_size = 5;
  return c;
}

}  // namespace

TEST_CASE("vocabulary layout") {
  auto v = Vocabulary::standard();
  CHECK(v.word(kPad) == "<pad>");
  CHECK(v.word(kBos) == "<bos>");
  CHECK(v.word(kEos) == "<eos>");
  CHECK(v.word(kUnk) == "<unk>");
  for (std::size_t i = 0; i < v.size(); ++i) CHECK(v.id(v.word(static_cast<int>(i))) == static_cast<int>(i));
  CHECK(v.word_class(v.id("is")) == WordClass::Copula);
  CHECK(v.verb_form(v.id("held")) == VerbForm::PastParticiple);
  CHECK(v.verb_form(v.id("ridden")) == VerbForm::Participle);
  CHECK_THROWS_AS(v.id("zebra"), LexiconError);
  CHECK_THROWS_AS(Vocabulary::from_tokens({"a", "b"}), FormatError);
  CHECK(Vocabulary::from_tokens(v.tokens()) == v);
}

TEST_CASE("dog with frisbee realizes the five tense templates") {
  auto v = Vocabulary::standard();
  auto s = two_object_scene("dog", "frisbee");
  RealizationChoice c;
  c.complement = true;
  const char* expected[] = {"a dog with a frisbee in its mouth", "a dog is holding a frisbee in its mouth",
                            "a dog holding a frisbee in its mouth", "a dog carries a frisbee in its mouth",
                            "a dog carried a frisbee in its mouth"};
  for (int t = 1; t <= 5; ++t) {
    c.tense = t;
    CHECK(say(s, c, v) == expected[t - 1]);
    CHECK(tag_tense(v.encode(expected[t - 1]), v) == t);
  }
}

TEST_CASE("tense tagger and noun counter on hand sentences") {
  auto v = Vocabulary::standard();
  CHECK(tag_tense(v.encode("a dog with a frisbee in its mouth"), v) == 1);
  CHECK(tag_tense(v.encode("a dog is holding a frisbee in its mouth"), v) == 2);
  CHECK(tag_tense(v.encode("a dog holding a frisbee in its mouth"), v) == 3);
  CHECK(tag_tense(v.encode("a dog carries a frisbee in its mouth"), v) == 4);
  CHECK(tag_tense(v.encode("a dog carried a frisbee in its mouth"), v) == 5);
  CHECK(tag_tense(v.encode("a man is thrown near a car"), v) == 2);
  CHECK(tag_tense(v.encode("a man thrown near a car"), v) == 5);
  CHECK(tag_tense(v.encode("a man ride a horse"), v) == 4);
  CHECK(tag_tense({}, v) == 1);
  CHECK(count_nouns(v.encode("a young boy is playing tennis"), v) == 2);
  CHECK(count_nouns(v.encode("a dog with a frisbee in its mouth"), v) == 3);
  CHECK(count_nouns({}, v) == 0);
  CHECK_THROWS_AS(count_nouns({999}, v), LexiconError);
  CHECK_THROWS_AS(tag_tense({-1}, v), LexiconError);
}

TEST_CASE("young boy playing tennis") {
  auto v = Vocabulary::standard();
  auto s = two_object_scene("boy", "tennis");
  RealizationChoice c;
  c.tense = 2;
  c.subject_adjective = true;
  c.object_adjective = true;
  CHECK(say(s, c, v) == "a young boy is playing tennis");
}

TEST_CASE("relations follow the noun kinds") {
  CHECK(relation_name(relation_between(noun_id("man"), noun_id("horse"))) == "ride");
  CHECK(relation_name(relation_between(noun_id("cat"), noun_id("horse"))) == "chase");
  CHECK(relation_name(relation_between(noun_id("girl"), noun_id("kite"))) == "fly");
  CHECK(relation_name(relation_between(noun_id("dog"), noun_id("bench"))) == "stand");
  CHECK(relation_name(relation_between(noun_id("woman"), noun_id("boy"))) == "watch");
  CHECK_THROWS_AS(relation_between(noun_id("tree"), noun_id("dog")), ContractError);
  auto v = Vocabulary::standard();
  RealizationChoice c;
  c.tense = 1;
  CHECK(say(two_object_scene("dog", "car"), c, v) == "a dog next to a car");
  c.tense = 4;
  CHECK(say(two_object_scene("dog", "bench"), c, v) == "a dog stands on a bench");
}

TEST_CASE("scene generation") {
  CorpusConfig cfg;
  Rng a(1), b(1);
  CHECK(generate_scene(0, a, cfg) == generate_scene(0, b, cfg));

  cfg.min_objects = cfg.max_objects = 2;
  Rng r(3);
  for (int i = 0; i < 50; ++i) CHECK(generate_scene(i, r, cfg).objects.size() == 2);

  CorpusConfig bad;
  bad.num_colors = 0;
  CHECK_THROWS_AS(generate_scene(0, r, bad), ConfigError);
  bad = CorpusConfig{};
  bad.num_nouns = 0;
  CHECK_THROWS_AS(generate_scene(0, r, bad), ConfigError);
}

TEST_CASE("object counts are uniform over the range") {
  CorpusConfig cfg;  // 2..6
  Rng r(11);
  std::array<int, 5> hist{};
  for (int i = 0; i < 1000; ++i) {
    auto s = generate_scene(i, r, cfg);
    hist[s.objects.size() - 2]++;
    const auto kind = noun_kind(s.objects[0].noun);
    CHECK((kind == NounKind::Person || kind == NounKind::Animal));
    for (std::size_t k = 3; k < s.objects.size(); ++k) {
      CHECK(s.objects[k - 1].box[2] * s.objects[k - 1].box[3] >= s.objects[k].box[2] * s.objects[k].box[3]);
    }
  }
  double chi2 = 0.0;
  for (int h : hist) chi2 += (h - 200.0) * (h - 200.0) / 200.0;
  CHECK(chi2 < 18.47);  // chi-squared, 4 dof, p = 0.001
}

TEST_CASE("region features") {
  CorpusConfig cfg;
  cfg.noise_sigma = 0.0;
  Scene s = two_object_scene("dog", "ball");
  s.objects.push_back(s.objects[1]);
  Rng r(1);
  auto f = region_features(s, cfg, r);
  REQUIRE(f.size() == 3);
  CHECK(f[0].size() == 64);
  CHECK(f[1] == f[2]);
  CHECK(f[0] != f[1]);
  s.objects[2].noun = noun_id("kite");
  auto g = region_features(s, cfg, r);
  CHECK(g[1] != g[2]);

  cfg.noise_sigma = 0.1;
  double ss = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 40; ++rep) {
    auto noisy = region_features(s, cfg, r);
    for (std::size_t i = 0; i < noisy.size(); ++i)
      for (std::size_t j = 0; j < noisy[i].size(); ++j) {
        const double d = noisy[i][j] - g[i][j];
        ss += d * d;
        ++n;
      }
  }
  CHECK(std::sqrt(ss / n) == doctest::Approx(0.1).epsilon(0.05));
}

TEST_CASE("rendered references round-trip their annotations") {
  auto v = Vocabulary::standard();
  CorpusConfig cfg;
  Rng r(7);
  std::set<int> tenses;
  for (int i = 0; i < 300; ++i) {
    auto s = generate_scene(i, r, cfg);
    auto refs = render_references(s, cfg, v, r);
    CHECK(refs.size() == 5);
    for (const auto& c : refs) {
      CHECK(c.length == static_cast<int>(c.tokens.size()));
      CHECK(c.tense == tag_tense(c.tokens, v));
      CHECK(c.noun_count == count_nouns(c.tokens, v));
      CHECK(c.tense >= 1);
      CHECK(c.tense <= 5);
      tenses.insert(c.tense);
    }
  }
  CHECK(tenses.size() == 5);
}

TEST_CASE("realizations carry the requested tense and noun count") {
  auto v = Vocabulary::standard();
  CorpusConfig cfg;
  Rng r(21);
  for (int i = 0; i < 200; ++i) {
    auto s = generate_scene(i, r, cfg);
    auto c = sample_choice(s, cfg, r);
    auto cap = annotate(realize(s, c, v), v);
    CHECK(cap.tense == c.tense);
    CHECK(cap.noun_count == 2 + static_cast<int>(c.extras.size()) + (c.complement ? 1 : 0));
    auto reach = realizable(s, cfg, v);
    CHECK(reach.tenses == std::set<int>{1, 2, 3, 4, 5});
    CHECK(reach.lengths.count(cap.length) == 1);
    CHECK(reach.noun_counts.count(cap.noun_count) == 1);
  }
}

TEST_CASE("references are deterministic for a fixed seed") {
  auto v = Vocabulary::standard();
  CorpusConfig cfg;
  Rng a(5), b(5);
  auto sa = generate_scene(0, a, cfg);
  auto sb = generate_scene(0, b, cfg);
  auto ra = render_references(sa, cfg, v, a);
  auto rb = render_references(sb, cfg, v, b);
  for (std::size_t i = 0; i < ra.size(); ++i) CHECK(ra[i].tokens == rb[i].tokens);
}

TEST_CASE("quality annotator") {
  auto v = Vocabulary::standard();
  auto cap = v.encode("a dog holding a frisbee in its mouth");
  std::vector<std::vector<Tokens>> docs = {std::vector<Tokens>(5, cap), {v.encode("a man riding a horse")},
                                           {v.encode("a cat near a tree")}};
  auto idf = metrics::IdfStats::from_references(docs);
  CHECK(assign_quality(cap, std::vector<Tokens>(4, cap), idf) == doctest::Approx(10.0));
  CHECK(assign_quality(v.encode("man riding horse"), std::vector<Tokens>(4, cap), idf) == 0.0);
  CHECK_THROWS_AS(assign_quality(cap, {}, idf), ContractError);
}

TEST_CASE("control layouts") {
  auto l = ControlLayout::parse("quality,length");
  CHECK(l.size() == 2);
  CHECK(l.str() == "quality,length");
  CHECK_THROWS_AS(ControlLayout::parse("colour"), ConfigError);
  CHECK_THROWS_AS(ControlLayout::parse(""), ConfigError);
  CHECK_THROWS_AS(ControlLayout::parse("length,length,length,length,length"), ConfigError);
  Caption c;
  c.length = 9;
  c.tense = 3;
  c.noun_count = 2;
  c.quality = 1.5f;
  CHECK(control_values(c, ControlLayout::parse("nouns,tense,length,quality")) == std::vector<float>{2, 3, 9, 1.5f});
}

TEST_CASE("dataset build, write and reload") {
  auto cfg = small_config();
  auto ds = build_dataset(cfg);
  CHECK(ds.train.size() == 20);
  CHECK(ds.val.size() == 5);
  CHECK(ds.test.size() == 5);
  std::set<std::int64_t> ids;
  for (auto* split : {&ds.train, &ds.val, &ds.test})
    for (const auto& rec : *split) {
      ids.insert(rec.scene.scene_id);
      CHECK(rec.features.size() == rec.scene.objects.size());
      for (const auto& c : rec.captions) {
        CHECK(c.quality >= 0.0f);
        CHECK(c.quality <= 10.0f);
      }
    }
  CHECK(ids.size() == 30);
  CHECK(ds.idf.num_docs() == 20);

  auto tmp = std::filesystem::temp_directory_path() / "capctl_test_corpus";
  std::filesystem::remove_all(tmp);
  write_dataset(ds, tmp / "a");
  write_dataset(build_dataset(cfg), tmp / "b");
  for (const char* f : {"vocab.txt", "config.txt", "idf.json", "train.jsonl", "val.jsonl", "test.jsonl"}) {
    CHECK(slurp(tmp / "a" / f) == slurp(tmp / "b" / f));
  }

  auto back = load_dataset(tmp / "a");
  CHECK(back.vocab == ds.vocab);
  REQUIRE(back.train.size() == 20);
  CHECK(back.train[3].scene == ds.train[3].scene);
  CHECK(back.train[3].features == ds.train[3].features);
  CHECK(back.train[3].captions[2].quality == ds.train[3].captions[2].quality);
  CHECK(back.idf.num_docs() == 20);
  for (int n = 1; n <= 4; ++n) CHECK(back.idf.table(n) == ds.idf.table(n));
  write_dataset(back, tmp / "c");
  CHECK(slurp(tmp / "a" / "train.jsonl") == slurp(tmp / "c" / "train.jsonl"));
  std::filesystem::remove_all(tmp);
}

TEST_CASE("malformed records are rejected") {
  auto v = Vocabulary::standard();
  CHECK_THROWS_AS(record_from_json("{not json", v), FormatError);
  CHECK_THROWS_AS(record_from_json(R"({"scene_id": 1, "features": [[0.5]], "captions": [{"tokens": ["a", "dog"],
      "tense": 3, "noun_count": 1, "length": 2, "quality": 0.0}]})", v), FormatError);
  CHECK_THROWS_AS(record_from_json(R"({"scene_id": 1, "features": [[0.5]], "captions": [{"tokens": ["zebra"],
      "tense": 1, "noun_count": 0, "length": 1, "quality": 0.0}]})", v), LexiconError);
}
