// SPDX-License-Identifier: Apache-2.0
#include "capctl/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "json.hpp"

namespace capctl::trainer {

namespace t = capctl::tensor;
using captioner::CaptionerParams;
using captioner::Features;
using corpus::SceneRecord;
using corpus::Tokens;

std::string mode_name(Mode m) {
  switch (m) {
    case Mode::Xe: return "xe";
    case Mode::Scst: return "scst";
    case Mode::Matcher: return "matcher";
  }
  return "?";
}

Mode parse_mode(std::string_view name) {
  if (name == "xe") return Mode::Xe;
  if (name == "scst") return Mode::Scst;
  if (name == "matcher") return Mode::Matcher;
  throw ConfigError("train mode must be xe, scst or matcher, got '" + std::string(name) + "'");
}

TrainConfig TrainConfig::desk(Mode mode) {
  TrainConfig c;
  c.mode = mode_name(mode);
  switch (mode) {
    case Mode::Xe:
      break;
    case Mode::Scst:
      c.epochs = 20;
      c.lr = 5e-5;
      c.beta_policy = "fixed";
      break;
    case Mode::Matcher:
      c.epochs = 10;
      break;
  }
  return c;
}

TrainConfig TrainConfig::paper(Mode mode) {
  auto c = desk(mode);
  if (mode == Mode::Xe) c.epochs = 35;
  if (mode == Mode::Scst) c.epochs = 40;
  return c;
}

void TrainConfig::validate() const {
  const auto m = parse_mode(mode);
  if (epochs < 1) throw ConfigError("train.epochs must be >= 1");
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("train.lr must be > 0");
  if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw ConfigError("train.lr_decay must be in (0, 1]");
  if (decay_every < 1) throw ConfigError("train.decay_every must be >= 1");
  if (!(clip_norm > 0.0)) throw ConfigError("train.clip_norm must be > 0");
  if (beta_policy != "label" && beta_policy != "fixed") {
    throw ConfigError("train.beta_policy must be label or fixed, got '" + beta_policy + "'");
  }
  if (m == Mode::Xe && beta_policy != "label") throw ConfigError("xe training takes beta from the labels");
  if (m == Mode::Scst && beta_policy != "fixed") throw ConfigError("scst training needs beta_policy = fixed");
  if (val_scenes < 0) throw ConfigError("train.val_scenes must be >= 0");
}

std::string TrainLog::to_jsonl() const {
  std::string out;
  for (const auto& e : epochs) {
    nlohmann::ordered_json j;
    j["epoch"] = e.epoch;
    j["lr"] = e.lr;
    j["loss"] = e.loss;
    auto opt = [](const std::optional<double>& v) { return v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json(); };
    j["loss_per_token"] = opt(e.loss_per_token);
    j["reward"] = opt(e.reward);
    j["baseline_reward"] = opt(e.baseline_reward);
    j["val_cider"] = opt(e.val_cider);
    j["steps"] = e.steps;
    j["skipped"] = e.skipped;
    j["seconds"] = e.seconds;
    if (e.epoch == 0 && initial_loss) j["initial_loss"] = *initial_loss;
    out += j.dump() + "\n";
  }
  return out;
}

std::vector<float> scene_beta(const SceneRecord& record, const corpus::ControlLayout& layout, double quality_beta) {
  if (record.captions.empty()) throw ContractError("scene_beta: scene without references");
  auto beta = corpus::control_values(record.captions.front(), layout);
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (layout.dims[i] == corpus::Attribute::Quality) beta[i] = static_cast<float>(quality_beta);
  }
  return beta;
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

template <typename Rec>
std::vector<const Features*> features_of(const std::vector<const Rec*>& batch) {
  std::vector<const Features*> out;
  out.reserve(batch.size());
  for (const auto* r : batch) out.push_back(&r->features);
  return out;
}

captioner::ImageBatch<float> project(const CaptionerParams<float>& p, const std::vector<const Features*>& f) {
  return captioner::project_features(p, std::span<const Features* const>(f));
}

t::Tensor<float> betas_of(const CaptionerParams<float>& p, const std::vector<const SceneRecord*>& batch,
                          double quality_beta) {
  std::vector<std::vector<float>> rows;
  for (const auto* r : batch) rows.push_back(scene_beta(*r, p.control, quality_beta));
  return captioner::beta_rows<float>(rows);
}

void check_dataset(const CaptionerParams<float>& p, const corpus::Dataset& ds) {
  if (ds.train.empty()) throw ContractError("training split is empty");
  if (p.dims.vocab != ds.vocab.size()) throw ContractError("captioner vocabulary size does not match the dataset");
  if (p.dims.feature_dim != static_cast<std::size_t>(ds.config.feature_dim)) {
    throw ContractError("captioner feature width does not match the dataset");
  }
}

std::vector<const SceneRecord*> head_of(const std::vector<SceneRecord>& records, int max_scenes) {
  std::vector<const SceneRecord*> out;
  const auto n = std::min(records.size(), static_cast<std::size_t>(std::max(0, max_scenes)));
  for (std::size_t i = 0; i < n; ++i) out.push_back(&records[i]);
  return out;
}

}  // namespace

double validation_cider(const CaptionerParams<float>& params, const std::vector<SceneRecord>& records,
                        double quality_beta, int max_scenes, int max_len) {
  const auto scenes = head_of(records, max_scenes);
  if (scenes.empty()) throw ContractError("validation_cider: no scenes");
  std::vector<std::vector<Tokens>> docs;
  for (const auto* r : scenes) docs.push_back(r->reference_tokens());
  const auto idf = metrics::IdfStats::from_references(docs);
  double total = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < scenes.size(); start += kChunk) {
    std::vector<const SceneRecord*> chunk(scenes.begin() + static_cast<std::ptrdiff_t>(start),
                                          scenes.begin() + static_cast<std::ptrdiff_t>(std::min(scenes.size(), start + kChunk)));
    t::NoGradGuard guard;
    const auto caps = captioner::greedy_decode(params, project(params, features_of(chunk)),
                                               betas_of(params, chunk, quality_beta), max_len);
    for (std::size_t i = 0; i < chunk.size(); ++i) total += metrics::cider_d(caps[i], docs[start + i], idf);
  }
  return total / static_cast<double>(scenes.size());
}

TrainLog train_xe(CaptionerParams<float>& params, const corpus::Dataset& dataset, const TrainConfig& config,
                  int max_len, const EpochHook& hook) {
  config.validate();
  if (config.parsed_mode() != Mode::Xe) throw ConfigError("train_xe needs train.mode = xe");
  check_dataset(params, dataset);

  std::vector<std::pair<std::size_t, std::size_t>> items;
  for (std::size_t s = 0; s < dataset.train.size(); ++s)
    for (std::size_t c = 0; c < dataset.train[s].captions.size(); ++c) items.emplace_back(s, c);

  auto weights = params.trainable();
  nn::AdamState<float> adam;
  TrainLog log;
  const auto shuffle_seed = derive_seed(config.seed, "shuffle");
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    adam.lr = nn::scheduled_lr(config.lr, config.lr_decay, config.decay_every, epoch);
    Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(items.begin(), items.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    double loss_sum = 0.0, tokens = 0.0;
    for (std::size_t b0 = 0; b0 < items.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const auto b1 = std::min(items.size(), b0 + static_cast<std::size_t>(config.batch_size));
      std::vector<const Features*> feats;
      std::vector<std::vector<float>> betas;
      std::vector<Tokens> caps;
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& record = dataset.train[items[i].first];
        const auto& cap = record.captions[items[i].second];
        feats.push_back(&record.features);
        betas.push_back(corpus::control_values(cap, params.control));
        caps.push_back(cap.tokens);
        tokens += static_cast<double>(cap.tokens.size() + 1);
      }
      const auto n = static_cast<float>(caps.size());
      auto total = captioner::xe_loss(params, project(params, feats), captioner::beta_rows<float>(betas), caps);
      loss_sum += total.item();
      t::backward(t::scale(total, 1.0f / n));
      nn::clip_grad_norm(std::span<t::Tensor<float>>(weights), config.clip_norm);
      nn::adam_step(std::span<t::Tensor<float>>(weights), adam);
      ++rec.steps;
    }
    rec.loss = loss_sum / static_cast<double>(items.size());
    rec.loss_per_token = loss_sum / tokens;
    if (config.val_scenes > 0 && !dataset.val.empty()) {
      rec.val_cider = validation_cider(params, dataset.val, config.beta_value, config.val_scenes, max_len);
    }
    rec.seconds = seconds_since(start);
    log.epochs.push_back(rec);
    if (hook) hook(rec, adam);
  }
  return log;
}

ScstStep scst_step(CaptionerParams<float>& params, nn::AdamState<float>& adam,
                   const std::vector<const SceneRecord*>& batch, const metrics::IdfStats& idf, double quality_beta,
                   double clip_norm, int max_len, Rng& rng) {
  ScstStep out;
  if (batch.empty()) return out;
  std::vector<captioner::Sampled> samples;
  std::vector<Tokens> greedy;
  {
    t::NoGradGuard guard;
    const auto img = project(params, features_of(batch));
    const auto beta = betas_of(params, batch, quality_beta);
    greedy = captioner::greedy_decode(params, img, beta, max_len);
    samples = captioner::sample_decode(params, img, beta, max_len, rng);
  }
  std::vector<const SceneRecord*> kept;
  std::vector<Tokens> kept_caps;
  std::vector<float> advantages;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto refs = batch[i]->reference_tokens();
    const double r_sample = metrics::cider_d(samples[i].tokens, refs, idf);
    const double r_greedy = metrics::cider_d(greedy[i], refs, idf);
    out.reward += r_sample;
    out.baseline += r_greedy;
    const double advantage = r_sample - r_greedy;
    if (advantage == 0.0 || !samples[i].finished) continue;
    kept.push_back(batch[i]);
    kept_caps.push_back(samples[i].tokens);
    advantages.push_back(static_cast<float>(advantage));
  }
  out.reward /= static_cast<double>(batch.size());
  out.baseline /= static_cast<double>(batch.size());
  out.used = kept.size();
  if (kept.empty()) return out;

  auto weights = params.trainable();
  auto total = captioner::xe_loss(params, project(params, features_of(kept)), betas_of(params, kept, quality_beta),
                                  kept_caps, std::span<const float>(advantages));
  out.loss = total.item() / static_cast<double>(batch.size());
  t::backward(t::scale(total, 1.0f / static_cast<float>(batch.size())));
  nn::clip_grad_norm(std::span<t::Tensor<float>>(weights), clip_norm);
  nn::adam_step(std::span<t::Tensor<float>>(weights), adam);
  return out;
}

TrainLog train_scst(CaptionerParams<float>& params, const corpus::Dataset& dataset, const TrainConfig& config,
                    int max_len, const EpochHook& hook) {
  config.validate();
  if (config.parsed_mode() != Mode::Scst) throw ConfigError("train_scst needs train.mode = scst");
  check_dataset(params, dataset);

  std::vector<std::size_t> order(dataset.train.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  nn::AdamState<float> adam;
  Rng sampling = make_rng(config.seed, "sampling");
  const auto shuffle_seed = derive_seed(config.seed, "shuffle");
  TrainLog log;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    adam.lr = nn::scheduled_lr(config.lr, config.lr_decay, config.decay_every, epoch);
    Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    double loss = 0.0, reward = 0.0, baseline = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const auto b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      std::vector<const SceneRecord*> batch;
      for (std::size_t i = b0; i < b1; ++i) batch.push_back(&dataset.train[order[i]]);
      const auto step = scst_step(params, adam, batch, dataset.idf, config.beta_value, config.clip_norm, max_len,
                                  sampling);
      const auto n = static_cast<double>(batch.size());
      loss += step.loss * n;
      reward += step.reward * n;
      baseline += step.baseline * n;
      rec.skipped += batch.size() - step.used;
      if (step.used > 0) ++rec.steps;
    }
    const auto n = static_cast<double>(order.size());
    rec.loss = loss / n;
    rec.reward = reward / n;
    rec.baseline_reward = baseline / n;
    if (config.val_scenes > 0 && !dataset.val.empty()) {
      rec.val_cider = validation_cider(params, dataset.val, config.beta_value, config.val_scenes, max_len);
    }
    rec.seconds = seconds_since(start);
    log.epochs.push_back(rec);
    if (hook) hook(rec, adam);
  }
  return log;
}

std::optional<MatcherPair> order_pair(std::size_t scene, const Tokens& fwd, double cider_fwd, const Tokens& bwd,
                                      double cider_bwd) {
  if (fwd.empty() || bwd.empty()) return std::nullopt;
  if (std::abs(cider_fwd - cider_bwd) < kPairTieEpsilon) return std::nullopt;
  MatcherPair p;
  p.scene = scene;
  if (cider_fwd > cider_bwd) {
    p.better = fwd;
    p.worse = bwd;
    p.cider_better = cider_fwd;
    p.cider_worse = cider_bwd;
    p.better_source = "fwd";
  } else {
    p.better = bwd;
    p.worse = fwd;
    p.cider_better = cider_bwd;
    p.cider_worse = cider_fwd;
    p.better_source = "bwd";
  }
  return p;
}

std::vector<MatcherPair> make_matcher_pairs(const CaptionerParams<float>& fwd, const CaptionerParams<float>& bwd,
                                            const std::vector<SceneRecord>& records, const metrics::IdfStats& idf,
                                            double quality_beta, int max_len) {
  if (fwd.direction != captioner::Direction::Forward || bwd.direction != captioner::Direction::Backward) {
    throw ContractError("make_matcher_pairs: need one forward and one backward captioner");
  }
  if (fwd.dims.vocab != bwd.dims.vocab || fwd.dims.feature_dim != bwd.dims.feature_dim) {
    throw ContractError("make_matcher_pairs: captioners disagree on vocabulary or feature width");
  }
  std::vector<MatcherPair> pairs;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < records.size(); start += kChunk) {
    std::vector<const SceneRecord*> chunk;
    for (std::size_t i = start; i < std::min(records.size(), start + kChunk); ++i) chunk.push_back(&records[i]);
    const auto feats = features_of(chunk);
    t::NoGradGuard guard;
    const auto f = captioner::greedy_decode(fwd, project(fwd, feats), betas_of(fwd, chunk, quality_beta), max_len);
    const auto b = captioner::greedy_decode(bwd, project(bwd, feats), betas_of(bwd, chunk, quality_beta), max_len);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      const auto refs = chunk[i]->reference_tokens();
      if (auto pair = order_pair(start + i, f[i], metrics::cider_d(f[i], refs, idf), b[i],
                                 metrics::cider_d(b[i], refs, idf))) {
        pairs.push_back(std::move(*pair));
      }
    }
  }
  return pairs;
}

namespace {

struct Triplet {
  const Features* image;
  const Tokens* positive;
  const Tokens* negative;
};

t::Tensor<float> triplet_batch_loss(const matcher::MatcherParams<float>& p, const std::vector<Triplet>& batch) {
  std::vector<Tokens> texts;
  for (const auto& tr : batch) {
    texts.push_back(*tr.positive);
    texts.push_back(*tr.negative);
  }
  const auto words = matcher::encode_texts(p, texts);
  std::vector<t::Tensor<float>> losses;
  const auto tau = static_cast<float>(p.tau);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto regions = matcher::encode_regions(p, *batch[i].image);
    const auto pos = matcher::similarity(regions, words[2 * i], tau).S;
    const auto neg = matcher::similarity(regions, words[2 * i + 1], tau).S;
    losses.push_back(t::reshape(matcher::triplet_loss(pos, neg, static_cast<float>(p.margin)), {1, 1}));
  }
  return losses.size() == 1 ? t::sum(losses[0]) : t::sum(t::concat<float>(losses, 0));
}

std::vector<Triplet> pair_triplets(const std::vector<MatcherPair>& pairs, const std::vector<SceneRecord>& records) {
  std::vector<Triplet> out;
  for (const auto& p : pairs) {
    if (p.scene >= records.size()) throw ContractError("matcher pair refers to a missing scene");
    out.push_back({&records[p.scene].features, &p.better, &p.worse});
  }
  return out;
}

}  // namespace

double mean_triplet_loss(const matcher::MatcherParams<float>& params, const std::vector<MatcherPair>& pairs,
                         const std::vector<SceneRecord>& records) {
  if (pairs.empty()) throw ContractError("mean_triplet_loss: no pairs");
  t::NoGradGuard guard;
  const auto all = pair_triplets(pairs, records);
  double total = 0.0;
  constexpr std::size_t kChunk = 64;
  for (std::size_t start = 0; start < all.size(); start += kChunk) {
    std::vector<Triplet> chunk(all.begin() + static_cast<std::ptrdiff_t>(start),
                               all.begin() + static_cast<std::ptrdiff_t>(std::min(all.size(), start + kChunk)));
    total += triplet_batch_loss(params, chunk).item();
  }
  return total / static_cast<double>(all.size());
}

TrainLog train_matcher(matcher::MatcherParams<float>& params, const std::vector<MatcherPair>& pairs,
                       const std::vector<SceneRecord>& records, const TrainConfig& config, const EpochHook& hook) {
  config.validate();
  if (config.parsed_mode() != Mode::Matcher) throw ConfigError("train_matcher needs train.mode = matcher");
  if (pairs.empty()) throw ContractError("train_matcher: no training pairs");
  const auto base = pair_triplets(pairs, records);

  auto weights = params.trainable();
  nn::AdamState<float> adam;
  TrainLog log;
  log.initial_loss = mean_triplet_loss(params, pairs, records);
  const auto shuffle_seed = derive_seed(config.seed, "shuffle");
  std::vector<std::size_t> order(base.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    adam.lr = nn::scheduled_lr(config.lr, config.lr_decay, config.decay_every, epoch);
    Rng rng(derive_seed(shuffle_seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = adam.lr;
    double loss_sum = 0.0;
    std::size_t count = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(config.batch_size)) {
      const auto b1 = std::min(order.size(), b0 + static_cast<std::size_t>(config.batch_size));
      std::vector<Triplet> batch;
      for (std::size_t i = b0; i < b1; ++i) batch.push_back(base[order[i]]);
      if (config.matcher_with_references && batch.size() > 1) {
        // A reference of the scene against a reference of the next scene in the batch.
        std::uniform_int_distribution<std::size_t> pick(0, 4);
        const auto n = batch.size();
        for (std::size_t i = 0; i < n; ++i) {
          const auto& own = records[pairs[order[b0 + i]].scene].captions;
          const auto& other = records[pairs[order[b0 + (i + 1) % n]].scene].captions;
          batch.push_back({batch[i].image, &own[pick(rng) % own.size()].tokens,
                           &other[pick(rng) % other.size()].tokens});
        }
      }
      auto total = triplet_batch_loss(params, batch);
      const double value = total.item();
      loss_sum += value;
      count += batch.size();
      if (value == 0.0) {
        ++rec.skipped;
        continue;
      }
      t::backward(t::scale(total, 1.0f / static_cast<float>(batch.size())));
      nn::clip_grad_norm(std::span<t::Tensor<float>>(weights), config.clip_norm);
      nn::adam_step(std::span<t::Tensor<float>>(weights), adam);
      ++rec.steps;
    }
    rec.loss = loss_sum / static_cast<double>(count);
    rec.seconds = seconds_since(start);
    log.epochs.push_back(rec);
    if (hook) hook(rec, adam);
  }
  return log;
}

checkpoint::Checkpoint captioner_checkpoint(const CaptionerParams<float>& params, const nn::AdamState<float>& adam,
                                            std::uint32_t vocab_hash, int epoch) {
  checkpoint::Checkpoint ck;
  captioner::save_params(ck, params, vocab_hash);
  captioner::save_optimizer(ck, adam, params.named(), "adam/");
  ck.put_scalar("train/epoch", static_cast<float>(epoch));
  return ck;
}

checkpoint::Checkpoint matcher_checkpoint(const matcher::MatcherParams<float>& params, const nn::AdamState<float>& adam,
                                          std::uint32_t vocab_hash, int epoch) {
  checkpoint::Checkpoint ck;
  matcher::save_params(ck, params, vocab_hash);
  captioner::save_optimizer(ck, adam, params.named(), "adam/");
  ck.put_scalar("train/epoch", static_cast<float>(epoch));
  return ck;
}

}  // namespace capctl::trainer
