// SPDX-License-Identifier: Apache-2.0
//
// Training loops: teacher-forced cross entropy, self-critical CIDEr
// optimization with the greedy caption as baseline, and triplet training of
// the matcher on (better, worse) generated-caption pairs.
#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "capctl/captioner.hpp"
#include "capctl/checkpoint.hpp"
#include "capctl/corpus.hpp"
#include "capctl/matcher.hpp"
#include "capctl/metrics.hpp"
#include "capctl/nn.hpp"

namespace capctl::trainer {

enum class Mode { Xe, Scst, Matcher };

std::string mode_name(Mode m);
Mode parse_mode(std::string_view name);

struct TrainConfig {
  std::string mode = "xe";
  int epochs = 30;
  int batch_size = 32;
  double lr = 5e-4;
  double lr_decay = 0.8;
  int decay_every = 3;
  double clip_norm = 5.0;
  std::uint64_t seed = 1;
  std::string beta_policy = "label";  // label | fixed
  double beta_value = 4.0;            // quality dimensions under the fixed policy
  int val_scenes = 200;
  bool matcher_with_references = false;

  static TrainConfig desk(Mode mode);
  static TrainConfig paper(Mode mode);

  Mode parsed_mode() const { return parse_mode(mode); }
  void validate() const;

  template <typename S, typename F>
  static void fields(S& s, F&& f) {
    f("mode", s.mode);
    f("epochs", s.epochs);
    f("batch_size", s.batch_size);
    f("lr", s.lr);
    f("lr_decay", s.lr_decay);
    f("decay_every", s.decay_every);
    f("clip_norm", s.clip_norm);
    f("seed", s.seed);
    f("beta_policy", s.beta_policy);
    f("beta_value", s.beta_value);
    f("val_scenes", s.val_scenes);
    f("matcher_with_references", s.matcher_with_references);
  }
};

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;            // mean per caption (XE, SCST) or per triplet (matcher)
  std::optional<double> loss_per_token;
  std::optional<double> reward;           // SCST: mean sampled CIDEr-D
  std::optional<double> baseline_reward;  // SCST: mean greedy CIDEr-D
  std::optional<double> val_cider;
  std::size_t steps = 0;
  std::size_t skipped = 0;  // zero-advantage samples or zero-loss batches
  double seconds = 0.0;
};

struct TrainLog {
  std::optional<double> initial_loss;
  std::vector<EpochRecord> epochs;

  /// One JSON object per epoch.
  std::string to_jsonl() const;
};

using EpochHook = std::function<void(const EpochRecord&, const nn::AdamState<float>&)>;

/// Control vector used when a run fixes beta: quality dimensions take
/// `quality_beta`, the others the value of the scene's first reference.
std::vector<float> scene_beta(const corpus::SceneRecord& record, const corpus::ControlLayout& layout,
                              double quality_beta);

/// Mean greedy CIDEr-D over the first `max_scenes` records, idf from those
/// records' references.
double validation_cider(const captioner::CaptionerParams<float>& params, const std::vector<corpus::SceneRecord>& records,
                        double quality_beta, int max_scenes, int max_len);

TrainLog train_xe(captioner::CaptionerParams<float>& params, const corpus::Dataset& dataset, const TrainConfig& config,
                  int max_len, const EpochHook& hook = {});

TrainLog train_scst(captioner::CaptionerParams<float>& params, const corpus::Dataset& dataset,
                    const TrainConfig& config, int max_len, const EpochHook& hook = {});

/// One SCST update on a batch of records; returns the number of samples
/// that contributed (nonzero advantage, finished).
struct ScstStep {
  double loss = 0.0;
  double reward = 0.0;
  double baseline = 0.0;
  std::size_t used = 0;
};
ScstStep scst_step(captioner::CaptionerParams<float>& params, nn::AdamState<float>& adam,
                   const std::vector<const corpus::SceneRecord*>& batch, const metrics::IdfStats& idf,
                   double quality_beta, double clip_norm, int max_len, Rng& rng);

struct MatcherPair {
  std::size_t scene = 0;  // index into the record list
  corpus::Tokens better;
  corpus::Tokens worse;
  double cider_better = 0.0;
  double cider_worse = 0.0;
  std::string better_source;  // fwd | bwd
};

constexpr double kPairTieEpsilon = 1e-6;

/// Orders one scene's forward and backward captions by CIDEr-D. Returns
/// nothing for ties or when either caption is empty.
std::optional<MatcherPair> order_pair(std::size_t scene, const corpus::Tokens& fwd, double cider_fwd,
                                      const corpus::Tokens& bwd, double cider_bwd);

std::vector<MatcherPair> make_matcher_pairs(const captioner::CaptionerParams<float>& fwd,
                                            const captioner::CaptionerParams<float>& bwd,
                                            const std::vector<corpus::SceneRecord>& records,
                                            const metrics::IdfStats& idf, double quality_beta, int max_len);

/// Mean triplet loss of the matcher over all pairs.
double mean_triplet_loss(const matcher::MatcherParams<float>& params, const std::vector<MatcherPair>& pairs,
                         const std::vector<corpus::SceneRecord>& records);

TrainLog train_matcher(matcher::MatcherParams<float>& params, const std::vector<MatcherPair>& pairs,
                       const std::vector<corpus::SceneRecord>& records, const TrainConfig& config,
                       const EpochHook& hook = {});

/// Parameters, optimizer moments and the epoch counter in one container.
checkpoint::Checkpoint captioner_checkpoint(const captioner::CaptionerParams<float>& params,
                                            const nn::AdamState<float>& adam, std::uint32_t vocab_hash, int epoch);
checkpoint::Checkpoint matcher_checkpoint(const matcher::MatcherParams<float>& params,
                                          const nn::AdamState<float>& adam, std::uint32_t vocab_hash, int epoch);

}  // namespace capctl::trainer
