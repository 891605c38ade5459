// SPDX-License-Identifier: Apache-2.0
//
// Evaluation protocols: a captioning system (forward model, optionally a
// backward model or beam search with matcher selection) scored on a split,
// inference-time beta sweeps, and control-compliance studies.
#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "capctl/captioner.hpp"
#include "capctl/corpus.hpp"
#include "capctl/matcher.hpp"
#include "capctl/metrics.hpp"

namespace capctl::evaluator {

using captioner::CaptionerParams;
using corpus::Attribute;
using corpus::Tokens;

struct EvalConfig {
  double beta = 4.0;  // quality dimensions
  int beam = 1;       // 1 = greedy
  int max_len = 20;
  std::string threshold = "median";  // median | paper
  double paper_threshold = 90.0;     // paper scale, used when threshold = paper
  int max_scenes = 0;                // 0 = whole split

  void validate() const;

  template <typename S, typename F>
  static void fields(S& s, F&& f) {
    f("beta", s.beta);
    f("beam", s.beam);
    f("max_len", s.max_len);
    f("threshold", s.threshold);
    f("paper_threshold", s.paper_threshold);
    f("max_scenes", s.max_scenes);
  }
};

struct SystemUnderTest {
  const CaptionerParams<float>* forward = nullptr;
  const CaptionerParams<float>* backward = nullptr;
  const matcher::MatcherParams<float>* matcher = nullptr;
  int beam = 1;
  double quality_beta = 4.0;
  /// Requested values for non-quality attributes; unset ones follow each
  /// scene's first reference.
  std::map<Attribute, float> requests;

  void validate() const;
};

struct SceneResult {
  int scene_id = 0;
  Tokens caption;
  double cider = 0.0;
  std::string source;  // fwd | bwd | beam_<i>
  std::vector<Tokens> candidates;
  std::vector<double> scores;  // matcher scores when selection ran
};

struct SystemResult {
  metrics::EvalReport report;
  std::vector<SceneResult> scenes;
  double threshold = 0.0;  // native scale
};

/// The scenes an evaluation covers.
std::vector<const corpus::SceneRecord*> eval_scenes(const std::vector<corpus::SceneRecord>& split, int max_scenes);

/// Control vector of one scene under the system's beta and requests.
std::vector<float> system_beta(const SystemUnderTest& sut, const corpus::SceneRecord& record);

/// Captions and candidates only; no scoring.
std::vector<SceneResult> run_system(const SystemUnderTest& sut, const std::vector<const corpus::SceneRecord*>& scenes,
                                    int max_len);

/// Median CIDEr-D of greedy forward captions at the configured beta.
double median_threshold(const CaptionerParams<float>& forward, const corpus::Dataset& dataset,
                        const std::string& split, const EvalConfig& config);

/// Threshold on the native scale per config.threshold.
double resolve_threshold(const CaptionerParams<float>& forward, const corpus::Dataset& dataset,
                         const std::string& split, const EvalConfig& config);

/// Scores a system. idf comes from the split's references. Compliance is
/// reported for every requested attribute over the scenes whose grammar
/// can realize the request.
SystemResult eval_system(const SystemUnderTest& sut, const corpus::Dataset& dataset, const std::string& split,
                         const EvalConfig& config, double threshold);

struct SweepPoint {
  double beta = 0.0;
  metrics::EvalReport report;
};

std::vector<SweepPoint> beta_sweep(const CaptionerParams<float>& forward, const std::vector<double>& values,
                                   const corpus::Dataset& dataset, const std::string& split, const EvalConfig& config,
                                   double threshold);

struct ControlRow {
  int requested = 0;
  double compliance = 0.0;  // over realizable scenes
  double mean_cider = 0.0;
  double mean_observed = 0.0;
  std::size_t realizable = 0;
  std::size_t scenes = 0;
};

std::vector<ControlRow> control_study(const CaptionerParams<float>& model, Attribute attribute,
                                      const std::vector<int>& values, const corpus::Dataset& dataset,
                                      const std::string& split, const EvalConfig& config);

/// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& x, const std::vector<double>& y);

std::string sweep_to_json(const std::vector<SweepPoint>& sweep);
std::string study_to_json(Attribute attribute, const std::vector<ControlRow>& rows);

/// scene_id,caption,cider,selected_source
void write_scene_csv(const std::filesystem::path& path, const std::vector<SceneResult>& scenes,
                     const corpus::Vocabulary& vocab);

}  // namespace capctl::evaluator
