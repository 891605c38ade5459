// SPDX-License-Identifier: Apache-2.0
//
// capctl: dataset generation, training, captioning, evaluation and the
// gradient suite. Exit codes: 0 success, 1 failed check, 2 usage or config,
// 3 data or compatibility, 4 empty result.
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "capctl/captioner.hpp"
#include "capctl/config.hpp"
#include "capctl/corpus.hpp"
#include "capctl/evaluator.hpp"
#include "capctl/gradcheck.hpp"
#include "capctl/matcher.hpp"
#include "capctl/trainer.hpp"

namespace fs = std::filesystem;
using namespace capctl;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitCheckFailed = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitEmpty = 4;

struct Exit {
  int code;
  std::string message;
};

[[noreturn]] void fail(int code, const std::string& message) { throw Exit{code, message}; }

// Every module's settings under its key prefix.
struct RunConfig {
  corpus::CorpusConfig corpus;
  captioner::CaptionerConfig captioner;
  matcher::MatcherConfig matcher;
  trainer::TrainConfig train;
  evaluator::EvalConfig eval;

  void apply(const config::KeyValues& kv) {
    config::apply(corpus, "corpus.", kv);
    config::apply(captioner, "captioner.", kv);
    config::apply(matcher, "matcher.", kv);
    config::apply(train, "train.", kv);
    config::apply(eval, "eval.", kv);
    kv.reject_unused();
  }

  std::string dump() const {
    return config::dump(corpus, "corpus.") + config::dump(captioner, "captioner.") +
           config::dump(matcher, "matcher.") + config::dump(train, "train.") + config::dump(eval, "eval.");
  }
};

// Options shared by every command: a key=value file and --set overrides.
struct Common {
  std::string config_file;
  std::vector<std::string> sets;

  void attach(CLI::App* app) {
    app->add_option("--config", config_file, "key=value config file");
    app->add_option("--set", sets, "key=value override (repeatable)");
  }

  // preset < file < --set < dedicated flags (applied by the caller afterwards).
  void resolve(RunConfig& rc) const {
    config::KeyValues kv;
    if (!config_file.empty()) kv = config::KeyValues::load(config_file);
    for (const auto& s : sets) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) fail(kExitUsage, "--set expects key=value, got '" + s + "'");
      auto trim = [](std::string x) {
        const auto a = x.find_first_not_of(" \t"), b = x.find_last_not_of(" \t");
        return a == std::string::npos ? std::string() : x.substr(a, b - a + 1);
      };
      kv.set(trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
    }
    rc.apply(kv);
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed: " + path.string());
}

fs::path beside(const fs::path& file, const std::string& suffix) {
  auto p = file;
  p.replace_extension(suffix);
  return p;
}

corpus::Dataset open_dataset(const std::string& dir) {
  if (!fs::is_directory(dir)) fail(kExitData, "dataset directory not found: " + dir);
  return corpus::load_dataset(dir);
}

checkpoint::Checkpoint open_checkpoint(const std::string& path, const corpus::Dataset& ds) {
  if (!fs::exists(path)) fail(kExitData, "checkpoint not found: " + path);
  auto ck = checkpoint::Checkpoint::load(path);
  if (captioner::stored_vocab_hash(ck) != ds.vocab.hash())
    fail(kExitData, path + ": vocabulary does not match the dataset");
  return ck;
}

std::string control_spec(const std::string& control) {
  if (control == "multi") return "quality,length,tense,nouns";
  if (control == "quality" || control == "length" || control == "tense" || control == "nouns") return control;
  fail(kExitUsage, "--control must be quality, length, tense, nouns or multi");
}

std::vector<double> parse_doubles(const std::string& text, const char* what) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      std::size_t used = 0;
      out.push_back(std::stod(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(kExitUsage, std::string(what) + ": not a number: '" + item + "'");
    }
  }
  if (out.empty()) fail(kExitUsage, std::string(what) + ": empty list");
  return out;
}

// ---------------------------------------------------------------------------

struct GenData {
  Common common;
  std::string out;
  int scenes = 0;
  std::optional<std::uint64_t> seed;
  std::optional<int> feat_dim;
  bool force = false;
};

int cmd_gen_data(const GenData& a) {
  if (a.scenes <= 0) fail(kExitUsage, "--scenes must be positive");
  RunConfig rc;
  a.common.resolve(rc);
  const int held = std::max(1, a.scenes / 10);
  rc.corpus.val_size = rc.corpus.test_size = held;
  rc.corpus.train_size = a.scenes - 2 * held;
  if (rc.corpus.train_size <= 0) fail(kExitUsage, "--scenes must be at least 3");
  if (a.seed) rc.corpus.seed = *a.seed;
  if (a.feat_dim) rc.corpus.feature_dim = *a.feat_dim;
  rc.corpus.validate();

  if (fs::exists(a.out) && !fs::is_empty(a.out) && !a.force)
    fail(kExitUsage, a.out + " exists and is not empty (use --force)");
  const auto ds = corpus::build_dataset(rc.corpus);
  corpus::write_dataset(ds, a.out);
  write_text(fs::path(a.out) / "run_config.txt", rc.dump());
  std::cout << "wrote " << ds.train.size() << "/" << ds.val.size() << "/" << ds.test.size()
            << " train/val/test scenes to " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct Train {
  Common common;
  std::string data, direction = "fwd", control = "quality", mode = "xe", ckpt, init, preset = "desk";
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
};

void print_epoch(const trainer::EpochRecord& e) {
  std::fprintf(stderr, "epoch %3d  lr %.3g  loss %.4f", e.epoch, e.lr, e.loss);
  if (e.reward) std::fprintf(stderr, "  reward %.4f  baseline %.4f", *e.reward, *e.baseline_reward);
  if (e.val_cider) std::fprintf(stderr, "  val_cider %.4f", *e.val_cider);
  std::fprintf(stderr, "  %.1fs\n", e.seconds);
}

int cmd_train(const Train& a) {
  const auto mode = trainer::parse_mode(a.mode);
  if (mode == trainer::Mode::Matcher) fail(kExitUsage, "use train-matcher for the matcher");
  if (mode == trainer::Mode::Scst && a.init.empty()) fail(kExitUsage, "--mode scst requires --init");
  if (a.preset != "desk" && a.preset != "paper") fail(kExitUsage, "--preset must be desk or paper");

  RunConfig rc;
  rc.train = a.preset == "paper" ? trainer::TrainConfig::paper(mode) : trainer::TrainConfig::desk(mode);
  rc.captioner = a.preset == "paper" ? captioner::CaptionerConfig::paper() : captioner::CaptionerConfig::desk();
  a.common.resolve(rc);
  rc.train.mode = a.mode;
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.seed) rc.train.seed = *a.seed;
  rc.train.validate();

  const auto ds = open_dataset(a.data);
  rc.corpus = ds.config;
  const auto direction = captioner::parse_direction(a.direction == "fwd"   ? "forward"
                                                    : a.direction == "bwd" ? "backward"
                                                                           : a.direction);
  const auto layout = corpus::ControlLayout::parse(control_spec(a.control));

  captioner::CaptionerParams<float> params;
  if (!a.init.empty()) {
    params = captioner::load_params(open_checkpoint(a.init, ds));
    if (params.direction != direction) fail(kExitUsage, "--direction does not match the --init checkpoint");
    if (!(params.control == layout)) fail(kExitUsage, "--control does not match the --init checkpoint");
    if (params.dims.feature_dim != static_cast<std::size_t>(ds.config.feature_dim))
      fail(kExitData, "--init checkpoint feature width does not match the dataset");
  } else {
    const auto dims = captioner::make_dims(rc.captioner, static_cast<std::size_t>(ds.config.feature_dim),
                                           ds.vocab.size(), layout.size());
    auto rng = make_rng(rc.train.seed, "init");
    params = captioner::CaptionerParams<float>::create(dims, layout, direction, rng);
  }

  nn::AdamState<float> last_adam;
  int last_epoch = 0;
  auto hook = [&](const trainer::EpochRecord& e, const nn::AdamState<float>& adam) {
    print_epoch(e);
    last_adam = adam;
    last_epoch = e.epoch + 1;
  };
  const auto log = mode == trainer::Mode::Xe
                       ? trainer::train_xe(params, ds, rc.train, rc.captioner.max_len, hook)
                       : trainer::train_scst(params, ds, rc.train, rc.captioner.max_len, hook);

  const fs::path ckpt(a.ckpt);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  trainer::captioner_checkpoint(params, last_adam, ds.vocab.hash(), last_epoch).save(ckpt);
  write_text(beside(ckpt, ".log.jsonl"), log.to_jsonl());
  write_text(beside(ckpt, ".config.txt"),
             rc.dump() + "run.direction = " + captioner::direction_name(direction) + "\nrun.control = " +
                 layout.str() + "\n" + (a.init.empty() ? "" : "run.init = " + a.init + "\n"));
  std::cout << "wrote " << ckpt.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct TrainMatcher {
  Common common;
  std::string data, fwd, bwd, out, preset = "desk";
  std::optional<int> epochs;
  std::optional<std::uint64_t> seed;
  bool references = false;
};

int cmd_train_matcher(const TrainMatcher& a) {
  if (a.preset != "desk" && a.preset != "paper") fail(kExitUsage, "--preset must be desk or paper");
  RunConfig rc;
  rc.train = a.preset == "paper" ? trainer::TrainConfig::paper(trainer::Mode::Matcher)
                                 : trainer::TrainConfig::desk(trainer::Mode::Matcher);
  rc.matcher = a.preset == "paper" ? matcher::MatcherConfig::paper() : matcher::MatcherConfig::desk();
  a.common.resolve(rc);
  rc.train.mode = "matcher";
  if (a.epochs) rc.train.epochs = *a.epochs;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.references) rc.train.matcher_with_references = true;
  rc.train.validate();
  rc.matcher.validate();

  const auto ds = open_dataset(a.data);
  rc.corpus = ds.config;
  const auto fwd = captioner::load_params(open_checkpoint(a.fwd, ds));
  const auto bwd = captioner::load_params(open_checkpoint(a.bwd, ds));
  if (fwd.direction != captioner::Direction::Forward) fail(kExitData, a.fwd + " is not a forward model");
  if (bwd.direction != captioner::Direction::Backward) fail(kExitData, a.bwd + " is not a backward model");

  const auto pairs =
      trainer::make_matcher_pairs(fwd, bwd, ds.train, ds.idf, rc.train.beta_value, rc.captioner.max_len);
  std::fprintf(stderr, "%zu pairs from %zu training scenes\n", pairs.size(), ds.train.size());
  if (pairs.empty()) fail(kExitEmpty, "no training pairs: forward and backward captions tie on every scene");

  const auto dims = matcher::make_dims(rc.matcher, static_cast<std::size_t>(ds.config.feature_dim), ds.vocab.size());
  auto rng = make_rng(rc.train.seed, "init");
  auto params = matcher::MatcherParams<float>::create(dims, rc.matcher.margin, rc.matcher.tau, rng);
  nn::AdamState<float> last_adam;
  int last_epoch = 0;
  const auto log = trainer::train_matcher(params, pairs, ds.train, rc.train,
                                          [&](const trainer::EpochRecord& e, const nn::AdamState<float>& adam) {
                                            print_epoch(e);
                                            last_adam = adam;
                                            last_epoch = e.epoch + 1;
                                          });

  const fs::path out(a.out);
  if (out.has_parent_path()) fs::create_directories(out.parent_path());
  trainer::matcher_checkpoint(params, last_adam, ds.vocab.hash(), last_epoch).save(out);
  write_text(beside(out, ".log.jsonl"), log.to_jsonl());
  write_text(beside(out, ".config.txt"), rc.dump() + "run.fwd = " + a.fwd + "\nrun.bwd = " + a.bwd + "\n");
  std::cout << "wrote " << out.string() << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct Caption {
  Common common;
  std::string ckpt, data, beta, bwd, matcher;
  std::int64_t scene = -1;
  int beam = 1;
  bool verbose = false;
};

int cmd_caption(const Caption& a) {
  RunConfig rc;
  a.common.resolve(rc);
  if (a.beam < 1) fail(kExitUsage, "--beam must be >= 1");
  if (a.matcher.empty() != a.bwd.empty() && a.beam == 1)
    fail(kExitUsage, "--matcher needs --bwd (or --beam > 1) and --bwd needs --matcher");
  const auto ds = open_dataset(a.data);
  const auto fwd = captioner::load_params(open_checkpoint(a.ckpt, ds));
  const auto values = parse_doubles(a.beta, "--beta");
  if (values.size() != fwd.dims.beta_dim)
    fail(kExitUsage, "--beta has " + std::to_string(values.size()) + " values; the checkpoint expects " +
                         std::to_string(fwd.dims.beta_dim) + " (" + fwd.control.str() + ")");
  const std::vector<float> beta(values.begin(), values.end());

  const corpus::SceneRecord* record = nullptr;
  for (const char* split : {"train", "val", "test"})
    for (const auto& r : ds.split(split))
      if (r.scene.scene_id == a.scene) record = &r;
  if (record == nullptr) fail(kExitData, "unknown scene id " + std::to_string(a.scene));

  std::optional<matcher::MatcherParams<float>> m;
  if (!a.matcher.empty()) m = matcher::load_params(open_checkpoint(a.matcher, ds));

  std::vector<corpus::Tokens> candidates;
  std::vector<std::string> labels;
  const std::vector<const captioner::Features*> feats = {&record->features};
  auto greedy = [&](const captioner::CaptionerParams<float>& p) {
    tensor::NoGradGuard guard;
    auto img = captioner::project_features(p, std::span<const captioner::Features* const>(feats));
    return captioner::greedy_decode(p, img, captioner::beta_batch<float>(beta, 1), rc.captioner.max_len)[0];
  };
  if (a.beam > 1) {
    tensor::NoGradGuard guard;
    auto hyps = captioner::beam_decode(fwd, record->features, beta, a.beam, rc.captioner.max_len);
    for (std::size_t i = 0; i < hyps.size(); ++i) {
      candidates.push_back(hyps[i].tokens);
      labels.push_back("beam_" + std::to_string(i));
    }
  } else {
    candidates.push_back(greedy(fwd));
    labels.push_back("fwd");
    if (!a.bwd.empty()) {
      const auto bwd = captioner::load_params(open_checkpoint(a.bwd, ds));
      if (bwd.dims.beta_dim != fwd.dims.beta_dim) fail(kExitUsage, "--bwd control arity differs from --ckpt");
      candidates.push_back(greedy(bwd));
      labels.push_back("bwd");
    }
  }

  std::size_t pick = 0;
  std::vector<double> scores;
  if (m && candidates.size() > 1) {
    auto sel = matcher::select_caption(*m, record->features, candidates);
    pick = sel.index;
    scores = std::move(sel.scores);
  }
  std::cout << ds.vocab.decode(candidates[pick]) << "\n";
  if (a.verbose) {
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      std::fprintf(stderr, "%s%-7s", i == pick ? "* " : "  ", labels[i].c_str());
      if (!scores.empty()) std::fprintf(stderr, " score %+.6f", scores[i]);
      std::fprintf(stderr, "  %s\n", ds.vocab.decode(candidates[i]).c_str());
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct Eval {
  Common common;
  std::string data, fwd, bwd, matcher, beta_sweep, control_study, report, split = "test", csv, threshold;
  std::optional<int> beam;
  std::optional<double> beta;
  std::optional<int> max_scenes;
};

struct Study {
  corpus::Attribute attribute;
  std::vector<int> values;
};

Study parse_study(const std::string& text) {
  const auto eq = text.find('=');
  if (eq == std::string::npos) fail(kExitUsage, "--control-study expects ATTR=v1..v2");
  Study s;
  try {
    s.attribute = corpus::parse_attribute(text.substr(0, eq));
  } catch (const ConfigError& e) {
    fail(kExitUsage, e.what());
  }
  const auto range = text.substr(eq + 1);
  const auto dots = range.find("..");
  try {
    const int lo = std::stoi(range.substr(0, dots));
    const int hi = dots == std::string::npos ? lo : std::stoi(range.substr(dots + 2));
    if (hi < lo) fail(kExitUsage, "--control-study range is empty");
    for (int v = lo; v <= hi; ++v) s.values.push_back(v);
  } catch (const std::logic_error&) {
    fail(kExitUsage, "--control-study: bad range '" + range + "'");
  }
  return s;
}

int cmd_eval(const Eval& a) {
  if (!a.beta_sweep.empty() && !a.control_study.empty())
    fail(kExitUsage, "--beta-sweep and --control-study are mutually exclusive");
  RunConfig rc;
  a.common.resolve(rc);
  if (a.beam) rc.eval.beam = *a.beam;
  if (a.beta) rc.eval.beta = *a.beta;
  if (a.max_scenes) rc.eval.max_scenes = *a.max_scenes;
  if (!a.threshold.empty()) rc.eval.threshold = a.threshold;
  rc.eval.validate();
  if (!a.matcher.empty() && a.bwd.empty() && rc.eval.beam == 1)
    fail(kExitUsage, "--matcher needs --bwd or --beam > 1");
  const std::optional<Study> study = a.control_study.empty() ? std::nullopt : std::optional(parse_study(a.control_study));
  const auto sweep = a.beta_sweep.empty() ? std::vector<double>{} : parse_doubles(a.beta_sweep, "--beta-sweep");

  const auto ds = open_dataset(a.data);
  rc.corpus = ds.config;
  if (a.split != "train" && a.split != "val" && a.split != "test") fail(kExitUsage, "--split must be train, val or test");
  const auto fwd = captioner::load_params(open_checkpoint(a.fwd, ds));
  std::optional<captioner::CaptionerParams<float>> bwd;
  std::optional<matcher::MatcherParams<float>> m;
  if (!a.bwd.empty()) bwd = captioner::load_params(open_checkpoint(a.bwd, ds));
  if (!a.matcher.empty()) m = matcher::load_params(open_checkpoint(a.matcher, ds));

  const double threshold = evaluator::resolve_threshold(fwd, ds, a.split, rc.eval);
  evaluator::SystemUnderTest sut;
  sut.forward = &fwd;
  sut.backward = bwd ? &*bwd : nullptr;
  sut.matcher = m ? &*m : nullptr;
  sut.beam = rc.eval.beam;
  sut.quality_beta = rc.eval.beta;
  const auto result = evaluator::eval_system(sut, ds, a.split, rc.eval, threshold);

  const fs::path report(a.report);
  if (report.has_parent_path()) fs::create_directories(report.parent_path());
  write_text(report, result.report.to_json() + "\n");
  evaluator::write_scene_csv(a.csv.empty() ? beside(report, ".scenes.csv") : fs::path(a.csv), result.scenes, ds.vocab);
  write_text(beside(report, ".config.txt"), rc.dump() + "run.split = " + a.split + "\nrun.threshold_native = " +
                                                config::format_value(threshold) + "\n");
  std::printf("%s: bleu1 %.4f  bleu4 %.4f  cider %.4f (x100 %.1f)  poor<%.4f %.4f\n", a.split.c_str(),
              result.report.bleu1, result.report.bleu4, result.report.cider,
              metrics::to_paper_scale(result.report.cider), threshold, result.report.poor_quality_fraction);

  if (!sweep.empty()) {
    const auto points = evaluator::beta_sweep(fwd, sweep, ds, a.split, rc.eval, threshold);
    write_text(beside(report, ".sweep.json"), evaluator::sweep_to_json(points) + "\n");
    std::vector<double> xs, ys;
    for (const auto& p : points) {
      xs.push_back(p.beta);
      ys.push_back(p.report.cider);
      std::printf("beta %6.3f  cider %.4f  bleu4 %.4f  poor %.4f\n", p.beta, p.report.cider, p.report.bleu4,
                  p.report.poor_quality_fraction);
    }
    std::printf("spearman(beta, cider) = %.4f\n", evaluator::spearman(xs, ys));
  }
  if (study) {
    const auto rows = evaluator::control_study(fwd, study->attribute, study->values, ds, a.split, rc.eval);
    write_text(beside(report, ".study.json"), evaluator::study_to_json(study->attribute, rows) + "\n");
    for (const auto& r : rows) {
      std::printf("%s %2d  compliance %.4f (%zu/%zu realizable)  observed %.3f  cider %.4f\n",
                  corpus::attribute_name(study->attribute).c_str(), r.requested, r.compliance, r.realizable,
                  r.scenes, r.mean_observed, r.mean_cider);
    }
  }
  return kExitOk;
}

// ---------------------------------------------------------------------------

struct GradCheck {
  std::uint64_t seed = 1;
  bool inject_fault = false;
};

int cmd_grad_check(const GradCheck& a) {
  auto options = gradcheck::suite_options();
  if (a.inject_fault) options.analytic_offset = 1e-3;
  const auto rows = gradcheck::run_suite(a.seed, options);
  std::cout << gradcheck::format_table(rows);
  const bool ok = gradcheck::all_passed(rows);
  std::cout << (ok ? "all checks passed" : "gradient check FAILED") << " (tolerance "
            << gradcheck::kTolerance << ")\n";
  return ok ? kExitOk : kExitCheckFailed;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Controllable image captioning on a synthetic corpus"};
  app.require_subcommand(1);

  GenData gen;
  auto* g = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen.common.attach(g);
  g->add_option("--out", gen.out, "output directory")->required();
  g->add_option("--scenes", gen.scenes, "total scenes, split 80/10/10")->required();
  g->add_option("--seed", gen.seed, "corpus seed");
  g->add_option("--feat-dim", gen.feat_dim, "region feature width");
  g->add_flag("--force", gen.force, "write into a non-empty directory");

  Train tr;
  auto* t = app.add_subcommand("train", "Train a captioner (cross entropy or SCST)");
  tr.common.attach(t);
  t->add_option("--data", tr.data, "dataset directory")->required();
  t->add_option("--direction", tr.direction, "fwd | bwd");
  t->add_option("--control", tr.control, "quality | length | tense | nouns | multi");
  t->add_option("--mode", tr.mode, "xe | scst");
  t->add_option("--ckpt", tr.ckpt, "output checkpoint")->required();
  t->add_option("--init", tr.init, "initial checkpoint (required for scst)");
  t->add_option("--preset", tr.preset, "desk | paper");
  t->add_option("--epochs", tr.epochs, "override train.epochs");
  t->add_option("--seed", tr.seed, "override train.seed");

  TrainMatcher tm;
  auto* m = app.add_subcommand("train-matcher", "Train the image-text matcher on generated caption pairs");
  tm.common.attach(m);
  m->add_option("--data", tm.data, "dataset directory")->required();
  m->add_option("--fwd", tm.fwd, "forward captioner")->required();
  m->add_option("--bwd", tm.bwd, "backward captioner")->required();
  m->add_option("--out", tm.out, "output checkpoint")->required();
  m->add_option("--preset", tm.preset, "desk | paper");
  m->add_option("--epochs", tm.epochs, "override train.epochs");
  m->add_option("--seed", tm.seed, "override train.seed");
  m->add_flag("--with-references", tm.references, "add reference captions against in-batch negatives");

  Caption cap;
  auto* c = app.add_subcommand("caption", "Caption one scene");
  cap.common.attach(c);
  c->add_option("--ckpt", cap.ckpt, "forward captioner")->required();
  c->add_option("--data", cap.data, "dataset directory")->required();
  c->add_option("--scene", cap.scene, "scene id")->required();
  c->add_option("--beta", cap.beta, "control vector, comma separated")->required();
  c->add_option("--beam", cap.beam, "beam width");
  c->add_option("--bwd", cap.bwd, "backward captioner");
  c->add_option("--matcher", cap.matcher, "matcher for selection");
  c->add_flag("--verbose", cap.verbose, "print every candidate with its score to stderr");

  Eval ev;
  auto* e = app.add_subcommand("eval", "Evaluate a captioning system");
  ev.common.attach(e);
  e->add_option("--data", ev.data, "dataset directory")->required();
  e->add_option("--fwd", ev.fwd, "forward captioner")->required();
  e->add_option("--bwd", ev.bwd, "backward captioner");
  e->add_option("--matcher", ev.matcher, "matcher for selection");
  e->add_option("--beam", ev.beam, "beam width");
  e->add_option("--beta", ev.beta, "quality beta (eval.beta)");
  e->add_option("--beta-sweep", ev.beta_sweep, "comma-separated quality betas");
  e->add_option("--control-study", ev.control_study, "ATTR=v1..v2");
  e->add_option("--split", ev.split, "train | val | test");
  e->add_option("--threshold", ev.threshold, "median | paper");
  e->add_option("--max-scenes", ev.max_scenes, "evaluate the first N scenes");
  e->add_option("--csv", ev.csv, "per-scene CSV (default beside the report)");
  e->add_option("--report", ev.report, "report JSON")->required();

  GradCheck gc;
  auto* k = app.add_subcommand("grad-check", "Finite-difference gradient suite");
  k->add_option("--seed", gc.seed, "seed");
  k->add_flag("--inject-fault", gc.inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return kExitUsage;
  }

  try {
    if (*g) return cmd_gen_data(gen);
    if (*t) return cmd_train(tr);
    if (*m) return cmd_train_matcher(tm);
    if (*c) return cmd_caption(cap);
    if (*e) return cmd_eval(ev);
    if (*k) return cmd_grad_check(gc);
  } catch (const Exit& ex) {
    std::cerr << "error: " << ex.message << "\n";
    return ex.code;
  } catch (const ConfigError& ex) {
    std::cerr << "config error: " << ex.what() << "\n";
    return kExitUsage;
  } catch (const LexiconError& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const IoError& ex) {
    std::cerr << "data error: " << ex.what() << "\n";
    return kExitData;
  } catch (const ContractError& ex) {
    std::cerr << "compatibility error: " << ex.what() << "\n";
    return kExitData;
  } catch (const std::exception& ex) {
    std::cerr << "error: " << ex.what() << "\n";
    return kExitCheckFailed;
  }
  return kExitUsage;
}
