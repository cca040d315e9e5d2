#ifndef SRNAS_ORCHESTRATOR_HPP
#define SRNAS_ORCHESTRATOR_HPP

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srnas/controller.hpp"
#include "srnas/cost_model.hpp"
#include "srnas/data.hpp"
#include "srnas/search_space.hpp"
#include "srnas/trainer.hpp"
#include "srnas/weight_cache.hpp"

namespace srnas {

// Cooperative shutdown flag; a signal handler sets it, workers poll it and the
// driver checkpoints before returning.
std::atomic<bool>& stop_flag();

struct SearchConfig {
  SpaceKind space = SpaceKind::Generator;
  long steps = 200;
  int workers = 1;
  std::uint64_t seed = 0;
  // Cost-gate rejects re-sample without consuming a step or updating the
  // controller; with gate_penalty they instead consume a step at reward -1.
  bool gate_penalty = false;
  int checkpoint_every = 25;
  int gate_retry_cap = 10000;
  bool surrogate = false;
  double entropy_coef = 1e-4;
  double baseline_decay = 0.95;
  double controller_lr = 3.5e-4;  // 0 freezes the policy (diagnostics)
};

// One evaluation. gate_pass=false carries the measured cost only; failed=true
// marks a diverged training run (worst reward, the step still counts).
struct EvalOutcome {
  bool gate_pass = true;
  bool failed = false;
  double metric = 0.0;  // raw metric: PSNR dB, or feature distance (lower better)
  std::uint64_t mult_adds = 0;
  std::string note;
};

// (genome, worker id, per-evaluation seed, monotone ticket).
using EvalFn = std::function<EvalOutcome(const Genome&, int, std::uint64_t, long)>;

struct SearchLogRecord {
  long step = 0;          // the step this record finalizes (gate rows: the one in progress)
  std::string space;      // "generator" | "discriminator"
  std::string kind;       // "eval" | "failure" | "gate" | "gate_penalty"
  std::vector<int> decisions;
  bool gate_pass = true;
  std::uint64_t mult_adds = 0;
  double metric = 0.0;
  double reward = 0.0;
  double entropy = 0.0;
  double log_prob = 0.0;
  double wall = 0.0;
  int worker = 0;
  std::uint64_t eval_seed = 0;

  nlohmann::json to_json() const;
  static SearchLogRecord from_json(const nlohmann::json& j);
};

struct SearchResult {
  Genome best;
  double best_metric = 0.0;  // raw metric of the best record
  bool have_best = false;
  long steps_done = 0;
  bool interrupted = false;
};

// Generic sample -> gate -> evaluate -> reward -> policy-update loop with N
// worker threads. Evaluations run concurrently; reward-pipeline updates,
// best tracking, log appends and controller updates are serialized in one
// critical section, so the log order is the replay order. The checkpoint
// holds controller + optimizer + pipeline + progress; resuming truncates the
// log back to the checkpointed step.
class SearchDriver {
 public:
  struct Hooks {
    std::function<void()> on_checkpoint;  // e.g. persist the weight cache
  };

  SearchDriver(SearchConfig cfg, EvalFn eval, std::string log_path,
               std::string ckpt_path, bool resume, Hooks hooks = {});

  SearchResult run();

 private:
  struct State;
  SearchConfig cfg_;
  EvalFn eval_;
  std::string log_path_, ckpt_path_;
  bool resume_;
  Hooks hooks_;
};

// Higher-is-better orientation of a space's raw metric (+1 PSNR, -1 feature
// distance).
double metric_sign(SpaceKind space);

struct GeneratorEvalConfig {
  int n = 16;
  int scale = 2;
  CostLimit limit;
  DistortionConfig proxy;
};

// Cost gate, cache-warm-started proxy distortion training, per-node weight
// commits keyed on the whole-model metric. The training function is
// injectable for conformance tests.
class GeneratorEvaluator {
 public:
  using TrainFn = std::function<EvalReport(Network&, const Dataset&, const DistortionConfig&)>;

  GeneratorEvaluator(const Dataset& ds, WeightCache& cache, GeneratorEvalConfig cfg,
                     TrainFn train = {});

  EvalOutcome operator()(const Genome& g, int worker, std::uint64_t seed, long ticket);

 private:
  const Dataset& ds_;
  WeightCache& cache_;
  GeneratorEvalConfig cfg_;
  TrainFn train_;
};

struct DiscriminatorEvalConfig {
  int n = 16;
  int m = 0;
  int patch = 32;
  std::uint64_t phi_seed = 7;
  GanConfig proxy;
};

// Builds a fresh discriminator per evaluation (no weight sharing), GAN
// fine-tunes a copy of the pretrained generator, returns the smoothed
// validation feature distance.
class DiscriminatorEvaluator {
 public:
  DiscriminatorEvaluator(const Dataset& ds, const Snapshot& g_best, CellGraph g_cell,
                         int g_n, int g_scale, DiscriminatorEvalConfig cfg);

  EvalOutcome operator()(const Genome& g, int worker, std::uint64_t seed, long ticket);

 private:
  const Dataset& ds_;
  const Snapshot& g_best_;
  CellGraph g_cell_;
  int g_n_, g_scale_;
  DiscriminatorEvalConfig cfg_;
};

// Deterministic hash-derived metric in [0, 1); generator variant still runs
// the real cost gate.
EvalOutcome surrogate_generator_eval(const Genome& g, const GeneratorEvalConfig& cfg);
EvalOutcome surrogate_discriminator_eval(const Genome& g);

struct RunConfig {
  std::string run_dir = "run";
  std::uint64_t seed = 1;
  std::vector<int> scales{2};
  DatasetSpec dataset;  // dataset.scale is the proxy scale
  int gen_n = 16;
  int disc_n = 16;
  int disc_m = 0;
  int disc_patch = 32;
  std::uint64_t phi_seed = 7;
  int phi_depth_proxy = 2;
  int phi_depth_full = 3;
  CostLimit limit;
  SearchConfig gen_search;
  SearchConfig disc_search;
  DistortionConfig proxy_distortion;
  DistortionConfig full_distortion;
  GanConfig proxy_gan;
  GanConfig full_gan;
  nlohmann::json doc;  // canonical parsed document (for hashing/persistence)
};

// Strict parse: unknown keys anywhere are ConfigError; types must match.
RunConfig parse_run_config(const nlohmann::json& j);
nlohmann::json default_run_config_doc();
// Dotted-path override "a.b.c=value"; value parsed as JSON, falling back to a
// string literal.
void apply_config_override(nlohmann::json& doc, const std::string& assignment);
std::uint64_t config_hash(const nlohmann::json& doc);

// Phase outcomes and paths inside a run directory.
struct RunPaths {
  std::string root, config, log, controller_ckpt, cache_dir, snapshots_dir, manifest;
  static RunPaths at(const std::string& root);
};

// Four sequential phases: generator search, full distortion training (with a
// x2 -> x4 transfer when both scales are requested), discriminator search,
// GAN fine-tune. Each phase records completion in manifest.json and is
// skipped when already done; an interrupted search resumes from its
// checkpoint.
class Pipeline {
 public:
  explicit Pipeline(RunConfig cfg);

  // Runs phases [next .. stop_after], 1-based; returns the number of the last
  // completed phase (0 if interrupted before finishing phase 1).
  int run(int stop_after = 4);

  const nlohmann::json& manifest() const { return manifest_; }
  const RunPaths& paths() const { return paths_; }

 private:
  bool phase_done(const char* name) const;
  void mark_phase(const char* name, nlohmann::json info);
  void save_manifest();
  SearchResult run_search_phase(const char* name, SpaceKind space);
  Genome best_genome_from_manifest(const char* phase, SpaceKind space) const;

  void phase_gen_search();
  void phase_full_distortion();
  void phase_disc_search();
  void phase_gan_finetune();

  RunConfig cfg_;
  RunPaths paths_;
  nlohmann::json manifest_;
  Dataset proxy_ds_;
  WeightCache cache_;
  bool interrupted_ = false;
};

struct ReplayResult {
  bool ok = true;
  long records = 0;
  long bad_step = -1;
  std::string message;
};

// Re-derives every logged reward from the (metric, entropy, kind) stream with
// a fresh pipeline per space and compares bit-exactly; gate rows are checked
// against the cost model.
ReplayResult replay_run(const std::string& run_dir);
void export_log_csv(const std::string& run_dir, const std::string& csv_path);

}  // namespace srnas

#endif  // SRNAS_ORCHESTRATOR_HPP
