#include "srnas/orchestrator.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <exception>
#include <filesystem>
#include <fstream>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "srnas/builder.hpp"
#include "srnas/errors.hpp"
#include "srnas/rng.hpp"
#include "srnas/snapshot.hpp"

namespace srnas {

namespace fs = std::filesystem;
using nlohmann::json;

std::atomic<bool>& stop_flag() {
  static std::atomic<bool> flag{false};
  return flag;
}

double metric_sign(SpaceKind space) {
  return space == SpaceKind::Generator ? 1.0 : -1.0;
}

namespace {

// Seed-derivation salts. Every random stream in a run hangs off the single
// run seed through mix64 with one of these, so streams never collide and a
// resumed run regenerates the identical sequence.
constexpr std::uint64_t kCtlInitSalt = 0x63746c5f696e6974ull;
constexpr std::uint64_t kSampleSalt = 0x73616d706c657278ull;
constexpr std::uint64_t kEvalSeedSalt = 0x6576616c73656564ull;
constexpr std::uint64_t kSurroGenSalt = 0x73757272675f67ull;
constexpr std::uint64_t kSurroDiscSalt = 0x73757272675f64ull;
constexpr std::uint64_t kDataSalt = 0x646174617365740aull;
constexpr std::uint64_t kGenSearchSalt = 0x67656e5f73726368ull;
constexpr std::uint64_t kDiscSearchSalt = 0x646973635f737263ull;
constexpr std::uint64_t kFullDistInitSalt = 0x66645f696e697400ull;
constexpr std::uint64_t kFullDistTrainSalt = 0x66645f747261696eull;
constexpr std::uint64_t kGanGInitSalt = 0x67616e5f675f696eull;
constexpr std::uint64_t kGanDInitSalt = 0x67616e5f645f696eull;
constexpr std::uint64_t kGanTrainSalt = 0x67616e5f7472616eull;
constexpr std::uint64_t kDiscEvalDSalt = 0x6465765f64ull;
constexpr std::uint64_t kDiscEvalGSalt = 0x6465765f67ull;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

void ensure_parent_dir(const std::string& path) {
  const fs::path p(path);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
}

json read_json_file(const std::string& path, const char* what) {
  std::ifstream in(path);
  if (!in) throw IoError(std::string("cannot read ") + what + " at " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw ParseError(std::string(what) + ": " + e.what());
  }
}

void write_json_atomic(const std::string& path, const json& j) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp);
    out << j.dump(2) << "\n";
    if (!out) throw IoError("write failed for " + tmp);
  }
  fs::rename(tmp, path);
}

// Uniform in [0, 1) from a hash, same construction as Rng::uniform.
double hash_unit(std::uint64_t h, std::uint64_t salt) {
  return static_cast<double>(mix64(h, salt) >> 11) * 0x1.0p-53;
}

// Drops this-space records with step > keep_step (0 = all of them); other
// spaces' history is preserved. Rewrites via temp + rename.
void truncate_log(const std::string& path, const std::string& space, long keep_step) {
  if (!fs::exists(path)) return;
  std::vector<std::string> kept;
  bool changed = false;
  {
    std::ifstream in(path);
    if (!in) throw IoError("cannot read " + path);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) {
        changed = true;
        continue;
      }
      json j;
      try {
        j = json::parse(line);
      } catch (const json::exception& e) {
        throw ParseError("corrupt search log line: " + std::string(e.what()));
      }
      if (j.value("space", std::string()) == space && j.value("step", 0L) > keep_step) {
        changed = true;
        continue;
      }
      kept.push_back(line);
    }
  }
  if (!changed) return;
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp);
    for (const auto& l : kept) out << l << "\n";
  }
  fs::rename(tmp, path);
}

template <typename T>
T req_field(const json& j, const char* key) {
  if (!j.contains(key)) throw ParseError(std::string("search log record: missing '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw ParseError(std::string("search log record: bad '") + key + "'");
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// SearchLogRecord

json SearchLogRecord::to_json() const {
  return json{{"step", step},
              {"space", space},
              {"kind", kind},
              {"decisions", decisions},
              {"gate_pass", gate_pass},
              {"mult_adds", mult_adds},
              {"metric", metric},
              {"reward", reward},
              {"entropy", entropy},
              {"log_prob", log_prob},
              {"wall", wall},
              {"worker", worker},
              {"eval_seed", eval_seed}};
}

SearchLogRecord SearchLogRecord::from_json(const json& j) {
  SearchLogRecord r;
  r.step = req_field<long>(j, "step");
  r.space = req_field<std::string>(j, "space");
  r.kind = req_field<std::string>(j, "kind");
  r.decisions = req_field<std::vector<int>>(j, "decisions");
  r.gate_pass = req_field<bool>(j, "gate_pass");
  r.mult_adds = req_field<std::uint64_t>(j, "mult_adds");
  r.metric = req_field<double>(j, "metric");
  r.reward = req_field<double>(j, "reward");
  r.entropy = req_field<double>(j, "entropy");
  r.log_prob = req_field<double>(j, "log_prob");
  r.wall = req_field<double>(j, "wall");
  r.worker = req_field<int>(j, "worker");
  r.eval_seed = req_field<std::uint64_t>(j, "eval_seed");
  return r;
}

// ---------------------------------------------------------------------------
// SearchDriver

struct SearchDriver::State {
  State(double entropy_coef, double decay) : pipeline(entropy_coef, decay) {}

  std::mutex mu;
  long steps_done = 0;
  int inflight = 0;
  long attempts = 0;
  bool have_best = false;
  Genome best;
  double best_metric = 0.0;
  RewardPipeline pipeline;
  std::unique_ptr<SharedController> ctl;
  std::ofstream log;
  std::exception_ptr error;
  bool interrupted = false;
  std::chrono::steady_clock::time_point t0;
};

SearchDriver::SearchDriver(SearchConfig cfg, EvalFn eval, std::string log_path,
                           std::string ckpt_path, bool resume, Hooks hooks)
    : cfg_(std::move(cfg)),
      eval_(std::move(eval)),
      log_path_(std::move(log_path)),
      ckpt_path_(std::move(ckpt_path)),
      resume_(resume),
      hooks_(std::move(hooks)) {
  if (cfg_.steps < 0) throw ConfigError("search steps must be >= 0");
  if (cfg_.workers < 1) throw ConfigError("search workers must be >= 1");
  if (!eval_) throw ConfigError("search driver needs an evaluation function");
}

SearchResult SearchDriver::run() {
  const std::string space = space_name(cfg_.space);

  ControllerConfig cc;
  cc.dims = decision_dims(cfg_.space);
  cc.lr = cfg_.controller_lr;
  cc.init_seed = mix64(cfg_.seed, kCtlInitSalt);
  Controller ctl(cc);

  State st(cfg_.entropy_coef, cfg_.baseline_decay);
  long keep = 0;
  if (resume_ && fs::exists(ckpt_path_)) {
    Snapshot snap = Snapshot::load(ckpt_path_);
    if (snap.meta.value("space", std::string()) == space) {
      ctl = Controller::from_snapshot(snap);
      st.pipeline.restore(snap.meta.at("pipeline"));
      keep = snap.meta.at("steps_done").get<long>();
      st.attempts = snap.meta.at("attempts").get<long>();
      st.have_best = snap.meta.value("have_best", false);
      if (st.have_best) {
        st.best = genome_from_json(snap.meta.at("best"));
        st.best_metric = snap.meta.at("best_metric").get<double>();
      }
    }
  }
  st.steps_done = keep;

  ensure_parent_dir(log_path_);
  ensure_parent_dir(ckpt_path_);
  // Anything past the checkpoint (or the whole space history on a fresh
  // start) was never captured in controller state; drop it so log and
  // checkpoint agree.
  truncate_log(log_path_, space, resume_ ? keep : 0);
  st.log.open(log_path_, std::ios::app);
  if (!st.log) throw IoError("cannot append to " + log_path_);

  st.ctl = std::make_unique<SharedController>(std::move(ctl));
  st.t0 = std::chrono::steady_clock::now();

  const std::uint64_t sample_base = mix64(cfg_.seed, kSampleSalt);
  const std::uint64_t eval_base = mix64(cfg_.seed, kEvalSeedSalt);

  // Must hold st.mu.
  auto write_ckpt = [&](State& s) {
    Snapshot snap = s.ctl->read([](const Controller& c) { return c.to_snapshot(); });
    snap.meta["space"] = space;
    snap.meta["pipeline"] = s.pipeline.state();
    snap.meta["steps_done"] = s.steps_done;
    snap.meta["attempts"] = s.attempts;
    snap.meta["have_best"] = s.have_best;
    if (s.have_best) {
      snap.meta["best"] = genome_to_json(s.best);
      snap.meta["best_metric"] = s.best_metric;
    }
    s.log.flush();
    snap.save(ckpt_path_);
    if (hooks_.on_checkpoint) hooks_.on_checkpoint();
  };

  // One claimed step: sample/evaluate until something consumes it. Returns
  // false when this worker should exit. The inflight slot is released on
  // every path.
  auto run_one = [&](int w) -> bool {
    int rejects = 0;
    for (;;) {
      long ticket;
      {
        std::lock_guard<std::mutex> lk(st.mu);
        ticket = st.attempts++;
      }
      Rng sampler(mix64(sample_base, static_cast<std::uint64_t>(ticket)));
      const SampleResult s =
          st.ctl->read([&](const Controller& c) { return c.sample(sampler); });
      const Genome g{cfg_.space, s.decisions};
      const std::uint64_t eval_seed = mix64(eval_base, static_cast<std::uint64_t>(ticket));
      const EvalOutcome out = eval_(g, w, eval_seed, ticket);
      const double wall = seconds_since(st.t0);

      std::lock_guard<std::mutex> lk(st.mu);
      SearchLogRecord rec;
      rec.space = space;
      rec.decisions = s.decisions;
      rec.gate_pass = out.gate_pass;
      rec.mult_adds = out.mult_adds;
      rec.entropy = s.entropy;
      rec.log_prob = s.log_prob;
      rec.wall = wall;
      rec.worker = w;
      rec.eval_seed = eval_seed;

      if (!out.gate_pass && !cfg_.gate_penalty) {
        // Rejected sample: no step consumed, no policy update, just a trace
        // row tagged with the step it was working toward.
        rec.step = st.steps_done + 1;
        rec.kind = "gate";
        st.log << rec.to_json().dump() << "\n";
        if (!st.log) throw IoError("search log write failed");
        if (++rejects >= cfg_.gate_retry_cap) {
          --st.inflight;
          if (!st.error)
            st.error = std::make_exception_ptr(
                Error("cost gate rejected " + std::to_string(rejects) +
                      " consecutive samples; the limit looks unreachable"));
          return false;
        }
        if (stop_flag().load()) {
          --st.inflight;
          st.interrupted = true;
          return false;
        }
        continue;
      }

      --st.inflight;
      const long t = ++st.steps_done;
      rec.step = t;
      double reward;
      if (!out.gate_pass) {
        rec.kind = "gate_penalty";
        reward = -1.0;  // fixed penalty; reward stats stay untouched
      } else if (out.failed) {
        rec.kind = "failure";
        reward = st.pipeline.compute_failure(s.entropy);
      } else {
        rec.kind = "eval";
        rec.metric = out.metric;
        reward = st.pipeline.compute(metric_sign(cfg_.space) * out.metric, s.entropy);
        if (!st.have_best ||
            metric_sign(cfg_.space) * out.metric > metric_sign(cfg_.space) * st.best_metric) {
          st.have_best = true;
          st.best = g;
          st.best_metric = out.metric;
        }
      }
      rec.reward = reward;
      st.log << rec.to_json().dump() << "\n";
      if (!st.log) throw IoError("search log write failed");
      st.ctl->update([&](Controller& c) { c.reinforce_update(s.decisions, reward); });
      if (cfg_.checkpoint_every > 0 && t % cfg_.checkpoint_every == 0) write_ckpt(st);
      if (stop_flag().load()) st.interrupted = true;
      return true;
    }
  };

  auto work = [&](int w) {
    for (;;) {
      {
        std::lock_guard<std::mutex> lk(st.mu);
        if (st.error || st.interrupted) return;
        if (stop_flag().load()) {
          st.interrupted = true;
          return;
        }
        if (st.steps_done + st.inflight >= cfg_.steps) return;
        ++st.inflight;
      }
      bool keep_going = true;
      try {
        keep_going = run_one(w);
      } catch (...) {
        std::lock_guard<std::mutex> lk(st.mu);
        --st.inflight;
        if (!st.error) st.error = std::current_exception();
        return;
      }
      if (!keep_going) return;
    }
  };

  if (st.steps_done < cfg_.steps && !stop_flag().load()) {
    const long remaining = cfg_.steps - st.steps_done;
    const int nthreads =
        static_cast<int>(std::min<long>(static_cast<long>(cfg_.workers), remaining));
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(nthreads));
    for (int w = 0; w < nthreads; ++w) pool.emplace_back(work, w);
    for (auto& th : pool) th.join();
  }

  {
    std::lock_guard<std::mutex> lk(st.mu);
    write_ckpt(st);
  }
  if (st.error) std::rethrow_exception(st.error);

  SearchResult r;
  r.best = st.best;
  r.best_metric = st.best_metric;
  r.have_best = st.have_best;
  r.steps_done = st.steps_done;
  r.interrupted = st.interrupted && st.steps_done < cfg_.steps;
  return r;
}

// ---------------------------------------------------------------------------
// Evaluators

GeneratorEvaluator::GeneratorEvaluator(const Dataset& ds, WeightCache& cache,
                                       GeneratorEvalConfig cfg, TrainFn train)
    : ds_(ds), cache_(cache), cfg_(std::move(cfg)), train_(std::move(train)) {}

EvalOutcome GeneratorEvaluator::operator()(const Genome& g, int /*worker*/, std::uint64_t seed,
                                           long ticket) {
  EvalOutcome out;
  const CellGraph cell = decode_generator(g);
  const CostReport cost =
      generator_cost(cell, cfg_.n, cfg_.scale, cfg_.limit.ref_out_h, cfg_.limit.ref_out_w);
  out.mult_adds = cost.mult_adds;
  if (!gate(cost, cfg_.limit).pass) {
    out.gate_pass = false;
    return out;
  }
  try {
    InitSpec init;
    init.seed = seed;
    init.cache = &cache_;
    Network net = build_generator(cell, cfg_.n, cfg_.scale, init);
    DistortionConfig dc = cfg_.proxy;
    dc.seed = seed;
    const EvalReport rep = train_ ? train_(net, ds_, dc) : train_distortion(net, ds_, dc);
    out.metric = rep.value;
    // Per-node weights enter the cache keyed on the whole-model metric; the
    // cache keeps whichever candidate scored best so far.
    for (int i = 1; i <= kCellNodes; ++i)
      cache_.commit(i, cell.nodes[static_cast<std::size_t>(i - 1)].op,
                    extract_param_group(net, cell_node_prefix(i)), rep.value, ticket);
  } catch (const DivergedError& e) {
    out.failed = true;
    out.note = e.what();
  } catch (const NonFiniteMetric& e) {
    out.failed = true;
    out.note = e.what();
  }
  return out;
}

DiscriminatorEvaluator::DiscriminatorEvaluator(const Dataset& ds, const Snapshot& g_best,
                                               CellGraph g_cell, int g_n, int g_scale,
                                               DiscriminatorEvalConfig cfg)
    : ds_(ds),
      g_best_(g_best),
      g_cell_(std::move(g_cell)),
      g_n_(g_n),
      g_scale_(g_scale),
      cfg_(std::move(cfg)) {
  if (cfg_.proxy.lr_patch * g_scale_ != cfg_.patch)
    throw ConfigError("gan lr_patch * scale must equal the discriminator patch");
}

EvalOutcome DiscriminatorEvaluator::operator()(const Genome& g, int /*worker*/,
                                               std::uint64_t seed, long /*ticket*/) {
  EvalOutcome out;
  const std::vector<DiscBlock> blocks = decode_discriminator(g);
  // Discriminators are never cost-gated. Small patches leave big late-block
  // kernels without a defined cost (the padded convolutions still run), so a
  // refusal here only zeroes the reported figure instead of skipping the
  // candidate.
  try {
    out.mult_adds = discriminator_cost(blocks, cfg_.n, cfg_.m, cfg_.patch).mult_adds;
  } catch (const ShapeError&) {
    out.mult_adds = 0;
  }
  try {
    InitSpec di;
    di.seed = mix64(seed, kDiscEvalDSalt);
    Network d = build_discriminator(blocks, cfg_.n, cfg_.m, cfg_.patch, di);

    InitSpec gi;
    gi.seed = mix64(seed, kDiscEvalGSalt);
    gi.snapshot = &g_best_;
    Network gen = build_generator(g_cell_, g_n_, g_scale_, gi);

    FrozenExtractor phi(cfg_.phi_seed);
    GanConfig gc = cfg_.proxy;
    gc.seed = seed;
    const EvalReport rep = train_gan(gen, d, phi, ds_, gc);
    out.metric = rep.value;
  } catch (const ShapeError& e) {
    out.failed = true;
    out.note = e.what();
  } catch (const DivergedError& e) {
    out.failed = true;
    out.note = e.what();
  } catch (const NonFiniteMetric& e) {
    out.failed = true;
    out.note = e.what();
  }
  return out;
}

EvalOutcome surrogate_generator_eval(const Genome& g, const GeneratorEvalConfig& cfg) {
  EvalOutcome out;
  const CellGraph cell = decode_generator(g);
  const CostReport cost =
      generator_cost(cell, cfg.n, cfg.scale, cfg.limit.ref_out_h, cfg.limit.ref_out_w);
  out.mult_adds = cost.mult_adds;
  if (!gate(cost, cfg.limit).pass) {
    out.gate_pass = false;
    return out;
  }
  // Deterministic stand-in metric on a PSNR-like scale.
  out.metric = 20.0 + 20.0 * hash_unit(genome_hash(g), kSurroGenSalt);
  return out;
}

EvalOutcome surrogate_discriminator_eval(const Genome& g) {
  EvalOutcome out;
  out.metric = hash_unit(genome_hash(g), kSurroDiscSalt);
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

namespace {

// Strict object reader: every key must be consumed, every type must match.
class ObjReader {
 public:
  ObjReader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected a JSON object");
  }

  void get(const char* k, bool& out) {
    if (!take(k)) return;
    const json& v = j_.at(k);
    if (!v.is_boolean()) throw ConfigError(key_path(k) + ": expected a boolean");
    out = v.get<bool>();
  }
  void get(const char* k, int& out) { get_integer(k, out); }
  void get(const char* k, long& out) { get_integer(k, out); }
  void get(const char* k, std::uint64_t& out) { get_integer(k, out); }
  void get(const char* k, double& out) {
    if (!take(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number()) throw ConfigError(key_path(k) + ": expected a number");
    out = v.get<double>();
  }
  void get(const char* k, std::string& out) {
    if (!take(k)) return;
    const json& v = j_.at(k);
    if (!v.is_string()) throw ConfigError(key_path(k) + ": expected a string");
    out = v.get<std::string>();
  }
  const json* object(const char* k) {
    if (!take(k)) return nullptr;
    const json& v = j_.at(k);
    if (!v.is_object()) throw ConfigError(key_path(k) + ": expected an object");
    return &v;
  }
  const json* array(const char* k) {
    if (!take(k)) return nullptr;
    const json& v = j_.at(k);
    if (!v.is_array()) throw ConfigError(key_path(k) + ": expected an array");
    return &v;
  }
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!used_.count(it.key()))
        throw ConfigError(key_path(it.key().c_str()) + ": unknown key");
  }
  std::string key_path(const char* k) const {
    return path_.empty() ? std::string(k) : path_ + "." + k;
  }

 private:
  template <typename T>
  void get_integer(const char* k, T& out) {
    if (!take(k)) return;
    const json& v = j_.at(k);
    if (!v.is_number_integer() && !v.is_number_unsigned())
      throw ConfigError(key_path(k) + ": expected an integer");
    out = v.get<T>();
  }
  bool take(const char* k) {
    used_.insert(k);
    return j_.contains(k);
  }
  std::string where() const { return path_.empty() ? std::string("config") : path_; }

  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void parse_search_section(ObjReader& top, const char* name, SearchConfig& sc) {
  const json* o = top.object(name);
  if (!o) return;
  ObjReader r(*o, name);
  r.get("steps", sc.steps);
  r.get("workers", sc.workers);
  r.get("gate_penalty", sc.gate_penalty);
  r.get("checkpoint_every", sc.checkpoint_every);
  r.get("gate_retry_cap", sc.gate_retry_cap);
  r.get("surrogate", sc.surrogate);
  r.get("entropy_coef", sc.entropy_coef);
  r.get("baseline_decay", sc.baseline_decay);
  r.get("controller_lr", sc.controller_lr);
  r.finish();
  if (sc.steps < 0) throw ConfigError(std::string(name) + ".steps must be >= 0");
  if (sc.workers < 1) throw ConfigError(std::string(name) + ".workers must be >= 1");
}

void parse_distortion_section(ObjReader& top, const char* name, DistortionConfig& c) {
  const json* o = top.object(name);
  if (!o) return;
  ObjReader r(*o, name);
  r.get("epochs", c.epochs);
  r.get("steps_per_epoch", c.steps_per_epoch);
  r.get("batch", c.batch);
  r.get("lr_patch", c.lr_patch);
  r.get("lr", c.lr);
  r.get("lr_late", c.lr_late);
  r.get("lr_drop_epoch", c.lr_drop_epoch);
  r.get("augment", c.augment);
  r.finish();
}

void parse_gan_section(ObjReader& top, const char* name, GanConfig& c) {
  const json* o = top.object(name);
  if (!o) return;
  ObjReader r(*o, name);
  r.get("epochs", c.epochs);
  r.get("steps_per_epoch", c.steps_per_epoch);
  r.get("batch", c.batch);
  r.get("lr_patch", c.lr_patch);
  r.get("alpha", c.alpha);
  r.get("lambda", c.lambda);
  r.get("gamma", c.gamma);
  r.get("d_steps", c.d_steps);
  r.get("g_steps", c.g_steps);
  r.get("lr", c.lr);
  r.get("lr_late", c.lr_late);
  r.get("lr_drop_epoch", c.lr_drop_epoch);
  r.get("augment", c.augment);
  r.finish();
}

RunConfig make_default_run_config() {
  RunConfig c;
  c.gen_search.space = SpaceKind::Generator;
  c.disc_search.space = SpaceKind::Discriminator;
  c.disc_search.steps = 50;
  c.full_distortion.epochs = 300;
  c.full_distortion.batch = 16;
  c.full_distortion.lr_patch = 12;
  c.full_gan.epochs = 40;
  c.full_gan.batch = 16;
  c.full_gan.lr_patch = 16;
  return c;
}

json search_to_doc(const SearchConfig& c) {
  return json{{"steps", c.steps},
              {"workers", c.workers},
              {"gate_penalty", c.gate_penalty},
              {"checkpoint_every", c.checkpoint_every},
              {"gate_retry_cap", c.gate_retry_cap},
              {"surrogate", c.surrogate},
              {"entropy_coef", c.entropy_coef},
              {"baseline_decay", c.baseline_decay},
              {"controller_lr", c.controller_lr}};
}

json distortion_to_doc(const DistortionConfig& c) {
  return json{{"epochs", c.epochs},
              {"steps_per_epoch", c.steps_per_epoch},
              {"batch", c.batch},
              {"lr_patch", c.lr_patch},
              {"lr", c.lr},
              {"lr_late", c.lr_late},
              {"lr_drop_epoch", c.lr_drop_epoch},
              {"augment", c.augment}};
}

json gan_to_doc(const GanConfig& c) {
  return json{{"epochs", c.epochs},
              {"steps_per_epoch", c.steps_per_epoch},
              {"batch", c.batch},
              {"lr_patch", c.lr_patch},
              {"alpha", c.alpha},
              {"lambda", c.lambda},
              {"gamma", c.gamma},
              {"d_steps", c.d_steps},
              {"g_steps", c.g_steps},
              {"lr", c.lr},
              {"lr_late", c.lr_late},
              {"lr_drop_epoch", c.lr_drop_epoch},
              {"augment", c.augment}};
}

json run_config_to_doc(const RunConfig& c) {
  json j;
  j["run_dir"] = c.run_dir;
  j["seed"] = c.seed;
  j["scales"] = c.scales;
  j["dataset"] = json{{"count_train", c.dataset.count_train},
                      {"count_val", c.dataset.count_val},
                      {"hr_size", c.dataset.hr_size},
                      {"scale", c.dataset.scale},
                      {"texture_mix", c.dataset.texture_mix}};
  j["generator"] = json{{"n", c.gen_n}};
  j["discriminator"] = json{{"n", c.disc_n}, {"m", c.disc_m}, {"patch", c.disc_patch}};
  j["phi"] = json{{"seed", c.phi_seed},
                  {"depth_proxy", c.phi_depth_proxy},
                  {"depth_full", c.phi_depth_full}};
  j["cost"] = json{{"max_mult_adds", c.limit.max_mult_adds},
                   {"ref_out_h", c.limit.ref_out_h},
                   {"ref_out_w", c.limit.ref_out_w}};
  j["gen_search"] = search_to_doc(c.gen_search);
  j["disc_search"] = search_to_doc(c.disc_search);
  j["proxy_distortion"] = distortion_to_doc(c.proxy_distortion);
  j["full_distortion"] = distortion_to_doc(c.full_distortion);
  j["proxy_gan"] = gan_to_doc(c.proxy_gan);
  j["full_gan"] = gan_to_doc(c.full_gan);
  return j;
}

}  // namespace

nlohmann::json default_run_config_doc() { return run_config_to_doc(make_default_run_config()); }

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig c = make_default_run_config();
  ObjReader r(j, "");
  r.get("run_dir", c.run_dir);
  r.get("seed", c.seed);
  if (const json* a = r.array("scales")) {
    c.scales.clear();
    for (const json& v : *a) {
      if (!v.is_number_integer() && !v.is_number_unsigned())
        throw ConfigError("scales: expected integers");
      c.scales.push_back(v.get<int>());
    }
  }
  if (const json* o = r.object("dataset")) {
    ObjReader d(*o, "dataset");
    d.get("count_train", c.dataset.count_train);
    d.get("count_val", c.dataset.count_val);
    d.get("hr_size", c.dataset.hr_size);
    d.get("scale", c.dataset.scale);
    if (const json* m = d.array("texture_mix")) {
      if (m->size() != 4) throw ConfigError("dataset.texture_mix: expected 4 weights");
      for (std::size_t i = 0; i < 4; ++i) {
        if (!(*m)[i].is_number()) throw ConfigError("dataset.texture_mix: expected numbers");
        c.dataset.texture_mix[i] = (*m)[i].get<double>();
      }
    }
    d.finish();
  }
  if (const json* o = r.object("generator")) {
    ObjReader g(*o, "generator");
    g.get("n", c.gen_n);
    g.finish();
  }
  if (const json* o = r.object("discriminator")) {
    ObjReader d(*o, "discriminator");
    d.get("n", c.disc_n);
    d.get("m", c.disc_m);
    d.get("patch", c.disc_patch);
    d.finish();
  }
  if (const json* o = r.object("phi")) {
    ObjReader p(*o, "phi");
    p.get("seed", c.phi_seed);
    p.get("depth_proxy", c.phi_depth_proxy);
    p.get("depth_full", c.phi_depth_full);
    p.finish();
  }
  if (const json* o = r.object("cost")) {
    ObjReader p(*o, "cost");
    p.get("max_mult_adds", c.limit.max_mult_adds);
    p.get("ref_out_h", c.limit.ref_out_h);
    p.get("ref_out_w", c.limit.ref_out_w);
    p.finish();
  }
  parse_search_section(r, "gen_search", c.gen_search);
  parse_search_section(r, "disc_search", c.disc_search);
  parse_distortion_section(r, "proxy_distortion", c.proxy_distortion);
  parse_distortion_section(r, "full_distortion", c.full_distortion);
  parse_gan_section(r, "proxy_gan", c.proxy_gan);
  parse_gan_section(r, "full_gan", c.full_gan);
  r.finish();

  if (c.scales.empty()) throw ConfigError("scales must not be empty");
  for (std::size_t i = 0; i < c.scales.size(); ++i) {
    if (c.scales[i] != 2 && c.scales[i] != 4) throw ConfigError("scales entries must be 2 or 4");
    if (i > 0 && c.scales[i] <= c.scales[i - 1])
      throw ConfigError("scales must be strictly increasing");
  }
  if (std::find(c.scales.begin(), c.scales.end(), c.dataset.scale) == c.scales.end())
    throw ConfigError("dataset.scale must be one of scales");
  if (c.dataset.count_train < 1 || c.dataset.count_val < 1)
    throw ConfigError("dataset split counts must be >= 1");
  if (c.dataset.hr_size < 8) throw ConfigError("dataset.hr_size is too small");
  for (int s : c.scales)
    if (c.dataset.hr_size % s != 0) throw ConfigError("dataset.hr_size must be divisible by every scale");
  if (c.gen_n < 4 || c.gen_n % 4 != 0)
    throw ConfigError("generator.n must be a positive multiple of 4");
  if (c.disc_n < 4 || c.disc_n % 4 != 0)
    throw ConfigError("discriminator.n must be a positive multiple of 4");
  if (c.disc_m < 0) throw ConfigError("discriminator.m must be >= 0");
  if (c.disc_patch <= 0 || c.disc_patch % 32 != 0)
    throw ConfigError("discriminator.patch must be a positive multiple of 32");
  if (c.disc_patch != c.proxy_gan.lr_patch * c.dataset.scale)
    throw ConfigError("discriminator.patch must equal proxy_gan.lr_patch * dataset.scale");
  if ((c.full_gan.lr_patch * c.scales.back()) % 32 != 0)
    throw ConfigError("full_gan.lr_patch * final scale must be a multiple of 32");
  if (c.phi_depth_proxy < 1 || c.phi_depth_proxy > FrozenExtractor::kMaxDepth ||
      c.phi_depth_full < 1 || c.phi_depth_full > FrozenExtractor::kMaxDepth)
    throw ConfigError("phi depths must be in [1, 3]");
  const int proxy_lr = c.dataset.hr_size / c.dataset.scale;
  if (c.proxy_distortion.lr_patch > proxy_lr || c.proxy_gan.lr_patch > proxy_lr)
    throw ConfigError("proxy patch sizes exceed the LR image size");
  for (int s : c.scales)
    if (c.full_distortion.lr_patch > c.dataset.hr_size / s)
      throw ConfigError("full_distortion.lr_patch exceeds the LR image size");
  if (c.full_gan.lr_patch > c.dataset.hr_size / c.scales.back())
    throw ConfigError("full_gan.lr_patch exceeds the LR image size");

  c.proxy_gan.phi_depth = c.phi_depth_proxy;
  c.full_gan.phi_depth = c.phi_depth_full;
  c.dataset.seed = mix64(c.seed, kDataSalt);
  c.gen_search.seed = mix64(c.seed, kGenSearchSalt);
  c.disc_search.seed = mix64(c.seed, kDiscSearchSalt);
  c.doc = run_config_to_doc(c);
  return c;
}

void apply_config_override(nlohmann::json& doc, const std::string& assignment) {
  const std::size_t eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0)
    throw ConfigError("override must look like path.to.key=value: " + assignment);
  const std::string path = assignment.substr(0, eq);
  const std::string text = assignment.substr(eq + 1);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded()) value = text;  // bare words become strings

  json* cur = &doc;
  std::size_t pos = 0;
  for (;;) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
    if (key.empty()) throw ConfigError("override has an empty path segment: " + assignment);
    if (dot == std::string::npos) {
      (*cur)[key] = std::move(value);
      return;
    }
    cur = &(*cur)[key];
    if (!cur->is_object() && !cur->is_null())
      throw ConfigError("override path crosses a non-object: " + assignment);
    pos = dot + 1;
  }
}

std::uint64_t config_hash(const nlohmann::json& doc) {
  const std::string s = doc.dump();
  return fnv1a64(s.data(), s.size());
}

RunPaths RunPaths::at(const std::string& root) {
  RunPaths p;
  p.root = root;
  p.config = root + "/config.json";
  p.log = root + "/search_log.jsonl";
  p.controller_ckpt = root + "/controller.ckpt";
  p.cache_dir = root + "/cache";
  p.snapshots_dir = root + "/snapshots";
  p.manifest = root + "/manifest.json";
  return p;
}

// ---------------------------------------------------------------------------
// Pipeline

Pipeline::Pipeline(RunConfig cfg)
    : cfg_(std::move(cfg)), paths_(RunPaths::at(cfg_.run_dir)) {
  fs::create_directories(paths_.root);
  fs::create_directories(paths_.cache_dir);
  fs::create_directories(paths_.snapshots_dir);

  const std::uint64_t h = config_hash(cfg_.doc);
  if (fs::exists(paths_.config)) {
    const json prev = read_json_file(paths_.config, "config.json");
    if (config_hash(prev) != h)
      throw ConfigError("run dir " + paths_.root + " was created with a different config");
  } else {
    write_json_atomic(paths_.config, cfg_.doc);
  }

  if (fs::exists(paths_.manifest)) {
    manifest_ = read_json_file(paths_.manifest, "manifest.json");
    if (manifest_.value("config_hash", std::uint64_t{0}) != h)
      throw ConfigError("manifest.json belongs to a different config");
  } else {
    manifest_ = json{{"version", 1},
                     {"config_hash", h},
                     {"seed", cfg_.seed},
                     {"phases", json::object()}};
    save_manifest();
  }

  proxy_ds_ = Dataset::generate(cfg_.dataset);
  if (fs::exists(paths_.cache_dir + "/index.json")) cache_.load(paths_.cache_dir);
}

bool Pipeline::phase_done(const char* name) const {
  const auto& phases = manifest_.at("phases");
  return phases.contains(name) && phases.at(name).value("status", std::string()) == "done";
}

void Pipeline::mark_phase(const char* name, nlohmann::json info) {
  info["status"] = "done";
  manifest_["phases"][name] = std::move(info);
  save_manifest();
}

void Pipeline::save_manifest() { write_json_atomic(paths_.manifest, manifest_); }

Genome Pipeline::best_genome_from_manifest(const char* phase, SpaceKind space) const {
  if (!phase_done(phase))
    throw StateError(std::string("phase ") + phase + " has not completed yet");
  const json& info = manifest_.at("phases").at(phase);
  if (!info.value("have_best", false))
    throw StateError(std::string("phase ") + phase + " finished without a successful evaluation");
  Genome g = genome_from_json(info.at("best_genome"));
  if (g.space != space)
    throw StateError(std::string("phase ") + phase + " recorded a genome from the wrong space");
  return g;
}

SearchResult Pipeline::run_search_phase(const char* name, SpaceKind space) {
  SearchConfig sc = space == SpaceKind::Generator ? cfg_.gen_search : cfg_.disc_search;
  sc.space = space;

  EvalFn fn;
  std::shared_ptr<Snapshot> gsnap;
  if (space == SpaceKind::Generator) {
    GeneratorEvalConfig gc;
    gc.n = cfg_.gen_n;
    gc.scale = cfg_.dataset.scale;
    gc.limit = cfg_.limit;
    gc.proxy = cfg_.proxy_distortion;
    if (sc.surrogate) {
      fn = [gc](const Genome& g, int, std::uint64_t, long) {
        return surrogate_generator_eval(g, gc);
      };
    } else {
      auto ev = std::make_shared<GeneratorEvaluator>(proxy_ds_, cache_, gc);
      fn = [ev](const Genome& g, int w, std::uint64_t s, long t) { return (*ev)(g, w, s, t); };
    }
  } else if (sc.surrogate) {
    fn = [](const Genome& g, int, std::uint64_t, long) {
      return surrogate_discriminator_eval(g);
    };
  } else {
    const Genome gbest = best_genome_from_manifest("gen_search", SpaceKind::Generator);
    const std::string snap_path =
        paths_.snapshots_dir + "/gen_x" + std::to_string(cfg_.dataset.scale) + ".wts";
    gsnap = std::make_shared<Snapshot>(Snapshot::load(snap_path));
    DiscriminatorEvalConfig dc;
    dc.n = cfg_.disc_n;
    dc.m = cfg_.disc_m;
    dc.patch = cfg_.disc_patch;
    dc.phi_seed = cfg_.phi_seed;
    dc.proxy = cfg_.proxy_gan;
    auto ev = std::make_shared<DiscriminatorEvaluator>(
        proxy_ds_, *gsnap, decode_generator(gbest), cfg_.gen_n, cfg_.dataset.scale, dc);
    fn = [ev, gsnap](const Genome& g, int w, std::uint64_t s, long t) {
      return (*ev)(g, w, s, t);
    };
  }

  SearchDriver::Hooks hooks;
  hooks.on_checkpoint = [this] { cache_.save(paths_.cache_dir); };
  SearchDriver driver(sc, std::move(fn), paths_.log, paths_.controller_ckpt, true, hooks);
  const SearchResult r = driver.run();
  cache_.save(paths_.cache_dir);

  json info;
  info["steps"] = r.steps_done;
  info["have_best"] = r.have_best;
  info["best_genome"] = r.have_best ? genome_to_json(r.best) : json();
  info["best_metric"] = r.best_metric;
  if (r.interrupted) {
    info["status"] = "interrupted";
    manifest_["phases"][name] = std::move(info);
    save_manifest();
    interrupted_ = true;
  } else {
    mark_phase(name, std::move(info));
  }
  return r;
}

void Pipeline::phase_gen_search() { run_search_phase("gen_search", SpaceKind::Generator); }

void Pipeline::phase_disc_search() { run_search_phase("disc_search", SpaceKind::Discriminator); }

void Pipeline::phase_full_distortion() {
  const Genome gbest = best_genome_from_manifest("gen_search", SpaceKind::Generator);
  const CellGraph cell = decode_generator(gbest);
  json scales_info = json::object();
  Snapshot prev;
  bool have_prev = false;
  for (int s : cfg_.scales) {
    if (stop_flag().load()) {
      interrupted_ = true;
      return;
    }
    DatasetSpec dspec = cfg_.dataset;
    dspec.scale = s;  // same seed: identical HR images, scale-specific LR
    const Dataset ds = Dataset::generate(dspec);

    InitSpec init;
    init.seed = mix64(cfg_.seed, mix64(kFullDistInitSalt, static_cast<std::uint64_t>(s)));
    init.cache = &cache_;
    if (have_prev) init.snapshot = &prev;  // x2 weights seed the x4 build
    Network g = build_generator(cell, cfg_.gen_n, s, init);

    DistortionConfig dc = cfg_.full_distortion;
    dc.seed = mix64(cfg_.seed, mix64(kFullDistTrainSalt, static_cast<std::uint64_t>(s)));
    dc.should_stop = [] { return stop_flag().load(); };
    const EvalReport rep = train_distortion(g, ds, dc);
    if (rep.interrupted) {
      interrupted_ = true;
      return;
    }

    Snapshot snap = snapshot_params(g.parameters());
    snap.meta["kind"] = "generator";
    snap.meta["genome"] = genome_to_json(gbest);
    snap.meta["n"] = cfg_.gen_n;
    snap.meta["scale"] = s;
    snap.meta["psnr_db"] = rep.value;
    const std::string rel = "snapshots/gen_x" + std::to_string(s) + ".wts";
    snap.save(paths_.root + "/" + rel);
    scales_info[std::to_string(s)] = json{{"psnr_db", rep.value}, {"snapshot", rel}};
    prev = std::move(snap);
    have_prev = true;
  }
  mark_phase("full_distortion", json{{"scales", std::move(scales_info)}});
}

void Pipeline::phase_gan_finetune() {
  const Genome gbest = best_genome_from_manifest("gen_search", SpaceKind::Generator);
  const Genome dbest = best_genome_from_manifest("disc_search", SpaceKind::Discriminator);
  const int s = cfg_.scales.back();

  DatasetSpec dspec = cfg_.dataset;
  dspec.scale = s;
  const Dataset ds = Dataset::generate(dspec);

  const Snapshot gsnap =
      Snapshot::load(paths_.snapshots_dir + "/gen_x" + std::to_string(s) + ".wts");
  InitSpec gi;
  gi.seed = mix64(cfg_.seed, kGanGInitSalt);
  gi.snapshot = &gsnap;
  Network g = build_generator(decode_generator(gbest), cfg_.gen_n, s, gi);

  const int patch = cfg_.full_gan.lr_patch * s;
  InitSpec di;
  di.seed = mix64(cfg_.seed, kGanDInitSalt);
  Network d = build_discriminator(decode_discriminator(dbest), cfg_.disc_n, cfg_.disc_m, patch, di);

  FrozenExtractor phi(cfg_.phi_seed);
  GanConfig gc = cfg_.full_gan;
  gc.seed = mix64(cfg_.seed, kGanTrainSalt);
  gc.should_stop = [] { return stop_flag().load(); };
  const EvalReport rep = train_gan(g, d, phi, ds, gc);
  if (rep.interrupted) {
    interrupted_ = true;
    return;
  }

  Snapshot gout = snapshot_params(g.parameters());
  gout.meta = json{{"kind", "generator"},
                   {"genome", genome_to_json(gbest)},
                   {"n", cfg_.gen_n},
                   {"scale", s},
                   {"feat_dist", rep.value}};
  gout.save(paths_.snapshots_dir + "/gen_final.wts");

  Snapshot dout = snapshot_params(d.parameters());
  dout.meta = json{{"kind", "discriminator"},
                   {"genome", genome_to_json(dbest)},
                   {"n", cfg_.disc_n},
                   {"m", cfg_.disc_m},
                   {"patch", patch}};
  dout.save(paths_.snapshots_dir + "/disc_final.wts");

  mark_phase("gan_finetune",
             json{{"feat_dist", rep.value},
                  {"psnr_db", rep.psnr_trace.empty() ? 0.0 : rep.psnr_trace.back()},
                  {"scale", s},
                  {"generator", "snapshots/gen_final.wts"},
                  {"discriminator", "snapshots/disc_final.wts"}});
}

int Pipeline::run(int stop_after) {
  struct Phase {
    const char* name;
    void (Pipeline::*fn)();
  };
  static constexpr Phase kPhases[] = {{"gen_search", &Pipeline::phase_gen_search},
                                      {"full_distortion", &Pipeline::phase_full_distortion},
                                      {"disc_search", &Pipeline::phase_disc_search},
                                      {"gan_finetune", &Pipeline::phase_gan_finetune}};
  int done = 0;
  for (const Phase& ph : kPhases) {
    if (done >= stop_after) break;
    if (!phase_done(ph.name)) {
      if (stop_flag().load()) {
        interrupted_ = true;
        break;
      }
      (this->*ph.fn)();
      if (interrupted_) break;
    }
    ++done;
  }
  save_manifest();
  return done;
}

// ---------------------------------------------------------------------------
// Replay and export

ReplayResult replay_run(const std::string& run_dir) {
  const RunPaths paths = RunPaths::at(run_dir);
  ReplayResult res;
  const RunConfig cfg = parse_run_config(read_json_file(paths.config, "config.json"));

  std::ifstream in(paths.log);
  if (!in) {
    res.ok = false;
    res.message = "missing search log " + paths.log;
    return res;
  }

  RewardPipeline gen_pipe(cfg.gen_search.entropy_coef, cfg.gen_search.baseline_decay);
  RewardPipeline disc_pipe(cfg.disc_search.entropy_coef, cfg.disc_search.baseline_decay);

  auto fail = [&](long step, std::string msg) {
    res.ok = false;
    res.bad_step = step;
    res.message = std::move(msg);
    return res;
  };

  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    SearchLogRecord rec;
    try {
      rec = SearchLogRecord::from_json(json::parse(line));
    } catch (const std::exception& e) {
      return fail(lineno, "line " + std::to_string(lineno) + ": " + e.what());
    }
    ++res.records;
    const SpaceKind space = space_from_name(rec.space);
    RewardPipeline& pipe = space == SpaceKind::Generator ? gen_pipe : disc_pipe;
    const Genome g{space, rec.decisions};

    if (rec.kind == "gate" || rec.kind == "gate_penalty") {
      if (space != SpaceKind::Generator)
        return fail(rec.step, "gate record in the ungated space");
      std::uint64_t ma = 0;
      try {
        ma = generator_cost(decode_generator(g), cfg.gen_n, cfg.dataset.scale,
                            cfg.limit.ref_out_h, cfg.limit.ref_out_w)
                 .mult_adds;
      } catch (const std::exception& e) {
        return fail(rec.step, std::string("gate genome does not decode: ") + e.what());
      }
      if (ma != rec.mult_adds)
        return fail(rec.step, "step " + std::to_string(rec.step) + ": logged mult-adds " +
                                  std::to_string(rec.mult_adds) + " != recomputed " +
                                  std::to_string(ma));
      if (ma <= cfg.limit.max_mult_adds)
        return fail(rec.step, "step " + std::to_string(rec.step) +
                                  ": gate record for a genome under the limit");
      if (rec.kind == "gate_penalty" && rec.reward != -1.0)
        return fail(rec.step,
                    "step " + std::to_string(rec.step) + ": gate penalty reward is not -1");
      continue;
    }

    double expect = 0.0;
    if (rec.kind == "failure") {
      expect = pipe.compute_failure(rec.entropy);
    } else if (rec.kind == "eval") {
      expect = pipe.compute(metric_sign(space) * rec.metric, rec.entropy);
    } else {
      return fail(rec.step, "unknown record kind '" + rec.kind + "'");
    }
    if (expect != rec.reward)
      return fail(rec.step, "step " + std::to_string(rec.step) + ": logged reward " +
                                json(rec.reward).dump() + " != replayed " +
                                json(expect).dump());
  }
  return res;
}

void export_log_csv(const std::string& run_dir, const std::string& csv_path) {
  const RunPaths paths = RunPaths::at(run_dir);
  std::ifstream in(paths.log);
  if (!in) throw IoError("missing search log " + paths.log);
  std::ofstream out(csv_path);
  if (!out) throw IoError("cannot write " + csv_path);

  auto num = [](double v) { return json(v).dump(); };  // shortest round-trip text
  out << "step,space,kind,metric,reward,entropy,log_prob,mult_adds,worker,eval_seed,wall,"
         "decisions\n";
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    SearchLogRecord rec;
    try {
      rec = SearchLogRecord::from_json(json::parse(line));
    } catch (const std::exception& e) {
      throw ParseError("search log: " + std::string(e.what()));
    }
    out << rec.step << ',' << rec.space << ',' << rec.kind << ',' << num(rec.metric) << ','
        << num(rec.reward) << ',' << num(rec.entropy) << ',' << num(rec.log_prob) << ','
        << rec.mult_adds << ',' << rec.worker << ',' << rec.eval_seed << ',' << num(rec.wall)
        << ',';
    for (std::size_t i = 0; i < rec.decisions.size(); ++i)
      out << (i ? " " : "") << rec.decisions[i];
    out << "\n";
  }
  if (!out) throw IoError("write failed for " + csv_path);
}

}  // namespace srnas
