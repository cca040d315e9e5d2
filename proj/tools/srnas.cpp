#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <utility>
#include <vector>

#include "CLI11.hpp"
#include <nlohmann/json.hpp>

#include "srnas/builder.hpp"
#include "srnas/cost_model.hpp"
#include "srnas/data.hpp"
#include "srnas/errors.hpp"
#include "srnas/orchestrator.hpp"
#include "srnas/rng.hpp"
#include "srnas/search_space.hpp"
#include "srnas/snapshot.hpp"
#include "srnas/trainer.hpp"
#include "srnas/weight_cache.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void on_signal(int) { srnas::stop_flag().store(true); }

// Relative run dirs live under $SRNAS_RUN_ROOT when it is set.
std::string resolve_run_dir(const std::string& dir) {
  if (!dir.empty() && dir.front() == '/') return dir;
  const char* root = std::getenv("SRNAS_RUN_ROOT");
  if (!root || !*root) return dir;
  return std::string(root) + "/" + dir;
}

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw srnas::IoError("cannot read " + path);
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception& e) {
    throw srnas::ParseError(path + ": " + e.what());
  }
}

srnas::RunConfig load_run_config(const std::string& path, const std::vector<std::string>& sets) {
  json doc = path.empty() ? srnas::default_run_config_doc() : read_json(path);
  for (const std::string& s : sets) srnas::apply_config_override(doc, s);
  srnas::RunConfig cfg = srnas::parse_run_config(doc);
  cfg.run_dir = resolve_run_dir(cfg.run_dir);
  return cfg;
}

int emit_error(const char* type, const std::string& message, int code) {
  std::cerr << json{{"error", json{{"type", type}, {"message", message}}}}.dump() << "\n";
  return code;
}

int run_phases(srnas::RunConfig cfg, int stop_after) {
  srnas::Pipeline pipeline(std::move(cfg));
  std::cerr << "run dir: " << pipeline.paths().root << "\n";
  const int done = pipeline.run(stop_after);
  const bool interrupted = done < stop_after;
  json out{{"run_dir", pipeline.paths().root},
           {"phases_done", done},
           {"interrupted", interrupted},
           {"manifest", pipeline.manifest()}};
  std::cout << out.dump(2) << "\n";
  if (interrupted) {
    std::cerr << "interrupted; progress checkpointed, re-run to resume\n";
    return 130;
  }
  return 0;
}

int cmd_train(srnas::RunConfig cfg, const std::string& genome_path, int scale,
              std::string out_path) {
  const srnas::Genome g = srnas::genome_from_json(read_json(genome_path));
  if (g.space != srnas::SpaceKind::Generator)
    throw srnas::ConfigError("train expects a generator genome");
  if (scale == 0) scale = cfg.scales.back();

  srnas::DatasetSpec dspec = cfg.dataset;
  dspec.scale = scale;
  const srnas::Dataset ds = srnas::Dataset::generate(dspec);
  const srnas::RunPaths paths = srnas::RunPaths::at(cfg.run_dir);

  srnas::WeightCache cache;
  const bool have_cache = fs::exists(paths.cache_dir + "/index.json");
  if (have_cache) cache.load(paths.cache_dir);

  srnas::InitSpec init;
  init.seed = srnas::mix64(cfg.seed, 0x636c695f747261ull);
  if (have_cache) init.cache = &cache;
  srnas::Network net =
      srnas::build_generator(srnas::decode_generator(g), cfg.gen_n, scale, init);

  srnas::DistortionConfig dc = cfg.full_distortion;
  dc.seed = srnas::mix64(cfg.seed, 0x636c695f747232ull);
  dc.should_stop = [] { return srnas::stop_flag().load(); };
  const srnas::EvalReport rep = srnas::train_distortion(net, ds, dc);

  if (out_path.empty())
    out_path = paths.snapshots_dir + "/train_x" + std::to_string(scale) + ".wts";
  const fs::path parent = fs::path(out_path).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  srnas::Snapshot snap = srnas::snapshot_params(net.parameters());
  snap.meta = json{{"kind", "generator"},
                   {"genome", srnas::genome_to_json(g)},
                   {"n", cfg.gen_n},
                   {"scale", scale},
                   {"psnr_db", rep.value}};
  snap.save(out_path);

  std::cout << json{{"snapshot", out_path},
                    {"scale", scale},
                    {"psnr_db", rep.value},
                    {"epochs", static_cast<int>(rep.trace.size())},
                    {"wall_seconds", rep.wall_seconds},
                    {"interrupted", rep.interrupted}}
                   .dump(2)
            << "\n";
  return rep.interrupted ? 130 : 0;
}

int cmd_eval(const srnas::RunConfig& cfg, const std::string& snap_path, int scale_flag) {
  const srnas::Snapshot snap = srnas::Snapshot::load(snap_path);
  if (!snap.meta.contains("genome"))
    throw srnas::ConfigError("snapshot has no genome metadata: " + snap_path);
  const srnas::Genome g = srnas::genome_from_json(snap.meta.at("genome"));
  if (g.space != srnas::SpaceKind::Generator)
    throw srnas::ConfigError("eval expects a generator snapshot");
  const int n = snap.meta.value("n", cfg.gen_n);
  const int scale = scale_flag ? scale_flag : snap.meta.value("scale", cfg.dataset.scale);

  srnas::DatasetSpec dspec = cfg.dataset;
  dspec.scale = scale;
  const srnas::Dataset ds = srnas::Dataset::generate(dspec);

  srnas::InitSpec init;
  init.seed = srnas::mix64(cfg.seed, 0x636c695f6576ull);
  init.snapshot = &snap;
  srnas::Network net = srnas::build_generator(srnas::decode_generator(g), n, scale, init);

  srnas::FrozenExtractor phi(cfg.phi_seed);
  const double psnr_db = srnas::eval_psnr(net, ds);
  const double fd = srnas::eval_feature_distance(net, ds, phi, cfg.phi_depth_full);
  std::cout << json{{"snapshot", snap_path},
                    {"scale", scale},
                    {"val_images", static_cast<int>(ds.val().size())},
                    {"psnr_db", psnr_db},
                    {"feat_dist", fd}}
                   .dump(2)
            << "\n";
  return 0;
}

int cmd_cost(const srnas::RunConfig& cfg, const std::string& genome_path, int scale) {
  const srnas::Genome g = srnas::genome_from_json(read_json(genome_path));
  json out;
  if (g.space == srnas::SpaceKind::Generator) {
    const srnas::CostReport rep =
        srnas::generator_cost(srnas::decode_generator(g), cfg.gen_n,
                              scale ? scale : cfg.dataset.scale, cfg.limit.ref_out_h,
                              cfg.limit.ref_out_w);
    out = srnas::cost_report_to_json(rep);
    const srnas::GateResult gr = srnas::gate(rep, cfg.limit);
    out["space"] = "generator";
    out["gate"] = json{{"pass", gr.pass}, {"max_mult_adds", cfg.limit.max_mult_adds}};
  } else {
    const srnas::CostReport rep = srnas::discriminator_cost(
        srnas::decode_discriminator(g), cfg.disc_n, cfg.disc_m, cfg.disc_patch);
    out = srnas::cost_report_to_json(rep);
    out["space"] = "discriminator";
  }
  std::cout << out.dump(2) << "\n";
  return 0;
}

int cmd_sample(const srnas::RunConfig& cfg, std::string ckpt, int count, std::uint64_t seed) {
  if (ckpt.empty()) ckpt = srnas::RunPaths::at(cfg.run_dir).controller_ckpt;
  const srnas::Snapshot snap = srnas::Snapshot::load(ckpt);
  srnas::Controller ctl = srnas::Controller::from_snapshot(snap);
  const srnas::SpaceKind kind =
      srnas::space_from_name(snap.meta.value("space", std::string("generator")));
  for (int i = 0; i < count; ++i) {
    srnas::Rng rng(srnas::mix64(seed, static_cast<std::uint64_t>(i)));
    const srnas::SampleResult s = ctl.sample(rng);
    json row = srnas::genome_to_json(srnas::Genome{kind, s.decisions});
    row["log_prob"] = s.log_prob;
    std::cout << row.dump() << "\n";
  }
  return 0;
}

int cmd_replay(const std::string& run_dir, const std::string& csv) {
  if (!csv.empty()) {
    srnas::export_log_csv(run_dir, csv);
    std::cerr << "wrote " << csv << "\n";
  }
  const srnas::ReplayResult r = srnas::replay_run(run_dir);
  if (!r.ok) {
    std::cerr << json{{"error", json{{"type", "replay"},
                                     {"message", r.message},
                                     {"step", r.bad_step}}}}
                     .dump()
              << "\n";
    return 1;
  }
  std::cout << "OK, " << r.records << " records verified\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);

  CLI::App app{"tiny perceptual super-resolution architecture search"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> sets;
  auto add_config_opts = [&](CLI::App* sub) {
    sub->add_option("-c,--config", config_path, "run config JSON (defaults when omitted)");
    sub->add_option("--set", sets, "dotted config override, e.g. gen_search.steps=50");
  };

  CLI::App* search_gen = app.add_subcommand("search-gen", "phase 1: generator cell search");
  add_config_opts(search_gen);
  CLI::App* search_disc =
      app.add_subcommand("search-disc", "phases 1-3, ending with the discriminator search");
  add_config_opts(search_disc);
  CLI::App* finetune =
      app.add_subcommand("finetune-gan", "all four phases, ending with the GAN fine-tune");
  add_config_opts(finetune);

  CLI::App* train = app.add_subcommand("train", "full-task distortion training of one genome");
  add_config_opts(train);
  std::string train_genome, train_out;
  int train_scale = 0;
  train->add_option("--genome", train_genome, "genome JSON file")->required();
  train->add_option("--scale", train_scale, "upscaling factor (default: last configured scale)");
  train->add_option("--out", train_out, "output snapshot path");

  CLI::App* eval = app.add_subcommand("eval", "PSNR + feature distance of a snapshot");
  add_config_opts(eval);
  std::string eval_snapshot;
  int eval_scale = 0;
  eval->add_option("--snapshot", eval_snapshot, "generator snapshot (.wts)")->required();
  eval->add_option("--scale", eval_scale, "override the snapshot's scale");

  CLI::App* cost = app.add_subcommand("cost", "mult-adds / params for a genome");
  add_config_opts(cost);
  std::string cost_genome;
  int cost_scale = 0;
  cost->add_option("--genome", cost_genome, "genome JSON file")->required();
  cost->add_option("--scale", cost_scale, "generator output scale (default: proxy scale)");

  CLI::App* sample = app.add_subcommand("sample", "sample genomes from a controller checkpoint");
  add_config_opts(sample);
  std::string sample_ckpt;
  int sample_count = 1;
  std::uint64_t sample_seed = 0;
  sample->add_option("--ckpt", sample_ckpt, "controller checkpoint (default: run dir)");
  sample->add_option("-n,--count", sample_count, "number of genomes");
  sample->add_option("--seed", sample_seed, "sampling seed");

  CLI::App* replay = app.add_subcommand("replay", "verify logged rewards bit-exactly");
  add_config_opts(replay);
  std::string replay_run_dir, replay_csv;
  replay->add_option("--run", replay_run_dir, "run directory (default: config run_dir)");
  replay->add_option("--csv", replay_csv, "also export the log as CSV");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    srnas::RunConfig cfg = load_run_config(config_path, sets);
    if (search_gen->parsed()) return run_phases(std::move(cfg), 1);
    if (search_disc->parsed()) return run_phases(std::move(cfg), 3);
    if (finetune->parsed()) return run_phases(std::move(cfg), 4);
    if (train->parsed()) return cmd_train(std::move(cfg), train_genome, train_scale, train_out);
    if (eval->parsed()) return cmd_eval(cfg, eval_snapshot, eval_scale);
    if (cost->parsed()) return cmd_cost(cfg, cost_genome, cost_scale);
    if (sample->parsed()) return cmd_sample(cfg, sample_ckpt, sample_count, sample_seed);
    if (replay->parsed())
      return cmd_replay(replay_run_dir.empty() ? cfg.run_dir : resolve_run_dir(replay_run_dir),
                        replay_csv);
    return emit_error("config", "no subcommand", 2);
  } catch (const srnas::ConfigError& e) {
    return emit_error("config", e.what(), 2);
  } catch (const srnas::InvalidGenome& e) {
    return emit_error("invalid_genome", e.what(), 2);
  } catch (const srnas::ParseError& e) {
    return emit_error("parse", e.what(), 2);
  } catch (const srnas::DivergedError& e) {
    return emit_error("diverged", e.what(), 3);
  } catch (const srnas::NonFiniteMetric& e) {
    return emit_error("non_finite", e.what(), 3);
  } catch (const srnas::IoError& e) {
    return emit_error("io", e.what(), 4);
  } catch (const std::exception& e) {
    return emit_error("internal", e.what(), 1);
  }
}
