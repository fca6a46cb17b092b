// acdis: phantom generation, training, evaluation, gradient verification
// and report rendering behind one entry point.
//
// Exit codes: 0 ok, 2 config error, 3 data/format error, 4 numerical
// failure, 5 verification failure, 1 anything else.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "acdis/evaluation.hpp"
#include "acdis/training.hpp"
#include "acdis/volume.hpp"
#include "json.hpp"

using namespace acdis;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  json config_snapshot;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string started;
  std::string finished;
  std::vector<std::string> outputs;

  void write(const std::string& out_dir) const {
    json j;
    j["command"] = command;
    j["argv"] = argv;
    j["config"] = config_snapshot;
    j["seed"] = seed;
    j["config_hash"] = config_hash;
    j["started_utc"] = started;
    j["finished_utc"] = finished;
    j["outputs"] = outputs;
    write_text_file((fs::path(out_dir) / "manifest.json").string(),
                    j.dump(2) + "\n");
  }
};

void emit_error_json(const std::string& type, const std::string& message) {
  json j;
  j["error"] = {{"type", type}, {"message", message}};
  std::cerr << j.dump() << "\n";
}

std::string default_data_dir(const std::string& explicit_dir) {
  if (!explicit_dir.empty()) return explicit_dir;
  const char* env = std::getenv("ACDIS_DATA_DIR");
  if (env != nullptr && env[0] != '\0') return env;
  return {};
}

int cmd_generate(const std::string& out_dir, int n_cases, std::int64_t size,
                 int lesions, std::uint64_t seed,
                 const std::vector<std::string>& argv) {
  RunManifest manifest;
  manifest.command = "generate";
  manifest.argv = argv;
  manifest.seed = seed;
  manifest.started = utc_timestamp();
  fs::create_directories(out_dir);
  if (n_cases == 0) {
    std::cerr << "warning: generating an empty dataset\n";
  }
  std::vector<std::string> ids;
  for (int i = 0; i < n_cases; ++i) {
    PhantomSpec spec;
    spec.size = size;
    spec.num_lesions = lesions;
    spec.seed = seed + static_cast<std::uint64_t>(i);
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d", i);
    save_volume(generate_phantom(spec), (fs::path(out_dir) / name).string());
    ids.push_back(name);
    manifest.outputs.push_back(name);
  }
  write_dataset_index(out_dir, ids,
                      "synthetic phantoms, seed " + std::to_string(seed));
  manifest.config_snapshot = {{"cases", n_cases},
                              {"size", size},
                              {"lesions", lesions},
                              {"seed", seed}};
  manifest.config_hash =
      std::to_string(fnv1a64(manifest.config_snapshot.dump()));
  manifest.outputs.push_back("dataset.json");
  manifest.finished = utc_timestamp();
  manifest.write(out_dir);
  std::printf("generated %d case(s) under %s\n", n_cases, out_dir.c_str());
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& out_dir,
              const std::string& data_override, const std::uint64_t* seed,
              const std::vector<std::string>& argv) {
  train::TrainConfig cfg =
      train::TrainConfig::from_json_text(read_text_file(config_path));
  if (seed != nullptr) cfg.seed = *seed;
  std::string data_dir = default_data_dir(
      data_override.empty() ? cfg.data_dir : data_override);
  if (data_dir.empty()) {
    throw ConfigError("train: no data directory (config data_dir, --data, "
                      "or ACDIS_DATA_DIR)");
  }
  cfg.data_dir = data_dir;
  cfg.validate(true);

  RunManifest manifest;
  manifest.command = "train";
  manifest.argv = argv;
  manifest.seed = cfg.seed;
  manifest.config_snapshot = json::parse(cfg.to_json_text());
  manifest.config_hash = std::to_string(cfg.config_hash());
  manifest.started = utc_timestamp();

  Dataset ds = load_dataset(data_dir);
  train::Trainer trainer(cfg);
  trainer.train(ds, out_dir);

  manifest.finished = utc_timestamp();
  manifest.outputs = {"train_log.jsonl", "final.ckpt", "train_summary.json"};
  manifest.write(out_dir);
  std::printf("trained %d epoch(s); final checkpoint %s\n",
              trainer.epochs_completed(),
              (fs::path(out_dir) / "final.ckpt").string().c_str());
  return 0;
}

int cmd_evaluate(const std::string& ckpt_path, const std::string& data_dir_in,
                 const std::string& out_dir, int workers,
                 const std::vector<std::string>& argv) {
  const std::string data_dir = default_data_dir(data_dir_in);
  if (data_dir.empty()) {
    throw ConfigError("evaluate: no data directory (--data or "
                      "ACDIS_DATA_DIR)");
  }
  if (!fs::exists(ckpt_path)) {
    throw DataError("evaluate: checkpoint not found: " + ckpt_path);
  }
  RunManifest manifest;
  manifest.command = "evaluate";
  manifest.argv = argv;
  manifest.started = utc_timestamp();

  train::Trainer trainer = train::Trainer::load_checkpoint(ckpt_path);
  manifest.seed = trainer.config().seed;
  manifest.config_snapshot = json::parse(trainer.config().to_json_text());
  manifest.config_hash = std::to_string(trainer.config().config_hash());

  Dataset ds = load_dataset(data_dir);
  eval::EvalReport rep =
      eval::evaluate_all_masks(trainer.model(), ds, workers);
  eval::render_report(rep, out_dir,
                      "checkpoint " + ckpt_path + ", data " + data_dir);
  manifest.finished = utc_timestamp();
  manifest.outputs = {"dice_table.csv", "dice_table.md", "report.json",
                      "dice_wt.svg",    "dice_tc.svg",   "dice_et.svg"};
  manifest.write(out_dir);
  std::printf("evaluated %zu case(s) over 15 masks; table at %s\n",
              ds.size(),
              (fs::path(out_dir) / "dice_table.csv").string().c_str());
  for (int r = 0; r < 3; ++r) {
    std::printf("  %s avg %.4f\n", eval::kRegionNames[static_cast<size_t>(r)],
                rep.table.avg[static_cast<size_t>(r)]);
  }
  return 0;
}

int cmd_gradcheck(const std::string& out_dir,
                  const std::vector<std::string>& argv) {
  RunManifest manifest;
  manifest.command = "gradcheck";
  manifest.argv = argv;
  manifest.started = utc_timestamp();

  const auto results = train::gradient_check_suite();
  bool all_pass = true;
  json rows = json::array();
  for (const auto& r : results) {
    std::printf("[%s] %-12s max rel err %.3e (tol %.1e)%s\n",
                r.pass ? "PASS" : "FAIL", r.name.c_str(), r.max_rel_err,
                r.tolerance, r.teacher_grad_zero ? "" : " TEACHER GRAD != 0");
    rows.push_back({{"name", r.name},
                    {"max_rel_err", r.max_rel_err},
                    {"tolerance", r.tolerance},
                    {"pass", r.pass},
                    {"teacher_grad_zero", r.teacher_grad_zero}});
    all_pass = all_pass && r.pass;
  }
  if (!out_dir.empty()) {
    fs::create_directories(out_dir);
    write_text_file((fs::path(out_dir) / "gradcheck.json").string(),
                    rows.dump(2) + "\n");
    manifest.finished = utc_timestamp();
    manifest.outputs = {"gradcheck.json"};
    manifest.write(out_dir);
  }
  if (!all_pass) {
    throw VerificationError("gradient check failed");
  }
  std::printf("gradient suite passed (%zu losses)\n", results.size());
  return 0;
}

int cmd_report(const std::string& report_json, const std::string& out_dir,
               const std::vector<std::string>& argv) {
  RunManifest manifest;
  manifest.command = "report";
  manifest.argv = argv;
  manifest.started = utc_timestamp();
  eval::EvalReport rep = eval::report_from_json_file(report_json);
  eval::render_report(rep, out_dir, "rendered from " + report_json);
  manifest.finished = utc_timestamp();
  manifest.outputs = {"dice_table.csv", "dice_table.md", "report.json",
                      "dice_wt.svg",    "dice_tc.svg",   "dice_et.svg"};
  manifest.write(out_dir);
  std::printf("report rendered under %s\n", out_dir.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ACDIS: anatomical consistency distillation and "
               "inconsistency synthesis for missing-modality segmentation"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand
  std::vector<std::string> raw_args(argv, argv + argc);

  int workers = 1;
  bool deterministic = false;
  std::uint64_t seed_override = 0;
  app.add_option("--workers", workers, "max data/eval parallelism");
  app.add_flag("--deterministic", deterministic,
               "force single-worker execution");
  auto* seed_opt =
      app.add_option("--seed", seed_override, "override the config seed");

  // generate
  auto* gen = app.add_subcommand("generate", "generate a phantom dataset");
  std::string gen_out = "dataset";
  int gen_cases = 3;
  std::int64_t gen_size = 16;
  int gen_lesions = 2;
  std::uint64_t gen_seed = 1;
  gen->add_option("--out", gen_out, "output dataset directory");
  gen->add_option("--cases", gen_cases, "number of cases")
      ->check(CLI::NonNegativeNumber);
  gen->add_option("--size", gen_size, "cubic volume edge length");
  gen->add_option("--lesions", gen_lesions, "lesions per case");
  gen->add_option("--seed", gen_seed, "base seed");

  // train
  auto* tr = app.add_subcommand("train", "train from a config file");
  std::string tr_config, tr_out = "run", tr_data;
  tr->add_option("--config", tr_config, "config JSON path")->required();
  tr->add_option("--out", tr_out, "run output directory");
  tr->add_option("--data", tr_data, "dataset directory override");

  // evaluate
  auto* ev = app.add_subcommand("evaluate",
                                "15-mask evaluation of a checkpoint");
  std::string ev_ckpt, ev_data, ev_out = "eval";
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint path")->required();
  ev->add_option("--data", ev_data, "dataset directory");
  ev->add_option("--out", ev_out, "output directory");

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck",
                                "finite-difference gradient verification");
  std::string gc_out;
  gc->add_option("--out", gc_out, "optional output directory");

  // report
  auto* rp = app.add_subcommand("report", "re-render evaluation artifacts");
  std::string rp_json, rp_out = "report";
  rp->add_option("--report", rp_json, "report.json path")->required();
  rp->add_option("--out", rp_out, "output directory");

  CLI11_PARSE(app, argc, argv);
  if (deterministic) workers = 1;

  try {
    if (gen->parsed()) {
      return cmd_generate(gen_out, gen_cases, gen_size, gen_lesions, gen_seed,
                          raw_args);
    }
    if (tr->parsed()) {
      return cmd_train(tr_config, tr_out, tr_data,
                       seed_opt->count() > 0 ? &seed_override : nullptr,
                       raw_args);
    }
    if (ev->parsed()) {
      return cmd_evaluate(ev_ckpt, ev_data, ev_out, workers, raw_args);
    }
    if (gc->parsed()) return cmd_gradcheck(gc_out, raw_args);
    if (rp->parsed()) return cmd_report(rp_json, rp_out, raw_args);
  } catch (const ConfigError& e) {
    emit_error_json("config", e.what());
    return 2;
  } catch (const FormatError& e) {
    emit_error_json("format", e.what());
    return 3;
  } catch (const DataError& e) {
    emit_error_json("data", e.what());
    return 3;
  } catch (const NumericalError& e) {
    emit_error_json("numerical", e.what());
    return 4;
  } catch (const VerificationError& e) {
    emit_error_json("verification", e.what());
    return 5;
  } catch (const std::exception& e) {
    emit_error_json("internal", e.what());
    return 1;
  }
  return 0;
}
