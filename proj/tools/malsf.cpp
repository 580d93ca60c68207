// Command-line surface: dataset generation, training, evaluation, model
// inspection, and gradient verification.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "malsf/dataset_io.hpp"
#include "malsf/gradcheck_suite.hpp"
#include "malsf/synthdata.hpp"
#include "malsf/trainer.hpp"

namespace {

using namespace malsf;

void apply_ablations(TrainConfig& cfg, const std::vector<std::string>& flags) {
  auto& abl = cfg.model.ablation;
  for (const auto& f : flags) {
    if (f == "no-local") abl.local = LocalSemantics::none;
    else if (f == "labels-only") abl.local = LocalSemantics::labels_only;
    else if (f == "masks-only") abl.local = LocalSemantics::masks_only;
    else if (f == "pairs") abl.local = LocalSemantics::pairs;
    else if (f == "no-gate") abl.gate_weights = false;
    else if (f == "no-msf") abl.shallow_fusion = false;
    else if (f == "no-mdf") abl.deep_fusion = false;
    else if (f == "image-query-only") abl.streams = StreamMode::image_query_only;
    else if (f == "text-query-only") abl.streams = StreamMode::text_query_only;
    else if (f == "bidirectional") abl.streams = StreamMode::bidirectional;
    else throw CLI::ValidationError("--ablate", "unknown ablation flag: " + f);
  }
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  DataGenConfig cfg = config_path.empty() ? DataGenConfig::defaults()
                                          : DataGenConfig::from_json(read_file(config_path));
  const DatasetManifest manifest = generate_dataset(cfg, out_dir);
  int64_t total = 0;
  for (const auto& [split, counts] : manifest.split_counts) {
    int64_t n = 0;
    for (const auto& [kind, c] : counts) n += c;
    std::cout << split << ": " << n << " records\n";
    total += n;
  }
  std::cout << "wrote " << total << " records to " << out_dir << " (config hash "
            << manifest.config_hash << ")\n";
  return 0;
}

int cmd_train(const std::string& config_path, const std::string& data_dir,
              const std::string& out_dir, const std::vector<std::string>& ablate,
              int threads_override, int epochs_override) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{}
                                        : TrainConfig::from_json(read_file(config_path));
  apply_ablations(cfg, ablate);
  if (threads_override > 0) cfg.threads = threads_override;
  if (epochs_override > 0) cfg.total_epochs = epochs_override;
  if (const char* env_seed = std::getenv("MALSF_SEED")) {
    cfg.seed = std::strtoull(env_seed, nullptr, 10);
  }
  const TrainResult res = train(cfg, data_dir, out_dir);
  std::cout << "final checkpoint: " << res.final_checkpoint << "\n";
  std::cout << "best checkpoint:  " << res.best_checkpoint;
  if (res.manifest.best_val_acc) {
    std::cout << " (val acc " << *res.manifest.best_val_acc << " at epoch "
              << res.manifest.best_epoch << ")";
  }
  std::cout << "\nmanifest:         " << res.manifest_path << "\n";
  return 0;
}

int cmd_eval(const std::string& ckpt, const std::string& data_dir, const std::string& split,
             const std::string& task, bool table, const std::string& out_path, int threads) {
  MalsfModel model = load_model(ckpt);
  const auto samples = load_split(data_dir, split, Vocab::synthetic(), model.config().l_max);
  const MetricReport report = evaluate(model, samples, task_mode_from(task), threads);
  const std::string text = report.to_json();
  if (table) {
    std::cout << report.to_table() << "\n";
  } else {
    std::cout << text << "\n";
  }
  if (!out_path.empty()) write_file_atomic(out_path, text + "\n");
  return 0;
}

int cmd_inspect(const std::string& ckpt, const std::string& data_dir, const std::string& id,
                const std::string& out_dir) {
  MalsfModel model = load_model(ckpt);
  const Vocab& vocab = Vocab::synthetic();
  for (const char* split : {"test", "val", "train"}) {
    std::vector<Sample> samples;
    try {
      samples = load_split(data_dir, split, vocab, model.config().l_max);
    } catch (const std::exception&) {
      continue;
    }
    for (const auto& s : samples) {
      if (s.id != id) continue;
      const InspectResult res = inspect(model, s, out_dir);
      std::cout << "wrote " << res.json_path;
      if (!res.pgm_path.empty()) std::cout << " and " << res.pgm_path;
      std::cout << "\n";
      return 0;
    }
  }
  std::cerr << "sample id not found in any split: " << id << "\n";
  return 1;
}

int cmd_gradcheck(const std::string& module) {
  const auto modules = module.empty() ? gradcheck_module_names()
                                      : std::vector<std::string>{module};
  bool ok = true;
  for (const auto& m : modules) {
    std::cout << "[" << m << "]\n";
    for (const auto& c : run_gradcheck_module(m)) {
      const bool pass = c.result.max_rel_err < 1e-4;
      ok = ok && pass;
      std::printf("  %-40s max_rel_err=%.3e %s\n", c.name.c_str(), c.result.max_rel_err,
                  pass ? "ok" : "FAIL");
    }
  }
  return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale manipulated-media detector"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, ckpt, sample_id, module;
  std::string split = "test", task = "dgm4", report_out;
  std::vector<std::string> ablate;
  bool table = false;
  int threads = 0, epochs = 0;

  auto* gen = app.add_subcommand("gen-data", "generate a synthetic dataset");
  gen->add_option("--config", config_path, "generation config JSON");
  gen->add_option("--out", out_dir, "output directory")->required();

  auto* tr = app.add_subcommand("train", "train a model");
  tr->add_option("--config", config_path, "train config JSON");
  tr->add_option("--data", data_dir, "dataset directory")->required();
  tr->add_option("--out", out_dir, "output directory")->required();
  tr->add_option("--ablate", ablate,
                 "ablation flags: no-local labels-only masks-only no-gate no-msf no-mdf "
                 "image-query-only text-query-only");
  tr->add_option("--threads", threads, "worker threads (0 = auto)");
  tr->add_option("--epochs", epochs, "override total epochs");

  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ev->add_option("--data", data_dir, "dataset directory")->required();
  ev->add_option("--split", split, "dataset split (default test)");
  ev->add_option("--task", task, "dgm4 or mfnd");
  ev->add_flag("--table", table, "print the grouped table layout");
  ev->add_option("--out", report_out, "also write the JSON report here");
  ev->add_option("--threads", threads, "worker threads (0 = auto)");

  auto* ins = app.add_subcommand("inspect", "dump gates and attention for one sample");
  ins->add_option("--ckpt", ckpt, "checkpoint path")->required();
  ins->add_option("--data", data_dir, "dataset directory")->required();
  ins->add_option("--sample", sample_id, "sample id")->required();
  ins->add_option("--out", out_dir, "output directory")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
  gc->add_option("--module", module, "tensor|losses|encoders|verification|fusion|full");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_dir);
    if (tr->parsed()) return cmd_train(config_path, data_dir, out_dir, ablate, threads, epochs);
    if (ev->parsed()) return cmd_eval(ckpt, data_dir, split, task, table, report_out, threads);
    if (ins->parsed()) return cmd_inspect(ckpt, data_dir, sample_id, out_dir);
    if (gc->parsed()) return cmd_gradcheck(module);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
