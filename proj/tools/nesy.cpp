// Experiment driver: two-phase NeSy pretraining runs over the synthetic
// digit/letter corpus. `--config` loads a key = value section file; any
// flag given on the command line overrides the file. NESY_OUT overrides
// the output directory (the only environment hook).

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>

#include "nesy/experiment.hpp"

using namespace nesy;

namespace {

struct Flags {
  std::string config, task, method, encoder, semantics;
  std::string data, out, archive;
  int train_digits = 0, test_digits = 0, k = 0, epochs = 0, batch = 0;
  int ff_hidden = 0, ilr_steps = 0;
  double ilr_target = 0.0, ilr_satisfaction = 0.0;
  long train_size = 0, test_size = 0;
  uint64_t pairing_seed = 0;
  double lr = 0.0, decay = 0.0;
  bool pretrain = false;
  std::vector<int> seeds;
};

ImageStore load_export_store(const std::string& data_dir, const std::string& source,
                             const std::string& split) {
  const DatasetPaths paths = dataset_paths(data_dir);
  const bool digits = source == "digits";
  if (!digits && source != "letters")
    throw ConfigError("source must be digits or letters, got '" + source + "'");
  const bool train = split == "train";
  if (!train && split != "test")
    throw ConfigError("split must be train or test, got '" + split + "'");
  const std::string images = digits ? (train ? paths.digit_train_images : paths.digit_test_images)
                                    : (train ? paths.letter_train_images : paths.letter_test_images);
  const std::string labels = digits ? (train ? paths.digit_train_labels : paths.digit_test_labels)
                                    : (train ? paths.letter_train_labels : paths.letter_test_labels);
  if (!std::filesystem::exists(images) || !std::filesystem::exists(labels))
    throw ConfigError("missing data files under " + data_dir + " (run gen-data first)");
  return load_image_store(images, labels, digits ? Source::mnist_digits : Source::emnist_letters);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"two-phase neuro-symbolic pretraining experiments"};
  app.require_subcommand(1);

  Flags f;
  std::map<std::string, CLI::Option*> opt;
  opt["config"] = app.add_option("-c,--config", f.config, "config file; flags override");
  opt["task"] = app.add_option("--task", f.task, "sum | multidigit_sum | multiop | parity");
  opt["train_digits"] = app.add_option("--train-digits", f.train_digits, "train sequence length");
  opt["test_digits"] = app.add_option("--test-digits", f.test_digits, "test sequence length");
  opt["train_size"] = app.add_option("--train-size", f.train_size, "train examples");
  opt["test_size"] = app.add_option("--test-size", f.test_size, "test examples");
  opt["pairing_seed"] = app.add_option("--pairing-seed", f.pairing_seed, "example composition seed");
  opt["method"] = app.add_option("--method", f.method, "neural | prob | ilr | dsl");
  opt["encoder"] = app.add_option("--encoder", f.encoder, "mlp | conv");
  opt["k"] = app.add_option("--k", f.k, "dsl symbol bound NB(k)");
  opt["ff_hidden"] = app.add_option("--ff-hidden", f.ff_hidden, "neural head hidden width");
  opt["semantics"] = app.add_option("--semantics", f.semantics, "goedel | product | lukasiewicz");
  opt["ilr_steps"] = app.add_option("--ilr-steps", f.ilr_steps, "stacked refinement layers");
  opt["ilr_target"] = app.add_option("--ilr-target", f.ilr_target, "refinement target truth");
  opt["ilr_satisfaction"] = app.add_option("--ilr-satisfaction", f.ilr_satisfaction,
                                           "weight of the smooth satisfaction loss term");
  opt["decay"] = app.add_option("--decay", f.decay, "dsl rule-table decay per epoch");
  opt["pretrain"] = app.add_flag("--pretrain,!--no-pretrain", f.pretrain,
                                 "start from a frozen f_e archive");
  opt["epochs"] = app.add_option("--epochs", f.epochs, "training epochs");
  opt["lr"] = app.add_option("--lr", f.lr, "Adam learning rate");
  opt["batch"] = app.add_option("--batch", f.batch, "batch size");
  opt["seeds"] = app.add_option("--seeds", f.seeds, "seed list")->delimiter(',');
  opt["data"] = app.add_option("--data", f.data, "dataset directory");
  opt["out"] = app.add_option("--out", f.out, "output directory");
  opt["archive"] = app.add_option("--archive", f.archive,
                                  "pretrained weights ({seed} expands per job)");

  CLI::App* cmd_gen = app.add_subcommand("gen-data", "write the synthetic digit/letter corpus");
  uint64_t gen_seed = 424242;
  cmd_gen->add_option("--gen-seed", gen_seed, "corpus generation seed");
  cmd_gen->fallthrough();

  CLI::App* cmd_pre = app.add_subcommand("pretrain", "phase 1: neural model on the task");
  cmd_pre->fallthrough();
  CLI::App* cmd_train = app.add_subcommand("train", "phase 2: NeSy engine, optional transfer");
  cmd_train->fallthrough();
  CLI::App* cmd_sweep = app.add_subcommand("sweep", "all seeds as parallel jobs");
  cmd_sweep->fallthrough();

  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate saved weights on the test split");
  std::string weights, rules;
  cmd_eval->add_option("--weights", weights, "weights.nsf path")->required();
  cmd_eval->add_option("--rules", rules, "rules.txt path (dsl)");
  cmd_eval->fallthrough();

  CLI::App* cmd_export = app.add_subcommand("export-embeddings", "dump f_e embeddings to CSV");
  std::string emb_weights, emb_out = "embeddings.csv", source = "digits", split = "test";
  long limit = 0;
  cmd_export->add_option("--weights", emb_weights, "weights.nsf path")->required();
  cmd_export->add_option("--out-file", emb_out, "CSV destination");
  cmd_export->add_option("--source", source, "digits | letters");
  cmd_export->add_option("--split", split, "train | test");
  cmd_export->add_option("--limit", limit, "cap on exported rows (0 = all)");
  cmd_export->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    ExperimentConfig cfg;
    if (opt["config"]->count()) cfg = load_config(f.config);
    if (const char* env = std::getenv("NESY_OUT")) cfg.out_dir = env;
    if (opt["task"]->count()) cfg.task.kind = task_kind_of(f.task);
    if (opt["train_digits"]->count()) cfg.task.train_digits = f.train_digits;
    if (opt["test_digits"]->count()) cfg.task.test_digits = f.test_digits;
    if (opt["train_size"]->count()) cfg.task.train_size = f.train_size;
    if (opt["test_size"]->count()) cfg.task.test_size = f.test_size;
    if (opt["pairing_seed"]->count()) cfg.task.pairing_seed = f.pairing_seed;
    if (opt["method"]->count()) cfg.method = method_of(f.method);
    if (opt["encoder"]->count()) cfg.encoder = encoder_kind_of(f.encoder);
    if (opt["k"]->count()) cfg.k = f.k;
    if (opt["ff_hidden"]->count()) cfg.ff_hidden = f.ff_hidden;
    if (opt["semantics"]->count()) cfg.semantics = semantics_of(f.semantics);
    if (opt["ilr_steps"]->count()) cfg.ilr_steps = f.ilr_steps;
    if (opt["ilr_target"]->count()) cfg.ilr_target = f.ilr_target;
    if (opt["ilr_satisfaction"]->count()) cfg.ilr_satisfaction = f.ilr_satisfaction;
    if (opt["decay"]->count()) cfg.decay = f.decay;
    if (opt["pretrain"]->count()) cfg.pretrain = f.pretrain;
    if (opt["epochs"]->count()) cfg.epochs = f.epochs;
    if (opt["lr"]->count()) cfg.lr = f.lr;
    if (opt["batch"]->count()) cfg.batch = f.batch;
    if (opt["seeds"]->count()) cfg.seeds = f.seeds;
    if (opt["data"]->count()) cfg.data_dir = f.data;
    if (opt["out"]->count()) cfg.out_dir = f.out;
    if (opt["archive"]->count()) cfg.archive = f.archive;

    if (cmd_gen->parsed()) {
      const bool wrote = ensure_dataset(cfg.data_dir, gen_seed);
      std::printf("%s %s\n", wrote ? "wrote corpus into" : "corpus already present in",
                  cfg.data_dir.c_str());
      return 0;
    }
    if (cmd_pre->parsed()) {
      if (cfg.method != Method::neural)
        throw ConfigError("pretrain is the neural phase; leave method=neural");
      run_experiment(cfg, false, true);
      return 0;
    }
    if (cmd_train->parsed()) {
      if (cfg.method == Method::neural)
        throw ConfigError("train runs a NeSy engine; set method to prob, ilr, or dsl");
      run_experiment(cfg, false, true);
      return 0;
    }
    if (cmd_sweep->parsed()) {
      run_experiment(cfg, true, true);
      return 0;
    }
    if (cmd_eval->parsed()) {
      validate_config(cfg);
      const LoadedTask task = load_task(cfg);
      const EvalResult ev = evaluate_saved(cfg, task, weights, rules);
      if (ev.fine_acc >= 0.0)
        std::printf("task_acc %.6f fine_acc %.6f\n", ev.task_acc, ev.fine_acc);
      else
        std::printf("task_acc %.6f\n", ev.task_acc);
      return 0;
    }
    if (cmd_export->parsed()) {
      const ImageStore store = load_export_store(cfg.data_dir, source, split);
      export_embeddings(load_archive(emb_weights), cfg.encoder, store, emb_out, limit);
      std::printf("wrote %s\n", emb_out.c_str());
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
