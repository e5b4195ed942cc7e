#ifndef NESY_EXPERIMENT_HPP
#define NESY_EXPERIMENT_HPP

#include <string>
#include <vector>

#include "nesy/dsl.hpp"
#include "nesy/ilr.hpp"
#include "nesy/neural.hpp"
#include "nesy/prob.hpp"

namespace nesy {

// Experiment harness: config files, the two-phase pipeline, per-epoch CSV
// traces, multi-seed sweeps, and embedding export. A run directory holds
// everything needed to reproduce the run (config.echo is itself a loadable
// config file).

enum class Method { neural, prob, ilr, dsl };

Method method_of(const std::string& name);
std::string method_name(Method m);

struct ExperimentConfig {
  TaskSpec task;
  Method method = Method::neural;
  EncoderKind encoder = EncoderKind::mlp;
  bool pretrain = false;  // NeSy methods: start from a frozen f_e archive
  int k = 10;             // dsl symbol bound NB(k)
  int epochs = 20;
  double lr = 1e-3;
  int batch = 64;
  int ff_hidden = 256;
  Semantics semantics = Semantics::goedel;
  int ilr_steps = 4;
  double ilr_target = 1.0;
  double ilr_satisfaction = 0.0;  // weight of the smooth satisfaction term
  double decay = 0.99;
  std::vector<int> seeds = {0};
  std::string data_dir = "data";
  std::string out_dir = "runs/exp";
  std::string archive;  // source weights for pretrain=true
};

/// Key = value sections (# comments). Unknown keys are a config error.
ExperimentConfig parse_config(std::istream& in);
ExperimentConfig load_config(const std::string& path);
std::string config_text(const ExperimentConfig& cfg);

/// Method/task compatibility, symbol-bound floor, pretrain archive rules.
void validate_config(const ExperimentConfig& cfg);

/// Bumps the whole seed list (mechanism for running one seed per job).
ExperimentConfig with_seed(ExperimentConfig cfg, int seed);

struct RunSummary {
  int seed = 0;
  int epochs = 0;
  double best_task_acc = 0.0;
  double final_task_acc = 0.0;
  double final_fine_acc = -1.0;
  int convergence_epoch = 0;  // first epoch within 0.5 points of best
  double train_seconds = 0.0;
  double eval_seconds = 0.0;
  double data_seconds = 0.0;
};

struct RunRecord {
  std::vector<MetricRow> rows;
  RunSummary summary;
};

/// Best/final/convergence over the split="test" rows; timing totals over
/// both splits.
RunSummary summarize(const std::vector<MetricRow>& rows, int seed);

constexpr double kConvergenceBand = 0.005;  // 0.5 accuracy points

/// Composed task plus the image stores the example indices point into.
/// Loading is timed separately so run timings stay training-only.
struct LoadedTask {
  ImageStore digit_train, digit_test;
  ImageStore op_train, op_test;  // multiop only
  TaskData data;
  double load_seconds = 0.0;

  PixelSets pixels() const;
};

/// Missing files under the data dir are a config error before any work.
LoadedTask load_task(const ExperimentConfig& cfg);

/// Phase 1: train the fully neural model on downstream labels, archive
/// every weight (f_e + heads) into <dir>/weights.nsf. epochs=0 still
/// writes the initial weights and one chance-level evaluation row.
RunRecord run_pretrain_job(const ExperimentConfig& cfg, const LoadedTask& task, int seed,
                           const std::string& dir);

/// Phase 2: build the NeSy model, optionally inject + freeze f_e from
/// cfg.archive (embeddings are then precomputed once), train cfg.epochs
/// epochs with a test evaluation after each, write weights/rules/CSV.
RunRecord run_nesy_job(const ExperimentConfig& cfg, const LoadedTask& task, int seed,
                       const std::string& dir);

/// Dispatch on cfg.method; writes run.csv + config.echo into `dir`.
RunRecord run_job(const ExperimentConfig& cfg, const LoadedTask& task, int seed,
                  const std::string& dir);

/// All seeds (parallel jobs when asked), one seed<N>/ directory each, plus
/// out_dir/summary.csv with per-seed rows and mean/std aggregates.
std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, bool parallel = false,
                                      bool verbose = false);

/// Rebuilds the model named by cfg, loads every weight from the archive
/// (and the rule table for dsl), evaluates on the composed test split.
EvalResult evaluate_saved(const ExperimentConfig& cfg, const LoadedTask& task,
                          const std::string& weights_path, const std::string& rules_path = "");

/// One row per image: 84 embedding columns then the ground-truth label.
void export_embeddings(const WeightArchive& archive, EncoderKind kind, const ImageStore& store,
                       const std::string& path, long limit = 0);

void write_run_csv(const std::string& path, const std::vector<MetricRow>& rows);
std::vector<MetricRow> read_run_csv(const std::string& path);
void write_summary_csv(const std::string& path, const std::vector<RunSummary>& rows);

}  // namespace nesy

#endif  // NESY_EXPERIMENT_HPP
