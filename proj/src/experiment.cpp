#include "nesy/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <sstream>
#include <thread>

namespace fs = std::filesystem;

namespace nesy {

namespace {

double now_seconds() {
  using clock = std::chrono::steady_clock;
  return std::chrono::duration<double>(clock::now().time_since_epoch()).count();
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "yes" || value == "1") return true;
  if (value == "false" || value == "no" || value == "0") return false;
  throw ConfigError("config: " + key + " wants a boolean, got '" + value + "'");
}

long parse_long(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    long v = std::stol(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " wants an integer, got '" + value + "'");
  }
}

double parse_double(const std::string& key, const std::string& value) {
  try {
    size_t used = 0;
    double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config: " + key + " wants a number, got '" + value + "'");
  }
}

std::vector<int> parse_seed_list(const std::string& key, std::string value) {
  for (char& c : value)
    if (c == ',') c = ' ';
  std::istringstream in(value);
  std::vector<int> seeds;
  std::string tok;
  while (in >> tok) seeds.push_back(static_cast<int>(parse_long(key, tok)));
  if (seeds.empty()) throw ConfigError("config: " + key + " wants at least one seed");
  return seeds;
}

void apply_key(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
  if (key == "task.kind") cfg.task.kind = task_kind_of(value);
  else if (key == "task.train_digits") cfg.task.train_digits = static_cast<int>(parse_long(key, value));
  else if (key == "task.test_digits") cfg.task.test_digits = static_cast<int>(parse_long(key, value));
  else if (key == "task.train_size") cfg.task.train_size = parse_long(key, value);
  else if (key == "task.test_size") cfg.task.test_size = parse_long(key, value);
  else if (key == "task.pairing_seed") cfg.task.pairing_seed = static_cast<uint64_t>(parse_long(key, value));
  else if (key == "model.method") cfg.method = method_of(value);
  else if (key == "model.encoder") cfg.encoder = encoder_kind_of(value);
  else if (key == "model.k") cfg.k = static_cast<int>(parse_long(key, value));
  else if (key == "model.ff_hidden") cfg.ff_hidden = static_cast<int>(parse_long(key, value));
  else if (key == "model.semantics") cfg.semantics = semantics_of(value);
  else if (key == "model.ilr_steps") cfg.ilr_steps = static_cast<int>(parse_long(key, value));
  else if (key == "model.ilr_target") cfg.ilr_target = parse_double(key, value);
  else if (key == "model.ilr_satisfaction") cfg.ilr_satisfaction = parse_double(key, value);
  else if (key == "model.decay") cfg.decay = parse_double(key, value);
  else if (key == "train.pretrain") cfg.pretrain = parse_bool(key, value);
  else if (key == "train.epochs") cfg.epochs = static_cast<int>(parse_long(key, value));
  else if (key == "train.lr") cfg.lr = parse_double(key, value);
  else if (key == "train.batch") cfg.batch = static_cast<int>(parse_long(key, value));
  else if (key == "train.seeds") cfg.seeds = parse_seed_list(key, value);
  else if (key == "paths.data") cfg.data_dir = value;
  else if (key == "paths.out") cfg.out_dir = value;
  else if (key == "paths.archive") cfg.archive = value;
  else throw ConfigError("config: unknown key '" + key + "'");
}

std::string seed_list_text(const std::vector<int>& seeds) {
  std::ostringstream os;
  for (size_t i = 0; i < seeds.size(); ++i) os << (i ? "," : "") << seeds[i];
  return os.str();
}

/// `{seed}` in an archive path selects the matching pretrain job's output.
std::string substitute_seed(std::string path, int seed) {
  const std::string tag = "{seed}";
  size_t at = path.find(tag);
  if (at != std::string::npos) path.replace(at, tag.size(), std::to_string(seed));
  return path;
}

std::string num_str(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

std::string csv_acc(double v) { return v < 0.0 ? "" : num_str(v); }

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

void write_config_echo(const ExperimentConfig& cfg, int seed, const std::string& dir,
                       double load_seconds) {
  std::ostringstream os;
  os << "# " << method_name(cfg.method) << " on " << task_kind_name(cfg.task.kind) << ", seed "
     << seed << "\n";
  os << "# convergence epoch: first epoch whose test task accuracy is within 0.5 points of the "
        "run's final best\n";
  os << "# data load: " << num_str(load_seconds) << " s (excluded from epoch timings)\n";
  os << config_text(with_seed(cfg, seed));
  write_text_file(dir + "/config.echo", os.str());
}

MetricRow make_row(int epoch, const char* split, double task_acc, double fine_acc,
                   double seconds) {
  MetricRow row;
  row.epoch = epoch;
  row.split = split;
  row.task_acc = task_acc;
  row.fine_acc = fine_acc;
  row.seconds = seconds;
  return row;
}

/// A fresh gradient-trained readout on frozen embeddings starts near the
/// uniform symbol distribution. At Xavier scale the cached activations
/// (row norms in the tens) leave the initial softmax nearly committed to
/// a random labeling of the clusters, which reliably lands in the
/// shifted-digit local minimum; near zero logits the aggregate likelihood
/// gradient votes each cluster toward its true value. Keeps a trace of
/// noise so argmax tie-breaks stay random rather than index-ordered.
void soften_head(SymbolHead& head) {
  head.w.value *= 1e-2;
  head.b.value.setZero();
}

/// Owns the cached embeddings (if any) that the FeatureSources point into,
/// so it must stay put for the lifetime of the sources.
struct SplitSources {
  Matrix digit_train, digit_test, op_train, op_test;
  FeatureSource train, test;
};

void build_sources(SplitSources& s, const LoadedTask& task, Encoder* frozen) {
  const bool ops = task.op_train.count() > 0;
  if (frozen) {
    s.digit_train = batch_encode(*frozen, task.digit_train.images);
    s.digit_test = batch_encode(*frozen, task.digit_test.images);
    s.train.digit_cache = &s.digit_train;
    s.test.digit_cache = &s.digit_test;
    if (ops) {
      s.op_train = batch_encode(*frozen, task.op_train.images);
      s.op_test = batch_encode(*frozen, task.op_test.images);
      s.train.op_cache = &s.op_train;
      s.test.op_cache = &s.op_test;
    }
  } else {
    s.train.digit_images = &task.digit_train.images;
    s.test.digit_images = &task.digit_test.images;
    if (ops) {
      s.train.op_images = &task.op_train.images;
      s.test.op_images = &task.op_test.images;
    }
  }
}

/// Per-image symbol accuracy of the digit head over the test store; the
/// fine-grained metric for non-sequence tasks. Only meaningful for
/// engines whose symbol indices carry fixed digit semantics.
double digit_symbol_accuracy(Encoder& enc, const SymbolHead& head, const SplitSources& src,
                             const ImageStore& store) {
  Matrix computed;
  if (!src.test.digit_cache) computed = batch_encode(enc, store.images);
  const Matrix& emb = src.test.digit_cache ? *src.test.digit_cache : computed;
  Matrix logits = emb * head.w.value;
  logits.rowwise() += head.b.value.row(0);
  const std::vector<int> pred = argmax_rows(logits);
  long hit = 0;
  for (size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == store.labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

double mean_of(const std::vector<double>& xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

double std_of(const std::vector<double>& xs) {
  if (xs.size() < 2) return 0.0;
  const double m = mean_of(xs);
  double s = 0.0;
  for (double x : xs) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

Method method_of(const std::string& name) {
  if (name == "neural") return Method::neural;
  if (name == "prob") return Method::prob;
  if (name == "ilr") return Method::ilr;
  if (name == "dsl") return Method::dsl;
  throw ConfigError("unknown method: " + name);
}

std::string method_name(Method m) {
  switch (m) {
    case Method::neural: return "neural";
    case Method::prob: return "prob";
    case Method::ilr: return "ilr";
    case Method::dsl: return "dsl";
  }
  throw ConfigError("bad method enum");
}

ExperimentConfig parse_config(std::istream& in) {
  ExperimentConfig cfg;
  std::string line, section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']')
        throw ConfigError("config line " + std::to_string(line_no) + ": unterminated section");
      section = trim(line.substr(1, line.size() - 2));
      continue;
    }
    size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    apply_key(cfg, section.empty() ? key : section + "." + key, value);
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  return parse_config(in);
}

std::string config_text(const ExperimentConfig& cfg) {
  std::ostringstream os;
  os << "[task]\n";
  os << "kind = " << task_kind_name(cfg.task.kind) << "\n";
  os << "train_digits = " << cfg.task.train_digits << "\n";
  os << "test_digits = " << cfg.task.test_digits << "\n";
  os << "train_size = " << cfg.task.train_size << "\n";
  os << "test_size = " << cfg.task.test_size << "\n";
  os << "pairing_seed = " << cfg.task.pairing_seed << "\n";
  os << "\n[model]\n";
  os << "method = " << method_name(cfg.method) << "\n";
  os << "encoder = " << (cfg.encoder == EncoderKind::mlp ? "mlp" : "conv") << "\n";
  os << "k = " << cfg.k << "\n";
  os << "ff_hidden = " << cfg.ff_hidden << "\n";
  os << "semantics = " << semantics_name(cfg.semantics) << "\n";
  os << "ilr_steps = " << cfg.ilr_steps << "\n";
  os << "ilr_target = " << num_str(cfg.ilr_target) << "\n";
  os << "ilr_satisfaction = " << num_str(cfg.ilr_satisfaction) << "\n";
  os << "decay = " << num_str(cfg.decay) << "\n";
  os << "\n[train]\n";
  os << "pretrain = " << (cfg.pretrain ? "true" : "false") << "\n";
  os << "epochs = " << cfg.epochs << "\n";
  os << "lr = " << num_str(cfg.lr) << "\n";
  os << "batch = " << cfg.batch << "\n";
  os << "seeds = " << seed_list_text(cfg.seeds) << "\n";
  os << "\n[paths]\n";
  os << "data = " << cfg.data_dir << "\n";
  os << "out = " << cfg.out_dir << "\n";
  if (!cfg.archive.empty()) os << "archive = " << cfg.archive << "\n";
  return os.str();
}

void validate_config(const ExperimentConfig& cfg) {
  if (cfg.epochs < 0) throw ConfigError("epochs must be >= 0");
  if (cfg.lr <= 0.0) throw ConfigError("lr must be positive");
  if (cfg.batch < 1) throw ConfigError("batch must be >= 1");
  if (cfg.seeds.empty()) throw ConfigError("at least one seed");
  if (cfg.task.train_digits < 1 || cfg.task.test_digits < 1)
    throw ConfigError("sequence lengths must be >= 1");
  if (cfg.task.train_size < 1 || cfg.task.test_size < 1)
    throw ConfigError("split sizes must be >= 1");
  if (cfg.ilr_target < 0.0 || cfg.ilr_target > 1.0)
    throw ConfigError("ilr_target must be in [0,1]");
  if (cfg.ilr_satisfaction < 0.0)
    throw ConfigError("ilr_satisfaction must be >= 0");

  const TaskKind kind = cfg.task.kind;
  switch (cfg.method) {
    case Method::neural: break;
    case Method::prob:
      if (kind == TaskKind::parity)
        throw ConfigError("prob engine has no parity program");
      break;
    case Method::ilr:
      if (kind != TaskKind::sum)
        throw ConfigError("ilr engine only carries sum knowledge");
      break;
    case Method::dsl: {
      const int floor = kind == TaskKind::parity ? 2 : 10;
      if (cfg.k < floor)
        throw ConfigError("dsl symbol bound k=" + std::to_string(cfg.k) + " below the true class count " +
                          std::to_string(floor));
      break;
    }
  }
  if (cfg.method != Method::neural && cfg.pretrain && cfg.archive.empty())
    throw ConfigError("pretrain=true needs paths.archive");
}

ExperimentConfig with_seed(ExperimentConfig cfg, int seed) {
  cfg.seeds = {seed};
  return cfg;
}

RunSummary summarize(const std::vector<MetricRow>& rows, int seed) {
  RunSummary s;
  s.seed = seed;
  std::vector<const MetricRow*> test_rows;
  for (const auto& row : rows) {
    s.epochs = std::max(s.epochs, row.epoch);
    if (row.split == "train") s.train_seconds += row.seconds;
    else if (row.split == "test") {
      s.eval_seconds += row.seconds;
      test_rows.push_back(&row);
    }
  }
  if (test_rows.empty()) throw ContractError("summarize: no test rows");
  for (const auto* row : test_rows) s.best_task_acc = std::max(s.best_task_acc, row->task_acc);
  s.final_task_acc = test_rows.back()->task_acc;
  s.final_fine_acc = test_rows.back()->fine_acc;
  s.convergence_epoch = test_rows.back()->epoch;
  for (const auto* row : test_rows)
    if (row->task_acc >= s.best_task_acc - kConvergenceBand) {
      s.convergence_epoch = row->epoch;
      break;
    }
  return s;
}

PixelSets LoadedTask::pixels() const {
  PixelSets p;
  p.digit_train = &digit_train.images;
  p.digit_test = &digit_test.images;
  if (op_train.count() > 0) {
    p.op_train = &op_train.images;
    p.op_test = &op_test.images;
  }
  return p;
}

LoadedTask load_task(const ExperimentConfig& cfg) {
  const DatasetPaths paths = dataset_paths(cfg.data_dir);
  std::vector<std::string> needed = {paths.digit_train_images, paths.digit_train_labels,
                                     paths.digit_test_images, paths.digit_test_labels};
  if (cfg.task.kind == TaskKind::multiop) {
    needed.push_back(paths.letter_train_images);
    needed.push_back(paths.letter_train_labels);
    needed.push_back(paths.letter_test_images);
    needed.push_back(paths.letter_test_labels);
  }
  std::string missing;
  for (const auto& p : needed)
    if (!fs::exists(p)) missing += (missing.empty() ? "" : ", ") + p;
  if (!missing.empty())
    throw ConfigError("missing data files: " + missing + " (run gen-data first)");

  const double t0 = now_seconds();
  LoadedTask task;
  task.digit_train =
      load_image_store(paths.digit_train_images, paths.digit_train_labels, Source::mnist_digits);
  task.digit_test =
      load_image_store(paths.digit_test_images, paths.digit_test_labels, Source::mnist_digits);
  const ImageStore* op_train = nullptr;
  const ImageStore* op_test = nullptr;
  if (cfg.task.kind == TaskKind::multiop) {
    const std::vector<int> op_classes = {1, 2, 3, 4};  // + - x /
    task.op_train = filter_classes(
        load_image_store(paths.letter_train_images, paths.letter_train_labels, Source::emnist_letters),
        op_classes);
    task.op_test = filter_classes(
        load_image_store(paths.letter_test_images, paths.letter_test_labels, Source::emnist_letters),
        op_classes);
    op_train = &task.op_train;
    op_test = &task.op_test;
  }
  task.data = compose_task(task.digit_train, task.digit_test, op_train, op_test, cfg.task);
  task.load_seconds = now_seconds() - t0;
  return task;
}

RunRecord run_pretrain_job(const ExperimentConfig& cfg, const LoadedTask& task, int seed,
                           const std::string& dir) {
  fs::create_directories(dir);
  Rng rng(static_cast<uint64_t>(seed));
  const std::vector<long> alphabet = label_alphabet(task.data.train);
  NeuralTaskModel model =
      make_neural_model(cfg.task.kind, alphabet, cfg.encoder, cfg.ff_hidden, rng);

  NeuralConfig ncfg;
  ncfg.epochs = cfg.epochs;
  ncfg.lr = cfg.lr;
  ncfg.batch = cfg.batch;
  ncfg.seed = static_cast<uint64_t>(seed);
  ncfg.ff_hidden = cfg.ff_hidden;

  const PixelSets pixels = task.pixels();
  PretrainResult result = pretrain(model, task.data, pixels, ncfg);

  RunRecord rec;
  rec.rows = result.trace;
  if (cfg.epochs == 0) {
    const double e0 = now_seconds();
    const EvalResult ev = evaluate_neural(model, task.data.test, pixels, true);
    rec.rows.push_back(make_row(0, "test", ev.task_acc, ev.fine_acc, now_seconds() - e0));
  }

  save_archive(result.archive, dir + "/weights.nsf");
  write_run_csv(dir + "/run.csv", rec.rows);
  write_config_echo(cfg, seed, dir, task.load_seconds);
  rec.summary = summarize(rec.rows, seed);
  rec.summary.data_seconds = task.load_seconds;
  return rec;
}

RunRecord run_nesy_job(const ExperimentConfig& cfg, const LoadedTask& task, int seed,
                       const std::string& dir) {
  fs::create_directories(dir);
  const std::string archive_path = substitute_seed(cfg.archive, seed);
  if (cfg.pretrain && !fs::exists(archive_path))
    throw ConfigError("pretrain archive not found: " + archive_path);

  Rng rng(static_cast<uint64_t>(seed));
  const TaskKind kind = cfg.task.kind;
  AdamConfig adam;
  adam.lr = cfg.lr;

  std::optional<ProbModel> prob_model;
  std::optional<IlrModel> ilr_model;
  std::optional<DslModel> dsl_model;
  std::vector<Parameter*> params;
  Encoder* encoder = nullptr;
  SymbolHead* digit_head = nullptr;  // set when symbol i means digit i
  std::function<double(const FeatureSource&, Rng&)> train_fn;
  std::function<EvalResult(const FeatureSource&)> eval_fn;

  switch (cfg.method) {
    case Method::prob: {
      prob_model.emplace(make_prob_model(kind, cfg.encoder, rng));
      ProbModel& m = *prob_model;
      params = m.param_ptrs();
      encoder = &m.encoder;
      digit_head = &m.digit_head;
      train_fn = [&m, &cfg, &task, adam](const FeatureSource& src, Rng& r) {
        return prob_train_epoch(m, task.data.train, src, adam, cfg.batch, r);
      };
      eval_fn = [&m, &task](const FeatureSource& src) {
        return evaluate_prob(m, task.data.test, src);
      };
      break;
    }
    case Method::ilr: {
      IlrConfig icfg;
      icfg.semantics = cfg.semantics;
      icfg.steps = cfg.ilr_steps;
      icfg.target = cfg.ilr_target;
      icfg.satisfaction_weight = cfg.ilr_satisfaction;
      ilr_model.emplace(make_ilr_model(kind, cfg.encoder, rng, icfg));
      IlrModel& m = *ilr_model;
      params = m.param_ptrs();
      encoder = &m.encoder;
      digit_head = &m.digit_head;
      train_fn = [&m, &cfg, &task, adam](const FeatureSource& src, Rng& r) {
        return ilr_train_epoch(m, task.data.train, src, adam, cfg.batch, r);
      };
      eval_fn = [&m, &task](const FeatureSource& src) {
        return evaluate_ilr(m, task.data.test, src);
      };
      break;
    }
    case Method::dsl: {
      DslConfig dcfg;
      dcfg.symbols = cfg.k;
      dcfg.decay = cfg.decay;
      dsl_model.emplace(make_dsl_model(kind, cfg.encoder, rng, dcfg));
      DslModel& m = *dsl_model;
      params = m.param_ptrs();
      encoder = &m.encoder;
      train_fn = [&m, &cfg, &task, adam](const FeatureSource& src, Rng& r) {
        return dsl_train_epoch(m, task.data.train, src, adam, cfg.batch, r);
      };
      eval_fn = [&m, &task](const FeatureSource& src) {
        return evaluate_dsl(m, task.data.test, src);
      };
      break;
    }
    case Method::neural:
      throw ConfigError("run_nesy_job: method=neural belongs to run_pretrain_job");
  }

  if (cfg.pretrain) {
    const WeightArchive archive = load_archive(archive_path);
    inject_weights(archive, params, "f_e.", true);
    if (prob_model) {
      soften_head(prob_model->digit_head);
      if (kind == TaskKind::multiop) soften_head(prob_model->op_head);
    }
    if (ilr_model) soften_head(ilr_model->digit_head);
  }

  SplitSources src;
  build_sources(src, task, cfg.pretrain ? encoder : nullptr);

  auto test_eval = [&]() {
    EvalResult ev = eval_fn(src.test);
    if (ev.fine_acc < 0.0 && digit_head)
      ev.fine_acc = digit_symbol_accuracy(*encoder, *digit_head, src, task.digit_test);
    return ev;
  };

  RunRecord rec;
  if (cfg.epochs == 0) {
    const double e0 = now_seconds();
    const EvalResult ev = test_eval();
    rec.rows.push_back(make_row(0, "test", ev.task_acc, ev.fine_acc, now_seconds() - e0));
  }
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    train_fn(src.train, rng);
    rec.rows.push_back(make_row(epoch, "train", -1.0, -1.0, now_seconds() - t0));
    const double e0 = now_seconds();
    const EvalResult ev = test_eval();
    rec.rows.push_back(make_row(epoch, "test", ev.task_acc, ev.fine_acc, now_seconds() - e0));
  }

  std::vector<const Parameter*> to_save;
  for (const Parameter* p : params) to_save.push_back(p);
  save_archive(collect_weights(to_save), dir + "/weights.nsf");
  if (dsl_model) {
    std::ofstream rules(dir + "/rules.txt", std::ios::binary);
    if (!rules) throw ConfigError("cannot write " + dir + "/rules.txt");
    dsl_model->table.dump(rules);
  }
  write_run_csv(dir + "/run.csv", rec.rows);
  {
    ExperimentConfig echo = cfg;
    echo.archive = archive_path;
    write_config_echo(echo, seed, dir, task.load_seconds);
  }
  rec.summary = summarize(rec.rows, seed);
  rec.summary.data_seconds = task.load_seconds;
  return rec;
}

RunRecord run_job(const ExperimentConfig& cfg, const LoadedTask& task, int seed,
                  const std::string& dir) {
  return cfg.method == Method::neural ? run_pretrain_job(cfg, task, seed, dir)
                                      : run_nesy_job(cfg, task, seed, dir);
}

std::vector<RunRecord> run_experiment(const ExperimentConfig& cfg, bool parallel, bool verbose) {
  validate_config(cfg);
  const LoadedTask task = load_task(cfg);
  fs::create_directories(cfg.out_dir);
  write_config_echo(cfg, cfg.seeds.front(), cfg.out_dir, task.load_seconds);

  const size_t n = cfg.seeds.size();
  std::vector<RunRecord> records(n);
  std::vector<std::exception_ptr> errors(n);
  std::atomic<size_t> next{0};
  auto work = [&]() {
    for (;;) {
      const size_t i = next.fetch_add(1);
      if (i >= n) return;
      const int seed = cfg.seeds[i];
      const std::string dir = cfg.out_dir + "/seed" + std::to_string(seed);
      try {
        records[i] = run_job(cfg, task, seed, dir);
        if (verbose) {
          const RunSummary& s = records[i].summary;
          std::printf("[seed %d] best %.4f final %.4f conv %d (%.1fs train, %.1fs eval)\n", seed,
                      s.best_task_acc, s.final_task_acc, s.convergence_epoch, s.train_seconds,
                      s.eval_seconds);
          std::fflush(stdout);
        }
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };

  const unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  const size_t workers = parallel ? std::min<size_t>(n, hw) : 1;
  if (workers <= 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  for (const auto& err : errors)
    if (err) std::rethrow_exception(err);

  std::vector<RunSummary> summaries;
  for (const auto& rec : records) summaries.push_back(rec.summary);
  write_summary_csv(cfg.out_dir + "/summary.csv", summaries);
  return records;
}

EvalResult evaluate_saved(const ExperimentConfig& cfg, const LoadedTask& task,
                          const std::string& weights_path, const std::string& rules_path) {
  if (!fs::exists(weights_path)) throw ConfigError("weights not found: " + weights_path);
  const WeightArchive archive = load_archive(weights_path);
  Rng rng(0);
  const TaskKind kind = cfg.task.kind;

  if (cfg.method == Method::neural) {
    const std::vector<long> alphabet = label_alphabet(task.data.train);
    NeuralTaskModel model = make_neural_model(kind, alphabet, cfg.encoder, cfg.ff_hidden, rng);
    inject_weights(archive, model.param_ptrs(), "", false);
    return evaluate_neural(model, task.data.test, task.pixels(), true);
  }

  std::optional<ProbModel> prob_model;
  std::optional<IlrModel> ilr_model;
  std::optional<DslModel> dsl_model;
  std::vector<Parameter*> params;
  Encoder* encoder = nullptr;
  SymbolHead* digit_head = nullptr;
  std::function<EvalResult(const FeatureSource&)> eval_fn;
  switch (cfg.method) {
    case Method::prob:
      prob_model.emplace(make_prob_model(kind, cfg.encoder, rng));
      params = prob_model->param_ptrs();
      encoder = &prob_model->encoder;
      digit_head = &prob_model->digit_head;
      eval_fn = [&](const FeatureSource& src) {
        return evaluate_prob(*prob_model, task.data.test, src);
      };
      break;
    case Method::ilr: {
      IlrConfig icfg;
      icfg.semantics = cfg.semantics;
      icfg.steps = cfg.ilr_steps;
      icfg.target = cfg.ilr_target;
      icfg.satisfaction_weight = cfg.ilr_satisfaction;
      ilr_model.emplace(make_ilr_model(kind, cfg.encoder, rng, icfg));
      params = ilr_model->param_ptrs();
      encoder = &ilr_model->encoder;
      digit_head = &ilr_model->digit_head;
      eval_fn = [&](const FeatureSource& src) {
        return evaluate_ilr(*ilr_model, task.data.test, src);
      };
      break;
    }
    case Method::dsl: {
      if (rules_path.empty()) throw ConfigError("dsl evaluation needs a rules file");
      if (!fs::exists(rules_path)) throw ConfigError("rules not found: " + rules_path);
      DslConfig dcfg;
      dcfg.symbols = cfg.k;
      dcfg.decay = cfg.decay;
      dsl_model.emplace(make_dsl_model(kind, cfg.encoder, rng, dcfg));
      std::ifstream rules(rules_path, std::ios::binary);
      dsl_model->table = RuleTable::parse(rules);
      params = dsl_model->param_ptrs();
      encoder = &dsl_model->encoder;
      eval_fn = [&](const FeatureSource& src) {
        return evaluate_dsl(*dsl_model, task.data.test, src);
      };
      break;
    }
    default: throw ConfigError("evaluate_saved: bad method");
  }
  inject_weights(archive, params, "", false);

  SplitSources src;
  build_sources(src, task, encoder);  // weights fixed: always safe to cache
  EvalResult ev = eval_fn(src.test);
  if (ev.fine_acc < 0.0 && digit_head)
    ev.fine_acc = digit_symbol_accuracy(*encoder, *digit_head, src, task.digit_test);
  return ev;
}

void export_embeddings(const WeightArchive& archive, EncoderKind kind, const ImageStore& store,
                       const std::string& path, long limit) {
  Rng rng(0);
  Encoder enc = make_encoder(kind, rng);
  inject_weights(archive, enc.param_ptrs(), "f_e.", false);
  Index n = store.count();
  if (limit > 0) n = std::min<Index>(n, limit);
  const Matrix embeddings = batch_encode(enc, store.images.topRows(n));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  for (int j = 0; j < kEmbedDim; ++j) out << "e" << j << ",";
  out << "label\n";
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < embeddings.cols(); ++j) out << num_str(embeddings(i, j)) << ",";
    out << store.labels[static_cast<size_t>(i)] << "\n";
  }
}

void write_run_csv(const std::string& path, const std::vector<MetricRow>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << "epoch,split,task_acc,fine_acc,seconds\n";
  for (const auto& row : rows)
    out << row.epoch << "," << row.split << "," << csv_acc(row.task_acc) << ","
        << csv_acc(row.fine_acc) << "," << num_str(row.seconds) << "\n";
}

std::vector<MetricRow> read_run_csv(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path);
  std::string line;
  if (!std::getline(in, line) || line != "epoch,split,task_acc,fine_acc,seconds")
    throw FormatError(path + ": bad run.csv header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (trim(line).empty()) continue;
    std::vector<std::string> fields;
    std::istringstream fs_line(line);
    std::string field;
    while (std::getline(fs_line, field, ',')) fields.push_back(field);
    while (fields.size() < 5) fields.push_back("");  // trailing empties
    if (fields.size() != 5) throw FormatError(path + ": bad row '" + line + "'");
    MetricRow row;
    row.epoch = static_cast<int>(parse_long("epoch", fields[0]));
    row.split = fields[1];
    row.task_acc = fields[2].empty() ? -1.0 : parse_double("task_acc", fields[2]);
    row.fine_acc = fields[3].empty() ? -1.0 : parse_double("fine_acc", fields[3]);
    row.seconds = fields[4].empty() ? 0.0 : parse_double("seconds", fields[4]);
    rows.push_back(row);
  }
  return rows;
}

void write_summary_csv(const std::string& path, const std::vector<RunSummary>& rows) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + path);
  out << "seed,epochs,best_task_acc,final_task_acc,final_fine_acc,convergence_epoch,"
         "train_seconds,eval_seconds,data_seconds\n";
  auto emit = [&](const std::string& tag, const std::vector<double>& vals) {
    out << tag;
    for (double v : vals) out << "," << num_str(v);
    out << "\n";
  };
  std::vector<std::vector<double>> columns(8);
  for (const auto& s : rows) {
    const std::vector<double> vals = {static_cast<double>(s.epochs),
                                      s.best_task_acc,
                                      s.final_task_acc,
                                      s.final_fine_acc,
                                      static_cast<double>(s.convergence_epoch),
                                      s.train_seconds,
                                      s.eval_seconds,
                                      s.data_seconds};
    for (size_t c = 0; c < columns.size(); ++c) columns[c].push_back(vals[c]);
    emit(std::to_string(s.seed), vals);
  }
  std::vector<double> means, stds;
  for (const auto& col : columns) {
    means.push_back(mean_of(col));
    stds.push_back(std_of(col));
  }
  emit("mean", means);
  emit("std", stds);
}

}  // namespace nesy
