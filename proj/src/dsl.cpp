#include "nesy/dsl.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <istream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace nesy {

GreedyChoice select_symbols(const std::vector<Matrix>& distributions) {
  GreedyChoice choice;
  for (const Matrix& d : distributions) {
    if (d.rows() != 1 || d.cols() < 1)
      throw DimensionError("select_symbols expects [1,k] distribution rows");
    Index best = 0;
    d.row(0).maxCoeff(&best);  // first hit wins, so ties go to the lowest index
    choice.symbols.push_back(static_cast<int>(best));
    choice.probs.push_back(d(0, best));
    choice.truth *= d(0, best);
  }
  return choice;
}

GreedyChoice select_symbols(const Matrix& rows) {
  std::vector<Matrix> parts;
  for (Index i = 0; i < rows.rows(); ++i) parts.push_back(rows.row(i));
  return select_symbols(parts);
}

long RuleTable::observe(const Tuple& tuple, long observed, double truth) {
  if (!(truth >= 0.0 && truth <= 1.0 + 1e-9))
    throw DomainError("rule observation truth outside [0,1]: " + std::to_string(truth));
  auto it = entries_.find(tuple);
  if (it == entries_.end()) {
    Entry fresh;
    fresh.output = observed;
    fresh.support = 1;
    fresh.truth_acc = truth;
    fresh.weight = truth;
    entries_.emplace(tuple, std::move(fresh));
    return observed;
  }
  Entry& e = it->second;
  const long holder = e.output;
  if (holder == observed) {
    ++e.support;
    e.truth_acc += truth;
    e.weight += truth;
    return holder;
  }
  double& rival = e.challengers[observed];
  rival += truth;
  if (rival > e.weight) {
    const double won = rival;
    e.challengers.erase(observed);
    e.challengers[holder] = e.weight;
    e.output = observed;
    e.weight = won;
    e.support = 1;
    e.truth_acc = truth;
  }
  return holder;
}

std::optional<long> RuleTable::lookup(const Tuple& tuple) const {
  auto it = entries_.find(tuple);
  if (it == entries_.end()) return std::nullopt;
  return it->second.output;
}

bool RuleTable::bound(const Tuple& tuple) const { return entries_.count(tuple) != 0; }

void RuleTable::decay(double factor) {
  if (!(factor > 0.0 && factor <= 1.0))
    throw ConfigError("decay factor outside (0,1]: " + std::to_string(factor));
  for (auto& [tuple, e] : entries_) {
    e.weight *= factor;
    for (auto it = e.challengers.begin(); it != e.challengers.end();) {
      it->second *= factor;
      it = it->second < 1e-9 ? e.challengers.erase(it) : std::next(it);
    }
  }
}

void RuleTable::dump(std::ostream& out) const {
  for (const auto& [tuple, e] : entries_) {
    for (size_t i = 0; i < tuple.size(); ++i) {
      if (i) out << ',';
      out << tuple[i];
    }
    char acc[64];
    std::snprintf(acc, sizeof acc, "%.17g", e.truth_acc);
    out << " -> " << e.output << ' ' << e.support << ' ' << acc << '\n';
  }
}

RuleTable RuleTable::parse(std::istream& in) {
  RuleTable table;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto arrow = line.find(" -> ");
    if (arrow == std::string::npos)
      throw FormatError("rule line " + std::to_string(line_no) + ": missing ' -> '");
    Tuple tuple;
    std::istringstream left(line.substr(0, arrow));
    std::string piece;
    while (std::getline(left, piece, ',')) {
      try {
        tuple.push_back(std::stoi(piece));
      } catch (const std::exception&) {
        throw FormatError("rule line " + std::to_string(line_no) + ": bad tuple entry '" +
                          piece + "'");
      }
    }
    if (tuple.empty())
      throw FormatError("rule line " + std::to_string(line_no) + ": empty tuple");
    Entry e;
    std::istringstream right(line.substr(arrow + 4));
    if (!(right >> e.output >> e.support >> e.truth_acc))
      throw FormatError("rule line " + std::to_string(line_no) + ": bad entry fields");
    if (e.support < 1)
      throw FormatError("rule line " + std::to_string(line_no) + ": support must be >= 1");
    e.weight = e.truth_acc;
    if (!table.entries_.emplace(std::move(tuple), std::move(e)).second)
      throw FormatError("rule line " + std::to_string(line_no) + ": duplicate tuple");
  }
  return table;
}

long encode_carry(int digit, int carry_out) {
  if (digit < 0 || digit > 9 || carry_out < 0 || carry_out > 1)
    throw DomainError("carry-pair outside digit 0..9 / carry 0..1");
  return carry_out * 10 + digit;
}

int carry_digit(long encoded) { return static_cast<int>(encoded % 10); }

int carry_next(long encoded) { return static_cast<int>(encoded / 10); }

std::vector<Parameter*> DslModel::param_ptrs() {
  std::vector<Parameter*> out = encoder.param_ptrs();
  for (Parameter* p : digit_head.param_ptrs()) out.push_back(p);
  if (kind == TaskKind::multiop)
    for (Parameter* p : op_head.param_ptrs()) out.push_back(p);
  return out;
}

DslModel make_dsl_model(TaskKind kind, EncoderKind enc_kind, Rng& rng, DslConfig cfg) {
  const int floor = kind == TaskKind::parity ? 2 : 10;
  if (cfg.symbols < floor)
    throw ConfigError("symbol bound " + std::to_string(cfg.symbols) + " below the " +
                      std::to_string(floor) + " classes the task can emit");
  DslModel m;
  m.kind = kind;
  m.encoder = make_encoder(enc_kind, rng);
  m.digit_head = make_symbol_head(cfg.symbols, rng);
  if (kind == TaskKind::multiop) m.op_head = make_symbol_head(4, rng, "f_m.op.");
  m.cfg = cfg;
  return m;
}

namespace {

// Cheapest 2-state chain from `start` to `finish` under a per-transition
// cost; ties prefer the lower state at every step (iteration order).
std::vector<int> fit_chain(int steps, int start, int finish,
                           const std::function<double(int, int, int)>& cost) {
  constexpr double kInf = 1e18;
  std::vector<std::array<double, 2>> best(static_cast<size_t>(steps) + 1, {kInf, kInf});
  std::vector<std::array<int, 2>> from(static_cast<size_t>(steps) + 1, {0, 0});
  best[0][static_cast<size_t>(start)] = 0.0;
  for (int t = 0; t < steps; ++t)
    for (int s = 0; s < 2; ++s) {
      const double here = best[static_cast<size_t>(t)][static_cast<size_t>(s)];
      if (here >= kInf) continue;
      for (int s2 = 0; s2 < 2; ++s2) {
        const double c = here + cost(t, s, s2);
        if (c < best[static_cast<size_t>(t) + 1][static_cast<size_t>(s2)] - 1e-12) {
          best[static_cast<size_t>(t) + 1][static_cast<size_t>(s2)] = c;
          from[static_cast<size_t>(t) + 1][static_cast<size_t>(s2)] = s;
        }
      }
    }
  std::vector<int> states(static_cast<size_t>(steps) + 1);
  states[static_cast<size_t>(steps)] = finish;
  for (int t = steps; t > 0; --t)
    states[static_cast<size_t>(t) - 1] = from[static_cast<size_t>(t)][states[static_cast<size_t>(t)]];
  return states;
}

constexpr double kAdoptCost = 0.1;  // fresh binding: cheap but not free

// Feeds one example's decomposed targets into the table; true when the
// table agreed with every target at observation time.
bool feed_table(DslModel& model, const TaskExample& ex,
                const std::vector<std::vector<int>>& sym,
                const std::vector<std::vector<double>>& prob, size_t e, double truth) {
  RuleTable& table = model.table;
  switch (model.kind) {
    case TaskKind::sum: {
      const RuleTable::Tuple tuple = {sym[0][e], sym[1][e]};
      return table.observe(tuple, ex.label, truth) == ex.label;
    }
    case TaskKind::multiop: {
      const RuleTable::Tuple tuple = {sym[0][e], sym[2][e], sym[1][e]};
      return table.observe(tuple, ex.label, truth) == ex.label;
    }
    case TaskKind::multidigit_sum: {
      const int n = static_cast<int>(ex.inputs.size()) / 2;
      auto col = [&](int t) {
        return std::pair<int, int>{sym[static_cast<size_t>(n - 1 - t)][e],
                                   sym[static_cast<size_t>(2 * n - 1 - t)][e]};
      };
      auto digit_at = [&](int t) { return ex.label_digits[static_cast<size_t>(n - t)]; };
      auto cost = [&](int t, int c, int c2) {
        const auto [a, b] = col(t);
        const auto got = table.lookup({a, b, c});
        if (!got) return kAdoptCost;
        return *got == encode_carry(digit_at(t), c2) ? 0.0 : 1.0;
      };
      const std::vector<int> carries = fit_chain(n, 0, ex.label_digits[0], cost);
      bool all = true;
      for (int t = 0; t < n; ++t) {
        const auto [a, b] = col(t);
        const long want = encode_carry(digit_at(t), carries[static_cast<size_t>(t) + 1]);
        const double col_truth = prob[static_cast<size_t>(n - 1 - t)][e] *
                                 prob[static_cast<size_t>(2 * n - 1 - t)][e];
        if (table.observe({a, b, carries[static_cast<size_t>(t)]}, want, col_truth) != want)
          all = false;
      }
      return all;
    }
    case TaskKind::parity: {
      const int steps = static_cast<int>(ex.inputs.size());
      auto cost = [&](int t, int s, int s2) {
        const auto got = table.lookup({s, sym[static_cast<size_t>(t)][e]});
        if (!got) return kAdoptCost;
        return *got == s2 ? 0.0 : 1.0;
      };
      const std::vector<int> states = fit_chain(steps, 0, static_cast<int>(ex.label), cost);
      bool all = true;
      for (int t = 0; t < steps; ++t) {
        const long want = states[static_cast<size_t>(t) + 1];
        if (table.observe({states[static_cast<size_t>(t)], sym[static_cast<size_t>(t)][e]}, want,
                          prob[static_cast<size_t>(t)][e]) != want)
          all = false;
      }
      return all;
    }
  }
  throw ContractError("corrupt task kind");
}

}  // namespace

double dsl_train_step(DslModel& model, const std::vector<TaskExample>& exs,
                      const std::vector<size_t>& batch, const FeatureSource& src,
                      const AdamConfig& adam) {
  if (batch.empty()) throw ContractError("empty batch");
  const size_t arity = exs[batch[0]].inputs.size();
  for (size_t i : batch)
    if (exs[i].inputs.size() != arity) throw ContractError("mixed-arity batch");

  Tape tape;
  std::vector<Tensor> parts;
  std::vector<int> offsets;
  int off = 0;
  for (size_t pos = 0; pos < arity; ++pos) {
    const Role role = exs[batch[0]].roles[pos];
    Tensor z = embed_position(tape, model.encoder, src, role, exs, batch, pos);
    SymbolHead& head = role == Role::op ? model.op_head : model.digit_head;
    Tensor probs = map_symbols(tape, head, z);
    offsets.push_back(off);
    off += static_cast<int>(probs.value().cols());
    parts.push_back(probs);
  }
  Tensor all = concat_cols(parts);

  std::vector<std::vector<int>> sym(arity);
  std::vector<std::vector<double>> prob(arity);
  for (size_t pos = 0; pos < arity; ++pos) {
    sym[pos] = argmax_rows(parts[pos].value());
    prob[pos].resize(batch.size());
    for (size_t e = 0; e < batch.size(); ++e)
      prob[pos][e] = parts[pos].value()(static_cast<Index>(e), sym[pos][e]);
  }

  std::vector<Tensor> terms;
  for (size_t e = 0; e < batch.size(); ++e) {
    const TaskExample& ex = exs[batch[e]];
    std::vector<std::pair<int, int>> picks;
    double truth = 1.0;
    for (size_t pos = 0; pos < arity; ++pos) {
      picks.emplace_back(static_cast<int>(e), offsets[pos] + sym[pos][e]);
      truth *= prob[pos][e];
    }
    const bool match = feed_table(model, ex, sym, prob, e, truth);
    Tensor joint = pick_product(all, picks);
    terms.push_back(match ? scale(log_guard(joint, 1e-12), -1.0)
                          : scale(log_guard(one_minus(joint), 1e-12), -1.0));
  }
  Tensor loss = mean_of(terms);
  const double out = loss.value()(0, 0);
  tape.backward(loss);
  adam_step(model.param_ptrs(), adam);
  return out;
}

double dsl_train_epoch(DslModel& model, const std::vector<TaskExample>& exs,
                       const FeatureSource& src, const AdamConfig& adam, int batch, Rng& rng) {
  if (batch < 1) throw ConfigError("batch size must be positive");
  std::vector<size_t> order(exs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  double total = 0.0;
  int steps = 0;
  for (const auto& chunk : make_batches(exs, order, batch)) {
    total += dsl_train_step(model, exs, chunk, src, adam);
    ++steps;
  }
  model.table.decay(model.cfg.decay);
  return steps ? total / steps : 0.0;
}

namespace {

// Table-fold on already-selected symbols. Unknown rules poison the label
// but scoring of later positions continues.
Prediction fold_table(const DslModel& model, const TaskExample& ex, const std::vector<int>& sym) {
  const RuleTable& table = model.table;
  Prediction pred;
  switch (model.kind) {
    case TaskKind::sum: {
      const auto out = table.lookup({sym[0], sym[1]});
      pred.label = out ? *out : kUndefinedLabel;
      return pred;
    }
    case TaskKind::multiop: {
      const auto out = table.lookup({sym[0], sym[2], sym[1]});
      pred.label = out ? *out : kUndefinedLabel;
      return pred;
    }
    case TaskKind::multidigit_sum: {
      const int n = static_cast<int>(sym.size()) / 2;
      pred.digits.assign(static_cast<size_t>(n) + 1, -1);
      int carry = 0;
      bool complete = true;
      for (int t = 0; t < n; ++t) {
        const auto out =
            table.lookup({sym[static_cast<size_t>(n - 1 - t)],
                          sym[static_cast<size_t>(2 * n - 1 - t)], carry});
        if (!out) {
          complete = false;  // digit slot stays -1, carry chain keeps its value
          continue;
        }
        pred.digits[static_cast<size_t>(n - t)] = carry_digit(*out);
        carry = carry_next(*out);
      }
      pred.digits[0] = carry;
      if (complete) {
        long value = 0;
        for (int d : pred.digits) value = value * 10 + d;
        pred.label = value;
      } else {
        pred.label = kUndefinedLabel;
      }
      return pred;
    }
    case TaskKind::parity: {
      int state = 0;
      for (int s : sym) {
        const auto out = table.lookup({state, s});
        if (!out) {
          pred.label = kUndefinedLabel;
          return pred;
        }
        state = static_cast<int>(*out);
      }
      pred.label = state;
      return pred;
    }
  }
  throw ContractError("corrupt task kind");
}

void dsl_chunk_symbols(DslModel& model, const std::vector<TaskExample>& exs,
                       const std::vector<size_t>& chunk, const FeatureSource& src,
                       std::vector<std::vector<int>>& out) {
  const size_t arity = exs[chunk[0]].inputs.size();
  Tape tape;
  std::vector<std::vector<int>> per_pos(arity);
  for (size_t pos = 0; pos < arity; ++pos) {
    const Role role = exs[chunk[0]].roles[pos];
    Tensor z = embed_position(tape, model.encoder, src, role, exs, chunk, pos);
    SymbolHead& head = role == Role::op ? model.op_head : model.digit_head;
    per_pos[pos] = argmax_rows(map_symbols(tape, head, z).value());
  }
  for (size_t i = 0; i < chunk.size(); ++i) {
    out[chunk[i]].resize(arity);
    for (size_t pos = 0; pos < arity; ++pos) out[chunk[i]][pos] = per_pos[pos][i];
  }
}

}  // namespace

Prediction dsl_infer(DslModel& model, const TaskExample& ex, const FeatureSource& src) {
  std::vector<TaskExample> one = {ex};
  std::vector<std::vector<int>> sym(1);
  dsl_chunk_symbols(model, one, {0}, src, sym);
  return fold_table(model, ex, sym[0]);
}

EvalResult evaluate_dsl(DslModel& model, const std::vector<TaskExample>& examples,
                        const FeatureSource& src) {
  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::vector<std::vector<int>> sym(examples.size());
  for (const auto& chunk : make_batches(examples, order, 512))
    dsl_chunk_symbols(model, examples, chunk, src, sym);

  size_t hits = 0;
  double fine = 0.0;
  for (size_t i = 0; i < examples.size(); ++i) {
    const Prediction pred = fold_table(model, examples[i], sym[i]);
    if (model.kind == TaskKind::multidigit_sum) {
      fine += fine_score(pred.digits, examples[i].label_digits);
      if (pred.digits == examples[i].label_digits) ++hits;
    } else if (pred.label == examples[i].label) {
      ++hits;
    }
  }
  EvalResult res;
  res.task_acc = examples.empty() ? 0.0 : static_cast<double>(hits) / examples.size();
  if (model.kind == TaskKind::multidigit_sum && !examples.empty())
    res.fine_acc = fine / static_cast<double>(examples.size());
  return res;
}

}  // namespace nesy
