#ifndef NESY_DSL_HPP
#define NESY_DSL_HPP

#include <iosfwd>
#include <map>
#include <optional>

#include "nesy/prob.hpp"

namespace nesy {

// Deep symbolic learning engine: greedy symbol selection over the f_m
// distributions, product-t-norm truth aggregation, and a learnable rule
// table standing in for the symbolic function g. Multi-digit sums and
// parity run the same table recursively (carry chain / state automaton),
// so inference length is unbounded by training length.

struct GreedyChoice {
  std::vector<int> symbols;  // argmax per position, ties to the lowest index
  std::vector<double> probs;
  double truth = 1.0;  // product of the chosen probabilities
};

GreedyChoice select_symbols(const std::vector<Matrix>& distributions);  // one [1,k] row each
GreedyChoice select_symbols(const Matrix& rows);  // convenience: one position per row

class RuleTable {
 public:
  using Tuple = std::vector<int>;

  struct Entry {
    long output = 0;
    long support = 1;       // observations that agreed with the bound output
    double truth_acc = 0.0;  // summed truth of those observations
    double weight = 0.0;     // decayed truth-weighted holder count
    std::map<long, double> challengers;  // decayed rival counts by output
  };

  /// Training-time bind-or-lookup. Unbound tuples greedily adopt the
  /// observation; bound ones gain support on agreement and otherwise feed
  /// the challenger counts, rebinding once a challenger outweighs the
  /// holder. Returns the output the table stood behind when the
  /// observation arrived (the fresh adoption for unbound tuples).
  long observe(const Tuple& tuple, long observed, double truth);

  /// Inference lookup; nullopt is the explicit unknown-rule outcome.
  std::optional<long> lookup(const Tuple& tuple) const;

  bool bound(const Tuple& tuple) const;
  void decay(double factor);
  size_t size() const { return entries_.size(); }
  const std::map<Tuple, Entry>& entries() const { return entries_; }

  /// One line per entry: `t1,t2[,t3] -> output support truth_acc`.
  void dump(std::ostream& out) const;
  static RuleTable parse(std::istream& in);

 private:
  std::map<Tuple, Entry> entries_;
};

/// Multidigit table outputs pack (column digit, carry out) into one symbol.
long encode_carry(int digit, int carry_out);
int carry_digit(long encoded);
int carry_next(long encoded);

struct DslConfig {
  int symbols = 10;     // f_m head width; >10 gives the open NB(k) regime
  double decay = 0.99;  // per-epoch decay of holder/challenger counts
};

struct DslModel {
  TaskKind kind = TaskKind::sum;
  Encoder encoder;
  SymbolHead digit_head;
  SymbolHead op_head;  // multiop only
  RuleTable table;
  DslConfig cfg;

  std::vector<Parameter*> param_ptrs();
};

DslModel make_dsl_model(TaskKind kind, EncoderKind enc_kind, Rng& rng, DslConfig cfg = {});

/// One optimizer step on a uniform-arity batch. Per example: select
/// symbols, resolve the decomposed targets (direct label for sum/multiop,
/// carry/state chain fitted to the current table for the recursive tasks),
/// feed the table, then score -log(truth) when the table agreed with every
/// target and -log(1 - truth) when it contradicted one.
double dsl_train_step(DslModel& model, const std::vector<TaskExample>& exs,
                      const std::vector<size_t>& batch, const FeatureSource& src,
                      const AdamConfig& adam);

/// Shuffled uniform-arity batches, then one table decay. Returns mean loss.
double dsl_train_epoch(DslModel& model, const std::vector<TaskExample>& exs,
                       const FeatureSource& src, const AdamConfig& adam, int batch, Rng& rng);

/// Pure table-fold inference; any unknown rule poisons the label (counted
/// wrong) but leaves the remaining positions scored for fine accuracy.
Prediction dsl_infer(DslModel& model, const TaskExample& ex, const FeatureSource& src);

EvalResult evaluate_dsl(DslModel& model, const std::vector<TaskExample>& examples,
                        const FeatureSource& src);

}  // namespace nesy

#endif  // NESY_DSL_HPP
