#include <algorithm>
#include <numeric>

#include "nesy/data.hpp"

namespace nesy {

TaskKind task_kind_of(const std::string& name) {
  if (name == "sum") return TaskKind::sum;
  if (name == "multidigit_sum") return TaskKind::multidigit_sum;
  if (name == "multiop") return TaskKind::multiop;
  if (name == "parity") return TaskKind::parity;
  throw ConfigError("unknown task: " + name);
}

std::string task_kind_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::sum: return "sum";
    case TaskKind::multidigit_sum: return "multidigit_sum";
    case TaskKind::multiop: return "multiop";
    case TaskKind::parity: return "parity";
  }
  throw ContractError("task_kind_name: bad kind");
}

long apply_op(int op_label, int a, int b) {
  switch (op_label) {
    case 1: return a + b;
    case 2: return a - b;
    case 3: return static_cast<long>(a) * b;
    case 4:
      if (b == 0 || a % b != 0) throw DomainError("apply_op: invalid division");
      return a / b;
  }
  throw DomainError("apply_op: op label " + std::to_string(op_label));
}

namespace {

// Draws image indices without replacement; cycling pools reshuffle when
// exhausted (used for test-time long sequences), strict pools throw.
class Pool {
 public:
  Pool(std::vector<int> order, Rng& rng, bool cycle, std::string name)
      : order_(std::move(order)), rng_(&rng), cycle_(cycle), name_(std::move(name)) {
    if (order_.empty()) throw ContractError(name_ + ": empty image pool");
    std::shuffle(order_.begin(), order_.end(), *rng_);
  }

  int next() {
    refill();
    return order_[cursor_++];
  }

  /// First remaining index whose label satisfies `pred`; -1 when none left.
  /// Cycling pools start a fresh pass before giving up, so a thin pass tail
  /// cannot starve the search.
  template <class Pred>
  int next_where(Pred pred, const std::vector<int>& labels) {
    refill();
    for (int pass = 0; pass < 2; ++pass) {
      for (size_t i = cursor_; i < order_.size(); ++i) {
        if (pred(labels[static_cast<size_t>(order_[i])])) {
          std::swap(order_[cursor_], order_[i]);
          return order_[cursor_++];
        }
      }
      if (!cycle_ || pass == 1) break;
      std::shuffle(order_.begin(), order_.end(), *rng_);
      cursor_ = 0;
    }
    return -1;
  }

  void put_back(int idx) { order_.push_back(idx); }

 private:
  void refill() {
    if (cursor_ < order_.size()) return;
    if (!cycle_) throw ContractError(name_ + ": image pool exhausted");
    std::shuffle(order_.begin(), order_.end(), *rng_);
    cursor_ = 0;
  }

  std::vector<int> order_;
  size_t cursor_ = 0;
  Rng* rng_;
  bool cycle_;
  std::string name_;
};

std::vector<int> all_indices(const ImageStore& s) {
  std::vector<int> v(static_cast<size_t>(s.count()));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

std::vector<int> indices_with_labels(const ImageStore& s, const std::vector<int>& keep) {
  std::vector<int> v;
  for (Index i = 0; i < s.count(); ++i)
    for (int k : keep)
      if (s.labels[static_cast<size_t>(i)] == k) {
        v.push_back(static_cast<int>(i));
        break;
      }
  return v;
}

std::vector<TaskExample> compose_sum(const ImageStore& store, long count, Pool& pool) {
  std::vector<TaskExample> out;
  out.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i) {
    TaskExample ex;
    ex.inputs = {pool.next(), pool.next()};
    ex.roles = {Role::digit, Role::digit};
    ex.label = store.labels[static_cast<size_t>(ex.inputs[0])] +
               store.labels[static_cast<size_t>(ex.inputs[1])];
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> compose_multiop(const ImageStore& digits, const ImageStore& ops,
                                         long count, Pool& digit_pool, Pool& op_pool) {
  std::vector<TaskExample> out;
  out.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i) {
    const int op_idx = op_pool.next();
    const int op = ops.labels[static_cast<size_t>(op_idx)];
    int a_idx = -1, b_idx = -1;
    if (op == 4) {
      for (int attempt = 0; attempt < 50 && b_idx < 0; ++attempt) {
        a_idx = digit_pool.next();
        const int a = digits.labels[static_cast<size_t>(a_idx)];
        b_idx = digit_pool.next_where([a](int b) { return b != 0 && a % b == 0; },
                                      digits.labels);
        if (b_idx < 0) digit_pool.put_back(a_idx);
      }
      if (b_idx < 0) throw ContractError("multiop: no valid divisor pair left");
    } else {
      a_idx = digit_pool.next();
      b_idx = digit_pool.next();
    }
    TaskExample ex;
    ex.inputs = {a_idx, op_idx, b_idx};
    ex.roles = {Role::digit, Role::op, Role::digit};
    ex.label = apply_op(op, digits.labels[static_cast<size_t>(a_idx)],
                        digits.labels[static_cast<size_t>(b_idx)]);
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> compose_multidigit(const ImageStore& store, long count, int n_digits,
                                            Pool& pool) {
  std::vector<TaskExample> out;
  out.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i) {
    TaskExample ex;
    std::vector<int> a(n_digits), b(n_digits);
    for (int d = 0; d < n_digits; ++d) {
      ex.inputs.push_back(pool.next());
      a[d] = store.labels[static_cast<size_t>(ex.inputs.back())];
    }
    for (int d = 0; d < n_digits; ++d) {
      ex.inputs.push_back(pool.next());
      b[d] = store.labels[static_cast<size_t>(ex.inputs.back())];
    }
    ex.roles.assign(ex.inputs.size(), Role::digit);
    // Schoolbook addition, most significant digit first, leading carry kept.
    ex.label_digits.assign(static_cast<size_t>(n_digits) + 1, 0);
    int carry = 0;
    for (int d = n_digits - 1; d >= 0; --d) {
      const int s = a[d] + b[d] + carry;
      ex.label_digits[static_cast<size_t>(d) + 1] = s % 10;
      carry = s / 10;
    }
    ex.label_digits[0] = carry;
    long value = 0;
    for (int digit : ex.label_digits) value = value * 10 + digit;
    ex.label = value;
    out.push_back(std::move(ex));
  }
  return out;
}

std::vector<TaskExample> compose_parity(const ImageStore& store, long count, int max_len,
                                        bool mixed_lengths, Pool& pool, Rng& rng) {
  std::vector<TaskExample> out;
  out.reserve(static_cast<size_t>(count));
  for (long i = 0; i < count; ++i) {
    const int len =
        mixed_lengths ? 1 + static_cast<int>(rng() % static_cast<uint64_t>(max_len)) : max_len;
    TaskExample ex;
    int ones = 0;
    for (int p = 0; p < len; ++p) {
      ex.inputs.push_back(pool.next());
      ones += store.labels[static_cast<size_t>(ex.inputs.back())];
    }
    ex.roles.assign(ex.inputs.size(), Role::digit);
    ex.label = ones % 2;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace

TaskData compose_task(const ImageStore& digit_train, const ImageStore& digit_test,
                      const ImageStore* op_train, const ImageStore* op_test,
                      const TaskSpec& spec) {
  Rng rng(spec.pairing_seed);
  TaskData data;
  switch (spec.kind) {
    case TaskKind::sum: {
      Pool train(all_indices(digit_train), rng, false, "sum train");
      data.train = compose_sum(digit_train, spec.train_size, train);
      Pool test(all_indices(digit_test), rng, true, "sum test");
      data.test = compose_sum(digit_test, spec.test_size, test);
      break;
    }
    case TaskKind::multiop: {
      if (!op_train || !op_test) throw ContractError("multiop: operator stores required");
      const std::vector<int> op_classes = {1, 2, 3, 4};
      Pool dtrain(all_indices(digit_train), rng, false, "multiop digits train");
      Pool otrain(indices_with_labels(*op_train, op_classes), rng, false, "multiop ops train");
      data.train = compose_multiop(digit_train, *op_train, spec.train_size, dtrain, otrain);
      Pool dtest(all_indices(digit_test), rng, true, "multiop digits test");
      Pool otest(indices_with_labels(*op_test, op_classes), rng, true, "multiop ops test");
      data.test = compose_multiop(digit_test, *op_test, spec.test_size, dtest, otest);
      break;
    }
    case TaskKind::multidigit_sum: {
      Pool train(all_indices(digit_train), rng, false, "multidigit train");
      data.train = compose_multidigit(digit_train, spec.train_size, spec.train_digits, train);
      Pool test(all_indices(digit_test), rng, true, "multidigit test");
      data.test = compose_multidigit(digit_test, spec.test_size, spec.test_digits, test);
      break;
    }
    case TaskKind::parity: {
      const std::vector<int> bits = {0, 1};
      Pool train(indices_with_labels(digit_train, bits), rng, false, "parity train");
      data.train = compose_parity(digit_train, spec.train_size, spec.train_digits, true, train, rng);
      Pool test(indices_with_labels(digit_test, bits), rng, true, "parity test");
      data.test = compose_parity(digit_test, spec.test_size, spec.test_digits, false, test, rng);
      break;
    }
  }
  return data;
}

std::vector<long> label_alphabet(const std::vector<TaskExample>& examples) {
  std::vector<long> labels;
  labels.reserve(examples.size());
  for (const auto& ex : examples) labels.push_back(ex.label);
  std::sort(labels.begin(), labels.end());
  labels.erase(std::unique(labels.begin(), labels.end()), labels.end());
  return labels;
}

int class_index(const std::vector<long>& alphabet, long label) {
  const auto it = std::lower_bound(alphabet.begin(), alphabet.end(), label);
  if (it == alphabet.end() || *it != label)
    throw LookupError("label " + std::to_string(label) + " not in alphabet");
  return static_cast<int>(it - alphabet.begin());
}

}  // namespace nesy
