#include <algorithm>
#include <numeric>

#include "nesy/prob.hpp"

namespace nesy {

namespace {

void check_digit_rows(const Tensor& t, const char* op, Index k) {
  if (t.cols() != k)
    throw DimensionError(std::string(op) + ": expected " + std::to_string(k) +
                         " symbol columns, got " + shape_str(t.value()));
}

}  // namespace

Tensor sum_label_prob(const Tensor& p, const Tensor& q, const std::vector<int>& z) {
  Tape& t = *p.tape();
  check_digit_rows(p, "sum_label_prob", 10);
  check_digit_rows(q, "sum_label_prob", 10);
  if (p.rows() != q.rows() || static_cast<Index>(z.size()) != p.rows())
    throw DimensionError("sum_label_prob: batch mismatch");
  for (int zi : z)
    if (zi < 0 || zi > 18)
      throw DomainError("sum_label_prob: label " + std::to_string(zi) + " outside 0..18");

  const Matrix& pv = p.value();
  const Matrix& qv = q.value();
  Matrix out(p.rows(), 1);
  for (Index i = 0; i < p.rows(); ++i) {
    double acc = 0.0;
    const int zi = z[static_cast<size_t>(i)];
    for (int a = std::max(0, zi - 9); a <= std::min(9, zi); ++a)
      acc += pv(i, a) * qv(i, zi - a);
    out(i, 0) = acc;
  }
  const int pi = p.id(), qi = q.id();
  return t.node(std::move(out), {pi, qi}, [pi, qi, z](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& pv = tp.value_of(pi);
    const Matrix& qv = tp.value_of(qi);
    const bool wp = tp.wants_grad(pi), wq = tp.wants_grad(qi);
    if (!wp && !wq) return;
    for (Index i = 0; i < pv.rows(); ++i) {
      const int zi = z[static_cast<size_t>(i)];
      const double gi = g(i, 0);
      for (int a = std::max(0, zi - 9); a <= std::min(9, zi); ++a) {
        if (wp) tp.grad_of(pi)(i, a) += gi * qv(i, zi - a);
        if (wq) tp.grad_of(qi)(i, zi - a) += gi * pv(i, a);
      }
    }
  });
}

Tensor multiop_label_prob(const Tensor& p, const Tensor& q, const Tensor& op,
                          const std::vector<long>& z) {
  Tape& t = *p.tape();
  check_digit_rows(p, "multiop_label_prob", 10);
  check_digit_rows(q, "multiop_label_prob", 10);
  check_digit_rows(op, "multiop_label_prob", 4);
  if (p.rows() != q.rows() || p.rows() != op.rows() ||
      static_cast<Index>(z.size()) != p.rows())
    throw DimensionError("multiop_label_prob: batch mismatch");

  const Matrix& pv = p.value();
  const Matrix& qv = q.value();
  const Matrix& ov = op.value();
  // Valid triples per op class: (op, a, b) with a op b defined.
  auto each_triple = [](long zi, auto&& fn) {
    for (int o = 0; o < 4; ++o)
      for (int a = 0; a <= 9; ++a)
        for (int b = 0; b <= 9; ++b) {
          if (o == 3 && (b == 0 || a % b != 0)) continue;
          if (apply_op(o + 1, a, b) == zi) fn(o, a, b);
        }
  };
  Matrix out(p.rows(), 1);
  for (Index i = 0; i < p.rows(); ++i) {
    double acc = 0.0;
    each_triple(z[static_cast<size_t>(i)], [&](int o, int a, int b) {
      acc += pv(i, a) * qv(i, b) * ov(i, o);
    });
    out(i, 0) = acc;
  }
  const int pi = p.id(), qi = q.id(), oi = op.id();
  return t.node(std::move(out), {pi, qi, oi}, [pi, qi, oi, z, each_triple](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& pv = tp.value_of(pi);
    const Matrix& qv = tp.value_of(qi);
    const Matrix& ov = tp.value_of(oi);
    const bool wp = tp.wants_grad(pi), wq = tp.wants_grad(qi), wo = tp.wants_grad(oi);
    if (!wp && !wq && !wo) return;
    for (Index i = 0; i < pv.rows(); ++i) {
      const double gi = g(i, 0);
      each_triple(z[static_cast<size_t>(i)], [&](int o, int a, int b) {
        if (wp) tp.grad_of(pi)(i, a) += gi * qv(i, b) * ov(i, o);
        if (wq) tp.grad_of(qi)(i, b) += gi * pv(i, a) * ov(i, o);
        if (wo) tp.grad_of(oi)(i, o) += gi * pv(i, a) * qv(i, b);
      });
    }
  });
}

Tensor multidigit_label_prob(const std::vector<Tensor>& ps, const std::vector<Tensor>& qs,
                             const std::vector<std::vector<int>>& labels_msf) {
  if (ps.empty() || ps.size() != qs.size())
    throw DomainError("multidigit_label_prob: need matching nonempty position lists");
  const size_t n = ps.size();
  Tape& t = *ps[0].tape();
  const Index b = ps[0].rows();
  for (size_t i = 0; i < n; ++i) {
    check_digit_rows(ps[i], "multidigit_label_prob", 10);
    check_digit_rows(qs[i], "multidigit_label_prob", 10);
    if (ps[i].rows() != b || qs[i].rows() != b)
      throw DimensionError("multidigit_label_prob: batch mismatch");
  }
  if (static_cast<Index>(labels_msf.size()) != b)
    throw DimensionError("multidigit_label_prob: label batch mismatch");
  for (const auto& lab : labels_msf) {
    if (lab.size() != n + 1)
      throw DomainError("multidigit_label_prob: label length " + std::to_string(lab.size()) +
                        ", expected " + std::to_string(n + 1));
    for (int d : lab)
      if (d < 0 || d > 9) throw DomainError("multidigit_label_prob: bad digit");
  }

  std::vector<int> pids(n), qids(n);
  for (size_t i = 0; i < n; ++i) {
    pids[i] = ps[i].id();
    qids[i] = qs[i].id();
  }

  // Forward DP over carries; keep every f-table for the adjoint sweep.
  // f[t][c] = mass of emitting the last t output digits ending in carry c.
  std::vector<Matrix> f(n + 1, Matrix::Zero(b, 2));
  f[0].col(0).setOnes();
  for (size_t step = 0; step < n; ++step) {
    const Matrix& pv = ps[step].value();
    const Matrix& qv = qs[step].value();
    for (Index row = 0; row < b; ++row) {
      const int digit = labels_msf[static_cast<size_t>(row)][n - step];
      for (int c = 0; c < 2; ++c) {
        const double mass = f[step](row, c);
        if (mass == 0.0) continue;
        for (int a = 0; a <= 9; ++a) {
          const int bd = ((digit - a - c) % 10 + 10) % 10;
          const int cnext = (a + bd + c) / 10;
          f[step + 1](row, cnext) += mass * pv(row, a) * qv(row, bd);
        }
      }
    }
  }
  Matrix out(b, 1);
  for (Index row = 0; row < b; ++row) {
    const int lead = labels_msf[static_cast<size_t>(row)][0];
    out(row, 0) = lead <= 1 ? f[n](row, lead) : 0.0;
  }

  std::vector<int> parents = pids;
  parents.insert(parents.end(), qids.begin(), qids.end());
  return t.node(std::move(out), parents,
                [pids, qids, labels_msf, f, n, b](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    // Reverse DP: bk[t][c] = d(result)/d(f[t][c]).
    std::vector<Matrix> bk(n + 1, Matrix::Zero(b, 2));
    for (Index row = 0; row < b; ++row) {
      const int lead = labels_msf[static_cast<size_t>(row)][0];
      if (lead <= 1) bk[n](row, lead) = 1.0;
    }
    for (size_t step = n; step-- > 0;) {
      const Matrix& pv = tp.value_of(pids[step]);
      const Matrix& qv = tp.value_of(qids[step]);
      const bool wp = tp.wants_grad(pids[step]), wq = tp.wants_grad(qids[step]);
      for (Index row = 0; row < b; ++row) {
        const int digit = labels_msf[static_cast<size_t>(row)][n - step];
        const double gi = g(row, 0);
        for (int c = 0; c < 2; ++c) {
          double bsum = 0.0;
          for (int a = 0; a <= 9; ++a) {
            const int bd = ((digit - a - c) % 10 + 10) % 10;
            const int cnext = (a + bd + c) / 10;
            const double down = bk[step + 1](row, cnext);
            bsum += down * pv(row, a) * qv(row, bd);
            const double w = f[step](row, c) * down * gi;
            if (w != 0.0) {
              if (wp) tp.grad_of(pids[step])(row, a) += w * qv(row, bd);
              if (wq) tp.grad_of(qids[step])(row, bd) += w * pv(row, a);
            }
          }
          bk[step](row, c) = bsum;
        }
      }
    }
  });
}

Tensor prob_nll(const Tensor& probs, double eps) {
  return scale(sum_all(log_guard(probs, eps)), -1.0 / static_cast<double>(probs.rows()));
}

std::vector<Parameter*> ProbModel::param_ptrs() {
  std::vector<Parameter*> out = encoder.param_ptrs();
  out.push_back(&digit_head.w);
  out.push_back(&digit_head.b);
  if (kind == TaskKind::multiop) {
    out.push_back(&op_head.w);
    out.push_back(&op_head.b);
  }
  return out;
}

ProbModel make_prob_model(TaskKind kind, EncoderKind enc_kind, Rng& rng) {
  if (kind == TaskKind::parity)
    throw ConfigError("probabilistic engine does not cover parity");
  ProbModel m;
  m.kind = kind;
  m.encoder = make_encoder(enc_kind, rng);
  m.digit_head = make_symbol_head(10, rng, "f_m.");
  if (kind == TaskKind::multiop) m.op_head = make_symbol_head(4, rng, "f_m.op.");
  return m;
}

Tensor embed_position(Tape& tape, Encoder& enc, const FeatureSource& src, Role role,
                      const std::vector<TaskExample>& exs, const std::vector<size_t>& batch,
                      size_t position) {
  const Matrix* cache = role == Role::digit ? src.digit_cache : src.op_cache;
  const Matrix* images = role == Role::digit ? src.digit_images : src.op_images;
  if (cache) {
    Matrix rows(static_cast<Index>(batch.size()), cache->cols());
    for (size_t i = 0; i < batch.size(); ++i)
      rows.row(static_cast<Index>(i)) = cache->row(exs[batch[i]].inputs[position]);
    return tape.input(std::move(rows));
  }
  if (!images) throw ContractError("embed_position: neither cache nor images provided");
  Matrix rows(static_cast<Index>(batch.size()), images->cols());
  for (size_t i = 0; i < batch.size(); ++i)
    rows.row(static_cast<Index>(i)) = images->row(exs[batch[i]].inputs[position]);
  return encode(tape, enc, rows);
}

namespace {

Tensor batch_likelihood(ProbModel& model, Tape& tape, const std::vector<TaskExample>& exs,
                        const std::vector<size_t>& batch, const FeatureSource& src) {
  switch (model.kind) {
    case TaskKind::sum: {
      Tensor p = map_symbols(tape, model.digit_head,
                             embed_position(tape, model.encoder, src, Role::digit, exs, batch, 0));
      Tensor q = map_symbols(tape, model.digit_head,
                             embed_position(tape, model.encoder, src, Role::digit, exs, batch, 1));
      std::vector<int> z;
      for (size_t ex : batch) z.push_back(static_cast<int>(exs[ex].label));
      return sum_label_prob(p, q, z);
    }
    case TaskKind::multiop: {
      Tensor p = map_symbols(tape, model.digit_head,
                             embed_position(tape, model.encoder, src, Role::digit, exs, batch, 0));
      Tensor o = map_symbols(tape, model.op_head,
                             embed_position(tape, model.encoder, src, Role::op, exs, batch, 1));
      Tensor q = map_symbols(tape, model.digit_head,
                             embed_position(tape, model.encoder, src, Role::digit, exs, batch, 2));
      std::vector<long> z;
      for (size_t ex : batch) z.push_back(exs[ex].label);
      return multiop_label_prob(p, q, o, z);
    }
    case TaskKind::multidigit_sum: {
      const size_t n = exs[batch[0]].inputs.size() / 2;
      std::vector<Tensor> ps, qs;
      for (size_t t = 0; t < n; ++t) {
        ps.push_back(map_symbols(tape, model.digit_head,
                                 embed_position(tape, model.encoder, src, Role::digit, exs,
                                                batch, n - 1 - t)));
        qs.push_back(map_symbols(tape, model.digit_head,
                                 embed_position(tape, model.encoder, src, Role::digit, exs,
                                                batch, 2 * n - 1 - t)));
      }
      std::vector<std::vector<int>> labels;
      for (size_t ex : batch) labels.push_back(exs[ex].label_digits);
      return multidigit_label_prob(ps, qs, labels);
    }
    case TaskKind::parity:
      break;
  }
  throw ContractError("batch_likelihood: unsupported task");
}

}  // namespace

double prob_train_step(ProbModel& model, const std::vector<TaskExample>& exs,
                       const std::vector<size_t>& batch, const FeatureSource& src,
                       const AdamConfig& adam) {
  Tape tape;
  Tensor loss = prob_nll(batch_likelihood(model, tape, exs, batch, src));
  const double value = loss.value()(0, 0);
  if (!std::isfinite(value)) throw NumericError("prob_train_step: non-finite loss");
  tape.backward(loss);
  adam_step(model.param_ptrs(), adam);
  return value;
}

double prob_train_epoch(ProbModel& model, const std::vector<TaskExample>& exs,
                        const FeatureSource& src, const AdamConfig& adam, int batch, Rng& rng) {
  std::vector<size_t> order(exs.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  double total = 0.0;
  long batches = 0;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
    const size_t stop = std::min(order.size(), start + static_cast<size_t>(batch));
    std::vector<size_t> group(order.begin() + static_cast<long>(start),
                              order.begin() + static_cast<long>(stop));
    total += prob_train_step(model, exs, group, src, adam);
    ++batches;
  }
  return total / static_cast<double>(batches);
}

namespace {

// Batched per-position argmax symbols: [batch index][position].
std::vector<std::vector<int>> argmax_symbol_table(ProbModel& model,
                                                  const std::vector<TaskExample>& exs,
                                                  const std::vector<size_t>& batch,
                                                  const FeatureSource& src) {
  const size_t positions = exs[batch[0]].inputs.size();
  std::vector<std::vector<int>> table(batch.size(), std::vector<int>(positions));
  Tape tape;
  for (size_t pos = 0; pos < positions; ++pos) {
    const Role role = exs[batch[0]].roles[pos];
    SymbolHead& head = role == Role::op ? model.op_head : model.digit_head;
    Tensor probs =
        map_symbols(tape, head, embed_position(tape, model.encoder, src, role, exs, batch, pos));
    const std::vector<int> arg = argmax_rows(probs.value());
    for (size_t i = 0; i < batch.size(); ++i) table[i][pos] = arg[i];
  }
  return table;
}

Prediction symbols_to_prediction(ProbModel& model, const TaskExample& ex,
                                 const std::vector<int>& sym) {
  Prediction pred;
  switch (model.kind) {
    case TaskKind::sum:
      pred.label = sym[0] + sym[1];
      break;
    case TaskKind::multiop: {
      const int op_label = sym[1] + 1;
      if (op_label == 4 && (sym[2] == 0 || sym[0] % sym[2] != 0)) {
        pred.label = kUndefinedLabel;  // division undefined on the argmaxes
      } else {
        pred.label = apply_op(op_label, sym[0], sym[2]);
      }
      break;
    }
    case TaskKind::multidigit_sum: {
      const size_t n = ex.inputs.size() / 2;
      pred.digits.assign(n + 1, 0);
      int carry = 0;
      for (size_t t = 0; t < n; ++t) {  // least significant first
        const int s = sym[n - 1 - t] + sym[2 * n - 1 - t] + carry;
        pred.digits[n - t] = s % 10;
        carry = s / 10;
      }
      pred.digits[0] = carry;
      long v = 0;
      for (int d : pred.digits) v = v * 10 + d;
      pred.label = v;
      break;
    }
    case TaskKind::parity:
      throw ContractError("predict_prob: unsupported task");
  }
  return pred;
}

}  // namespace

Prediction predict_prob(ProbModel& model, const TaskExample& ex, const FeatureSource& src) {
  std::vector<TaskExample> one = {ex};
  const auto table = argmax_symbol_table(model, one, {0}, src);
  return symbols_to_prediction(model, ex, table[0]);
}

EvalResult evaluate_prob(ProbModel& model, const std::vector<TaskExample>& examples,
                         const FeatureSource& src) {
  if (examples.empty()) throw ContractError("evaluate_prob: no examples");
  long correct = 0;
  double fine = 0.0;
  size_t i = 0;
  while (i < examples.size()) {
    // Chunk into equal-arity batches (splits are fixed-arity in practice).
    std::vector<size_t> batch;
    const size_t arity = examples[i].inputs.size();
    while (i < examples.size() && examples[i].inputs.size() == arity && batch.size() < 512)
      batch.push_back(i++);
    const auto table = argmax_symbol_table(model, examples, batch, src);
    for (size_t j = 0; j < batch.size(); ++j) {
      const TaskExample& ex = examples[batch[j]];
      Prediction p = symbols_to_prediction(model, ex, table[j]);
      if (model.kind == TaskKind::multidigit_sum) {
        correct += p.digits == ex.label_digits ? 1 : 0;
        fine += fine_score(p.digits, ex.label_digits);
      } else {
        correct += p.label == ex.label ? 1 : 0;
      }
    }
  }
  EvalResult r;
  r.task_acc = static_cast<double>(correct) / static_cast<double>(examples.size());
  if (model.kind == TaskKind::multidigit_sum)
    r.fine_acc = fine / static_cast<double>(examples.size());
  return r;
}

}  // namespace nesy
