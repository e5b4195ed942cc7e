#include <algorithm>
#include <chrono>
#include <numeric>

#include "nesy/neural.hpp"

namespace nesy {

namespace {

double now_seconds() {
  return std::chrono::duration<double>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

const Matrix& pixels_for(const PixelSets& pixels, Role role, bool test_split) {
  const Matrix* m = nullptr;
  if (role == Role::digit) m = test_split ? pixels.digit_test : pixels.digit_train;
  else m = test_split ? pixels.op_test : pixels.op_train;
  if (!m) throw ContractError("pixel set missing for requested role/split");
  return *m;
}

Matrix gather_rows(const Matrix& src, const std::vector<TaskExample>& exs,
                   const std::vector<size_t>& batch, size_t position) {
  Matrix out(static_cast<Index>(batch.size()), src.cols());
  for (size_t i = 0; i < batch.size(); ++i)
    out.row(static_cast<Index>(i)) = src.row(exs[batch[i]].inputs[position]);
  return out;
}

}  // namespace

std::vector<Parameter*> NeuralTaskModel::head_param_ptrs() {
  std::vector<Parameter*> out;
  if (uses_rnn()) {
    out = {&rnn.wx, &rnn.bh, &rnn.wf, &rnn.bf};
    if (rnn.step_digits) {
      out.push_back(&rnn.wo);
      out.push_back(&rnn.bo);
    }
  } else {
    out = {&ff.w1, &ff.b1, &ff.w2, &ff.b2};
  }
  return out;
}

std::vector<Parameter*> NeuralTaskModel::param_ptrs() {
  std::vector<Parameter*> out = encoder.param_ptrs();
  for (auto* p : head_param_ptrs()) out.push_back(p);
  return out;
}

NeuralTaskModel make_neural_model(TaskKind kind, const std::vector<long>& alphabet,
                                  EncoderKind enc_kind, int ff_hidden, Rng& rng) {
  NeuralTaskModel m;
  m.kind = kind;
  m.encoder = make_encoder(enc_kind, rng);
  m.alphabet = alphabet;
  if (kind == TaskKind::sum || kind == TaskKind::multiop) {
    if (alphabet.size() < 2) throw ConfigError("feed-forward head needs a label alphabet");
    m.ff.positions = kind == TaskKind::sum ? 2 : 3;
    const int in = m.ff.positions * kEmbedDim;
    const int out = static_cast<int>(alphabet.size());
    m.ff.w1 = xavier_uniform("head.l1.w", in, ff_hidden, rng);
    m.ff.b1 = zero_param("head.l1.b", 1, ff_hidden);
    m.ff.w2 = xavier_uniform("head.out.w", ff_hidden, out, rng);
    m.ff.b2 = zero_param("head.out.b", 1, out);
  } else {
    m.rnn.step_digits = kind == TaskKind::multidigit_sum;
    m.rnn.in_dim = m.rnn.step_digits ? 2 * kEmbedDim : kEmbedDim;
    m.rnn.wx = xavier_uniform("head.rnn.wx", m.rnn.in_dim + kRnnHidden, kRnnHidden, rng);
    m.rnn.bh = zero_param("head.rnn.bh", 1, kRnnHidden);
    if (m.rnn.step_digits) {
      m.rnn.wo = xavier_uniform("head.rnn.wo", kRnnHidden, 10, rng);
      m.rnn.bo = zero_param("head.rnn.bo", 1, 10);
    }
    const int final_out = m.rnn.step_digits ? 10 : 2;
    m.rnn.wf = xavier_uniform("head.rnn.wf", kRnnHidden, final_out, rng);
    m.rnn.bf = zero_param("head.rnn.bf", 1, final_out);
  }
  return m;
}

namespace {

// Forward for fixed-arity heads: per-position encode, concat, 2-layer MLP.
Tensor ff_logits(NeuralTaskModel& model, Tape& tape, const std::vector<TaskExample>& exs,
                 const std::vector<size_t>& batch, const PixelSets& pixels, bool test_split) {
  std::vector<Tensor> embeds;
  const size_t positions = exs[batch[0]].inputs.size();
  for (size_t pos = 0; pos < positions; ++pos) {
    const Matrix& src = pixels_for(pixels, exs[batch[0]].roles[pos], test_split);
    embeds.push_back(encode(tape, model.encoder, gather_rows(src, exs, batch, pos)));
  }
  Tensor h = relu(affine(concat_cols(embeds), model.ff.w1, model.ff.b1));
  return affine(h, model.ff.w2, model.ff.b2);
}

// Recurrent forward. Multidigit consumes digit pairs least-significant
// first and returns n+1 logit groups (carry slot last); parity consumes
// single images and returns one binary logit group.
std::vector<Tensor> rnn_logits(NeuralTaskModel& model, Tape& tape,
                               const std::vector<TaskExample>& exs,
                               const std::vector<size_t>& batch, const PixelSets& pixels,
                               bool test_split) {
  RecurrentHead& rnn = model.rnn;
  const size_t arity = exs[batch[0]].inputs.size();
  const Index b = static_cast<Index>(batch.size());
  Tensor h = tape.input(Matrix::Zero(b, kRnnHidden));
  std::vector<Tensor> outs;
  const Matrix& src = pixels_for(pixels, Role::digit, test_split);
  if (rnn.step_digits) {
    const size_t n = arity / 2;
    for (size_t t = 0; t < n; ++t) {
      const size_t pos_a = n - 1 - t, pos_b = 2 * n - 1 - t;
      Tensor za = encode(tape, model.encoder, gather_rows(src, exs, batch, pos_a));
      Tensor zb = encode(tape, model.encoder, gather_rows(src, exs, batch, pos_b));
      h = tanh(affine(concat_cols({za, zb, h}), rnn.wx, rnn.bh));
      outs.push_back(affine(h, rnn.wo, rnn.bo));
    }
    outs.push_back(affine(h, rnn.wf, rnn.bf));  // carry slot
  } else {
    for (size_t t = 0; t < arity; ++t) {
      Tensor z = encode(tape, model.encoder, gather_rows(src, exs, batch, t));
      h = tanh(affine(concat_cols({z, h}), rnn.wx, rnn.bh));
    }
    outs.push_back(affine(h, rnn.wf, rnn.bf));
  }
  return outs;
}

// Per-slot targets for a recurrent batch: multidigit yields one target list
// per logit group (least-significant digit first, carry last); parity one.
std::vector<std::vector<int>> rnn_targets(const std::vector<TaskExample>& exs,
                                          const std::vector<size_t>& batch, bool step_digits) {
  std::vector<std::vector<int>> targets;
  if (step_digits) {
    const size_t n = exs[batch[0]].inputs.size() / 2;
    for (size_t t = 0; t < n; ++t) {
      std::vector<int> slot;
      for (size_t ex : batch) slot.push_back(exs[ex].label_digits[n - t]);
      targets.push_back(std::move(slot));
    }
    std::vector<int> carry;
    for (size_t ex : batch) carry.push_back(exs[ex].label_digits[0]);
    targets.push_back(std::move(carry));
  } else {
    std::vector<int> bit;
    for (size_t ex : batch) bit.push_back(static_cast<int>(exs[ex].label));
    targets.push_back(std::move(bit));
  }
  return targets;
}

}  // namespace

std::vector<std::vector<size_t>> make_batches(const std::vector<TaskExample>& exs,
                                              std::vector<size_t> order, int batch) {
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
    return exs[a].inputs.size() < exs[b].inputs.size();
  });
  std::vector<std::vector<size_t>> batches;
  size_t i = 0;
  while (i < order.size()) {
    std::vector<size_t> group;
    const size_t arity = exs[order[i]].inputs.size();
    while (i < order.size() && exs[order[i]].inputs.size() == arity &&
           group.size() < static_cast<size_t>(batch))
      group.push_back(order[i++]);
    batches.push_back(std::move(group));
  }
  return batches;
}

namespace {

struct BatchScore {
  long task_correct = 0;
  double fine_sum = 0.0;
  long count = 0;
};

void score_ff(const Matrix& logits, NeuralTaskModel& model,
              const std::vector<TaskExample>& exs, const std::vector<size_t>& batch,
              BatchScore& score) {
  const std::vector<int> pred = argmax_rows(logits);
  for (size_t i = 0; i < batch.size(); ++i) {
    score.task_correct += model.alphabet[pred[i]] == exs[batch[i]].label ? 1 : 0;
    score.count += 1;
  }
}

void score_rnn(const std::vector<Matrix>& logit_values, bool step_digits,
               const std::vector<TaskExample>& exs, const std::vector<size_t>& batch,
               BatchScore& score) {
  std::vector<std::vector<int>> preds;
  for (const Matrix& m : logit_values) preds.push_back(argmax_rows(m));
  for (size_t i = 0; i < batch.size(); ++i) {
    const TaskExample& ex = exs[batch[i]];
    if (step_digits) {
      const size_t n = ex.inputs.size() / 2;
      std::vector<int> digits(n + 1);
      for (size_t t = 0; t < n; ++t) digits[n - t] = preds[t][i];
      digits[0] = preds[n][i];
      score.task_correct += digits == ex.label_digits ? 1 : 0;
      score.fine_sum += fine_score(digits, ex.label_digits);
    } else {
      score.task_correct += preds[0][i] == ex.label ? 1 : 0;
    }
    score.count += 1;
  }
}

}  // namespace

double fine_score(const std::vector<int>& predicted, const std::vector<int>& truth) {
  if (predicted.size() != truth.size() || truth.empty())
    throw ContractError("fine_score: length mismatch");
  int agree = 0;
  for (size_t i = 0; i < truth.size(); ++i) agree += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(agree) / static_cast<double>(truth.size());
}

EvalResult evaluate_neural(NeuralTaskModel& model, const std::vector<TaskExample>& examples,
                           const PixelSets& pixels, bool test_split) {
  if (examples.empty()) throw ContractError("evaluate_neural: no examples");
  std::vector<size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  BatchScore score;
  for (const auto& batch : make_batches(examples, order, 256)) {
    Tape tape;
    if (model.uses_rnn()) {
      std::vector<Matrix> values;
      for (const Tensor& t : rnn_logits(model, tape, examples, batch, pixels, test_split))
        values.push_back(t.value());
      score_rnn(values, model.rnn.step_digits, examples, batch, score);
    } else {
      score_ff(ff_logits(model, tape, examples, batch, pixels, test_split).value(), model,
               examples, batch, score);
    }
  }
  EvalResult r;
  r.task_acc = static_cast<double>(score.task_correct) / static_cast<double>(score.count);
  if (model.kind == TaskKind::multidigit_sum)
    r.fine_acc = score.fine_sum / static_cast<double>(score.count);
  return r;
}

Prediction predict_neural(NeuralTaskModel& model, const TaskExample& ex, const PixelSets& pixels,
                          bool test_split) {
  std::vector<TaskExample> one = {ex};
  std::vector<size_t> batch = {0};
  Tape tape;
  Prediction pred;
  if (model.uses_rnn()) {
    std::vector<Matrix> values;
    for (const Tensor& t : rnn_logits(model, tape, one, batch, pixels, test_split))
      values.push_back(t.value());
    if (model.rnn.step_digits) {
      const size_t n = ex.inputs.size() / 2;
      pred.digits.assign(n + 1, 0);
      for (size_t t = 0; t < n; ++t) pred.digits[n - t] = argmax_rows(values[t])[0];
      pred.digits[0] = argmax_rows(values[n])[0];
      long v = 0;
      for (int d : pred.digits) v = v * 10 + d;
      pred.label = v;
    } else {
      pred.label = argmax_rows(values[0])[0];
    }
  } else {
    const Matrix logits = ff_logits(model, tape, one, batch, pixels, test_split).value();
    pred.label = model.alphabet[static_cast<size_t>(argmax_rows(logits)[0])];
  }
  return pred;
}

PretrainResult pretrain(NeuralTaskModel& model, const TaskData& data, const PixelSets& pixels,
                        const NeuralConfig& cfg) {
  if (data.train.empty()) throw ContractError("pretrain: no training examples");
  Rng rng(cfg.seed);
  AdamConfig adam;
  adam.lr = cfg.lr;
  auto params = model.param_ptrs();

  // Feed-forward targets are alphabet class indices, fixed up front.
  std::vector<int> ff_targets;
  if (!model.uses_rnn())
    for (const auto& ex : data.train)
      ff_targets.push_back(class_index(model.alphabet, ex.label));

  PretrainResult result;
  std::vector<size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double t0 = now_seconds();
    std::shuffle(order.begin(), order.end(), rng);
    BatchScore train_score;
    int batch_no = 0;
    for (const auto& batch : make_batches(data.train, order, cfg.batch)) {
      ++batch_no;
      try {
        Tape tape;
        Tensor loss;
        if (model.uses_rnn()) {
          const auto logits = rnn_logits(model, tape, data.train, batch, pixels, false);
          const auto targets = rnn_targets(data.train, batch, model.rnn.step_digits);
          std::vector<Tensor> parts;
          for (size_t slot = 0; slot < logits.size(); ++slot)
            parts.push_back(nll(log_softmax(logits[slot]), targets[slot]));
          loss = mean_of(parts);
          std::vector<Matrix> values;
          for (const Tensor& t : logits) values.push_back(t.value());
          score_rnn(values, model.rnn.step_digits, data.train, batch, train_score);
        } else {
          Tensor logits = ff_logits(model, tape, data.train, batch, pixels, false);
          std::vector<int> targets;
          for (size_t ex : batch) targets.push_back(ff_targets[ex]);
          loss = nll(log_softmax(logits), targets);
          score_ff(logits.value(), model, data.train, batch, train_score);
        }
        if (!std::isfinite(loss.value()(0, 0)))
          throw NumericError("non-finite loss");
        tape.backward(loss);
        adam_step(params, adam);
      } catch (const NumericError& e) {
        throw NumericError("pretrain aborted at epoch " + std::to_string(epoch) + " batch " +
                           std::to_string(batch_no) + ": " + e.what());
      }
    }
    const double train_secs = now_seconds() - t0;

    MetricRow train_row;
    train_row.epoch = epoch;
    train_row.split = "train";
    train_row.task_acc =
        static_cast<double>(train_score.task_correct) / static_cast<double>(train_score.count);
    if (model.kind == TaskKind::multidigit_sum)
      train_row.fine_acc = train_score.fine_sum / static_cast<double>(train_score.count);
    train_row.seconds = train_secs;
    result.trace.push_back(train_row);

    const double e0 = now_seconds();
    EvalResult test = evaluate_neural(model, data.test, pixels, true);
    MetricRow test_row;
    test_row.epoch = epoch;
    test_row.split = "test";
    test_row.task_acc = test.task_acc;
    test_row.fine_acc = test.fine_acc;
    test_row.seconds = now_seconds() - e0;
    result.trace.push_back(test_row);
  }

  std::vector<const Parameter*> to_save;
  for (auto* p : params) to_save.push_back(p);
  result.archive = collect_weights(to_save);
  return result;
}

}  // namespace nesy
