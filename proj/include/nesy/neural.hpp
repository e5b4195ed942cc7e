#ifndef NESY_NEURAL_HPP
#define NESY_NEURAL_HPP

#include <string>
#include <vector>

#include "nesy/data.hpp"
#include "nesy/perception.hpp"

namespace nesy {

constexpr int kRnnHidden = 80;

/// Pixel-only view of the composed stores: trainers gather image rows
/// through this and never see ground-truth image labels.
struct PixelSets {
  const Matrix* digit_train = nullptr;
  const Matrix* digit_test = nullptr;
  const Matrix* op_train = nullptr;
  const Matrix* op_test = nullptr;
};

struct FeedForwardHead {
  Parameter w1, b1, w2, b2;
  int positions = 2;  // image slots feeding the concatenation
};

/// Plain tanh recurrent cell, hidden size 80. Consumes one concatenated
/// embedding group per step (least-significant digit first for sums);
/// emits a digit distribution per step and a final distribution (carry
/// slot for multi-digit sums, odd/even for parity).
struct RecurrentHead {
  Parameter wx, bh;  // [in+80, 80], [1, 80]
  Parameter wo, bo;  // per-step digit logits, empty for parity
  Parameter wf, bf;  // final slot logits
  int in_dim = 0;
  bool step_digits = false;
};

struct NeuralTaskModel {
  TaskKind kind = TaskKind::sum;
  Encoder encoder;
  std::vector<long> alphabet;  // feed-forward tasks only
  FeedForwardHead ff;
  RecurrentHead rnn;

  bool uses_rnn() const {
    return kind == TaskKind::multidigit_sum || kind == TaskKind::parity;
  }
  std::vector<Parameter*> param_ptrs();
  std::vector<Parameter*> head_param_ptrs();
};

struct NeuralConfig {
  int epochs = 20;
  double lr = 1e-3;
  int batch = 64;
  uint64_t seed = 0;
  int ff_hidden = 256;
};

NeuralTaskModel make_neural_model(TaskKind kind, const std::vector<long>& alphabet,
                                  EncoderKind enc_kind, int ff_hidden, Rng& rng);

struct MetricRow {
  int epoch = 0;
  std::string split;
  double task_acc = 0.0;
  double fine_acc = -1.0;  // -1 = not applicable (blank in CSV)
  double seconds = 0.0;
};

struct PretrainResult {
  WeightArchive archive;
  std::vector<MetricRow> trace;
};

/// Cross-entropy training on downstream labels. The shared encoder runs on
/// every image position; gradients from all positions accumulate into it.
PretrainResult pretrain(NeuralTaskModel& model, const TaskData& data, const PixelSets& pixels,
                        const NeuralConfig& cfg);

struct Prediction {
  long label = 0;
  std::vector<int> digits;  // multidigit: n+1 slots, most significant first
};

Prediction predict_neural(NeuralTaskModel& model, const TaskExample& ex, const PixelSets& pixels,
                          bool test_split);

struct EvalResult {
  double task_acc = 0.0;
  double fine_acc = -1.0;
};

EvalResult evaluate_neural(NeuralTaskModel& model, const std::vector<TaskExample>& examples,
                           const PixelSets& pixels, bool test_split);

/// Fraction of positions where prediction and truth agree (both most
/// significant first, equal length).
double fine_score(const std::vector<int>& predicted, const std::vector<int>& truth);

/// Groups example indices into equal-arity batches (sequence tasks may mix
/// lengths inside one epoch).
std::vector<std::vector<size_t>> make_batches(const std::vector<TaskExample>& exs,
                                              std::vector<size_t> order, int batch);

}  // namespace nesy

#endif  // NESY_NEURAL_HPP
