#ifndef NESY_PROB_HPP
#define NESY_PROB_HPP

#include "nesy/data.hpp"
#include "nesy/neural.hpp"
#include "nesy/perception.hpp"

namespace nesy {

// Exact label likelihoods, differentiable through the tape. All take
// probability rows (softmax outputs) and return a [batch, 1] column.

/// P(a + b = z) = sum over digit pairs; z per row in 0..18.
Tensor sum_label_prob(const Tensor& p, const Tensor& q, const std::vector<int>& z);

/// P(a op b = z) over digit/operator triples; division counts only pairs
/// with nonzero, exactly dividing b. Unreachable labels get probability 0.
Tensor multiop_label_prob(const Tensor& p, const Tensor& q, const Tensor& op,
                          const std::vector<long>& z);

/// P(sum of two n-digit numbers = label) via the carry DP over states
/// (position, carry in {0,1}). `ps`/`qs` are the per-position digit
/// distributions least-significant first; labels are n+1 digit strings
/// most significant first (leading carry digit).
Tensor multidigit_label_prob(const std::vector<Tensor>& ps, const std::vector<Tensor>& qs,
                             const std::vector<std::vector<int>>& labels_msf);

/// mean(-log(x + eps)) over a probability column.
Tensor prob_nll(const Tensor& probs, double eps = 1e-12);

/// Exact-inference NeSy model: f_e + per-role symbol heads with k fixed to
/// the true class counts (10 digits, 4 operators).
struct ProbModel {
  TaskKind kind = TaskKind::sum;
  Encoder encoder;
  SymbolHead digit_head;
  SymbolHead op_head;  // multiop only

  std::vector<Parameter*> param_ptrs();
};

ProbModel make_prob_model(TaskKind kind, EncoderKind enc_kind, Rng& rng);

/// Embedding feed for one split: either raw images (encoder runs on tape)
/// or a precomputed [n, 84] cache (frozen encoder shortcut).
struct FeatureSource {
  const Matrix* digit_images = nullptr;
  const Matrix* digit_cache = nullptr;
  const Matrix* op_images = nullptr;
  const Matrix* op_cache = nullptr;
};

/// Per-position embedding rows for a batch, from cache when present.
Tensor embed_position(Tape& tape, Encoder& enc, const FeatureSource& src, Role role,
                      const std::vector<TaskExample>& exs, const std::vector<size_t>& batch,
                      size_t position);

/// One optimizer step on a batch: loss = mean -log(P(label) + 1e-12).
double prob_train_step(ProbModel& model, const std::vector<TaskExample>& exs,
                       const std::vector<size_t>& batch, const FeatureSource& src,
                       const AdamConfig& adam);

/// Full epoch (shuffled batches); returns mean batch loss.
double prob_train_epoch(ProbModel& model, const std::vector<TaskExample>& exs,
                        const FeatureSource& src, const AdamConfig& adam, int batch, Rng& rng);

/// Symbolic inference on per-position argmax symbols through the exact
/// function g; works for any sequence length. Division on a non-dividing
/// argmax pair yields an out-of-alphabet sentinel (counted wrong).
Prediction predict_prob(ProbModel& model, const TaskExample& ex, const FeatureSource& src);

EvalResult evaluate_prob(ProbModel& model, const std::vector<TaskExample>& examples,
                         const FeatureSource& src);

constexpr long kUndefinedLabel = std::numeric_limits<long>::min();

}  // namespace nesy

#endif  // NESY_PROB_HPP
