#ifndef NESY_ILR_HPP
#define NESY_ILR_HPP

#include "nesy/prob.hpp"

namespace nesy {

// Fuzzy-logic refinement engine: evaluate propositional knowledge under a
// chosen t-norm semantics and push truth vectors toward satisfying it by
// minimal-change refinement passes stacked like extra network layers.

enum class Semantics { goedel, product, lukasiewicz };

Semantics semantics_of(const std::string& name);
std::string semantics_name(Semantics s);

struct FNode {
  enum class Kind { atom, negate, conj, disj };
  Kind kind = Kind::atom;
  int atom = -1;            // atom nodes
  std::vector<FNode> kids;  // everything else

  int max_atom() const;
};

FNode atom(int index);
FNode f_not(FNode child);
FNode f_and(std::vector<FNode> kids);
FNode f_or(std::vector<FNode> kids);

struct FuzzyFormula {
  FNode root;
  Semantics semantics = Semantics::goedel;
};

/// Concatenated per-position class probabilities, every entry in [0,1].
using TruthVector = Eigen::VectorXd;

/// Truth value in [0,1]. Gödel: And=min, Or=max; product: And=prod,
/// Or=1-prod(1-x); Łukasiewicz: And=max(0, sum-(n-1)), Or=min(1, sum).
/// Not is 1-x throughout. Entries outside [0,1] are a domain error.
double eval_formula(const FuzzyFormula& phi, const TruthVector& t);

/// Minimal-change refinement: returns t_hat with eval_formula(phi, t_hat)
/// within 1e-6 of target. One top-down pass; Or nodes move only their
/// strongest child, And nodes move every child on the wrong side. Gödel
/// connectives use the analytic L2 minimizer; product and Łukasiewicz use
/// iterated coordinate projection. All entries clipped to [0,1].
TruthVector refine(const FuzzyFormula& phi, const TruthVector& t, double target);

/// Stacked refinement layers (at most a handful of steps are ever useful).
TruthVector ilr_stack(const FuzzyFormula& phi, const TruthVector& t, int steps,
                      double target = 1.0);

/// Sum knowledge on a 20-entry truth vector (two concatenated 10-way
/// softmax rows): Or over { And(D1=a, D2=b) : a+b=z }.
FuzzyFormula sum_knowledge(int z, Semantics sem = Semantics::goedel);

/// Smooth satisfaction of the sum knowledge under product semantics:
/// mean over rows of -log(1 - prod_a (1 - p_a * q_{z-a}) + eps). The
/// differentiable counterpart of eval_formula for the optional
/// satisfaction term in the training loss.
Tensor sum_satisfaction(Tape& tape, const Tensor& p, const Tensor& q, const std::vector<int>& z,
                        double eps = 1e-12);

struct IlrConfig {
  Semantics semantics = Semantics::goedel;
  int steps = 4;
  double target = 1.0;  // training target truth; <1 keeps Or refinements dense
  double satisfaction_weight = 0.0;  // adds the smooth satisfaction term when > 0
};

struct IlrModel {
  TaskKind kind = TaskKind::sum;
  Encoder encoder;
  SymbolHead digit_head;
  IlrConfig cfg;

  std::vector<Parameter*> param_ptrs();
};

IlrModel make_ilr_model(TaskKind kind, EncoderKind enc_kind, Rng& rng, IlrConfig cfg = {});

/// One optimizer step: MSE between the raw concatenated softmax rows and
/// their refined counterparts (refined side detached). Returns batch loss.
double ilr_train_step(IlrModel& model, const std::vector<TaskExample>& exs,
                      const std::vector<size_t>& batch, const FeatureSource& src,
                      const AdamConfig& adam);

double ilr_train_epoch(IlrModel& model, const std::vector<TaskExample>& exs,
                       const FeatureSource& src, const AdamConfig& adam, int batch, Rng& rng);

Prediction predict_ilr(IlrModel& model, const TaskExample& ex, const FeatureSource& src);

EvalResult evaluate_ilr(IlrModel& model, const std::vector<TaskExample>& examples,
                        const FeatureSource& src);

}  // namespace nesy

#endif  // NESY_ILR_HPP
