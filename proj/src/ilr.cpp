#include "nesy/ilr.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace nesy {

namespace {

double clip01(double x) { return std::clamp(x, 0.0, 1.0); }

constexpr double kSame = 1e-12;  // "already at target" threshold

}  // namespace

Semantics semantics_of(const std::string& name) {
  if (name == "goedel") return Semantics::goedel;
  if (name == "product") return Semantics::product;
  if (name == "lukasiewicz") return Semantics::lukasiewicz;
  throw ConfigError("unknown fuzzy semantics: " + name);
}

std::string semantics_name(Semantics s) {
  switch (s) {
    case Semantics::goedel: return "goedel";
    case Semantics::product: return "product";
    default: return "lukasiewicz";
  }
}

int FNode::max_atom() const {
  int m = atom;
  for (const FNode& k : kids) m = std::max(m, k.max_atom());
  return m;
}

FNode atom(int index) {
  if (index < 0) throw DomainError("atom index must be non-negative");
  FNode n;
  n.kind = FNode::Kind::atom;
  n.atom = index;
  return n;
}

FNode f_not(FNode child) {
  FNode n;
  n.kind = FNode::Kind::negate;
  n.kids.push_back(std::move(child));
  return n;
}

FNode f_and(std::vector<FNode> kids) {
  if (kids.empty()) throw ContractError("And needs at least one child");
  FNode n;
  n.kind = FNode::Kind::conj;
  n.kids = std::move(kids);
  return n;
}

FNode f_or(std::vector<FNode> kids) {
  if (kids.empty()) throw ContractError("Or needs at least one child");
  FNode n;
  n.kind = FNode::Kind::disj;
  n.kids = std::move(kids);
  return n;
}

namespace {

double eval_node(const FNode& node, const TruthVector& t, Semantics sem) {
  switch (node.kind) {
    case FNode::Kind::atom:
      if (node.atom >= t.size())
        throw DomainError("atom index " + std::to_string(node.atom) +
                          " outside truth vector of size " + std::to_string(t.size()));
      return t[node.atom];
    case FNode::Kind::negate:
      return 1.0 - eval_node(node.kids[0], t, sem);
    case FNode::Kind::conj: {
      if (sem == Semantics::goedel) {
        double m = 1.0;
        for (const FNode& k : node.kids) m = std::min(m, eval_node(k, t, sem));
        return m;
      }
      if (sem == Semantics::product) {
        double p = 1.0;
        for (const FNode& k : node.kids) p *= eval_node(k, t, sem);
        return p;
      }
      double s = 0.0;
      for (const FNode& k : node.kids) s += eval_node(k, t, sem);
      return std::max(0.0, s - (static_cast<double>(node.kids.size()) - 1.0));
    }
    case FNode::Kind::disj: {
      if (sem == Semantics::goedel) {
        double m = 0.0;
        for (const FNode& k : node.kids) m = std::max(m, eval_node(k, t, sem));
        return m;
      }
      if (sem == Semantics::product) {
        double p = 1.0;
        for (const FNode& k : node.kids) p *= 1.0 - eval_node(k, t, sem);
        return 1.0 - p;
      }
      double s = 0.0;
      for (const FNode& k : node.kids) s += eval_node(k, t, sem);
      return std::min(1.0, s);
    }
  }
  throw ContractError("corrupt formula node");
}

// --- connective-level refinement on plain value vectors -------------------

// Ties in argmin/argmax go to the lowest index so refinement is
// deterministic.
size_t arg_min(const std::vector<double>& v) {
  return static_cast<size_t>(std::min_element(v.begin(), v.end()) - v.begin());
}

size_t arg_max(const std::vector<double>& v) {
  return static_cast<size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

void goedel_and_refine(std::vector<double>& v, double target) {
  const double cur = *std::min_element(v.begin(), v.end());
  if (std::abs(cur - target) <= kSame) return;
  if (target > cur) {
    for (double& x : v)
      if (x < target) x = target;
  } else {
    v[arg_min(v)] = target;
  }
}

void goedel_or_refine(std::vector<double>& v, double target) {
  const double cur = *std::max_element(v.begin(), v.end());
  if (std::abs(cur - target) <= kSame) return;
  if (target > cur) {
    v[arg_max(v)] = target;
  } else {
    for (double& x : v)
      if (x > target) x = target;
  }
}

void product_and_refine(std::vector<double>& v, double target) {
  const size_t n = v.size();
  double cur = 1.0;
  for (double x : v) cur *= x;
  if (std::abs(cur - target) <= kSame) return;
  if (target <= 0.0) {
    v[arg_min(v)] = 0.0;  // cheapest way to zero a product
    return;
  }
  const double root = std::pow(target, 1.0 / static_cast<double>(n));
  for (double& x : v)
    if (x <= 0.0) x = root;
  for (int cycle = 0; cycle < 10; ++cycle) {
    for (size_t i = 0; i < n; ++i) {
      double rest = 1.0;
      for (size_t j = 0; j < n; ++j)
        if (j != i) rest *= v[j];
      if (rest > 0.0) v[i] = clip01(target / rest);
    }
    double now = 1.0;
    for (double x : v) now *= x;
    if (std::abs(now - target) <= kSame) break;
  }
}

void product_or_refine(std::vector<double>& v, double target) {
  for (double& x : v) x = 1.0 - x;
  product_and_refine(v, 1.0 - target);
  for (double& x : v) x = 1.0 - x;
}

// Minimal-L2 projection of v onto { sum(v) = c } within the unit box:
// uniform shifts over the unsaturated coordinates until the sum lands.
void project_sum(std::vector<double>& v, double c) {
  const int rounds = std::max<int>(10, static_cast<int>(v.size()));
  for (int r = 0; r < rounds; ++r) {
    double s = 0.0;
    for (double x : v) s += x;
    const double diff = c - s;
    if (std::abs(diff) <= kSame) return;
    int free = 0;
    for (double x : v)
      if (diff > 0 ? x < 1.0 : x > 0.0) ++free;
    if (free == 0) return;
    const double per = diff / free;
    for (double& x : v)
      if (diff > 0 ? x < 1.0 : x > 0.0) x = clip01(x + per);
  }
}

void luk_and_refine(std::vector<double>& v, double target) {
  const double n = static_cast<double>(v.size());
  double s = 0.0;
  for (double x : v) s += x;
  const double cur = std::max(0.0, s - (n - 1.0));
  if (std::abs(cur - target) <= kSame) return;
  if (target <= 0.0) {
    if (s > n - 1.0) project_sum(v, n - 1.0);
    return;
  }
  project_sum(v, target + n - 1.0);
}

void luk_or_refine(std::vector<double>& v, double target) {
  double s = 0.0;
  for (double x : v) s += x;
  const double cur = std::min(1.0, s);
  if (std::abs(cur - target) <= kSame) return;
  if (target >= 1.0) {
    if (s < 1.0) project_sum(v, 1.0);
    return;
  }
  project_sum(v, target);
}

void refine_node(const FNode& node, TruthVector& t, double target, Semantics sem) {
  target = clip01(target);
  switch (node.kind) {
    case FNode::Kind::atom:
      t[node.atom] = target;
      return;
    case FNode::Kind::negate:
      refine_node(node.kids[0], t, 1.0 - target, sem);
      return;
    case FNode::Kind::conj:
    case FNode::Kind::disj: {
      std::vector<double> vals(node.kids.size());
      for (size_t i = 0; i < node.kids.size(); ++i) vals[i] = eval_node(node.kids[i], t, sem);
      std::vector<double> want = vals;
      const bool is_and = node.kind == FNode::Kind::conj;
      switch (sem) {
        case Semantics::goedel:
          is_and ? goedel_and_refine(want, target) : goedel_or_refine(want, target);
          break;
        case Semantics::product:
          is_and ? product_and_refine(want, target) : product_or_refine(want, target);
          break;
        case Semantics::lukasiewicz:
          is_and ? luk_and_refine(want, target) : luk_or_refine(want, target);
          break;
      }
      for (size_t i = 0; i < node.kids.size(); ++i)
        if (std::abs(want[i] - vals[i]) > kSame) refine_node(node.kids[i], t, want[i], sem);
      return;
    }
  }
}

void check_truth(const TruthVector& t) {
  for (Index i = 0; i < t.size(); ++i)
    if (!(t[i] >= 0.0 && t[i] <= 1.0))
      throw DomainError("truth value at index " + std::to_string(i) +
                        " outside [0,1]: " + std::to_string(t[i]));
}

}  // namespace

double eval_formula(const FuzzyFormula& phi, const TruthVector& t) {
  check_truth(t);
  return eval_node(phi.root, t, phi.semantics);
}

TruthVector refine(const FuzzyFormula& phi, const TruthVector& t, double target) {
  check_truth(t);
  if (!(target >= 0.0 && target <= 1.0))
    throw DomainError("refinement target outside [0,1]: " + std::to_string(target));
  if (phi.root.max_atom() >= t.size()) throw DomainError("formula atom outside truth vector");
  TruthVector out = t;
  if (std::abs(eval_node(phi.root, out, phi.semantics) - target) <= kSame) return out;
  refine_node(phi.root, out, target, phi.semantics);
  for (Index i = 0; i < out.size(); ++i) out[i] = clip01(out[i]);
  return out;
}

TruthVector ilr_stack(const FuzzyFormula& phi, const TruthVector& t, int steps, double target) {
  if (steps < 1) throw ContractError("ilr_stack needs at least one step");
  TruthVector cur = t;
  for (int s = 0; s < steps; ++s) cur = refine(phi, cur, target);
  return cur;
}

FuzzyFormula sum_knowledge(int z, Semantics sem) {
  if (z < 0 || z > 18) throw DomainError("sum label outside 0..18: " + std::to_string(z));
  std::vector<FNode> pairs;
  for (int a = std::max(0, z - 9); a <= std::min(9, z); ++a)
    pairs.push_back(f_and({atom(a), atom(10 + (z - a))}));
  FuzzyFormula phi;
  phi.root = f_or(std::move(pairs));
  phi.semantics = sem;
  return phi;
}

std::vector<Parameter*> IlrModel::param_ptrs() {
  std::vector<Parameter*> out = encoder.param_ptrs();
  for (Parameter* p : digit_head.param_ptrs()) out.push_back(p);
  return out;
}

IlrModel make_ilr_model(TaskKind kind, EncoderKind enc_kind, Rng& rng, IlrConfig cfg) {
  if (kind != TaskKind::sum)
    throw ConfigError("ilr engine only supports the sum task, got " + task_kind_name(kind));
  IlrModel m;
  m.kind = kind;
  m.encoder = make_encoder(enc_kind, rng);
  m.digit_head = make_symbol_head(10, rng);
  m.cfg = cfg;
  return m;
}

Tensor sum_satisfaction(Tape& tape, const Tensor& p, const Tensor& q, const std::vector<int>& z,
                        double eps) {
  if (p.cols() != 10 || q.cols() != 10 || p.rows() != q.rows() ||
      static_cast<Index>(z.size()) != p.rows())
    throw DimensionError("sum_satisfaction: want matching [n,10] rows");
  for (int zi : z)
    if (zi < 0 || zi > 18)
      throw DomainError("sum_satisfaction: label " + std::to_string(zi) + " outside 0..18");

  const Matrix& pv = p.value();
  const Matrix& qv = q.value();
  const Index n = p.rows();
  double acc = 0.0;
  for (Index i = 0; i < n; ++i) {
    const int zi = z[static_cast<size_t>(i)];
    double prod = 1.0;
    for (int a = std::max(0, zi - 9); a <= std::min(9, zi); ++a)
      prod *= 1.0 - pv(i, a) * qv(i, zi - a);
    acc += -std::log(1.0 - prod + eps);
  }
  Matrix out(1, 1);
  out(0, 0) = acc / static_cast<double>(n);

  const int pi = p.id(), qi = q.id();
  return tape.node(std::move(out), {pi, qi}, [pi, qi, z, eps](Tape& tp, int self) {
    const double g = tp.grad_of(self)(0, 0);
    const Matrix& pv = tp.value_of(pi);
    const Matrix& qv = tp.value_of(qi);
    const bool wp = tp.wants_grad(pi), wq = tp.wants_grad(qi);
    if (!wp && !wq) return;
    const Index n = pv.rows();
    const double inv_n = 1.0 / static_cast<double>(n);
    for (Index i = 0; i < n; ++i) {
      const int zi = z[static_cast<size_t>(i)];
      const int lo = std::max(0, zi - 9), hi = std::min(9, zi);
      double prod = 1.0;
      for (int a = lo; a <= hi; ++a) prod *= 1.0 - pv(i, a) * qv(i, zi - a);
      const double d_sat = -g * inv_n / (1.0 - prod + eps);
      for (int a = lo; a <= hi; ++a) {
        double excl = 1.0;  // product over the other pairs
        for (int a2 = lo; a2 <= hi; ++a2)
          if (a2 != a) excl *= 1.0 - pv(i, a2) * qv(i, zi - a2);
        const double d_m = d_sat * excl;  // d(final)/d m_a
        if (wp) tp.grad_of(pi)(i, a) += d_m * qv(i, zi - a);
        if (wq) tp.grad_of(qi)(i, zi - a) += d_m * pv(i, a);
      }
    }
  });
}

double ilr_train_step(IlrModel& model, const std::vector<TaskExample>& exs,
                      const std::vector<size_t>& batch, const FeatureSource& src,
                      const AdamConfig& adam) {
  Tape tape;
  Tensor z1 = embed_position(tape, model.encoder, src, Role::digit, exs, batch, 0);
  Tensor z2 = embed_position(tape, model.encoder, src, Role::digit, exs, batch, 1);
  Tensor p = map_symbols(tape, model.digit_head, z1);
  Tensor q = map_symbols(tape, model.digit_head, z2);
  Tensor raw = concat_cols({p, q});

  Matrix refined(static_cast<Index>(batch.size()), 20);
  std::vector<int> labels(batch.size());
  for (size_t r = 0; r < batch.size(); ++r) {
    const TaskExample& ex = exs[batch[r]];
    labels[r] = static_cast<int>(ex.label);
    TruthVector tv(20);
    tv.head(10) = p.value().row(static_cast<Index>(r)).transpose();
    tv.tail(10) = q.value().row(static_cast<Index>(r)).transpose();
    FuzzyFormula phi = sum_knowledge(labels[r], model.cfg.semantics);
    refined.row(static_cast<Index>(r)) =
        ilr_stack(phi, tv, model.cfg.steps, model.cfg.target).transpose();
  }

  Tensor loss = mse_to(raw, refined);
  if (model.cfg.satisfaction_weight > 0.0)
    loss = add(loss, scale(sum_satisfaction(tape, p, q, labels), model.cfg.satisfaction_weight));
  const double out = loss.value()(0, 0);
  tape.backward(loss);
  adam_step(model.param_ptrs(), adam);
  return out;
}

double ilr_train_epoch(IlrModel& model, const std::vector<TaskExample>& exs,
                       const FeatureSource& src, const AdamConfig& adam, int batch, Rng& rng) {
  if (batch < 1) throw ConfigError("batch size must be positive");
  std::vector<size_t> order(exs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::shuffle(order.begin(), order.end(), rng);
  double total = 0.0;
  int steps = 0;
  for (size_t at = 0; at < order.size(); at += static_cast<size_t>(batch)) {
    const size_t stop = std::min(order.size(), at + static_cast<size_t>(batch));
    std::vector<size_t> chunk(order.begin() + static_cast<long>(at),
                              order.begin() + static_cast<long>(stop));
    total += ilr_train_step(model, exs, chunk, src, adam);
    ++steps;
  }
  return steps ? total / steps : 0.0;
}

namespace {

void ilr_chunk_predictions(IlrModel& model, const std::vector<TaskExample>& exs,
                           const std::vector<size_t>& chunk, const FeatureSource& src,
                           std::vector<long>& out) {
  Tape tape;
  Tensor z1 = embed_position(tape, model.encoder, src, Role::digit, exs, chunk, 0);
  Tensor z2 = embed_position(tape, model.encoder, src, Role::digit, exs, chunk, 1);
  const std::vector<int> a = argmax_rows(map_symbols(tape, model.digit_head, z1).value());
  const std::vector<int> b = argmax_rows(map_symbols(tape, model.digit_head, z2).value());
  for (size_t i = 0; i < chunk.size(); ++i) out[chunk[i]] = a[i] + b[i];
}

}  // namespace

Prediction predict_ilr(IlrModel& model, const TaskExample& ex, const FeatureSource& src) {
  std::vector<TaskExample> one = {ex};
  std::vector<long> labels(1);
  ilr_chunk_predictions(model, one, {0}, src, labels);
  Prediction pred;
  pred.label = labels[0];
  return pred;
}

EvalResult evaluate_ilr(IlrModel& model, const std::vector<TaskExample>& examples,
                        const FeatureSource& src) {
  std::vector<long> labels(examples.size(), 0);
  std::vector<size_t> chunk;
  for (size_t i = 0; i < examples.size(); i += 512) {
    chunk.clear();
    for (size_t j = i; j < std::min(examples.size(), i + 512); ++j) chunk.push_back(j);
    ilr_chunk_predictions(model, examples, chunk, src, labels);
  }
  EvalResult res;
  size_t hits = 0;
  for (size_t i = 0; i < examples.size(); ++i)
    if (labels[i] == examples[i].label) ++hits;
  res.task_acc = examples.empty() ? 0.0 : static_cast<double>(hits) / examples.size();
  return res;
}

}  // namespace nesy
