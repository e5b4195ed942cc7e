#include <doctest.h>

#include <array>

#include "nesy/ilr.hpp"
#include "oracles.hpp"

using namespace nesy;

namespace {

TruthVector tv2(double a, double b) {
  TruthVector t(2);
  t << a, b;
  return t;
}

double conn_value(Semantics sem, bool is_and, double a, double b) {
  FuzzyFormula phi;
  phi.root = is_and ? f_and({atom(0), atom(1)}) : f_or({atom(0), atom(1)});
  phi.semantics = sem;
  return eval_formula(phi, tv2(a, b));
}

double conn_raw(Semantics sem, bool is_and, double a, double b) {
  switch (sem) {
    case Semantics::goedel: return is_and ? std::min(a, b) : std::max(a, b);
    case Semantics::product: return is_and ? a * b : 1.0 - (1.0 - a) * (1.0 - b);
    default: return is_and ? std::max(0.0, a + b - 1.0) : std::min(1.0, a + b);
  }
}

// Exhaustive L2 minimizer over the 1e-3 lattice for two-atom connectives.
TruthVector grid_refine2(Semantics sem, bool is_and, const TruthVector& t, double target) {
  double best = 1e18;
  TruthVector arg = t;
  for (int i = 0; i <= 1000; ++i) {
    for (int j = 0; j <= 1000; ++j) {
      const double a = i / 1000.0, b = j / 1000.0;
      if (std::abs(conn_raw(sem, is_and, a, b) - target) > 1e-9) continue;
      const double d = (a - t[0]) * (a - t[0]) + (b - t[1]) * (b - t[1]);
      if (d < best - 1e-15) {
        best = d;
        arg = tv2(a, b);
      }
    }
  }
  return arg;
}

FNode random_node(Rng& rng, int depth, int& next_atom) {
  if (depth == 0 || rng() % 4 == 0) return atom(next_atom++);
  const int pick = static_cast<int>(rng() % 3);
  if (pick == 0) return f_not(random_node(rng, depth - 1, next_atom));
  std::vector<FNode> kids;
  const int n = 2 + static_cast<int>(rng() % 3);
  for (int i = 0; i < n; ++i) kids.push_back(random_node(rng, depth - 1, next_atom));
  return pick == 1 ? f_and(std::move(kids)) : f_or(std::move(kids));
}

TruthVector random_truth(Rng& rng, int size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TruthVector t(size);
  for (int i = 0; i < size; ++i) t[i] = u(rng);
  return t;
}

TruthVector random_softmax_pair(Rng& rng) {
  std::uniform_real_distribution<double> u(0.01, 1.0);
  TruthVector t(20);
  for (int half = 0; half < 2; ++half) {
    double s = 0.0;
    for (int i = 0; i < 10; ++i) {
      t[half * 10 + i] = u(rng);
      s += t[half * 10 + i];
    }
    for (int i = 0; i < 10; ++i) t[half * 10 + i] /= s;
  }
  return t;
}

const std::array<Semantics, 3> kAllSemantics = {Semantics::goedel, Semantics::product,
                                                Semantics::lukasiewicz};

}  // namespace

TEST_CASE("eval_formula worked examples") {
  CHECK(conn_value(Semantics::goedel, true, 0.3, 0.8) == doctest::Approx(0.3));
  CHECK(conn_value(Semantics::product, false, 0.5, 0.5) == doctest::Approx(0.75));
  CHECK(conn_value(Semantics::lukasiewicz, true, 0.7, 0.7) == doctest::Approx(0.4));

  FuzzyFormula neg;
  neg.root = f_not(atom(0));
  CHECK(eval_formula(neg, tv2(0.3, 0.0)) == doctest::Approx(0.7));

  FuzzyFormula phi;
  phi.root = f_and({atom(0), atom(1)});
  CHECK_THROWS_AS(eval_formula(phi, tv2(1.2, 0.5)), DomainError);
  CHECK_THROWS_AS(eval_formula(phi, tv2(-0.1, 0.5)), DomainError);
  FuzzyFormula oob;
  oob.root = atom(5);
  CHECK_THROWS_AS(eval_formula(oob, tv2(0.5, 0.5)), DomainError);
}

TEST_CASE("eval_formula stays in [0,1] on random ASTs under all semantics") {
  Rng rng(41);
  for (int trial = 0; trial < 300; ++trial) {
    int next_atom = 0;
    FNode root = random_node(rng, 3, next_atom);
    TruthVector t = random_truth(rng, std::max(1, next_atom));
    for (Semantics sem : kAllSemantics) {
      FuzzyFormula phi{root, sem};
      const double v = eval_formula(phi, t);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
}

TEST_CASE("refine worked examples") {
  FuzzyFormula gand;
  gand.root = f_and({atom(0), atom(1)});
  TruthVector r = refine(gand, tv2(0.3, 0.8), 0.5);
  CHECK(r[0] == doctest::Approx(0.5));
  CHECK(r[1] == doctest::Approx(0.8));

  // target == current value -> exact identity, any semantics
  for (Semantics sem : kAllSemantics) {
    FuzzyFormula phi;
    phi.root = f_or({f_and({atom(0), atom(1)}), atom(2)});
    phi.semantics = sem;
    TruthVector t(3);
    t << 0.4, 0.6, 0.3;
    const double cur = eval_formula(phi, t);
    TruthVector same = refine(phi, t, cur);
    CHECK((same.array() == t.array()).all());
  }

  FuzzyFormula gor;
  gor.root = f_or({atom(0), atom(1)});
  TruthVector got = refine(gor, tv2(0.2, 0.4), 0.9);
  TruthVector oracle = grid_refine2(Semantics::goedel, false, tv2(0.2, 0.4), 0.9);
  CHECK(std::abs(got[0] - oracle[0]) <= 1.5e-3);
  CHECK(std::abs(got[1] - oracle[1]) <= 1.5e-3);
  CHECK(got[1] == doctest::Approx(0.9));  // only the stronger child moves
  CHECK(got[0] == doctest::Approx(0.2));
}

TEST_CASE("goedel single-connective refinement matches the grid minimizer") {
  Rng rng(42);
  std::uniform_int_distribution<int> lattice(0, 1000);
  for (int trial = 0; trial < 12; ++trial) {
    const bool is_and = trial % 2 == 0;
    TruthVector t = tv2(lattice(rng) / 1000.0, lattice(rng) / 1000.0);
    const double target = lattice(rng) / 1000.0;
    FuzzyFormula phi;
    phi.root = is_and ? f_and({atom(0), atom(1)}) : f_or({atom(0), atom(1)});
    TruthVector got = refine(phi, t, target);
    TruthVector want = grid_refine2(Semantics::goedel, is_and, t, target);
    CHECK(std::abs(got[0] - want[0]) <= 1.5e-3);
    CHECK(std::abs(got[1] - want[1]) <= 1.5e-3);
  }
}

TEST_CASE("refine reaches the target within 1e-6 on random formulas") {
  Rng rng(43);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  SUBCASE("single connectives") {
    for (int trial = 0; trial < 200; ++trial) {
      const int n = 2 + static_cast<int>(rng() % 4);
      std::vector<FNode> kids;
      for (int i = 0; i < n; ++i) kids.push_back(atom(i));
      FuzzyFormula phi;
      phi.root = trial % 2 == 0 ? f_and(kids) : f_or(kids);
      phi.semantics = kAllSemantics[trial % 3];
      TruthVector t = random_truth(rng, n);
      const double target = u(rng);
      TruthVector r = refine(phi, t, target);
      for (int i = 0; i < n; ++i) {
        CHECK(r[i] >= 0.0);
        CHECK(r[i] <= 1.0);
      }
      CHECK(std::abs(eval_formula(phi, r) - target) <= 1e-6);
    }
  }

  SUBCASE("depth-2 formulas") {
    for (int trial = 0; trial < 200; ++trial) {
      int next_atom = 0;
      std::vector<FNode> kids;
      const int n = 2 + static_cast<int>(rng() % 3);
      for (int i = 0; i < n; ++i) {
        const int pick = static_cast<int>(rng() % 3);
        if (pick == 0) {
          kids.push_back(atom(next_atom++));
        } else {
          std::vector<FNode> leaves = {atom(next_atom++), atom(next_atom++)};
          kids.push_back(pick == 1 ? f_and(leaves) : f_or(leaves));
        }
      }
      FuzzyFormula phi;
      phi.root = trial % 2 == 0 ? f_and(kids) : f_or(kids);
      phi.semantics = kAllSemantics[trial % 3];
      TruthVector t = random_truth(rng, next_atom);
      const double target = u(rng);
      TruthVector r = refine(phi, t, target);
      CHECK(std::abs(eval_formula(phi, r) - target) <= 1e-6);
    }
  }
}

TEST_CASE("ilr_stack fixed point, monotonicity, and empirical satisfaction rate") {
  Rng rng(44);

  SUBCASE("already-satisfied input is unchanged") {
    FuzzyFormula phi = sum_knowledge(7);
    TruthVector t = TruthVector::Zero(20);
    t[3] = 1.0;
    t[14] = 1.0;  // 3 + 4 = 7
    CHECK(eval_formula(phi, t) == doctest::Approx(1.0));
    CHECK((ilr_stack(phi, t, 4).array() == t.array()).all());
  }

  SUBCASE("satisfaction is non-decreasing across steps") {
    for (Semantics sem : kAllSemantics) {
      for (int trial = 0; trial < 50; ++trial) {
        FuzzyFormula phi = sum_knowledge(static_cast<int>(rng() % 19), sem);
        TruthVector t = random_softmax_pair(rng);
        double prev = eval_formula(phi, t);
        for (int step = 0; step < 4; ++step) {
          t = refine(phi, t, 1.0);
          const double sat = eval_formula(phi, t);
          CHECK(sat >= prev - 1e-12);
          prev = sat;
        }
      }
    }
  }

  SUBCASE("4 steps nearly always reach satisfaction 0.99") {
    int reached = 0;
    const int total = 1000;
    for (int trial = 0; trial < total; ++trial) {
      FuzzyFormula phi = sum_knowledge(static_cast<int>(rng() % 19));
      TruthVector out = ilr_stack(phi, random_softmax_pair(rng), 4);
      if (eval_formula(phi, out) >= 0.99) ++reached;
    }
    const double rate = static_cast<double>(reached) / total;
    MESSAGE("ilr_stack satisfaction rate over " << total << " random instances: " << rate);
    CHECK(rate >= 0.95);
  }

  SUBCASE("step count must be positive") {
    FuzzyFormula phi = sum_knowledge(3);
    CHECK_THROWS_AS(ilr_stack(phi, TruthVector::Zero(20), 0), ContractError);
  }
}

TEST_CASE("sum_knowledge enumerates exactly the valid digit pairs") {
  FuzzyFormula phi = sum_knowledge(3);
  CHECK(phi.root.kids.size() == 4);  // (0,3) (1,2) (2,1) (3,0)
  FuzzyFormula tails = sum_knowledge(18);
  CHECK(tails.root.kids.size() == 1);  // (9,9)
  CHECK(sum_knowledge(9).root.kids.size() == 10);
  CHECK_THROWS_AS(sum_knowledge(19), DomainError);
  CHECK_THROWS_AS(sum_knowledge(-1), DomainError);

  // A one-hot satisfying assignment scores 1, a violating one scores 0.
  TruthVector t = TruthVector::Zero(20);
  t[1] = 1.0;
  t[12] = 1.0;
  CHECK(eval_formula(sum_knowledge(3), t) == doctest::Approx(1.0));
  CHECK(eval_formula(sum_knowledge(4), t) == doctest::Approx(0.0));
}

namespace {

struct RiggedIlr {
  IlrModel model;
  Matrix cache;

  explicit RiggedIlr(Rng& rng) : model(make_ilr_model(TaskKind::sum, EncoderKind::mlp, rng)) {
    cache = Matrix::Identity(10, kEmbedDim);
    model.digit_head.w.value.setZero();
    for (int i = 0; i < 10; ++i) model.digit_head.w.value(i, i) = 40.0;
    model.digit_head.b.value.setZero();
  }

  FeatureSource source() const {
    FeatureSource src;
    src.digit_cache = &cache;
    return src;
  }
};

TaskExample sum_example(int a, int b, long label) {
  TaskExample ex;
  ex.inputs = {a, b};
  ex.roles = {Role::digit, Role::digit};
  ex.label = label;
  return ex;
}

}  // namespace

TEST_CASE("ilr_train_step loss reflects knowledge satisfaction") {
  Rng rng(45);

  SUBCASE("perfectly satisfying outputs give ~zero loss") {
    RiggedIlr rig(rng);
    std::vector<TaskExample> exs = {sum_example(3, 5, 8)};
    const double loss = ilr_train_step(rig.model, exs, {0}, rig.source(), AdamConfig{});
    CHECK(loss < 1e-10);
  }

  SUBCASE("confidently wrong digits give a clearly positive loss") {
    RiggedIlr rig(rng);
    std::vector<TaskExample> exs = {sum_example(5, 5, 3)};
    const double loss = ilr_train_step(rig.model, exs, {0}, rig.source(), AdamConfig{});
    CHECK(loss > 0.01);
  }

  SUBCASE("non-sum tasks are rejected at model construction") {
    CHECK_THROWS_AS(make_ilr_model(TaskKind::parity, EncoderKind::mlp, rng), ConfigError);
  }
}

TEST_CASE("ilr training on cached prototype embeddings learns the mapping") {
  Rng rng(46);
  const int n_img = 600;
  Matrix cache(n_img, kEmbedDim);
  std::vector<int> img_labels(n_img);
  std::normal_distribution<double> noise(0.0, 0.3);
  Matrix prototypes(10, kEmbedDim);
  std::uniform_real_distribution<double> uproto(-1.0, 1.0);
  for (Index r = 0; r < prototypes.rows(); ++r)
    for (Index c = 0; c < prototypes.cols(); ++c) prototypes(r, c) = uproto(rng);
  for (int i = 0; i < n_img; ++i) {
    img_labels[i] = static_cast<int>(rng() % 10);
    cache.row(i) = prototypes.row(img_labels[i]);
    for (Index j = 0; j < kEmbedDim; ++j) cache(i, j) += noise(rng);
  }
  std::vector<TaskExample> exs;
  for (int i = 0; i + 1 < n_img; i += 2)
    exs.push_back(sum_example(i, i + 1, img_labels[i] + img_labels[i + 1]));

  IlrModel model = make_ilr_model(TaskKind::sum, EncoderKind::mlp, rng);
  FeatureSource src;
  src.digit_cache = &cache;
  AdamConfig adam;
  adam.lr = 5e-3;
  Rng shuffle(1);
  double first = 0.0, last = 0.0;
  for (int epoch = 0; epoch < 40; ++epoch) {
    last = ilr_train_epoch(model, exs, src, adam, 32, shuffle);
    if (epoch == 0) first = last;
  }
  CHECK(last < first);
  EvalResult e = evaluate_ilr(model, exs, src);
  MESSAGE("ilr prototype-cache accuracy: " << e.task_acc);
  CHECK(e.task_acc > 0.5);
  for (auto* p : model.encoder.param_ptrs()) CHECK(p->grad.isZero());
}

TEST_CASE("predict_ilr applies argmax symbols through the sum") {
  Rng rng(47);
  RiggedIlr rig(rng);
  CHECK(predict_ilr(rig.model, sum_example(3, 5, 0), rig.source()).label == 8);
  CHECK(predict_ilr(rig.model, sum_example(9, 9, 0), rig.source()).label == 18);
  std::vector<TaskExample> exs = {sum_example(1, 2, 3), sum_example(4, 4, 8),
                                  sum_example(0, 7, 7), sum_example(6, 6, 11)};
  EvalResult e = evaluate_ilr(rig.model, exs, rig.source());
  CHECK(e.task_acc == doctest::Approx(0.75));  // last label is deliberately wrong
}

TEST_CASE("sum_satisfaction values and gradients") {
  Rng rng(48);

  SUBCASE("one-hot rows pin the extremes") {
    Matrix p = Matrix::Zero(3, 10), q = Matrix::Zero(3, 10);
    p(0, 3) = 1.0; q(0, 4) = 1.0;  // 3 + 4 = 7
    p(1, 0) = 1.0; q(1, 0) = 1.0;  // 0 + 0 = 0
    p(2, 9) = 1.0; q(2, 9) = 1.0;  // 9 + 9 = 18
    Tape t;
    const double sat = t.value_of(sum_satisfaction(t, t.input(p), t.input(q), {7, 0, 18}).id())(0, 0);
    CHECK(std::abs(sat) < 1e-9);

    p(0, 3) = 0.0;
    p(0, 5) = 1.0;  // 5 + 4 = 9, not 7: that row contributes -log(eps)/3
    Tape t2;
    const double miss =
        t2.value_of(sum_satisfaction(t2, t2.input(p), t2.input(q), {7, 0, 18}).id())(0, 0);
    CHECK(miss == doctest::Approx(-std::log(1e-12) / 3.0).epsilon(1e-9));
  }

  SUBCASE("uniform rows match the closed form") {
    // All memberships 0.01: sat(z) = 1 - (1 - 1e-4)^pairs(z).
    Matrix p = Matrix::Constant(1, 10, 0.01), q = Matrix::Constant(1, 10, 0.01);
    Tape t;
    const double got = t.value_of(sum_satisfaction(t, t.input(p), t.input(q), {9}).id())(0, 0);
    const double want = -std::log(1.0 - std::pow(1.0 - 1e-4, 10.0) + 1e-12);
    CHECK(got == doctest::Approx(want).epsilon(1e-10));
  }

  SUBCASE("gradients through the head match finite differences") {
    SymbolHead head = make_symbol_head(10, rng);
    Matrix z1 = Matrix::Random(5, kEmbedDim), z2 = Matrix::Random(5, kEmbedDim);
    std::vector<int> z = {3, 9, 0, 18, 7};
    auto f = [&]() {
      Tape t;
      Tensor p = map_symbols(t, head, t.input(z1));
      Tensor q = map_symbols(t, head, t.input(z2));
      return t.value_of(sum_satisfaction(t, p, q, z).id())(0, 0);
    };
    Tape t;
    Tensor p = map_symbols(t, head, t.input(z1));
    Tensor q = map_symbols(t, head, t.input(z2));
    t.backward(sum_satisfaction(t, p, q, z));
    for (Parameter* prm : head.param_ptrs()) {
      Matrix fd = oracle::fd_gradient(f, prm->value);
      CHECK(oracle::grad_mismatch(prm->grad, fd) < 1e-4);
    }
  }

  SUBCASE("labels outside 0..18 are rejected") {
    Matrix p = Matrix::Constant(1, 10, 0.1), q = Matrix::Constant(1, 10, 0.1);
    Tape t;
    Tensor tp = t.input(p), tq = t.input(q);
    CHECK_THROWS_AS(sum_satisfaction(t, tp, tq, {19}), DomainError);
    CHECK_THROWS_AS(sum_satisfaction(t, tp, tq, {-1}), DomainError);
  }
}
