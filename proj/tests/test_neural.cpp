#include <doctest.h>

#include <cstring>

#include "nesy/neural.hpp"
#include "oracles.hpp"

using namespace nesy;

namespace {

struct Corpus {
  ImageStore train, test;
};

// Small synthetic digit corpus shared by the training tests.
Corpus digit_corpus(int per_class_train, int per_class_test, uint64_t seed = 77) {
  std::vector<uint8_t> tr_px, tr_lb, te_px, te_lb;
  synth_digits(seed, per_class_train, per_class_test, tr_px, tr_lb, te_px, te_lb);
  auto to_store = [](const std::vector<uint8_t>& px, const std::vector<uint8_t>& lb) {
    ImageStore s;
    s.images.resize(static_cast<Index>(lb.size()), 784);
    for (Index i = 0; i < s.images.rows(); ++i)
      for (Index j = 0; j < 784; ++j)
        s.images(i, j) = px[static_cast<size_t>(i) * 784 + static_cast<size_t>(j)] / 255.0;
    s.labels.assign(lb.begin(), lb.end());
    return s;
  };
  return {to_store(tr_px, tr_lb), to_store(te_px, te_lb)};
}

PixelSets pixel_sets(const Corpus& c) {
  PixelSets p;
  p.digit_train = &c.train.images;
  p.digit_test = &c.test.images;
  return p;
}

}  // namespace

TEST_CASE("fine-grained score: 12344 vs 12345 is 0.8") {
  CHECK(fine_score({1, 2, 3, 4, 4}, {1, 2, 3, 4, 5}) == doctest::Approx(0.8));
  CHECK(fine_score({7}, {7}) == doctest::Approx(1.0));
  CHECK_THROWS_AS(fine_score({1, 2}, {1, 2, 3}), ContractError);
}

TEST_CASE("zero-epoch pretrain leaves the model at initialization") {
  Corpus c = digit_corpus(12, 6);
  TaskSpec spec;
  spec.kind = TaskKind::sum;
  spec.train_size = 50;
  spec.test_size = 25;
  TaskData data = compose_task(c.train, c.test, nullptr, nullptr, spec);

  Rng rng(1);
  NeuralTaskModel model = make_neural_model(TaskKind::sum, label_alphabet(data.train),
                                            EncoderKind::mlp, 64, rng);
  std::vector<Matrix> before;
  for (auto* p : model.param_ptrs()) before.push_back(p->value);

  NeuralConfig cfg;
  cfg.epochs = 0;
  PixelSets px = pixel_sets(c);
  PretrainResult r = pretrain(model, data, px, cfg);
  CHECK(r.trace.empty());
  auto ptrs = model.param_ptrs();
  for (size_t i = 0; i < ptrs.size(); ++i)
    CHECK(std::memcmp(before[i].data(), ptrs[i]->value.data(),
                      sizeof(double) * before[i].size()) == 0);
  // Untrained accuracy sits near chance for the 19-label alphabet.
  EvalResult e = evaluate_neural(model, data.test, px, true);
  CHECK(e.task_acc < 0.3);
}

TEST_CASE("shared encoder accumulates gradients from every position") {
  Rng rng(2);
  Encoder enc = make_encoder(EncoderKind::mlp, rng);
  Matrix imgs1 = Matrix::Random(4, 784).cwiseAbs();
  Matrix imgs2 = Matrix::Random(4, 784).cwiseAbs();

  Tape t;
  Tensor both = add(sum_all(encode(t, enc, imgs1)), sum_all(encode(t, enc, imgs2)));
  t.backward(both);
  std::vector<Matrix> joint;
  for (auto* p : enc.param_ptrs()) {
    joint.push_back(p->grad);
    p->grad.setZero();
  }

  Tape t1;
  t1.backward(sum_all(encode(t1, enc, imgs1)));
  std::vector<Matrix> first;
  for (auto* p : enc.param_ptrs()) {
    first.push_back(p->grad);
    p->grad.setZero();
  }
  Tape t2;
  t2.backward(sum_all(encode(t2, enc, imgs2)));
  auto ptrs = enc.param_ptrs();
  for (size_t i = 0; i < ptrs.size(); ++i) {
    Matrix expect = first[i] + ptrs[i]->grad;
    CHECK((joint[i] - expect).cwiseAbs().maxCoeff() < 1e-9);
    ptrs[i]->grad.setZero();
  }
}

TEST_CASE("sum pretraining learns and separates digit embeddings") {
  Corpus c = digit_corpus(250, 40);
  TaskSpec spec;
  spec.kind = TaskKind::sum;
  spec.train_size = 1200;
  spec.test_size = 190;
  spec.pairing_seed = 3;
  TaskData data = compose_task(c.train, c.test, nullptr, nullptr, spec);

  Rng rng(4);
  NeuralTaskModel model = make_neural_model(TaskKind::sum, label_alphabet(data.train),
                                            EncoderKind::mlp, 256, rng);
  NeuralConfig cfg;
  cfg.epochs = 25;
  cfg.seed = 5;
  PixelSets px = pixel_sets(c);
  PretrainResult r = pretrain(model, data, px, cfg);

  REQUIRE(r.trace.size() == 50);  // train+test rows per epoch
  CHECK(r.trace[0].split == "train");
  CHECK(r.trace[1].split == "test");
  for (size_t i = 0; i < r.trace.size(); ++i) {
    CHECK(r.trace[i].epoch == static_cast<int>(i / 2) + 1);
    CHECK(r.trace[i].seconds >= 0.0);
    CHECK(r.trace[i].fine_acc == -1.0);
  }
  EvalResult final = evaluate_neural(model, data.test, px, true);
  CHECK(final.task_acc > 0.5);  // far above the ~5% chance level

  // Embedding separability: same-digit pairs are closer in cosine than
  // different-digit pairs, on average (image labels used for evaluation only).
  Matrix z = batch_encode(model.encoder, c.test.images);
  Matrix zn = z;
  for (Index i = 0; i < z.rows(); ++i) {
    const double norm = z.row(i).norm();
    zn.row(i) = z.row(i) / (norm > 0 ? norm : 1.0);
  }
  double intra = 0.0, inter = 0.0;
  long n_intra = 0, n_inter = 0;
  for (Index i = 0; i < z.rows(); ++i)
    for (Index j = i + 1; j < z.rows(); ++j) {
      const double cs = zn.row(i).dot(zn.row(j));
      if (c.test.labels[i] == c.test.labels[j]) {
        intra += cs;
        ++n_intra;
      } else {
        inter += cs;
        ++n_inter;
      }
    }
  CHECK(intra / n_intra > inter / n_inter);

  // Bit-exact determinism of the whole pretraining run.
  Rng rng2(4);
  NeuralTaskModel model2 = make_neural_model(TaskKind::sum, label_alphabet(data.train),
                                             EncoderKind::mlp, 256, rng2);
  NeuralConfig cfg1 = cfg;
  cfg1.epochs = 2;
  Rng rng3(4);
  NeuralTaskModel model3 = make_neural_model(TaskKind::sum, label_alphabet(data.train),
                                             EncoderKind::mlp, 256, rng3);
  PretrainResult a = pretrain(model2, data, px, cfg1);
  PretrainResult b = pretrain(model3, data, px, cfg1);
  REQUIRE(a.archive.entries.size() == b.archive.entries.size());
  for (size_t i = 0; i < a.archive.entries.size(); ++i)
    CHECK(std::memcmp(a.archive.entries[i].data.data(), b.archive.entries[i].data.data(),
                      sizeof(double) * a.archive.entries[i].data.size()) == 0);
}

TEST_CASE("recurrent head learns single-digit sums with a carry slot") {
  Corpus c = digit_corpus(110, 30);
  TaskSpec spec;
  spec.kind = TaskKind::multidigit_sum;
  spec.train_digits = 1;
  spec.test_digits = 1;
  spec.train_size = 500;
  spec.test_size = 120;
  TaskData data = compose_task(c.train, c.test, nullptr, nullptr, spec);

  Rng rng(6);
  NeuralTaskModel model =
      make_neural_model(TaskKind::multidigit_sum, {}, EncoderKind::mlp, 0, rng);
  CHECK(model.rnn.wx.value.rows() == 2 * 84 + 80);
  CHECK(model.rnn.wx.value.cols() == 80);  // hidden size pinned to 80

  NeuralConfig cfg;
  cfg.epochs = 15;
  cfg.seed = 7;
  PixelSets px = pixel_sets(c);
  PretrainResult r = pretrain(model, data, px, cfg);
  EvalResult e = evaluate_neural(model, data.test, px, true);
  CHECK(e.fine_acc > 0.4);
  CHECK(r.trace.back().fine_acc >= 0.0);  // multidigit traces carry fine_acc

  Prediction p = predict_neural(model, data.test[0], px, true);
  REQUIRE(p.digits.size() == 2);  // digit + carry slot
  CHECK(p.label == p.digits[0] * 10 + p.digits[1]);
}

TEST_CASE("recurrent head learns short parity") {
  Corpus c = digit_corpus(220, 50);
  TaskSpec spec;
  spec.kind = TaskKind::parity;
  spec.train_digits = 2;
  spec.test_digits = 2;
  spec.train_size = 260;
  spec.test_size = 90;
  TaskData data = compose_task(c.train, c.test, nullptr, nullptr, spec);

  Rng rng(8);
  NeuralTaskModel model = make_neural_model(TaskKind::parity, {}, EncoderKind::mlp, 0, rng);
  NeuralConfig cfg;
  cfg.epochs = 25;
  cfg.seed = 9;
  cfg.batch = 32;
  PixelSets px = pixel_sets(c);
  pretrain(model, data, px, cfg);
  EvalResult e = evaluate_neural(model, data.test, px, true);
  CHECK(e.task_acc > 0.7);
}

TEST_CASE("confident head predicts its label") {
  Corpus c = digit_corpus(6, 6);
  TaskSpec spec;
  spec.kind = TaskKind::sum;
  spec.train_size = 20;
  spec.test_size = 10;
  TaskData data = compose_task(c.train, c.test, nullptr, nullptr, spec);
  const auto alphabet = label_alphabet(data.train);

  Rng rng(10);
  NeuralTaskModel model =
      make_neural_model(TaskKind::sum, alphabet, EncoderKind::mlp, 32, rng);
  const size_t target_class = 2;
  model.ff.w2.value.setZero();
  model.ff.b2.value.setZero();
  model.ff.b2.value(0, static_cast<Index>(target_class)) = 50.0;
  PixelSets px = pixel_sets(c);
  for (const auto& ex : data.test)
    CHECK(predict_neural(model, ex, px, true).label == alphabet[target_class]);
}

TEST_CASE("non-finite loss aborts with epoch and batch context") {
  Corpus c = digit_corpus(8, 4);
  TaskSpec spec;
  spec.kind = TaskKind::sum;
  spec.train_size = 30;
  spec.test_size = 10;
  TaskData data = compose_task(c.train, c.test, nullptr, nullptr, spec);

  Rng rng(11);
  NeuralTaskModel model = make_neural_model(TaskKind::sum, label_alphabet(data.train),
                                            EncoderKind::mlp, 32, rng);
  model.encoder.params[0].value(0, 0) = std::numeric_limits<double>::quiet_NaN();
  NeuralConfig cfg;
  cfg.epochs = 1;
  PixelSets px = pixel_sets(c);
  try {
    pretrain(model, data, px, cfg);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 1") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}