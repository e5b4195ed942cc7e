#include "nesy/tensor.hpp"

#include <algorithm>
#include <cmath>

namespace nesy {

Parameter xavier_uniform(const std::string& name, Index fan_in, Index fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  Matrix v(fan_in, fan_out);
  for (Index i = 0; i < v.rows(); ++i)
    for (Index j = 0; j < v.cols(); ++j) v(i, j) = dist(rng);
  return Parameter(name, std::move(v));
}

Parameter zero_param(const std::string& name, Index rows, Index cols) {
  return Parameter(name, Matrix::Zero(rows, cols));
}

const Matrix& Tensor::value() const {
  if (!tape_) throw ContractError("Tensor::value on empty tensor handle");
  return tape_->value_of(id_);
}

Tensor Tape::input(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, nullptr, nullptr});
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Tensor Tape::watch(Parameter& p) {
  auto it = watched_.find(&p);
  if (it != watched_.end()) return Tensor(this, it->second);
  nodes_.push_back(Node{p.value, {}, {}, nullptr, &p});
  int id = static_cast<int>(nodes_.size()) - 1;
  watched_.emplace(&p, id);
  return Tensor(this, id);
}

Tensor Tape::node(Matrix value, std::vector<int> parents, BackwardFn back) {
  nodes_.push_back(Node{std::move(value), {}, std::move(parents), std::move(back), nullptr});
  return Tensor(this, static_cast<int>(nodes_.size()) - 1);
}

Matrix& Tape::grad_of(int id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

bool Tape::wants_grad(int id) const {
  const Node& n = nodes_[id];
  if (n.back) return true;
  return n.param != nullptr && n.param->trainable;
}

void Tape::backward(const Tensor& loss) {
  if (loss.tape() != this) throw ContractError("backward: loss recorded on a different tape");
  const Matrix& lv = value_of(loss.id());
  if (lv.rows() != 1 || lv.cols() != 1)
    throw ContractError("backward: loss must be scalar, got " + shape_str(lv));
  grad_of(loss.id())(0, 0) = 1.0;
  for (int id = loss.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() > 0 && n.back) n.back(*this, id);
  }
  for (Node& n : nodes_) {
    if (n.param && n.param->trainable && n.grad.size() > 0) n.param->grad += n.grad;
  }
}

void Tape::reset() {
  nodes_.clear();
  watched_.clear();
}

namespace {

Tape& tape_of(const Tensor& t) {
  if (!t.valid()) throw ContractError("operation on empty tensor handle");
  return *t.tape();
}

void check_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) throw NumericError(std::string(op) + ": non-finite input");
}

Matrix softmax_rows(const Matrix& x) {
  Matrix p(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mx = x.row(i).maxCoeff();
    p.row(i) = (x.row(i).array() - mx).exp();
    p.row(i) /= p.row(i).sum();
  }
  return p;
}

}  // namespace

Tensor affine(const Tensor& x, Parameter& w, Parameter& b) {
  Tape& t = tape_of(x);
  if (x.cols() != w.value.rows() || b.value.rows() != 1 || b.value.cols() != w.value.cols())
    throw DimensionError("affine: x " + shape_str(x.value()) + " vs w " + shape_str(w.value) +
                         ", b " + shape_str(b.value));
  Tensor wt = t.watch(w);
  Tensor bt = t.watch(b);
  Matrix y = x.value() * w.value;
  y.rowwise() += b.value.row(0);
  const int xi = x.id(), wi = wt.id(), bi = bt.id();
  return t.node(std::move(y), {xi, wi, bi}, [xi, wi, bi](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.wants_grad(xi)) tp.grad_of(xi).noalias() += g * tp.value_of(wi).transpose();
    if (tp.wants_grad(wi)) tp.grad_of(wi).noalias() += tp.value_of(xi).transpose() * g;
    if (tp.wants_grad(bi)) tp.grad_of(bi).row(0) += g.colwise().sum();
  });
}

Tensor linear(const Tensor& x, Parameter& w) {
  Tape& t = tape_of(x);
  if (x.cols() != w.value.rows())
    throw DimensionError("linear: x " + shape_str(x.value()) + " vs w " + shape_str(w.value));
  Tensor wt = t.watch(w);
  Matrix y = x.value() * w.value;
  const int xi = x.id(), wi = wt.id();
  return t.node(std::move(y), {xi, wi}, [xi, wi](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.wants_grad(xi)) tp.grad_of(xi).noalias() += g * tp.value_of(wi).transpose();
    if (tp.wants_grad(wi)) tp.grad_of(wi).noalias() += tp.value_of(xi).transpose() * g;
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  Tape& t = tape_of(a);
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw DimensionError("add: " + shape_str(a.value()) + " vs " + shape_str(b.value()));
  const int ai = a.id(), bi = b.id();
  return t.node(a.value() + b.value(), {ai, bi}, [ai, bi](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    if (tp.wants_grad(ai)) tp.grad_of(ai) += g;
    if (tp.wants_grad(bi)) tp.grad_of(bi) += g;
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no parts");
  Tape& t = tape_of(parts[0]);
  const Index rows = parts[0].rows();
  Index cols = 0;
  std::vector<int> ids;
  std::vector<Index> widths;
  for (const Tensor& p : parts) {
    if (p.rows() != rows)
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.value()));
    ids.push_back(p.id());
    widths.push_back(p.cols());
    cols += p.cols();
  }
  Matrix y(rows, cols);
  Index off = 0;
  for (const Tensor& p : parts) {
    y.middleCols(off, p.cols()) = p.value();
    off += p.cols();
  }
  return t.node(std::move(y), ids, [ids, widths](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    Index off = 0;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (tp.wants_grad(ids[i])) tp.grad_of(ids[i]) += g.middleCols(off, widths[i]);
      off += widths[i];
    }
  });
}

Tensor relu(const Tensor& x) {
  Tape& t = tape_of(x);
  check_finite(x.value(), "relu");
  const int xi = x.id();
  return t.node(x.value().cwiseMax(0.0), {xi}, [xi](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    tp.grad_of(xi).array() +=
        tp.grad_of(self).array() * (tp.value_of(xi).array() > 0.0).cast<double>();
  });
}

Tensor tanh(const Tensor& x) {
  Tape& t = tape_of(x);
  check_finite(x.value(), "tanh");
  const int xi = x.id();
  return t.node(x.value().array().tanh().matrix(), {xi}, [xi](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    const auto y = tp.value_of(self).array();
    tp.grad_of(xi).array() += tp.grad_of(self).array() * (1.0 - y * y);
  });
}

Tensor softmax(const Tensor& x) {
  Tape& t = tape_of(x);
  check_finite(x.value(), "softmax");
  const int xi = x.id();
  return t.node(softmax_rows(x.value()), {xi}, [xi](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    const Matrix& p = tp.value_of(self);
    const Matrix& g = tp.grad_of(self);
    Matrix& gx = tp.grad_of(xi);
    for (Index i = 0; i < p.rows(); ++i) {
      const double dot = g.row(i).dot(p.row(i));
      gx.row(i).array() += p.row(i).array() * (g.row(i).array() - dot);
    }
  });
}

Tensor log_softmax(const Tensor& x) {
  Tape& t = tape_of(x);
  check_finite(x.value(), "log_softmax");
  Matrix y(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    const double mx = x.value().row(i).maxCoeff();
    const auto shifted = x.value().row(i).array() - mx;
    y.row(i) = shifted - std::log(shifted.exp().sum());
  }
  const int xi = x.id();
  return t.node(std::move(y), {xi}, [xi](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    const Matrix& y = tp.value_of(self);
    const Matrix& g = tp.grad_of(self);
    Matrix& gx = tp.grad_of(xi);
    for (Index i = 0; i < y.rows(); ++i) {
      const double gsum = g.row(i).sum();
      gx.row(i).array() += g.row(i).array() - y.row(i).array().exp() * gsum;
    }
  });
}

Tensor nll(const Tensor& log_probs, const std::vector<int>& targets) {
  Tape& t = tape_of(log_probs);
  if (static_cast<Index>(targets.size()) != log_probs.rows())
    throw DimensionError("nll: " + std::to_string(targets.size()) + " targets for " +
                         shape_str(log_probs.value()));
  double acc = 0.0;
  for (Index i = 0; i < log_probs.rows(); ++i) {
    const int y = targets[i];
    if (y < 0 || y >= log_probs.cols()) throw DomainError("nll: target out of range");
    acc -= log_probs.value()(i, y);
  }
  Matrix out(1, 1);
  out(0, 0) = acc / static_cast<double>(targets.size());
  const int xi = log_probs.id();
  return t.node(std::move(out), {xi}, [xi, targets](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    const double g = tp.grad_of(self)(0, 0) / static_cast<double>(targets.size());
    Matrix& gx = tp.grad_of(xi);
    for (size_t i = 0; i < targets.size(); ++i) gx(static_cast<Index>(i), targets[i]) -= g;
  });
}

Tensor mse_to(const Tensor& x, const Matrix& target) {
  Tape& t = tape_of(x);
  if (x.rows() != target.rows() || x.cols() != target.cols())
    throw DimensionError("mse_to: " + shape_str(x.value()) + " vs " + shape_str(target));
  const Matrix diff = x.value() - target;
  Matrix out(1, 1);
  const double n = static_cast<double>(diff.size());
  out(0, 0) = diff.array().square().sum() / n;
  const int xi = x.id();
  return t.node(std::move(out), {xi}, [xi, diff, n](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    tp.grad_of(xi) += (2.0 / n) * tp.grad_of(self)(0, 0) * diff;
  });
}

Tensor pick_product(const Tensor& x, const std::vector<std::pair<int, int>>& picks) {
  Tape& t = tape_of(x);
  if (picks.empty()) throw ContractError("pick_product: no picks");
  double prod = 1.0;
  for (auto [r, c] : picks) {
    if (r < 0 || r >= x.rows() || c < 0 || c >= x.cols())
      throw DimensionError("pick_product: pick out of range");
    prod *= x.value()(r, c);
  }
  Matrix out(1, 1);
  out(0, 0) = prod;
  const int xi = x.id();
  return t.node(std::move(out), {xi}, [xi, picks, prod](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    const double g = tp.grad_of(self)(0, 0);
    const Matrix& v = tp.value_of(xi);
    Matrix& gx = tp.grad_of(xi);
    for (size_t i = 0; i < picks.size(); ++i) {
      const double vi = v(picks[i].first, picks[i].second);
      double others;
      if (std::abs(vi) > 1e-300) {
        others = prod / vi;
      } else {
        others = 1.0;
        for (size_t j = 0; j < picks.size(); ++j)
          if (j != i) others *= v(picks[j].first, picks[j].second);
      }
      gx(picks[i].first, picks[i].second) += g * others;
    }
  });
}

Tensor log_guard(const Tensor& x, double eps) {
  Tape& t = tape_of(x);
  const int xi = x.id();
  return t.node((x.value().array() + eps).log().matrix(), {xi}, [xi, eps](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    tp.grad_of(xi).array() +=
        tp.grad_of(self).array() / (tp.value_of(xi).array() + eps);
  });
}

Tensor one_minus(const Tensor& x) {
  Tape& t = tape_of(x);
  const int xi = x.id();
  return t.node((1.0 - x.value().array()).matrix(), {xi}, [xi](Tape& tp, int self) {
    if (tp.wants_grad(xi)) tp.grad_of(xi) -= tp.grad_of(self);
  });
}

Tensor scale(const Tensor& x, double c) {
  Tape& t = tape_of(x);
  const int xi = x.id();
  return t.node(x.value() * c, {xi}, [xi, c](Tape& tp, int self) {
    if (tp.wants_grad(xi)) tp.grad_of(xi) += c * tp.grad_of(self);
  });
}

Tensor sum_all(const Tensor& x) {
  Tape& t = tape_of(x);
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const int xi = x.id();
  return t.node(std::move(out), {xi}, [xi](Tape& tp, int self) {
    if (tp.wants_grad(xi)) tp.grad_of(xi).array() += tp.grad_of(self)(0, 0);
  });
}

Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.value().size()));
}

Tensor mean_of(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ContractError("mean_of: empty");
  Tape& t = tape_of(scalars[0]);
  double acc = 0.0;
  std::vector<int> ids;
  for (const Tensor& s : scalars) {
    if (s.rows() != 1 || s.cols() != 1) throw ContractError("mean_of: non-scalar term");
    acc += s.value()(0, 0);
    ids.push_back(s.id());
  }
  Matrix out(1, 1);
  const double n = static_cast<double>(scalars.size());
  out(0, 0) = acc / n;
  return t.node(std::move(out), ids, [ids, n](Tape& tp, int self) {
    const double g = tp.grad_of(self)(0, 0) / n;
    for (int id : ids)
      if (tp.wants_grad(id)) tp.grad_of(id)(0, 0) += g;
  });
}

Tensor conv2d(const Tensor& x, Parameter& w, Parameter& b, int in_c, int h, int w_pix, int k) {
  Tape& t = tape_of(x);
  const int oh = h - k + 1, ow = w_pix - k + 1;
  const int patch = in_c * k * k;
  const Index filters = w.value.rows();
  if (x.cols() != static_cast<Index>(in_c) * h * w_pix)
    throw DimensionError("conv2d: x " + shape_str(x.value()) + " vs " +
                         std::to_string(in_c * h * w_pix) + " expected columns");
  if (w.value.cols() != patch || b.value.cols() != filters || b.value.rows() != 1)
    throw DimensionError("conv2d: w " + shape_str(w.value) + ", b " + shape_str(b.value));
  Tensor wt = t.watch(w);
  Tensor bt = t.watch(b);

  const Index n = x.rows();
  auto im2col = [oh, ow, in_c, h, w_pix, k](const Matrix& src, Index img, Matrix& col) {
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        Index row = static_cast<Index>(oy) * ow + ox;
        Index p = 0;
        for (int c = 0; c < in_c; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx, ++p)
              col(row, p) = src(img, static_cast<Index>(c) * h * w_pix +
                                         static_cast<Index>(oy + ky) * w_pix + (ox + kx));
      }
  };

  Matrix y(n, filters * oh * ow);
  Matrix col(static_cast<Index>(oh) * ow, patch);
  for (Index img = 0; img < n; ++img) {
    im2col(x.value(), img, col);
    Matrix out_img = col * w.value.transpose();  // [oh*ow, filters]
    out_img.rowwise() += b.value.row(0);
    for (Index f = 0; f < filters; ++f)
      for (Index s = 0; s < static_cast<Index>(oh) * ow; ++s)
        y(img, f * oh * ow + s) = out_img(s, f);
  }

  const int xi = x.id(), wi = wt.id(), bi = bt.id();
  return t.node(std::move(y), {xi, wi, bi},
                [=](Tape& tp, int self) {
    const Matrix& g = tp.grad_of(self);
    const Matrix& xv = tp.value_of(xi);
    const Matrix& wv = tp.value_of(wi);
    const Index n_img = xv.rows();
    Matrix col(static_cast<Index>(oh) * ow, patch);
    Matrix gout(static_cast<Index>(oh) * ow, filters);
    const bool need_x = tp.wants_grad(xi), need_w = tp.wants_grad(wi), need_b = tp.wants_grad(bi);
    for (Index img = 0; img < n_img; ++img) {
      for (Index f = 0; f < filters; ++f)
        for (Index s = 0; s < static_cast<Index>(oh) * ow; ++s)
          gout(s, f) = g(img, f * oh * ow + s);
      if (need_w || need_x) im2col(xv, img, col);
      if (need_w) tp.grad_of(wi).noalias() += gout.transpose() * col;
      if (need_b) tp.grad_of(bi).row(0) += gout.colwise().sum();
      if (need_x) {
        Matrix gcol = gout * wv;  // [oh*ow, patch]
        Matrix& gx = tp.grad_of(xi);
        for (int oy = 0; oy < oh; ++oy)
          for (int ox = 0; ox < ow; ++ox) {
            Index row = static_cast<Index>(oy) * ow + ox;
            Index p = 0;
            for (int c = 0; c < in_c; ++c)
              for (int ky = 0; ky < k; ++ky)
                for (int kx = 0; kx < k; ++kx, ++p)
                  gx(img, static_cast<Index>(c) * h * w_pix +
                              static_cast<Index>(oy + ky) * w_pix + (ox + kx)) += gcol(row, p);
          }
      }
    }
  });
}

Tensor maxpool2(const Tensor& x, int c, int h, int w_pix) {
  Tape& t = tape_of(x);
  if (h % 2 != 0 || w_pix % 2 != 0)
    throw DimensionError("maxpool2: odd spatial size " + std::to_string(h) + "x" +
                         std::to_string(w_pix));
  if (x.cols() != static_cast<Index>(c) * h * w_pix)
    throw DimensionError("maxpool2: x " + shape_str(x.value()));
  const int oh = h / 2, ow = w_pix / 2;
  const Index n = x.rows();
  Matrix y(n, static_cast<Index>(c) * oh * ow);
  std::vector<Index> argmax(static_cast<size_t>(n) * c * oh * ow);
  for (Index img = 0; img < n; ++img) {
    size_t cell = static_cast<size_t>(img) * c * oh * ow;
    for (int ch = 0; ch < c; ++ch)
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox, ++cell) {
          double best = -1e300;
          Index besti = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              Index idx = static_cast<Index>(ch) * h * w_pix +
                          static_cast<Index>(2 * oy + dy) * w_pix + (2 * ox + dx);
              if (x.value()(img, idx) > best) {
                best = x.value()(img, idx);
                besti = idx;
              }
            }
          y(img, static_cast<Index>(ch) * oh * ow + static_cast<Index>(oy) * ow + ox) = best;
          argmax[cell] = besti;
        }
  }
  const int xi = x.id();
  return t.node(std::move(y), {xi}, [xi, argmax, c, oh, ow](Tape& tp, int self) {
    if (!tp.wants_grad(xi)) return;
    const Matrix& g = tp.grad_of(self);
    Matrix& gx = tp.grad_of(xi);
    for (Index img = 0; img < g.rows(); ++img) {
      size_t cell = static_cast<size_t>(img) * c * oh * ow;
      for (Index j = 0; j < g.cols(); ++j, ++cell) gx(img, argmax[cell]) += g(img, j);
    }
  });
}

void adam_step(const std::vector<Parameter*>& params, const AdamConfig& cfg) {
  if (cfg.lr <= 0.0) throw ConfigError("adam_step: lr must be positive");
  for (Parameter* p : params) {
    if (p->trainable) {
      if (p->adam_m.size() == 0) {
        p->adam_m = Matrix::Zero(p->value.rows(), p->value.cols());
        p->adam_v = Matrix::Zero(p->value.rows(), p->value.cols());
      }
      p->adam_steps += 1;
      p->adam_m = cfg.beta1 * p->adam_m + (1.0 - cfg.beta1) * p->grad;
      p->adam_v.array() =
          cfg.beta2 * p->adam_v.array() + (1.0 - cfg.beta2) * p->grad.array().square();
      const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(p->adam_steps));
      const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(p->adam_steps));
      p->value.array() -=
          cfg.lr * (p->adam_m.array() / bc1) / ((p->adam_v.array() / bc2).sqrt() + cfg.eps);
    }
    p->grad.setZero();
  }
}

std::vector<int> argmax_rows(const Matrix& m) {
  std::vector<int> out(static_cast<size_t>(m.rows()));
  for (Index i = 0; i < m.rows(); ++i) {
    Index best = 0;
    m.row(i).maxCoeff(&best);
    out[static_cast<size_t>(i)] = static_cast<int>(best);
  }
  return out;
}

}  // namespace nesy
