#ifndef NESY_TENSOR_HPP
#define NESY_TENSOR_HPP

#include <functional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "nesy/common.hpp"

namespace nesy {

/// A named dense array of weights. When `trainable` is false the optimizer
/// never touches `value`, byte for byte, and backward passes skip it.
struct Parameter {
  std::string name;
  Matrix value;
  Matrix grad;
  bool trainable = true;

  // Adam state, allocated on the first optimizer step.
  Matrix adam_m, adam_v;
  long adam_steps = 0;

  Parameter() = default;
  Parameter(std::string name_, Matrix value_, bool trainable_ = true)
      : name(std::move(name_)), value(std::move(value_)), trainable(trainable_) {
    grad = Matrix::Zero(value.rows(), value.cols());
  }
};

Parameter xavier_uniform(const std::string& name, Index fan_in, Index fan_out, Rng& rng);
Parameter zero_param(const std::string& name, Index rows, Index cols);

class Tape;

/// Handle to a node on a tape. Cheap to copy; values live on the tape.
class Tensor {
 public:
  Tensor() = default;
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

/// Reverse-mode tape. Nodes are appended in construction order, which is a
/// topological order by construction; backward walks it once in reverse.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, int)>;

  /// Constant leaf (inputs, cached embeddings). Never receives gradients.
  Tensor input(Matrix value);

  /// Parameter leaf. Watching the same parameter twice on one tape returns
  /// the same node, so gradients from all uses accumulate.
  Tensor watch(Parameter& p);

  /// Generic recorded operation; `back` pulls this node's gradient and
  /// pushes into the parents listed.
  Tensor node(Matrix value, std::vector<int> parents, BackwardFn back);

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse
  /// construction order. Gradients of trainable parameters reachable from
  /// `loss` are accumulated into Parameter::grad.
  void backward(const Tensor& loss);

  /// Drops all nodes (keeps capacity) and forgets watched parameters.
  void reset();

  const Matrix& value_of(int id) const { return nodes_[id].value; }
  Matrix& grad_of(int id);
  bool grad_allocated(int id) const { return nodes_[id].grad.size() > 0; }

  /// False for constant leaves and frozen-parameter leaves: ops may skip
  /// computing gradients flowing into such nodes.
  bool wants_grad(int id) const;

  size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;  // empty until first accumulation
    std::vector<int> parents;
    BackwardFn back;
    Parameter* param = nullptr;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const Parameter*, int> watched_;
};

// Recorded operations. All check shapes; activations also reject
// non-finite inputs.
Tensor affine(const Tensor& x, Parameter& w, Parameter& b);
Tensor linear(const Tensor& x, Parameter& w);
Tensor add(const Tensor& a, const Tensor& b);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor relu(const Tensor& x);
Tensor tanh(const Tensor& x);
Tensor softmax(const Tensor& x);      // rowwise
Tensor log_softmax(const Tensor& x);  // rowwise

/// Mean over rows of -log_probs[i, target[i]].
Tensor nll(const Tensor& log_probs, const std::vector<int>& targets);

/// Mean squared difference against a fixed target (the target is a plain
/// matrix, so no gradient flows into it).
Tensor mse_to(const Tensor& x, const Matrix& target);

/// Product of the picked entries, one scalar out.
Tensor pick_product(const Tensor& x, const std::vector<std::pair<int, int>>& picks);

Tensor log_guard(const Tensor& x, double eps);  // elementwise log(x + eps)
Tensor one_minus(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

/// Mean of scalar (1x1) tensors.
Tensor mean_of(const std::vector<Tensor>& scalars);

/// Valid-padding stride-1 convolution on row-major (c, y, x) image rows.
/// x: [n, in_c*h*w], w: [filters, in_c*k*k], b: [1, filters],
/// out: [n, filters*(h-k+1)*(w-k+1)].
Tensor conv2d(const Tensor& x, Parameter& w, Parameter& b, int in_c, int h, int w_pix, int k);

/// 2x2 max pooling, stride 2. x: [n, c*h*w] -> [n, c*(h/2)*(w/2)].
Tensor maxpool2(const Tensor& x, int c, int h, int w_pix);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One Adam update on every trainable parameter, then zeroes all grads.
/// Frozen parameters are left bit-identical.
void adam_step(const std::vector<Parameter*>& params, const AdamConfig& cfg);

std::vector<int> argmax_rows(const Matrix& m);

}  // namespace nesy

#endif  // NESY_TENSOR_HPP
