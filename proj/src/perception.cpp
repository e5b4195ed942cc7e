#include <algorithm>

#include "nesy/perception.hpp"

namespace nesy {

EncoderKind encoder_kind_of(const std::string& name) {
  if (name == "mlp") return EncoderKind::mlp;
  if (name == "conv") return EncoderKind::conv;
  throw ConfigError("unknown encoder: " + name);
}

std::vector<Parameter*> Encoder::param_ptrs() {
  std::vector<Parameter*> out;
  out.reserve(params.size());
  for (auto& p : params) out.push_back(&p);
  return out;
}

Parameter& Encoder::by_name(const std::string& name) {
  for (auto& p : params)
    if (p.name == name) return p;
  throw LookupError("encoder has no parameter " + name);
}

void Encoder::set_trainable(bool trainable) {
  for (auto& p : params) p.trainable = trainable;
}

Encoder make_encoder(EncoderKind kind, Rng& rng) {
  Encoder enc;
  enc.kind = kind;
  if (kind == EncoderKind::mlp) {
    enc.params.push_back(xavier_uniform("f_e.l1.w", kImagePixels, 256, rng));
    enc.params.push_back(zero_param("f_e.l1.b", 1, 256));
    enc.params.push_back(xavier_uniform("f_e.out.w", 256, kEmbedDim, rng));
    enc.params.push_back(zero_param("f_e.out.b", 1, kEmbedDim));
  } else {
    // LeNet-ish: conv 1->6 k5, pool, conv 6->16 k5, pool, fc 256-120-84.
    enc.params.push_back(xavier_uniform("f_e.conv1.w", 6, 25, rng));
    enc.params.push_back(zero_param("f_e.conv1.b", 1, 6));
    enc.params.push_back(xavier_uniform("f_e.conv2.w", 16, 150, rng));
    enc.params.push_back(zero_param("f_e.conv2.b", 1, 16));
    enc.params.push_back(xavier_uniform("f_e.fc1.w", 256, 120, rng));
    enc.params.push_back(zero_param("f_e.fc1.b", 1, 120));
    enc.params.push_back(xavier_uniform("f_e.out.w", 120, kEmbedDim, rng));
    enc.params.push_back(zero_param("f_e.out.b", 1, kEmbedDim));
  }
  return enc;
}

Tensor encode(Tape& tape, Encoder& enc, const Matrix& images) {
  if (images.cols() != kImagePixels)
    throw DimensionError("encode: images " + shape_str(images) + ", expected cols " +
                         std::to_string(kImagePixels));
  Tensor x = tape.input(images);
  if (enc.kind == EncoderKind::mlp) {
    Tensor h = relu(affine(x, enc.by_name("f_e.l1.w"), enc.by_name("f_e.l1.b")));
    return affine(h, enc.by_name("f_e.out.w"), enc.by_name("f_e.out.b"));
  }
  Tensor c1 = relu(maxpool2(
      conv2d(x, enc.by_name("f_e.conv1.w"), enc.by_name("f_e.conv1.b"), 1, 28, 28, 5), 6, 24, 24));
  Tensor c2 = relu(maxpool2(
      conv2d(c1, enc.by_name("f_e.conv2.w"), enc.by_name("f_e.conv2.b"), 6, 12, 12, 5), 16, 8, 8));
  Tensor h = relu(affine(c2, enc.by_name("f_e.fc1.w"), enc.by_name("f_e.fc1.b")));
  return affine(h, enc.by_name("f_e.out.w"), enc.by_name("f_e.out.b"));
}

Matrix batch_encode(Encoder& enc, const Matrix& images, Index batch) {
  Matrix out(images.rows(), kEmbedDim);
  for (Index start = 0; start < images.rows(); start += batch) {
    const Index n = std::min(batch, images.rows() - start);
    Tape tape;
    out.middleRows(start, n) = encode(tape, enc, images.middleRows(start, n)).value();
  }
  return out;
}

std::vector<Parameter*> SymbolHead::param_ptrs() { return {&w, &b}; }

SymbolHead make_symbol_head(int k, Rng& rng, const std::string& prefix) {
  if (k < 2) throw ConfigError("symbol head needs k >= 2, got " + std::to_string(k));
  SymbolHead head;
  head.k = k;
  head.w = xavier_uniform(prefix + "w", kEmbedDim, k, rng);
  head.b = zero_param(prefix + "b", 1, k);
  return head;
}

Tensor symbol_logits(Tape& tape, SymbolHead& head, const Tensor& z) {
  (void)tape;
  if (z.cols() != kEmbedDim)
    throw DimensionError("symbol_logits: z " + shape_str(z.value()));
  return affine(z, head.w, head.b);
}

Tensor map_symbols(Tape& tape, SymbolHead& head, const Tensor& z) {
  return softmax(symbol_logits(tape, head, z));
}

}  // namespace nesy
