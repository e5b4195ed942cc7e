#ifndef NESY_PERCEPTION_HPP
#define NESY_PERCEPTION_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "nesy/tensor.hpp"

namespace nesy {

constexpr int kEmbedDim = 84;
constexpr int kImagePixels = 28 * 28;

enum class EncoderKind { mlp, conv };
EncoderKind encoder_kind_of(const std::string& name);

/// f_e: images -> 84-dim embeddings. Either the small LeNet-style conv
/// stack or a 784-256-84 MLP; both end in a linear 84-dim layer.
struct Encoder {
  EncoderKind kind = EncoderKind::mlp;
  std::vector<Parameter> params;

  std::vector<Parameter*> param_ptrs();
  Parameter& by_name(const std::string& name);
  void set_trainable(bool trainable);
};

Encoder make_encoder(EncoderKind kind, Rng& rng);

/// Records the encoder forward for a [n, 784] image batch; output [n, 84].
Tensor encode(Tape& tape, Encoder& enc, const Matrix& images);

/// Forward-only embeddings in fixed-size batches (for caching under a
/// frozen encoder without building giant conv tapes).
Matrix batch_encode(Encoder& enc, const Matrix& images, Index batch = 256);

/// f_m: one linear layer 84 -> k plus softmax.
struct SymbolHead {
  Parameter w, b;
  int k = 0;

  std::vector<Parameter*> param_ptrs();
};

SymbolHead make_symbol_head(int k, Rng& rng, const std::string& prefix = "f_m.");
Tensor symbol_logits(Tape& tape, SymbolHead& head, const Tensor& z);
Tensor map_symbols(Tape& tape, SymbolHead& head, const Tensor& z);  // probability rows

/// Named weight container with a bit-exact binary file format:
/// magic "NSFW1", u32le entry count, per entry u16le name length + name +
/// u8 rank + u32le dims, then all payloads as f64le in entry order.
struct WeightArchive {
  struct Entry {
    std::string name;
    std::vector<uint32_t> dims;
    std::vector<double> data;
  };
  std::vector<Entry> entries;

  bool has(const std::string& name) const;
  const Entry& find(const std::string& name) const;  // LookupError when absent
};

WeightArchive collect_weights(const std::vector<const Parameter*>& params);
void save_archive(const WeightArchive& archive, const std::string& path);
WeightArchive load_archive(const std::string& path);
Matrix entry_matrix(const WeightArchive::Entry& entry);

struct TransferPlan {
  std::string archive_path;
  std::string prefix = "f_e.";
  bool freeze = true;
};

/// Copies archive entries into every target parameter whose name starts
/// with `prefix`, bit-exactly, then clears their trainable flag when
/// `freeze`. Validates all names and shapes first: on error nothing in the
/// target changes. Parameters outside the prefix are untouched.
void inject_weights(const WeightArchive& archive, const std::vector<Parameter*>& target,
                    const std::string& prefix, bool freeze);
void inject_weights(const TransferPlan& plan, const std::vector<Parameter*>& target);

}  // namespace nesy

#endif  // NESY_PERCEPTION_HPP
