#ifndef NESY_DATA_HPP
#define NESY_DATA_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "nesy/common.hpp"

namespace nesy {

enum class Source { mnist_digits, emnist_letters };

/// Images as [n, 28*28] rows of floats in [0,1] plus per-image class ids.
struct ImageStore {
  Matrix images;
  std::vector<int> labels;
  Source source = Source::mnist_digits;

  Index count() const { return images.rows(); }
};

// IDX container format (big-endian header: 0x00 0x00, type byte, rank byte,
// u32 dims; payload row-major). Only unsigned-byte payloads (type 0x08).
Matrix parse_idx_images(const std::string& path);            // rank 3 -> [n, h*w] in [0,1]
std::vector<int> parse_idx_labels(const std::string& path);  // rank 1

void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels, uint32_t n,
                      uint32_t h, uint32_t w);
void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels);

ImageStore load_image_store(const std::string& images_path, const std::string& labels_path,
                            Source source);

/// Keeps only images whose label is in `keep` (order preserved).
ImageStore filter_classes(const ImageStore& store, const std::vector<int>& keep);

// Synthetic glyph sets in MNIST/EMNIST layout: stroke prototypes rendered
// with per-image affine jitter and noise. Digit labels are 0..9; letter
// labels follow EMNIST ('A'=1 .. 'H'=8). Class-balanced, shuffled order.
void synth_digits(uint64_t seed, int per_class_train, int per_class_test,
                  std::vector<uint8_t>& train_pixels, std::vector<uint8_t>& train_labels,
                  std::vector<uint8_t>& test_pixels, std::vector<uint8_t>& test_labels);
void synth_letters(uint64_t seed, int per_class_train, int per_class_test,
                   std::vector<uint8_t>& train_pixels, std::vector<uint8_t>& train_labels,
                   std::vector<uint8_t>& test_pixels, std::vector<uint8_t>& test_labels);

/// Writes the four digit files and four letter files into `dir` (MNIST-style
/// names) unless they already exist. Returns true when anything was written.
bool ensure_dataset(const std::string& dir, uint64_t seed = 424242);

struct DatasetPaths {
  std::string digit_train_images, digit_train_labels;
  std::string digit_test_images, digit_test_labels;
  std::string letter_train_images, letter_train_labels;
  std::string letter_test_images, letter_test_labels;
};
DatasetPaths dataset_paths(const std::string& dir);

enum class TaskKind { sum, multidigit_sum, multiop, parity };
enum class Role { digit, op };

TaskKind task_kind_of(const std::string& name);
std::string task_kind_name(TaskKind kind);

struct TaskExample {
  std::vector<int> inputs;  // indices into the composing stores, by role
  std::vector<Role> roles;
  long label = 0;
  std::vector<int> label_digits;  // multidigit only: n+1 digits, most significant first
};

struct TaskSpec {
  TaskKind kind = TaskKind::sum;
  int train_digits = 1;  // sequence length at train time (multidigit/parity)
  int test_digits = 1;
  uint64_t pairing_seed = 0;
  long train_size = 15000;
  long test_size = 5000;
};

struct TaskData {
  std::vector<TaskExample> train, test;
};

/// Builds train/test example lists from disjoint image pools. Train images
/// are paired without replacement; test pools may cycle (reshuffled) when a
/// long-sequence evaluation needs more draws than the pool holds.
/// `op_train`/`op_test` are only consulted for multiop and must hold the
/// operator letters (labels 1..4 for + - x /).
TaskData compose_task(const ImageStore& digit_train, const ImageStore& digit_test,
                      const ImageStore* op_train, const ImageStore* op_test,
                      const TaskSpec& spec);

/// Sorted distinct labels of the examples (class alphabet for label heads).
std::vector<long> label_alphabet(const std::vector<TaskExample>& examples);
int class_index(const std::vector<long>& alphabet, long label);

/// Result of `a op b` where op is an EMNIST operator label 1..4 (+ - x /).
long apply_op(int op_label, int a, int b);

}  // namespace nesy

#endif  // NESY_DATA_HPP
