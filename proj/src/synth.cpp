#include <algorithm>
#include <cmath>
#include <filesystem>

#include "nesy/data.hpp"

// Synthetic stand-in for the MNIST/EMNIST archives: each class is a fixed
// set of strokes in a unit box, rendered at 28x28 with per-image rotation,
// anisotropic scale, slant, translation, stroke-width and endpoint jitter,
// plus pixel noise. Written/read through the same IDX files real archives
// use, so the ingest path stays identical.

namespace nesy {

namespace {

struct P {
  double x, y;
};
using Stroke = std::vector<P>;
using Glyph = std::vector<Stroke>;

Stroke ring(double cx, double cy, double rx, double ry, int n = 12) {
  Stroke s;
  for (int i = 0; i <= n; ++i) {
    const double a = 2.0 * M_PI * i / n;
    s.push_back({cx + rx * std::sin(a), cy - ry * std::cos(a)});
  }
  return s;
}

Glyph digit_glyph(int d) {
  switch (d) {
    case 0:
      return {ring(0.5, 0.5, 0.3, 0.4)};
    case 1:
      return {{{0.32, 0.28}, {0.55, 0.1}, {0.55, 0.9}}};
    case 2:
      return {{{0.22, 0.3}, {0.35, 0.12}, {0.62, 0.1}, {0.76, 0.28}, {0.6, 0.52}, {0.22, 0.88}},
              {{0.22, 0.88}, {0.78, 0.88}}};
    case 3:
      return {{{0.25, 0.18}, {0.5, 0.08}, {0.72, 0.22}, {0.52, 0.44}},
              {{0.52, 0.44}, {0.78, 0.6}, {0.68, 0.85}, {0.42, 0.94}, {0.22, 0.82}}};
    case 4:
      return {{{0.66, 0.1}, {0.2, 0.62}, {0.84, 0.62}}, {{0.64, 0.34}, {0.64, 0.94}}};
    case 5:
      return {{{0.75, 0.1}, {0.3, 0.1}, {0.26, 0.48}},
              {{0.26, 0.48}, {0.58, 0.42}, {0.76, 0.62}, {0.6, 0.88}, {0.24, 0.84}}};
    case 6:
      return {{{0.68, 0.08}, {0.42, 0.32}, {0.3, 0.6}}, ring(0.5, 0.72, 0.21, 0.2)};
    case 7:
      return {{{0.2, 0.12}, {0.8, 0.12}, {0.46, 0.9}}, {{0.32, 0.5}, {0.66, 0.5}}};
    case 8:
      return {ring(0.5, 0.29, 0.19, 0.18), ring(0.5, 0.7, 0.24, 0.23)};
    case 9:
      return {ring(0.52, 0.3, 0.2, 0.2), {{0.72, 0.32}, {0.68, 0.62}, {0.52, 0.92}}};
    default:
      throw DomainError("digit_glyph: " + std::to_string(d));
  }
}

Glyph letter_glyph(int label) {  // EMNIST letters: 1='A' .. 8='H'
  switch (label) {
    case 1:  // A
      return {{{0.2, 0.9}, {0.5, 0.08}, {0.8, 0.9}}, {{0.33, 0.6}, {0.67, 0.6}}};
    case 2:  // B
      return {{{0.26, 0.1}, {0.26, 0.9}},
              {{0.26, 0.1}, {0.58, 0.12}, {0.68, 0.3}, {0.26, 0.48}},
              {{0.26, 0.48}, {0.68, 0.54}, {0.74, 0.74}, {0.58, 0.9}, {0.26, 0.9}}};
    case 3:  // C
      return {{{0.74, 0.2}, {0.52, 0.08}, {0.3, 0.24}, {0.22, 0.52}, {0.32, 0.82}, {0.56, 0.93},
               {0.76, 0.8}}};
    case 4:  // D
      return {{{0.26, 0.1}, {0.26, 0.9}},
              {{0.26, 0.1}, {0.58, 0.14}, {0.76, 0.5}, {0.58, 0.86}, {0.26, 0.9}}};
    case 5:  // E
      return {{{0.28, 0.1}, {0.28, 0.9}},
              {{0.28, 0.1}, {0.74, 0.1}},
              {{0.28, 0.5}, {0.64, 0.5}},
              {{0.28, 0.9}, {0.74, 0.9}}};
    case 6:  // F
      return {{{0.3, 0.1}, {0.3, 0.92}}, {{0.3, 0.1}, {0.76, 0.1}}, {{0.3, 0.5}, {0.66, 0.5}}};
    case 7:  // G
      return {{{0.74, 0.2}, {0.5, 0.08}, {0.28, 0.26}, {0.22, 0.54}, {0.32, 0.84}, {0.58, 0.93},
               {0.76, 0.78}, {0.76, 0.58}},
              {{0.76, 0.58}, {0.52, 0.58}}};
    case 8:  // H
      return {{{0.26, 0.08}, {0.26, 0.92}}, {{0.74, 0.08}, {0.74, 0.92}},
              {{0.26, 0.5}, {0.74, 0.5}}};
    default:
      throw DomainError("letter_glyph: " + std::to_string(label));
  }
}

double seg_dist(double px, double py, const P& a, const P& b) {
  const double vx = b.x - a.x, vy = b.y - a.y;
  const double len2 = vx * vx + vy * vy;
  double t = len2 > 0 ? ((px - a.x) * vx + (py - a.y) * vy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

void render(const Glyph& glyph, Rng& rng, uint8_t* out) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  const double theta = (u01(rng) - 0.5) * 0.36;
  const double slant = (u01(rng) - 0.5) * 0.36;
  const double sx = 0.82 + 0.28 * u01(rng);
  const double sy = 0.82 + 0.28 * u01(rng);
  const double dx = (u01(rng) - 0.5) * 3.0;
  const double dy = (u01(rng) - 0.5) * 3.0;
  const double width = 0.9 + 0.8 * u01(rng);
  const double ink = 0.72 + 0.28 * u01(rng);
  const double ct = std::cos(theta), st = std::sin(theta);

  // Unit box -> 20px glyph box centered in 28px, then jittered affine
  // about the image center.
  auto map = [&](P p) {
    const double gx = 4.0 + 20.0 * p.x - 14.0;
    const double gy = 4.0 + 20.0 * p.y - 14.0;
    const double ax = sx * (gx + slant * gy);
    const double ay = sy * gy;
    return P{ct * ax - st * ay + 14.0 + dx, st * ax + ct * ay + 14.0 + dy};
  };

  std::vector<std::pair<P, P>> segs;
  for (const Stroke& s : glyph) {
    Stroke t(s.size());
    for (size_t i = 0; i < s.size(); ++i) {
      P p = s[i];
      p.x += (u01(rng) - 0.5) * 0.06;
      p.y += (u01(rng) - 0.5) * 0.06;
      t[i] = map(p);
    }
    for (size_t i = 0; i + 1 < t.size(); ++i) segs.emplace_back(t[i], t[i + 1]);
  }

  std::normal_distribution<double> noise(0.0, 5.0);
  for (int y = 0; y < 28; ++y)
    for (int x = 0; x < 28; ++x) {
      double d = 1e9;
      for (const auto& [a, b] : segs) d = std::min(d, seg_dist(x + 0.5, y + 0.5, a, b));
      const double core = 0.45 * width;
      double v = d <= core ? 1.0 : std::max(0.0, 1.0 - (d - core) / 0.9);
      double px = 255.0 * ink * v + noise(rng);
      out[y * 28 + x] = static_cast<uint8_t>(std::clamp(px, 0.0, 255.0));
    }
}

void synth_set(uint64_t seed, int classes, int base_label, int per_class_train,
               int per_class_test, bool letters, std::vector<uint8_t>& train_pixels,
               std::vector<uint8_t>& train_labels, std::vector<uint8_t>& test_pixels,
               std::vector<uint8_t>& test_labels) {
  Rng rng(seed);
  auto fill = [&](int per_class, std::vector<uint8_t>& pixels, std::vector<uint8_t>& labels) {
    std::vector<uint8_t> order;
    order.reserve(static_cast<size_t>(per_class) * classes);
    for (int c = 0; c < classes; ++c)
      for (int i = 0; i < per_class; ++i) order.push_back(static_cast<uint8_t>(base_label + c));
    std::shuffle(order.begin(), order.end(), rng);
    pixels.resize(order.size() * 784);
    labels = order;
    for (size_t i = 0; i < order.size(); ++i) {
      const Glyph g = letters ? letter_glyph(order[i]) : digit_glyph(order[i]);
      render(g, rng, pixels.data() + i * 784);
    }
  };
  fill(per_class_train, train_pixels, train_labels);
  fill(per_class_test, test_pixels, test_labels);
}

}  // namespace

void synth_digits(uint64_t seed, int per_class_train, int per_class_test,
                  std::vector<uint8_t>& train_pixels, std::vector<uint8_t>& train_labels,
                  std::vector<uint8_t>& test_pixels, std::vector<uint8_t>& test_labels) {
  synth_set(seed, 10, 0, per_class_train, per_class_test, false, train_pixels, train_labels,
            test_pixels, test_labels);
}

void synth_letters(uint64_t seed, int per_class_train, int per_class_test,
                   std::vector<uint8_t>& train_pixels, std::vector<uint8_t>& train_labels,
                   std::vector<uint8_t>& test_pixels, std::vector<uint8_t>& test_labels) {
  synth_set(seed, 8, 1, per_class_train, per_class_test, true, train_pixels, train_labels,
            test_pixels, test_labels);
}

DatasetPaths dataset_paths(const std::string& dir) {
  DatasetPaths p;
  p.digit_train_images = dir + "/train-images-idx3-ubyte";
  p.digit_train_labels = dir + "/train-labels-idx1-ubyte";
  p.digit_test_images = dir + "/t10k-images-idx3-ubyte";
  p.digit_test_labels = dir + "/t10k-labels-idx1-ubyte";
  p.letter_train_images = dir + "/letters-train-images-idx3-ubyte";
  p.letter_train_labels = dir + "/letters-train-labels-idx1-ubyte";
  p.letter_test_images = dir + "/letters-test-images-idx3-ubyte";
  p.letter_test_labels = dir + "/letters-test-labels-idx1-ubyte";
  return p;
}

bool ensure_dataset(const std::string& dir, uint64_t seed) {
  namespace fs = std::filesystem;
  const DatasetPaths p = dataset_paths(dir);
  const std::vector<std::string> all = {p.digit_train_images,  p.digit_train_labels,
                                        p.digit_test_images,   p.digit_test_labels,
                                        p.letter_train_images, p.letter_train_labels,
                                        p.letter_test_images,  p.letter_test_labels};
  bool complete = true;
  for (const auto& f : all)
    if (!fs::exists(f)) complete = false;
  if (complete) return false;

  fs::create_directories(dir);
  std::vector<uint8_t> tr_px, tr_lb, te_px, te_lb;
  synth_digits(seed, 6000, 1000, tr_px, tr_lb, te_px, te_lb);
  write_idx_images(p.digit_train_images, tr_px, static_cast<uint32_t>(tr_lb.size()), 28, 28);
  write_idx_labels(p.digit_train_labels, tr_lb);
  write_idx_images(p.digit_test_images, te_px, static_cast<uint32_t>(te_lb.size()), 28, 28);
  write_idx_labels(p.digit_test_labels, te_lb);

  synth_letters(seed + 1, 4000, 1500, tr_px, tr_lb, te_px, te_lb);
  write_idx_images(p.letter_train_images, tr_px, static_cast<uint32_t>(tr_lb.size()), 28, 28);
  write_idx_labels(p.letter_train_labels, tr_lb);
  write_idx_images(p.letter_test_images, te_px, static_cast<uint32_t>(te_lb.size()), 28, 28);
  write_idx_labels(p.letter_test_labels, te_lb);
  return true;
}

}  // namespace nesy
