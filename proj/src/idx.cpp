#include <fstream>

#include "nesy/data.hpp"

namespace nesy {

namespace {

class ByteReader {
 public:
  explicit ByteReader(const std::string& path) : f_(path, std::ios::binary), path_(path) {
    if (!f_) throw FormatError(path + ": cannot open");
  }

  uint8_t u8() {
    int c = f_.get();
    if (c == std::char_traits<char>::eof())
      throw FormatError(path_ + ": truncated at byte " + std::to_string(pos_));
    ++pos_;
    return static_cast<uint8_t>(c);
  }

  uint32_t u32be() {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | u8();
    return v;
  }

  void bytes(uint8_t* dst, size_t n) {
    f_.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    const size_t got = static_cast<size_t>(f_.gcount());
    if (got != n) throw FormatError(path_ + ": truncated at byte " + std::to_string(pos_ + got));
    pos_ += n;
  }

  size_t pos() const { return pos_; }

 private:
  std::ifstream f_;
  std::string path_;
  size_t pos_ = 0;
};

// Reads and validates the IDX header, returning the dimension sizes.
std::vector<uint32_t> read_header(ByteReader& r, const std::string& path, int want_rank) {
  for (int i = 0; i < 2; ++i) {
    if (r.u8() != 0)
      throw FormatError(path + ": bad magic at byte " + std::to_string(i));
  }
  const uint8_t type = r.u8();
  if (type != 0x08)
    throw FormatError(path + ": unsupported type 0x" + std::to_string(type) + " at byte 2");
  const uint8_t rank = r.u8();
  if (rank != want_rank)
    throw FormatError(path + ": rank " + std::to_string(rank) + " at byte 3, expected " +
                      std::to_string(want_rank));
  std::vector<uint32_t> dims(rank);
  for (auto& d : dims) d = r.u32be();
  return dims;
}

void put_u32be(std::ofstream& f, uint32_t v) {
  const uint8_t b[4] = {static_cast<uint8_t>(v >> 24), static_cast<uint8_t>(v >> 16),
                        static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

void write_idx(const std::string& path, const std::vector<uint32_t>& dims,
               const std::vector<uint8_t>& payload) {
  size_t expect = 1;
  for (uint32_t d : dims) expect *= d;
  if (payload.size() != expect)
    throw ContractError(path + ": payload size " + std::to_string(payload.size()) +
                        " does not match dims");
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(path + ": cannot open for writing");
  const uint8_t head[4] = {0, 0, 0x08, static_cast<uint8_t>(dims.size())};
  f.write(reinterpret_cast<const char*>(head), 4);
  for (uint32_t d : dims) put_u32be(f, d);
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!f) throw FormatError(path + ": write failed");
}

}  // namespace

Matrix parse_idx_images(const std::string& path) {
  ByteReader r(path);
  const auto dims = read_header(r, path, 3);
  const uint32_t n = dims[0], h = dims[1], w = dims[2];
  std::vector<uint8_t> raw(static_cast<size_t>(n) * h * w);
  r.bytes(raw.data(), raw.size());
  Matrix out(n, static_cast<Index>(h) * w);
  for (Index i = 0; i < out.rows(); ++i)
    for (Index j = 0; j < out.cols(); ++j)
      out(i, j) = raw[static_cast<size_t>(i) * h * w + static_cast<size_t>(j)] / 255.0;
  return out;
}

std::vector<int> parse_idx_labels(const std::string& path) {
  ByteReader r(path);
  const auto dims = read_header(r, path, 1);
  std::vector<uint8_t> raw(dims[0]);
  r.bytes(raw.data(), raw.size());
  return std::vector<int>(raw.begin(), raw.end());
}

void write_idx_images(const std::string& path, const std::vector<uint8_t>& pixels, uint32_t n,
                      uint32_t h, uint32_t w) {
  write_idx(path, {n, h, w}, pixels);
}

void write_idx_labels(const std::string& path, const std::vector<uint8_t>& labels) {
  write_idx(path, {static_cast<uint32_t>(labels.size())}, labels);
}

ImageStore load_image_store(const std::string& images_path, const std::string& labels_path,
                            Source source) {
  ImageStore store;
  store.images = parse_idx_images(images_path);
  store.labels = parse_idx_labels(labels_path);
  store.source = source;
  if (store.images.rows() != static_cast<Index>(store.labels.size()))
    throw FormatError(images_path + ": " + std::to_string(store.images.rows()) + " images vs " +
                      std::to_string(store.labels.size()) + " labels");
  return store;
}

ImageStore filter_classes(const ImageStore& store, const std::vector<int>& keep) {
  std::vector<Index> rows;
  for (Index i = 0; i < store.count(); ++i) {
    for (int k : keep) {
      if (store.labels[static_cast<size_t>(i)] == k) {
        rows.push_back(i);
        break;
      }
    }
  }
  ImageStore out;
  out.source = store.source;
  out.images.resize(static_cast<Index>(rows.size()), store.images.cols());
  out.labels.reserve(rows.size());
  for (size_t i = 0; i < rows.size(); ++i) {
    out.images.row(static_cast<Index>(i)) = store.images.row(rows[i]);
    out.labels.push_back(store.labels[static_cast<size_t>(rows[i])]);
  }
  return out;
}

}  // namespace nesy
