#include <cstring>
#include <fstream>

#include "nesy/perception.hpp"

namespace nesy {

namespace {

constexpr char kMagic[5] = {'N', 'S', 'F', 'W', '1'};

void put_u16le(std::string& out, uint16_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>(v >> 8));
}

void put_u32le(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f64le(std::string& out, double d) {
  uint64_t bits;
  std::memcpy(&bits, &d, 8);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xFF));
}

class Reader {
 public:
  Reader(const std::string& path) : path_(path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw FormatError(path + ": cannot open");
    buf_.assign(std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>());
  }

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(buf_[pos_++]);
  }
  uint16_t u16le() {
    need(2);
    uint16_t v = static_cast<uint8_t>(buf_[pos_]) |
                 (static_cast<uint16_t>(static_cast<uint8_t>(buf_[pos_ + 1])) << 8);
    pos_ += 2;
    return v;
  }
  uint32_t u32le() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  double f64le() {
    need(8);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i)
      bits |= static_cast<uint64_t>(static_cast<uint8_t>(buf_[pos_ + i])) << (8 * i);
    pos_ += 8;
    double d;
    std::memcpy(&d, &bits, 8);
    return d;
  }
  std::string str(size_t n) {
    need(n);
    std::string s = buf_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(size_t n) {
    if (pos_ + n > buf_.size())
      throw FormatError(path_ + ": truncated archive at byte " + std::to_string(buf_.size()));
  }
  std::string path_, buf_;
  size_t pos_ = 0;
};

}  // namespace

bool WeightArchive::has(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return true;
  return false;
}

const WeightArchive::Entry& WeightArchive::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw LookupError("archive has no entry " + name);
}

WeightArchive collect_weights(const std::vector<const Parameter*>& params) {
  WeightArchive a;
  for (const Parameter* p : params) {
    if (a.has(p->name)) throw ContractError("duplicate archive entry " + p->name);
    WeightArchive::Entry e;
    e.name = p->name;
    e.dims = {static_cast<uint32_t>(p->value.rows()), static_cast<uint32_t>(p->value.cols())};
    e.data.assign(p->value.data(), p->value.data() + p->value.size());
    a.entries.push_back(std::move(e));
  }
  return a;
}

void save_archive(const WeightArchive& archive, const std::string& path) {
  std::string out(kMagic, sizeof(kMagic));
  put_u32le(out, static_cast<uint32_t>(archive.entries.size()));
  for (const auto& e : archive.entries) {
    if (e.name.size() > 0xFFFF) throw ContractError("archive entry name too long: " + e.name);
    put_u16le(out, static_cast<uint16_t>(e.name.size()));
    out += e.name;
    out.push_back(static_cast<char>(e.dims.size()));
    for (uint32_t d : e.dims) put_u32le(out, d);
  }
  for (const auto& e : archive.entries) {
    size_t expect = 1;
    for (uint32_t d : e.dims) expect *= d;
    if (e.data.size() != expect)
      throw ContractError("archive entry " + e.name + " payload/dims mismatch");
    for (double d : e.data) put_f64le(out, d);
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw FormatError(path + ": cannot open for writing");
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw FormatError(path + ": write failed");
}

WeightArchive load_archive(const std::string& path) {
  Reader r(path);
  const std::string magic = r.str(sizeof(kMagic));
  if (magic != std::string(kMagic, sizeof(kMagic)))
    throw FormatError(path + ": bad archive magic \"" + magic + "\"");
  WeightArchive a;
  const uint32_t count = r.u32le();
  a.entries.resize(count);
  for (auto& e : a.entries) {
    e.name = r.str(r.u16le());
    e.dims.resize(r.u8());
    for (auto& d : e.dims) d = r.u32le();
  }
  for (auto& e : a.entries) {
    size_t n = 1;
    for (uint32_t d : e.dims) n *= d;
    e.data.resize(n);
    for (auto& v : e.data) v = r.f64le();
  }
  return a;
}

Matrix entry_matrix(const WeightArchive::Entry& entry) {
  if (entry.dims.size() != 2)
    throw FormatError("archive entry " + entry.name + " is not rank 2");
  Matrix m(entry.dims[0], entry.dims[1]);
  std::memcpy(m.data(), entry.data.data(), sizeof(double) * entry.data.size());
  return m;
}

}  // namespace nesy
