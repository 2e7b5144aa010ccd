#include "ssrseg/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>
#include <set>

namespace ssrseg {

namespace {

constexpr char kMagic[4] = {'S', 'S', 'V', '1'};

class Writer {
 public:
  void bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    out_.insert(out_.end(), b, b + n);
  }
  void u8(std::uint8_t v) { out_.push_back(v); }
  void u16(std::uint16_t v) {
    u8(static_cast<std::uint8_t>(v));
    u8(static_cast<std::uint8_t>(v >> 8));
  }
  void u32(std::uint32_t v) {
    for (int s = 0; s < 32; s += 8) u8(static_cast<std::uint8_t>(v >> s));
  }
  std::vector<std::uint8_t> take() { return std::move(out_); }

 private:
  std::vector<std::uint8_t> out_;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& in) : in_(in) {}

  std::size_t offset() const { return pos_; }
  bool at_end() const { return pos_ == in_.size(); }

  const std::uint8_t* take(std::size_t n, const char* what) {
    if (in_.size() - pos_ < n) {
      throw FormatError(std::string("truncated ") + what + ": need " + std::to_string(n) +
                            " bytes, " + std::to_string(in_.size() - pos_) + " left",
                        pos_);
    }
    const std::uint8_t* p = in_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::uint8_t u8(const char* what) { return *take(1, what); }
  std::uint16_t u16(const char* what) {
    const auto* p = take(2, what);
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
  }
  std::uint32_t u32(const char* what) {
    const auto* p = take(4, what);
    std::uint32_t v = 0;
    for (int i = 3; i >= 0; --i) v = (v << 8) | p[i];
    return v;
  }

 private:
  const std::vector<std::uint8_t>& in_;
  std::size_t pos_ = 0;
};

}  // namespace

Record make_f32_record(std::string name, const Tensor<float>& t) {
  Record r;
  r.name = std::move(name);
  r.extents = t.shape();
  r.dtype = DType::F32;
  r.f32.assign(t.data().begin(), t.data().end());
  return r;
}

Record make_u8_record(std::string name, Shape extents, std::vector<std::uint8_t> bytes) {
  if (bytes.size() != shape_numel(extents)) {
    throw ContractError("u8 record '" + name + "': " + std::to_string(bytes.size()) +
                        " bytes for extents " + shape_str(extents));
  }
  Record r;
  r.name = std::move(name);
  r.extents = std::move(extents);
  r.dtype = DType::U8;
  r.u8 = std::move(bytes);
  return r;
}

Record make_mask_record(std::string name, const Tensor<float>& mask) {
  std::vector<std::uint8_t> bytes(mask.numel());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const float v = mask.data()[i];
    if (v != 0.0f && v != 1.0f) {
      throw ContractError("mask record '" + name + "' holds non-binary value " + std::to_string(v));
    }
    bytes[i] = static_cast<std::uint8_t>(v);
  }
  return make_u8_record(std::move(name), mask.shape(), std::move(bytes));
}

Tensor<float> record_tensor(const Record& r) {
  if (r.dtype == DType::F32) return Tensor<float>(r.extents, r.f32);
  return Tensor<float>(r.extents, std::vector<float>(r.u8.begin(), r.u8.end()));
}

std::vector<std::uint8_t> encode_container(const std::vector<Record>& records) {
  if (records.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw ContractError("container: too many records");
  }
  std::set<std::string> seen;
  Writer w;
  w.bytes(kMagic, 4);
  w.u32(static_cast<std::uint32_t>(records.size()));
  for (const auto& r : records) {
    if (r.name.empty() || r.name.size() > std::numeric_limits<std::uint16_t>::max()) {
      throw ContractError("container: record name length must be in [1, 65535]");
    }
    if (!seen.insert(r.name).second) throw ContractError("container: duplicate record name '" + r.name + "'");
    if (r.extents.size() > std::numeric_limits<std::uint8_t>::max()) {
      throw ContractError("container: record '" + r.name + "' has rank above 255");
    }
    const std::size_t n = r.numel();
    const std::size_t have = r.dtype == DType::F32 ? r.f32.size() : r.u8.size();
    if (have != n) {
      throw ContractError("container: record '" + r.name + "' has " + std::to_string(have) +
                          " values for extents " + shape_str(r.extents));
    }
    w.u16(static_cast<std::uint16_t>(r.name.size()));
    w.bytes(r.name.data(), r.name.size());
    w.u8(static_cast<std::uint8_t>(r.extents.size()));
    for (auto e : r.extents) {
      if (e > std::numeric_limits<std::uint32_t>::max()) {
        throw ContractError("container: extent too large in '" + r.name + "'");
      }
      w.u32(static_cast<std::uint32_t>(e));
    }
    w.u8(static_cast<std::uint8_t>(r.dtype));
    if (r.dtype == DType::F32) {
      for (float v : r.f32) w.u32(std::bit_cast<std::uint32_t>(v));
    } else {
      w.bytes(r.u8.data(), r.u8.size());
    }
  }
  return w.take();
}

std::vector<Record> decode_container(const std::vector<std::uint8_t>& bytes) {
  Reader in(bytes);
  if (std::memcmp(in.take(4, "magic"), kMagic, 4) != 0) throw FormatError("bad magic, expected SSV1", 0);
  const std::uint32_t count = in.u32("record count");
  std::vector<Record> out;
  std::set<std::string> seen;
  for (std::uint32_t k = 0; k < count; ++k) {
    Record r;
    const std::size_t record_start = in.offset();
    const std::uint16_t len = in.u16("name length");
    const auto* name = in.take(len, "name");
    r.name.assign(reinterpret_cast<const char*>(name), len);
    if (!seen.insert(r.name).second) {
      throw FormatError("duplicate record name '" + r.name + "'", record_start);
    }
    const std::uint8_t rank = in.u8("rank");
    for (std::uint8_t i = 0; i < rank; ++i) r.extents.push_back(in.u32("extent"));
    const std::size_t dtype_at = in.offset();
    const std::uint8_t code = in.u8("dtype");
    if (code > 1) throw FormatError("unknown dtype code " + std::to_string(code), dtype_at);
    r.dtype = static_cast<DType>(code);
    const std::size_t elem = r.dtype == DType::F32 ? 4 : 1;
    const std::size_t left = bytes.size() - in.offset();
    std::size_t n = 1;
    for (auto e : r.extents) {
      if (e != 0 && n > left / elem / e) {
        throw FormatError("truncated payload of '" + r.name + "': extents " + shape_str(r.extents) +
                              " exceed the " + std::to_string(left) + " bytes left",
                          in.offset());
      }
      n *= e;
    }
    if (r.dtype == DType::F32) {
      const auto* p = in.take(n * 4, "f32 payload");
      r.f32.resize(n);
      for (std::size_t i = 0; i < n; ++i) {
        std::uint32_t v = 0;
        for (int b = 3; b >= 0; --b) v = (v << 8) | p[4 * i + b];
        r.f32[i] = std::bit_cast<float>(v);
      }
    } else {
      const auto* p = in.take(n, "u8 payload");
      r.u8.assign(p, p + n);
    }
    out.push_back(std::move(r));
  }
  if (!in.at_end()) throw FormatError("trailing bytes after last record", in.offset());
  return out;
}

void write_container(const std::filesystem::path& path, const std::vector<Record>& records) {
  const auto bytes = encode_container(records);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

std::vector<Record> read_container(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open '" + path.string() + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  try {
    return decode_container(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.reason(), e.offset());
  }
}

const Record& find_record(const std::vector<Record>& records, const std::string& name) {
  for (const auto& r : records) {
    if (r.name == name) return r;
  }
  throw LoadError("container has no record named '" + name + "'");
}

}  // namespace ssrseg
