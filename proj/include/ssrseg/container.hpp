#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ssrseg/errors.hpp"
#include "ssrseg/tensor.hpp"

namespace ssrseg {

// "SSV1" volume container: u32 LE record count, then per record
//   u16 name length, name bytes, u8 rank, u32 extents[rank], u8 dtype, payload.
// All integers and f32 values are little-endian.

enum class DType : std::uint8_t { F32 = 0, U8 = 1 };

struct Record {
  std::string name;
  Shape extents;
  DType dtype = DType::F32;
  std::vector<float> f32;        // used when dtype == F32
  std::vector<std::uint8_t> u8;  // used when dtype == U8

  std::size_t numel() const { return shape_numel(extents); }
};

Record make_f32_record(std::string name, const Tensor<float>& t);
Record make_u8_record(std::string name, Shape extents, std::vector<std::uint8_t> bytes);

// Binary mask tensor stored as u8; values other than 0 and 1 are a contract error.
Record make_mask_record(std::string name, const Tensor<float>& mask);

// F32 and U8 records both come back as float tensors.
Tensor<float> record_tensor(const Record& r);

std::vector<std::uint8_t> encode_container(const std::vector<Record>& records);
std::vector<Record> decode_container(const std::vector<std::uint8_t>& bytes);

void write_container(const std::filesystem::path& path, const std::vector<Record>& records);
std::vector<Record> read_container(const std::filesystem::path& path);

// Lookup by name; LoadError if absent.
const Record& find_record(const std::vector<Record>& records, const std::string& name);

}  // namespace ssrseg
