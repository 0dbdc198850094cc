#include "ykd/params.hpp"

#include <cstring>
#include <fstream>

#include "ykd/common.hpp"
#include "ykd/sha256.hpp"

namespace ykd {

Tensor ParamArray::to_tensor() const {
  Tensor t(shape);
  for (int64_t i = 0; i < numel(); ++i) t[i] = static_cast<double>(data[static_cast<size_t>(i)]);
  return t;
}

void ParamArray::from_tensor(const Tensor& t) {
  YKD_CHECK(t.numel() == numel(), "ParamArray ", name, ": tensor numel mismatch");
  for (int64_t i = 0; i < numel(); ++i) data[static_cast<size_t>(i)] = static_cast<float>(t[i]);
}

ParamArray& ParamSet::add(const std::string& name, std::vector<int> shape) {
  YKD_CHECK(!index_.count(name), "ParamSet: duplicate array ", name);
  ParamArray a;
  a.name = name;
  a.shape = std::move(shape);
  a.data.assign(static_cast<size_t>(Tensor::numel_of(a.shape)), 0.0f);
  index_[name] = arrays_.size();
  arrays_.push_back(std::move(a));
  return arrays_.back();
}

ParamArray& ParamSet::get(const std::string& name) {
  auto it = index_.find(name);
  YKD_CHECK(it != index_.end(), "ParamSet: unknown array ", name);
  return arrays_[it->second];
}

const ParamArray& ParamSet::get(const std::string& name) const {
  auto it = index_.find(name);
  YKD_CHECK(it != index_.end(), "ParamSet: unknown array ", name);
  return arrays_[it->second];
}

int64_t ParamSet::total_params() const {
  int64_t n = 0;
  for (const auto& a : arrays_) n += a.numel();
  return n;
}

std::vector<uint8_t> ParamSet::bytes() const {
  std::vector<uint8_t> out;
  for (const auto& a : arrays_) {
    size_t off = out.size();
    out.resize(off + a.data.size() * 4);
    static_assert(sizeof(float) == 4);
    std::memcpy(out.data() + off, a.data.data(), a.data.size() * 4);
  }
  return out;
}

std::string ParamSet::sha256_hex() const { return ykd::sha256_hex(bytes()); }

bool ParamSet::operator==(const ParamSet& o) const {
  if (arrays_.size() != o.arrays_.size()) return false;
  for (size_t i = 0; i < arrays_.size(); ++i) {
    const auto& a = arrays_[i];
    const auto& b = o.arrays_[i];
    if (a.name != b.name || a.shape != b.shape) return false;
    if (std::memcmp(a.data.data(), b.data.data(), a.data.size() * 4) != 0) return false;
  }
  return true;
}

namespace {

constexpr char kMagic[4] = {'Y', 'K', 'D', '1'};

void put_u32le(std::ofstream& f, uint32_t v) {
  uint8_t b[4] = {uint8_t(v), uint8_t(v >> 8), uint8_t(v >> 16), uint8_t(v >> 24)};
  f.write(reinterpret_cast<const char*>(b), 4);
}

uint32_t get_u32le(std::ifstream& f) {
  uint8_t b[4];
  f.read(reinterpret_cast<char*>(b), 4);
  return uint32_t(b[0]) | (uint32_t(b[1]) << 8) | (uint32_t(b[2]) << 16) |
         (uint32_t(b[3]) << 24);
}

}  // namespace

void write_array_file(const std::string& path, const ParamArray& a) {
  std::ofstream f(path, std::ios::binary);
  YKD_CHECK(f.good(), "write_array_file: cannot open ", path);
  f.write(kMagic, 4);
  uint32_t rows = a.shape.empty() ? 1 : static_cast<uint32_t>(a.shape[0]);
  uint32_t cols = rows == 0 ? 0 : static_cast<uint32_t>(a.numel() / rows);
  put_u32le(f, 2);
  put_u32le(f, rows);
  put_u32le(f, cols);
  if (!a.data.empty()) {
    // Payload is written little-endian; this code targets little-endian
    // hosts (checked at configure time via static data below).
    f.write(reinterpret_cast<const char*>(a.data.data()),
            static_cast<std::streamsize>(a.data.size() * 4));
  }
  YKD_CHECK(f.good(), "write_array_file: write failed for ", path);
}

void read_array_file(const std::string& path, ParamArray& a, const std::string& context) {
  std::ifstream f(path, std::ios::binary);
  YKD_CHECK(f.good(), context, ": missing array file ", path, " for ", a.name);
  char magic[4];
  f.read(magic, 4);
  YKD_CHECK(f.good() && std::memcmp(magic, kMagic, 4) == 0, context, ": ", path,
            " is not a YKD1 array file");
  uint32_t rank = get_u32le(f);
  uint32_t rows = get_u32le(f);
  uint32_t cols = get_u32le(f);
  YKD_CHECK(rank == 2, context, ": ", path, " has unsupported rank ", rank);
  int64_t expect = a.numel();
  YKD_CHECK(static_cast<int64_t>(rows) * cols == expect, context, ": array ", a.name,
            " holds ", static_cast<int64_t>(rows) * cols, " values, manifest shape needs ",
            expect);
  f.read(reinterpret_cast<char*>(a.data.data()), static_cast<std::streamsize>(expect * 4));
  YKD_CHECK(f.good(), context, ": truncated array file ", path);
}

}  // namespace ykd
