#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "ykd/tensor.hpp"

namespace ykd {

// One named parameter array. Canonical storage is float32 (matching the
// checkpoint encoding bit for bit); compute widens to double on entry
// and quantizes back on update.
struct ParamArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;

  int64_t numel() const { return static_cast<int64_t>(data.size()); }
  Tensor to_tensor() const;
  void from_tensor(const Tensor& t);
};

// Ordered named collection (one per backbone / FE branch / head).
class ParamSet {
 public:
  ParamArray& add(const std::string& name, std::vector<int> shape);
  bool has(const std::string& name) const { return index_.count(name) != 0; }
  ParamArray& get(const std::string& name);
  const ParamArray& get(const std::string& name) const;

  std::vector<ParamArray>& arrays() { return arrays_; }
  const std::vector<ParamArray>& arrays() const { return arrays_; }

  int64_t total_params() const;
  // Concatenated little-endian float32 bytes in array order.
  std::vector<uint8_t> bytes() const;
  std::string sha256_hex() const;

  bool operator==(const ParamSet& o) const;

 private:
  std::vector<ParamArray> arrays_;
  std::map<std::string, size_t> index_;
};

// Array file codec: 16-byte header (magic "YKD1", u32 rank = 2, u32 rows,
// u32 cols, little-endian) followed by row-major float32 payload. Arrays
// of any rank are stored two-dimensional (leading dim x rest); the true
// shape lives in the checkpoint manifest.
void write_array_file(const std::string& path, const ParamArray& a);
// Reads payload into `a` (name/shape already set from the manifest);
// `context` names the collection for error messages.
void read_array_file(const std::string& path, ParamArray& a, const std::string& context);

}  // namespace ykd
