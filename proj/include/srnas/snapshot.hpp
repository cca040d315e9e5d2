#ifndef SRNAS_SNAPSHOT_HPP
#define SRNAS_SNAPSHOT_HPP

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "srnas/tensor.hpp"

namespace srnas {

// Named-tensor container with a free-form JSON meta block. On disk:
//   "SRNS" | u32 version | u64 manifest bytes | manifest JSON | raw payload
// Tensors are little-endian float32 or float64 at byte offsets listed in the
// manifest. Writes go through a temp file + rename so readers never observe a
// half-written snapshot.
class Snapshot {
 public:
  struct Entry {
    std::string name;
    std::string dtype;  // "f32" | "f64"
    std::vector<int> shape;
    std::vector<unsigned char> bytes;

    std::int64_t count() const {
      std::int64_t n = 1;
      for (int d : shape) n *= d;
      return n;
    }
    const float* f32() const { return reinterpret_cast<const float*>(bytes.data()); }
    const double* f64() const { return reinterpret_cast<const double*>(bytes.data()); }
  };

  nlohmann::json meta = nlohmann::json::object();

  void put_f32(const std::string& name, std::vector<int> shape, const float* data);
  void put_f64(const std::string& name, std::vector<int> shape, const double* data);
  const Entry* find(const std::string& name) const;
  const std::vector<Entry>& entries() const { return entries_; }
  bool empty() const { return entries_.empty(); }

  void save(const std::string& path) const;
  static Snapshot load(const std::string& path);

 private:
  std::vector<Entry> entries_;
};

// Dumps every parameter (trainable and buffers) under its registered name.
Snapshot snapshot_params(const std::vector<NamedParam>& params);

// Copies snapshot tensors into matching parameters. Every parameter must be
// present with the exact shape; throws ShapeMismatch otherwise (extra snapshot
// tensors are ignored so snapshots can carry annotations).
void load_params(const Snapshot& snap, const std::vector<NamedParam>& params);

// Best-effort overlay: copies only names present in the snapshot; shapes must
// still match exactly. Returns the number of parameters copied.
int overlay_params(const Snapshot& snap, const std::vector<NamedParam>& params);

}  // namespace srnas

#endif  // SRNAS_SNAPSHOT_HPP
