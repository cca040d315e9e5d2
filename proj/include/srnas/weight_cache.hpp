#ifndef SRNAS_WEIGHT_CACHE_HPP
#define SRNAS_WEIGHT_CACHE_HPP

#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include "srnas/tensor.hpp"

namespace srnas {

// One named tensor inside a cached weight group.
struct TensorBlob {
  std::string name;  // relative to the node, e.g. "conv.w"
  std::vector<int> shape;
  ArrayX data;
};

using ParamGroup = std::vector<TensorBlob>;

// Per-(node, op) best-weight store. A commit replaces the whole snapshot iff
// its metric strictly beats the stored one (ties lose, first writer keeps the
// slot). Snapshots are immutable once stored; lookups hand out shared
// ownership so a concurrent replacement can never expose a half-written group.
class WeightCache {
 public:
  struct EntryView {
    double metric = 0.0;
    long step = 0;
    std::shared_ptr<const ParamGroup> weights;
  };

  std::optional<EntryView> lookup(int node, int op) const;
  // Returns true iff the commit was accepted.
  bool commit(int node, int op, ParamGroup weights, double metric, long step);

  std::size_t size() const;
  std::vector<std::tuple<int, int, double, long>> index() const;  // node, op, metric, step
  void clear();

  // Directory layout: index.json plus one snapshot file per (node, op).
  void save(const std::string& dir) const;
  // Replaces the whole table with the on-disk index (not a merge).
  void load(const std::string& dir);

 private:
  mutable std::shared_mutex mu_;
  std::map<std::pair<int, int>, EntryView> entries_;
};

}  // namespace srnas

#endif  // SRNAS_WEIGHT_CACHE_HPP
