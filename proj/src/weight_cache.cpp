#include "srnas/weight_cache.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <mutex>

#include <nlohmann/json.hpp>

#include "srnas/errors.hpp"
#include "srnas/snapshot.hpp"

namespace srnas {

namespace fs = std::filesystem;
using nlohmann::json;

std::optional<WeightCache::EntryView> WeightCache::lookup(int node, int op) const {
  std::shared_lock lk(mu_);
  auto it = entries_.find({node, op});
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

bool WeightCache::commit(int node, int op, ParamGroup weights, double metric, long step) {
  auto group = std::make_shared<const ParamGroup>(std::move(weights));
  std::unique_lock lk(mu_);
  auto it = entries_.find({node, op});
  if (it != entries_.end() && !(metric > it->second.metric)) return false;
  entries_[{node, op}] = EntryView{metric, step, std::move(group)};
  return true;
}

std::size_t WeightCache::size() const {
  std::shared_lock lk(mu_);
  return entries_.size();
}

std::vector<std::tuple<int, int, double, long>> WeightCache::index() const {
  std::shared_lock lk(mu_);
  std::vector<std::tuple<int, int, double, long>> out;
  out.reserve(entries_.size());
  for (const auto& [key, e] : entries_) out.emplace_back(key.first, key.second, e.metric, e.step);
  return out;
}

void WeightCache::clear() {
  std::unique_lock lk(mu_);
  entries_.clear();
}

static std::string entry_filename(int node, int op) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "node%02d_op%02d.wts", node, op);
  return buf;
}

void WeightCache::save(const std::string& dir) const {
  // Copy the table under the lock, then do file I/O unlocked.
  std::map<std::pair<int, int>, EntryView> copy;
  {
    std::shared_lock lk(mu_);
    copy = entries_;
  }
  fs::create_directories(dir);
  json idx = json::array();
  for (const auto& [key, e] : copy) {
    const std::string fname = entry_filename(key.first, key.second);
    Snapshot snap;
    snap.meta["kind"] = "weight_group";
    snap.meta["node"] = key.first;
    snap.meta["op"] = key.second;
    snap.meta["metric"] = e.metric;
    snap.meta["step"] = e.step;
    for (const TensorBlob& b : *e.weights) snap.put_f32(b.name, b.shape, b.data.data());
    snap.save(fs::path(dir) / fname);
    idx.push_back({{"node", key.first},
                   {"op", key.second},
                   {"metric", e.metric},
                   {"step", e.step},
                   {"file", fname}});
  }
  const fs::path tmp = fs::path(dir) / "index.json.tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << idx.dump(2) << "\n";
  }
  fs::rename(tmp, fs::path(dir) / "index.json");
}

void WeightCache::load(const std::string& dir) {
  const fs::path idx_path = fs::path(dir) / "index.json";
  std::ifstream in(idx_path);
  if (!in) throw IoError("cannot read " + idx_path.string());
  json idx;
  try {
    in >> idx;
  } catch (const json::exception& e) {
    throw ParseError("bad cache index: " + std::string(e.what()));
  }
  if (!idx.is_array()) throw ParseError("cache index must be an array");
  std::map<std::pair<int, int>, EntryView> table;
  for (const auto& row : idx) {
    const int node = row.at("node").get<int>();
    const int op = row.at("op").get<int>();
    Snapshot snap = Snapshot::load(fs::path(dir) / row.at("file").get<std::string>());
    ParamGroup group;
    group.reserve(snap.entries().size());
    for (const auto& e : snap.entries()) {
      TensorBlob b;
      b.name = e.name;
      b.shape = e.shape;
      b.data = Eigen::Map<const ArrayX>(e.f32(), e.count());
      group.push_back(std::move(b));
    }
    table[{node, op}] = EntryView{row.at("metric").get<double>(), row.at("step").get<long>(),
                                  std::make_shared<const ParamGroup>(std::move(group))};
  }
  std::unique_lock lk(mu_);
  entries_ = std::move(table);
}

}  // namespace srnas
