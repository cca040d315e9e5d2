#include "srnas/snapshot.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "srnas/errors.hpp"

namespace srnas {

namespace {
constexpr char kMagic[4] = {'S', 'R', 'N', 'S'};
constexpr std::uint32_t kVersion = 1;
}  // namespace

void Snapshot::put_f32(const std::string& name, std::vector<int> shape, const float* data) {
  Entry e;
  e.name = name;
  e.dtype = "f32";
  e.shape = std::move(shape);
  e.bytes.resize(static_cast<std::size_t>(e.count()) * sizeof(float));
  std::memcpy(e.bytes.data(), data, e.bytes.size());
  entries_.push_back(std::move(e));
}

void Snapshot::put_f64(const std::string& name, std::vector<int> shape, const double* data) {
  Entry e;
  e.name = name;
  e.dtype = "f64";
  e.shape = std::move(shape);
  e.bytes.resize(static_cast<std::size_t>(e.count()) * sizeof(double));
  std::memcpy(e.bytes.data(), data, e.bytes.size());
  entries_.push_back(std::move(e));
}

const Snapshot::Entry* Snapshot::find(const std::string& name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e;
  return nullptr;
}

void Snapshot::save(const std::string& path) const {
  nlohmann::json manifest;
  manifest["meta"] = meta;
  nlohmann::json tensors = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& e : entries_) {
    tensors.push_back({{"name", e.name},
                       {"dtype", e.dtype},
                       {"shape", e.shape},
                       {"offset", offset},
                       {"nbytes", e.bytes.size()}});
    offset += e.bytes.size();
  }
  manifest["tensors"] = tensors;
  const std::string mstr = manifest.dump();

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("snapshot: cannot open " + tmp + " for writing");
    f.write(kMagic, 4);
    std::uint32_t ver = kVersion;
    f.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
    std::uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&mlen), sizeof(mlen));
    f.write(mstr.data(), static_cast<std::streamsize>(mstr.size()));
    for (const auto& e : entries_)
      f.write(reinterpret_cast<const char*>(e.bytes.data()),
              static_cast<std::streamsize>(e.bytes.size()));
    if (!f) throw IoError("snapshot: write failed for " + tmp);
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0)
    throw IoError("snapshot: rename to " + path + " failed");
}

Snapshot Snapshot::load(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("snapshot: cannot open " + path);
  char magic[4];
  f.read(magic, 4);
  if (!f || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("snapshot: bad magic in " + path);
  std::uint32_t ver = 0;
  f.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (!f || ver != kVersion) throw IoError("snapshot: unsupported version in " + path);
  std::uint64_t mlen = 0;
  f.read(reinterpret_cast<char*>(&mlen), sizeof(mlen));
  if (!f) throw IoError("snapshot: truncated header in " + path);
  std::string mstr(mlen, '\0');
  f.read(mstr.data(), static_cast<std::streamsize>(mlen));
  if (!f) throw IoError("snapshot: truncated manifest in " + path);
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(mstr);
  } catch (const nlohmann::json::parse_error& e) {
    throw IoError("snapshot: corrupt manifest in " + path + ": " + e.what());
  }
  Snapshot snap;
  snap.meta = manifest.value("meta", nlohmann::json::object());
  for (const auto& t : manifest["tensors"]) {
    Entry e;
    e.name = t.at("name").get<std::string>();
    e.dtype = t.at("dtype").get<std::string>();
    e.shape = t.at("shape").get<std::vector<int>>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    e.bytes.resize(nbytes);
    f.read(reinterpret_cast<char*>(e.bytes.data()), static_cast<std::streamsize>(nbytes));
    if (!f) throw IoError("snapshot: truncated payload in " + path);
    snap.entries_.push_back(std::move(e));
  }
  return snap;
}

Snapshot snapshot_params(const std::vector<NamedParam>& params) {
  Snapshot snap;
  for (const auto& p : params)
    snap.put_f32(p.name, p.param->shape, p.param->value.data());
  return snap;
}

namespace {

void copy_entry(const Snapshot::Entry& e, const NamedParam& p) {
  if (e.dtype != "f32")
    throw ShapeMismatch("param '" + p.name + "': dtype " + e.dtype + ", expected f32");
  if (e.shape != p.param->shape)
    throw ShapeMismatch("param '" + p.name + "': stored shape " + shape_str(e.shape) +
                        " vs expected " + shape_str(p.param->shape));
  std::memcpy(p.param->value.data(), e.f32(),
              static_cast<std::size_t>(p.param->numel()) * sizeof(float));
}

}  // namespace

void load_params(const Snapshot& snap, const std::vector<NamedParam>& params) {
  for (const auto& p : params) {
    const auto* e = snap.find(p.name);
    if (!e) throw ShapeMismatch("param '" + p.name + "' missing from snapshot");
    copy_entry(*e, p);
  }
}

int overlay_params(const Snapshot& snap, const std::vector<NamedParam>& params) {
  int copied = 0;
  for (const auto& p : params) {
    const auto* e = snap.find(p.name);
    if (!e) continue;
    copy_entry(*e, p);
    ++copied;
  }
  return copied;
}

}  // namespace srnas
