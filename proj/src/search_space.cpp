#include "srnas/search_space.hpp"

#include <algorithm>
#include <limits>

#include <nlohmann/json.hpp>

#include "srnas/rng.hpp"

namespace srnas {

const std::vector<OpSpec>& generator_ops() {
  static const std::vector<OpSpec> ops = {
      {OpFamily::Conv, 1, 1, "conv1"},
      {OpFamily::Conv, 3, 1, "conv3"},
      {OpFamily::Conv, 5, 1, "conv5"},
      {OpFamily::Conv, 7, 1, "conv7"},
      {OpFamily::GroupConv, 3, 4, "gconv3"},
      {OpFamily::GroupConv, 5, 4, "gconv5"},
      {OpFamily::GroupConv, 7, 4, "gconv7"},
      {OpFamily::DSep, 3, 1, "dsep3"},
      {OpFamily::DSep, 5, 1, "dsep5"},
      {OpFamily::DSep, 7, 1, "dsep7"},
      {OpFamily::InvBlock, 3, 1, "inv3"},
      {OpFamily::InvBlock, 5, 1, "inv5"},
      {OpFamily::InvBlock, 7, 1, "inv7"},
      {OpFamily::SEBlock, 0, 1, "se"},
      {OpFamily::CABlock, 0, 1, "ca"},
      {OpFamily::Identity, 0, 1, "identity"},
  };
  return ops;
}

const std::vector<OpSpec>& reduction_ops() {
  static const std::vector<OpSpec> ops = {
      {OpFamily::Conv, 1, 1, "rconv1"},
      {OpFamily::Conv, 3, 1, "rconv3"},
      {OpFamily::Conv, 5, 1, "rconv5"},
      {OpFamily::Conv, 7, 1, "rconv7"},
      {OpFamily::GroupConv, 3, 4, "rgconv3"},
      {OpFamily::GroupConv, 5, 4, "rgconv5"},
      {OpFamily::GroupConv, 7, 4, "rgconv7"},
  };
  return ops;
}

const char* space_name(SpaceKind k) {
  return k == SpaceKind::Generator ? "generator" : "discriminator";
}

SpaceKind space_from_name(const std::string& s) {
  if (s == "generator") return SpaceKind::Generator;
  if (s == "discriminator") return SpaceKind::Discriminator;
  throw ParseError("space: unknown value '" + s + "'");
}

std::vector<int> decision_dims(SpaceKind k) {
  std::vector<int> dims;
  if (k == SpaceKind::Generator) {
    const int n_ops = static_cast<int>(generator_ops().size());
    for (int i = 1; i <= kCellNodes; ++i) {
      dims.push_back(n_ops);
      dims.push_back(i);  // input ref: cell input or any earlier node
    }
  } else {
    const int n_ops = static_cast<int>(generator_ops().size());
    const int n_red = static_cast<int>(reduction_ops().size());
    for (int b = 0; b < kDiscBlocks; ++b) {
      dims.push_back(n_ops);
      dims.push_back(n_red);
    }
  }
  return dims;
}

namespace {

void check_decisions(const Genome& g, SpaceKind expect) {
  if (g.space != expect)
    throw InvalidGenome(std::string("genome is for space '") + space_name(g.space) +
                        "', expected '" + space_name(expect) + "'");
  const auto dims = decision_dims(expect);
  if (g.decisions.size() != dims.size())
    throw InvalidGenome("genome has " + std::to_string(g.decisions.size()) +
                        " decisions, expected " + std::to_string(dims.size()));
  for (std::size_t i = 0; i < dims.size(); ++i) {
    const int d = g.decisions[i];
    if (d < 0 || d >= dims[i])
      throw InvalidGenome("decision " + std::to_string(i) + " = " + std::to_string(d) +
                          " out of range [0," + std::to_string(dims[i]) + ")");
  }
}

}  // namespace

CellGraph decode_generator(const Genome& g) {
  check_decisions(g, SpaceKind::Generator);
  CellGraph cell;
  cell.nodes.resize(kCellNodes);
  std::vector<bool> consumed(kCellNodes + 1, false);
  for (int i = 0; i < kCellNodes; ++i) {
    cell.nodes[i].op = g.decisions[2 * i];
    cell.nodes[i].input = g.decisions[2 * i + 1];
    if (cell.nodes[i].input > 0) consumed[cell.nodes[i].input] = true;
  }
  for (int id = 1; id <= kCellNodes; ++id)
    if (!consumed[id]) cell.leaves.push_back(id);
  // Node 10 is never an input, so there is always at least one leaf.
  return cell;
}

std::vector<DiscBlock> decode_discriminator(const Genome& g) {
  check_decisions(g, SpaceKind::Discriminator);
  std::vector<DiscBlock> blocks(kDiscBlocks);
  for (int b = 0; b < kDiscBlocks; ++b) {
    blocks[b].op = g.decisions[2 * b];
    blocks[b].red = g.decisions[2 * b + 1];
  }
  return blocks;
}

std::uint64_t cardinality_of_dims(const std::vector<int>& dims) {
  std::uint64_t total = 1;
  for (int d : dims) {
    if (d <= 0) throw Error("cardinality: dimension must be positive");
    const auto du = static_cast<std::uint64_t>(d);
    if (total > std::numeric_limits<std::uint64_t>::max() / du)
      throw Error("cardinality: exceeds uint64");
    total *= du;
  }
  return total;
}

std::uint64_t space_cardinality(SpaceKind k) {
  return cardinality_of_dims(decision_dims(k));
}

nlohmann::json genome_to_json(const Genome& g) {
  return nlohmann::json{
      {"schema", 1}, {"space", space_name(g.space)}, {"decisions", g.decisions}};
}

Genome genome_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ParseError("genome: expected a JSON object");
  if (!j.contains("schema")) throw ParseError("genome: missing field 'schema'");
  if (!j["schema"].is_number_integer() || j["schema"].get<int>() != 1)
    throw ParseError("genome: unsupported schema version");
  if (!j.contains("space")) throw ParseError("genome: missing field 'space'");
  if (!j["space"].is_string()) throw ParseError("genome: field 'space' must be a string");
  if (!j.contains("decisions")) throw ParseError("genome: missing field 'decisions'");
  const auto& d = j["decisions"];
  if (!d.is_array()) throw ParseError("genome: field 'decisions' must be an array");
  Genome g;
  g.space = space_from_name(j["space"].get<std::string>());
  g.decisions.reserve(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!d[i].is_number_integer())
      throw ParseError("genome: decisions[" + std::to_string(i) + "] must be an integer");
    g.decisions.push_back(d[i].get<int>());
  }
  // Extra fields are deliberately ignored: genomes travel between tools that
  // may annotate them.
  return g;
}

Genome genome_from_string(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ParseError(std::string("genome: invalid JSON: ") + e.what());
  }
  return genome_from_json(j);
}

std::uint64_t genome_hash(const Genome& g) {
  std::uint64_t h = fnv1a64(space_name(g.space), g.space == SpaceKind::Generator ? 9 : 13);
  for (int d : g.decisions) {
    std::uint32_t le = static_cast<std::uint32_t>(d);
    h = fnv1a64(&le, sizeof(le), h);
  }
  return h;
}

}  // namespace srnas
