#ifndef SRNAS_SEARCH_SPACE_HPP
#define SRNAS_SEARCH_SPACE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "srnas/errors.hpp"

#include <nlohmann/json_fwd.hpp>

namespace srnas {

enum class OpFamily {
  Conv,        // full convolution, groups 1
  GroupConv,   // grouped convolution, groups 4
  DSep,        // depthwise + pointwise
  InvBlock,    // 1x1 expand (x2) + depthwise + 1x1 project
  SEBlock,     // squeeze-and-excitation gate
  CABlock,     // channel-attention gate (SE structure, avg pool)
  Identity,
};

// One candidate operation. Cell ops keep channel count and spatial size;
// reduction ops halve spatial size (stride 2) and double channels.
struct OpSpec {
  OpFamily family;
  int kernel;    // 0 when the op has no spatial kernel
  int groups;    // grouped-conv group count, 1 otherwise
  const char* name;
};

// The 16 cell op variants, index order is the decision encoding.
const std::vector<OpSpec>& generator_ops();
// The 7 reduction op variants (stride 2, channel-doubling).
const std::vector<OpSpec>& reduction_ops();

enum class SpaceKind { Generator, Discriminator };

const char* space_name(SpaceKind k);
SpaceKind space_from_name(const std::string& s);

constexpr int kCellNodes = 10;
constexpr int kDiscBlocks = 5;

struct Genome {
  SpaceKind space = SpaceKind::Generator;
  std::vector<int> decisions;

  bool operator==(const Genome& o) const {
    return space == o.space && decisions == o.decisions;
  }
};

// Per-position choice counts, interleaved as the controller emits them.
// Generator: [16,1, 16,2, ..., 16,10] (op, then input ref, per node).
// Discriminator: [16,7] x 5 (cell op, then reduction op, per block).
std::vector<int> decision_dims(SpaceKind k);

// Decoded generator cell. Node ids are 1-based; input 0 is the cell input.
struct CellNode {
  int op;     // index into generator_ops()
  int input;  // 0..node_id-1
};

struct CellGraph {
  std::vector<CellNode> nodes;  // nodes[i] is node i+1
  std::vector<int> leaves;      // 1-based ids of nodes no later node consumes
};

// Validates ranges and wiring; throws InvalidGenome. The graph is acyclic by
// construction (node i may only read nodes < i). The cell output is the sum of
// the leaves (a single leaf is passed through unsummed).
CellGraph decode_generator(const Genome& g);

struct DiscBlock {
  int op;   // index into generator_ops()
  int red;  // index into reduction_ops()
};

std::vector<DiscBlock> decode_discriminator(const Genome& g);

// Exact size of a factored space; throws Error on uint64 overflow.
std::uint64_t cardinality_of_dims(const std::vector<int>& dims);
std::uint64_t space_cardinality(SpaceKind k);

// Wire format: {"schema":1,"space":"generator"|"discriminator","decisions":[...]}
// Unknown fields are ignored; missing/mistyped fields raise ParseError naming
// the field. Range validation is decode's job, not the parser's.
nlohmann::json genome_to_json(const Genome& g);
Genome genome_from_json(const nlohmann::json& j);
Genome genome_from_string(const std::string& text);

std::uint64_t genome_hash(const Genome& g);

}  // namespace srnas

#endif  // SRNAS_SEARCH_SPACE_HPP
