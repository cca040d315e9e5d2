#ifndef SRNAS_BUILDER_HPP
#define SRNAS_BUILDER_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "srnas/layers.hpp"
#include "srnas/search_space.hpp"
#include "srnas/weight_cache.hpp"

namespace srnas {

class Snapshot;

// Weight sources applied in order: fresh init from `seed`, then per-node cache
// overlays (generator only), then a full snapshot overlay.
struct InitSpec {
  std::uint64_t seed = 0;
  const WeightCache* cache = nullptr;
  const Snapshot* snapshot = nullptr;
};

// Parameter-name prefix of one cell node, "cell.node01." .. "cell.node10.".
std::string cell_node_prefix(int node_id);

// Returns null for Identity (the node is then just its activation).
LayerPtr make_cell_op(const std::string& name, const OpSpec& op, int channels);
// Stride-2, channel-doubling convolution.
LayerPtr make_reduction_op(const std::string& name, const OpSpec& op, int cin);

// Head conv + PReLU, the decoded cell (each node followed by PReLU, leaf-sum
// output), post conv + PReLU, one conv/pixelshuffle/PReLU stage per x2, tail
// conv to RGB. scale 1 (no upsample stages) is allowed for debugging.
Network build_generator(const CellGraph& cell, int n, int scale,
                        const InitSpec& init = {});

// Stem conv + BN + PReLU to reach n channels, then 5 blocks of
// (op + BN + PReLU, reduction + BN + PReLU), flatten, optional bottleneck
// linear + PReLU, final linear to one logit. Spectral norm on every conv and
// linear. patch must be a positive multiple of 32.
Network build_discriminator(const std::vector<DiscBlock>& blocks, int n,
                            int bottleneck, int patch, const InitSpec& init = {});

// Copies every parameter (weights and buffers) whose name starts with
// `prefix`, storing names with the prefix stripped.
ParamGroup extract_param_group(Network& net, const std::string& prefix);
// Writes a group back under `prefix`; returns tensors written. Throws
// ShapeMismatch if a blob has no target or the wrong shape.
int apply_param_group(Network& net, const std::string& prefix, const ParamGroup& group);
// Overlays every (node, op) group the cache holds for this cell; returns the
// number of warm-started nodes.
int warm_start_generator(Network& net, const CellGraph& cell, const WeightCache& cache);

// Fixed random feature extractor standing in for a pretrained perceptual
// network: three stride-2 3x3 convolutions (3->8->16->32) with PReLUs between
// them, weights drawn once from the seed (unit-variance normal) and never
// trained. Taps are conv outputs before activation, depth 1..3. Gradients can
// flow back to the input so feature losses can train a producer network.
class FrozenExtractor {
 public:
  explicit FrozenExtractor(std::uint64_t seed);

  static constexpr int kMaxDepth = 3;
  static int tap_channels(int depth);

  // Caches activations; call backward_to_input before the next forward if a
  // gradient is needed.
  Tensor features(const Tensor& x, int depth);
  Tensor backward_to_input(int depth, const Tensor& dtap);

  std::uint64_t seed() const { return seed_; }

 private:
  static int tap_node(int depth);

  std::uint64_t seed_;
  Network net_;
};

}  // namespace srnas

#endif  // SRNAS_BUILDER_HPP
