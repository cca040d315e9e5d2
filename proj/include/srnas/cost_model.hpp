#ifndef SRNAS_COST_MODEL_HPP
#define SRNAS_COST_MODEL_HPP

#include <cstdint>
#include <vector>

#include "srnas/search_space.hpp"

#include <nlohmann/json_fwd.hpp>

namespace srnas {

// Counting convention: mult_adds counts convolution/linear multiplies only.
// Pooling is additions, activations and attention gates are elementwise; none
// of those contribute. Biases, batch-norm affine terms and PReLU slopes count
// as params but add no mult_adds. params counts trainable values exactly as
// the network builder allocates them, so the two must stay in lockstep (the
// test suite enforces equality against built networks and an instrumented
// naive reference).
struct OpCost {
  std::uint64_t mult_adds = 0;
  std::uint64_t params = 0;

  OpCost& operator+=(const OpCost& o) {
    mult_adds += o.mult_adds;
    params += o.params;
    return *this;
  }
};

// Cost of one cell op at constant channel count. Spatial size is preserved
// (stride 1, zero padding (k-1)/2). Throws ShapeError if the kernel exceeds
// the spatial extent or the channel count is incompatible with the op's
// grouping. Does NOT include the per-node PReLU that follows every cell node;
// generator_cost adds that at the node level.
OpCost op_cost(const OpSpec& op, int channels, int h, int w);

// Cost of one reduction op: stride 2, output channels = 2 * in channels,
// output spatial = ceil(h/2) x ceil(w/2).
OpCost reduction_op_cost(const OpSpec& op, int in_channels, int h, int w);

struct CostReport {
  std::uint64_t mult_adds = 0;
  std::uint64_t params = 0;
  OpCost skeleton;                // everything outside the searched cell/blocks
  std::vector<OpCost> per_node;   // cell nodes (incl. their PReLU) or disc blocks
};

// Generator cost at a reference OUTPUT resolution (defaults to 1280x720).
// scale must be 2 or 4 and divide the reference resolution. Mult-adds scale
// linearly in output area; params are resolution-independent.
CostReport generator_cost(const CellGraph& cell, int n, int scale,
                          int out_h = 720, int out_w = 1280);

// Discriminator cost for one input patch (reported for logging; the search
// never gates on it). m_bottleneck == 0 means no bottleneck linear.
CostReport discriminator_cost(const std::vector<DiscBlock>& blocks, int n,
                              int m_bottleneck, int patch);

struct CostLimit {
  std::uint64_t max_mult_adds = 5'000'000'000ull;
  int ref_out_h = 720;
  int ref_out_w = 1280;
};

struct GateResult {
  bool pass = false;
  std::uint64_t mult_adds = 0;
  std::uint64_t limit = 0;
};

// Pass iff mult_adds <= limit (a candidate exactly on the budget passes).
GateResult gate(const CostReport& report, const CostLimit& limit);

nlohmann::json cost_report_to_json(const CostReport& r);

}  // namespace srnas

#endif  // SRNAS_COST_MODEL_HPP
