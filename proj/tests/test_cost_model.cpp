#include <cstdint>
#include <vector>

#include "doctest.h"
#include "oracle_helpers.hpp"
#include "srnas/builder.hpp"
#include "srnas/cost_model.hpp"
#include "srnas/errors.hpp"
#include "srnas/rng.hpp"
#include "srnas/search_space.hpp"

#include <nlohmann/json.hpp>

using namespace srnas;

namespace {

Genome random_genome(SpaceKind k, std::uint64_t seed) {
  Rng rng(seed);
  Genome g;
  g.space = k;
  for (int d : decision_dims(k)) g.decisions.push_back(rng.uniform_int(d));
  return g;
}

std::int64_t layer_trainable_params(Layer* layer) {
  if (!layer) return 0;
  std::vector<NamedParam> ps;
  layer->collect_params(ps);
  std::int64_t n = 0;
  for (const auto& p : ps)
    if (p.param->trainable) n += p.param->numel();
  return n;
}

// The skeleton layout is part of the architecture contract; both routes share
// it, but this one derives every count by walking the naive loops.
std::uint64_t instrumented_generator_madds(const CellGraph& cell, int n, int scale,
                                           int out_h, int out_w) {
  const int in_h = out_h / scale, in_w = out_w / scale;
  std::uint64_t total = oracle::counted_conv(in_h, in_w, 3, n, 3, 1, 1);
  for (const auto& node : cell.nodes)
    total += oracle::counted_cell_op(
        generator_ops()[static_cast<std::size_t>(node.op)], n, in_h, in_w);
  total += oracle::counted_conv(in_h, in_w, n, n, 3, 1, 1);
  int h = in_h, w = in_w;
  for (int s = scale; s > 1; s /= 2) {
    total += oracle::counted_conv(h, w, n, 4 * n, 3, 1, 1);
    h *= 2;
    w *= 2;
  }
  total += oracle::counted_conv(out_h, out_w, n, 3, 3, 1, 1);
  return total;
}

std::uint64_t instrumented_discriminator_madds(const std::vector<DiscBlock>& blocks,
                                               int n, int m, int patch) {
  int c = n, h = patch, w = patch;
  std::uint64_t total = oracle::counted_conv(h, w, 3, n, 3, 1, 1);
  for (const auto& b : blocks) {
    total += oracle::counted_cell_op(generator_ops()[static_cast<std::size_t>(b.op)],
                                     c, h, w);
    total += oracle::counted_reduction_op(
        reduction_ops()[static_cast<std::size_t>(b.red)], c, h, w);
    int oh = 0, ow = 0;
    for (int y = 0; y < h; y += 2) ++oh;
    for (int x = 0; x < w; x += 2) ++ow;
    h = oh;
    w = ow;
    c *= 2;
  }
  const int flat = c * h * w;
  if (m > 0)
    total += oracle::counted_linear(flat, m) + oracle::counted_linear(m, 1);
  else
    total += oracle::counted_linear(flat, 1);
  return total;
}

}  // namespace

TEST_CASE("op mult-adds equal instrumented naive loop counts, 200+ cases") {
  const int channels[] = {4, 8, 16};
  const std::pair<int, int> shapes[] = {{8, 8}, {7, 9}, {16, 12}, {32, 24}, {11, 13}};
  int cases = 0;
  for (const auto& op : generator_ops()) {
    for (int c : channels) {
      for (auto [h, w] : shapes) {
        const OpCost got = op_cost(op, c, h, w);
        CHECK(got.mult_adds == oracle::counted_cell_op(op, c, h, w));
        ++cases;
      }
    }
  }
  for (const auto& op : reduction_ops()) {
    for (int c : channels) {
      for (auto [h, w] : shapes) {
        const OpCost got = reduction_op_cost(op, c, h, w);
        CHECK(got.mult_adds == oracle::counted_reduction_op(op, c, h, w));
        ++cases;
      }
    }
  }
  CHECK(cases >= 200);
}

TEST_CASE("op params equal the params the layer actually allocates") {
  for (const auto& op : generator_ops()) {
    for (int c : {4, 8, 16}) {
      const LayerPtr layer = make_cell_op("probe.", op, c);
      CHECK(op_cost(op, c, 16, 16).params ==
            static_cast<std::uint64_t>(layer_trainable_params(layer.get())));
    }
  }
  for (const auto& op : reduction_ops()) {
    for (int c : {4, 8, 16}) {
      const LayerPtr layer = make_reduction_op("probe.", op, c);
      CHECK(reduction_op_cost(op, c, 16, 16).params ==
            static_cast<std::uint64_t>(layer_trainable_params(layer.get())));
    }
  }
}

TEST_CASE("generator report params equal built-network params, 50+ genomes") {
  for (std::uint64_t seed = 0; seed < 52; ++seed) {
    const Genome g = random_genome(SpaceKind::Generator, seed);
    const CellGraph cell = decode_generator(g);
    const int n = (seed % 2) ? 8 : 16;
    const int scale = (seed % 4 < 2) ? 2 : 4;
    const CostReport rep = generator_cost(cell, n, scale, 64, 64);
    Network net = build_generator(cell, n, scale);
    CHECK(rep.params == static_cast<std::uint64_t>(net.param_count(true)));
  }
}

TEST_CASE("generator mult-adds equal the instrumented end-to-end count") {
  for (std::uint64_t seed = 100; seed < 120; ++seed) {
    const Genome g = random_genome(SpaceKind::Generator, seed);
    const CellGraph cell = decode_generator(g);
    for (int scale : {2, 4}) {
      const CostReport rep = generator_cost(cell, 16, scale, 720, 1280);
      CHECK(rep.mult_adds ==
            instrumented_generator_madds(cell, 16, scale, 720, 1280));
      // Totals are the skeleton plus the per-node rows, nothing else.
      std::uint64_t sum_m = rep.skeleton.mult_adds, sum_p = rep.skeleton.params;
      for (const auto& c : rep.per_node) {
        sum_m += c.mult_adds;
        sum_p += c.params;
      }
      CHECK(rep.mult_adds == sum_m);
      CHECK(rep.params == sum_p);
      REQUIRE(rep.per_node.size() == 10);
      for (int i = 0; i < 10; ++i) {
        const auto& op = generator_ops()[static_cast<std::size_t>(cell.nodes[i].op)];
        CHECK(rep.per_node[i].mult_adds ==
              oracle::counted_cell_op(op, 16, 720 / scale, 1280 / scale));
      }
    }
  }
}

TEST_CASE("per-node params are the op plus its trailing activation") {
  const Genome g = random_genome(SpaceKind::Generator, 42);
  const CellGraph cell = decode_generator(g);
  const int n = 16;
  const CostReport rep = generator_cost(cell, n, 2, 64, 64);
  for (int i = 0; i < 10; ++i) {
    const auto& op = generator_ops()[static_cast<std::size_t>(cell.nodes[i].op)];
    const LayerPtr layer = make_cell_op("probe.", op, n);
    CHECK(rep.per_node[i].params ==
          static_cast<std::uint64_t>(layer_trainable_params(layer.get())) +
              static_cast<std::uint64_t>(n));
  }
}

TEST_CASE("discriminator report matches built params and instrumented mult-adds") {
  // Patch 128 keeps every block's spatial extent at or above the largest
  // kernel (block 5 runs at 8x8), so any sampled genome has a defined cost.
  for (std::uint64_t seed = 0; seed < 12; ++seed) {
    const Genome g = random_genome(SpaceKind::Discriminator, seed);
    const auto blocks = decode_discriminator(g);
    const int m = (seed % 2) ? 32 : 0;
    const CostReport rep = discriminator_cost(blocks, 16, m, 128);
    Network net = build_discriminator(blocks, 16, m, 128);
    CHECK(rep.params == static_cast<std::uint64_t>(net.param_count(true)));
    CHECK(rep.mult_adds == instrumented_discriminator_madds(blocks, 16, m, 128));
  }

  // Small kernels stay defined down to patch 64 (block 5 at 4x4).
  Genome small;
  small.space = SpaceKind::Discriminator;
  for (int b = 0; b < 5; ++b) {
    small.decisions.push_back(b % 2 ? 1 : 7);  // conv3 / dsep3
    small.decisions.push_back(b % 2 ? 4 : 1);  // rgconv3 / rconv3
  }
  const auto blocks = decode_discriminator(small);
  const CostReport rep = discriminator_cost(blocks, 16, 64, 64);
  CHECK(rep.mult_adds == instrumented_discriminator_madds(blocks, 16, 64, 64));
  Network net = build_discriminator(blocks, 16, 64, 64);
  CHECK(rep.params == static_cast<std::uint64_t>(net.param_count(true)));
}

TEST_CASE("discriminator cost refuses kernels wider than a late block") {
  // At patch 32 block 5 sees 2x2 inputs; a 7x7 op there has no defined cost
  // even though the padded convolution itself would still run.
  Genome g;
  g.space = SpaceKind::Discriminator;
  g.decisions = {0, 0, 0, 0, 0, 0, 0, 0, 3, 0};  // conv7 in block 5
  CHECK_THROWS_AS(discriminator_cost(decode_discriminator(g), 16, 0, 32), ShapeError);
}

TEST_CASE("mult-adds scale linearly in output area for kernel-only cells") {
  // Attention ops run once per image regardless of resolution, so use a cell
  // without them for the exact-doubling invariant.
  Genome g;
  g.space = SpaceKind::Generator;
  Rng rng(5);
  for (int i = 0; i < 10; ++i) {
    g.decisions.push_back(rng.uniform_int(13));  // conv/gconv/dsep/inv only
    g.decisions.push_back(rng.uniform_int(i + 1));
  }
  const CellGraph cell = decode_generator(g);
  const CostReport a = generator_cost(cell, 16, 2, 64, 64);
  const CostReport b = generator_cost(cell, 16, 2, 64, 128);
  CHECK(b.mult_adds == 2 * a.mult_adds);
  CHECK(b.params == a.params);  // params never depend on resolution
}

TEST_CASE("gate admits a candidate exactly on the budget") {
  CostReport r;
  r.mult_adds = 5'000'000'000ull;
  CostLimit lim;  // default budget 5e9
  GateResult g = gate(r, lim);
  CHECK(g.pass);
  CHECK(g.mult_adds == r.mult_adds);
  CHECK(g.limit == lim.max_mult_adds);

  r.mult_adds += 1;
  CHECK_FALSE(gate(r, lim).pass);
  r.mult_adds = 0;
  CHECK(gate(r, lim).pass);
}

TEST_CASE("cost rejects impossible shapes and scales") {
  const OpSpec conv7 = generator_ops()[3];
  CHECK_THROWS_AS(op_cost(conv7, 16, 5, 5), ShapeError);
  const OpSpec gconv3 = generator_ops()[4];
  CHECK_THROWS_AS(op_cost(gconv3, 6, 16, 16), ShapeError);  // 6 % 4 != 0

  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 1));
  CHECK_THROWS_AS(generator_cost(cell, 16, 3, 720, 1280), ShapeError);
  CHECK_THROWS_AS(generator_cost(cell, 16, 4, 720, 1282), ShapeError);
}

TEST_CASE("report serializes totals, skeleton and per-node rows") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 9));
  const CostReport rep = generator_cost(cell, 16, 2, 64, 64);
  const nlohmann::json j = cost_report_to_json(rep);
  CHECK(j["mult_adds"].get<std::uint64_t>() == rep.mult_adds);
  CHECK(j["params"].get<std::uint64_t>() == rep.params);
  CHECK(j["skeleton"]["mult_adds"].get<std::uint64_t>() == rep.skeleton.mult_adds);
  REQUIRE(j["per_node"].size() == 10);
  CHECK(j["per_node"][3]["params"].get<std::uint64_t>() == rep.per_node[3].params);
}
