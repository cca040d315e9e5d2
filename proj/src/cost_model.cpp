#include "srnas/cost_model.hpp"

#include <nlohmann/json.hpp>

#include "srnas/errors.hpp"

namespace srnas {

namespace {

using u64 = std::uint64_t;

u64 ceil_div(u64 a, u64 b) { return (a + b - 1) / b; }

// Plain convolution, zero padding (k-1)/2, bias always present.
OpCost conv_cost(int k, int cin, int cout, int groups, int stride, int h, int w) {
  if (k > h || k > w)
    throw ShapeError("conv kernel " + std::to_string(k) + " exceeds input " +
                     std::to_string(h) + "x" + std::to_string(w));
  if (cin % groups != 0 || cout % groups != 0)
    throw ShapeError("channels not divisible by groups");
  const u64 ho = ceil_div(h, stride), wo = ceil_div(w, stride);
  OpCost c;
  c.mult_adds = ho * wo * static_cast<u64>(k) * k * (cin / groups) * cout;
  c.params = static_cast<u64>(k) * k * (cin / groups) * cout + cout;
  return c;
}

OpCost prelu_cost(int channels) { return {0, static_cast<u64>(channels)}; }

OpCost batchnorm_cost(int channels) { return {0, 2ull * channels}; }

OpCost linear_cost(int in, int out) {
  return {static_cast<u64>(in) * out, static_cast<u64>(in) * out + out};
}

// SE/CA gate: pooled 1x1 path only. Pooling and the channelwise scale are not
// conv/linear multiplies, so only the two reduction-4 transforms count.
OpCost attention_cost(int channels) {
  const int cr = channels >= 4 ? channels / 4 : 1;
  OpCost c;
  c += linear_cost(channels, cr);
  c += linear_cost(cr, channels);
  return c;
}

}  // namespace

OpCost op_cost(const OpSpec& op, int channels, int h, int w) {
  switch (op.family) {
    case OpFamily::Conv:
      return conv_cost(op.kernel, channels, channels, 1, 1, h, w);
    case OpFamily::GroupConv:
      return conv_cost(op.kernel, channels, channels, op.groups, 1, h, w);
    case OpFamily::DSep: {
      OpCost c = conv_cost(op.kernel, channels, channels, channels, 1, h, w);
      c += prelu_cost(channels);
      c += conv_cost(1, channels, channels, 1, 1, h, w);
      return c;
    }
    case OpFamily::InvBlock: {
      const int mid = 2 * channels;
      OpCost c = conv_cost(1, channels, mid, 1, 1, h, w);
      c += prelu_cost(mid);
      c += conv_cost(op.kernel, mid, mid, mid, 1, h, w);
      c += prelu_cost(mid);
      c += conv_cost(1, mid, channels, 1, 1, h, w);
      return c;
    }
    case OpFamily::SEBlock:
    case OpFamily::CABlock:
      if (h < 1 || w < 1) throw ShapeError("attention op needs a spatial extent");
      return attention_cost(channels);
    case OpFamily::Identity:
      return {0, 0};
  }
  throw Error("op_cost: unreachable");
}

OpCost reduction_op_cost(const OpSpec& op, int in_channels, int h, int w) {
  const int groups = op.family == OpFamily::GroupConv ? op.groups : 1;
  if (op.family != OpFamily::Conv && op.family != OpFamily::GroupConv)
    throw Error("reduction op must be a convolution");
  return conv_cost(op.kernel, in_channels, 2 * in_channels, groups, 2, h, w);
}

CostReport generator_cost(const CellGraph& cell, int n, int scale, int out_h, int out_w) {
  if (scale != 2 && scale != 4) throw ShapeError("generator cost: scale must be 2 or 4");
  if (out_h % scale != 0 || out_w % scale != 0)
    throw ShapeError("generator cost: reference resolution must be divisible by scale");
  const int in_h = out_h / scale, in_w = out_w / scale;

  CostReport r;
  const auto& ops = generator_ops();

  // Skeleton mirrors the builder exactly: head conv3 + PReLU, (cell), post
  // conv3 + PReLU, one conv3(n->4n) + pixelshuffle + PReLU per x2 stage,
  // tail conv3 to RGB.
  OpCost skel = conv_cost(3, 3, n, 1, 1, in_h, in_w);
  skel += prelu_cost(n);
  skel += conv_cost(3, n, n, 1, 1, in_h, in_w);
  skel += prelu_cost(n);
  int h = in_h, w = in_w;
  for (int s = scale; s > 1; s /= 2) {
    skel += conv_cost(3, n, 4 * n, 1, 1, h, w);
    h *= 2;
    w *= 2;
    skel += prelu_cost(n);  // activation follows the shuffle, so n channels
  }
  skel += conv_cost(3, n, 3, 1, 1, out_h, out_w);
  r.skeleton = skel;

  for (const auto& node : cell.nodes) {
    OpCost c = op_cost(ops[static_cast<std::size_t>(node.op)], n, in_h, in_w);
    c += prelu_cost(n);  // every node is followed by its own PReLU
    r.per_node.push_back(c);
  }

  r.mult_adds = r.skeleton.mult_adds;
  r.params = r.skeleton.params;
  for (const auto& c : r.per_node) {
    r.mult_adds += c.mult_adds;
    r.params += c.params;
  }
  return r;
}

CostReport discriminator_cost(const std::vector<DiscBlock>& blocks, int n,
                              int m_bottleneck, int patch) {
  const auto& ops = generator_ops();
  const auto& reds = reduction_ops();
  CostReport r;
  int c = n, h = patch, w = patch;
  // Stem lifts RGB to the base width so block 1 runs at n channels (the
  // grouped ops cannot act on 3 channels); conv + BN + PReLU like the blocks.
  OpCost stem = conv_cost(3, 3, n, 1, 1, h, w);
  stem += batchnorm_cost(n);
  stem += prelu_cost(n);
  for (const auto& b : blocks) {
    OpCost bc = op_cost(ops[static_cast<std::size_t>(b.op)], c, h, w);
    bc += batchnorm_cost(c);
    bc += prelu_cost(c);
    bc += reduction_op_cost(reds[static_cast<std::size_t>(b.red)], c, h, w);
    h = static_cast<int>(ceil_div(h, 2));
    w = static_cast<int>(ceil_div(w, 2));
    c *= 2;
    bc += batchnorm_cost(c);
    bc += prelu_cost(c);
    r.per_node.push_back(bc);
  }
  const int flat = c * h * w;
  OpCost head;
  if (m_bottleneck > 0) {
    head += linear_cost(flat, m_bottleneck);
    head += prelu_cost(m_bottleneck);
    head += linear_cost(m_bottleneck, 1);
  } else {
    head += linear_cost(flat, 1);
  }
  r.skeleton = stem;
  r.skeleton += head;

  r.mult_adds = r.skeleton.mult_adds;
  r.params = r.skeleton.params;
  for (const auto& bc : r.per_node) {
    r.mult_adds += bc.mult_adds;
    r.params += bc.params;
  }
  return r;
}

GateResult gate(const CostReport& report, const CostLimit& limit) {
  GateResult g;
  g.mult_adds = report.mult_adds;
  g.limit = limit.max_mult_adds;
  g.pass = report.mult_adds <= limit.max_mult_adds;
  return g;
}

nlohmann::json cost_report_to_json(const CostReport& r) {
  nlohmann::json per = nlohmann::json::array();
  for (const auto& c : r.per_node)
    per.push_back({{"mult_adds", c.mult_adds}, {"params", c.params}});
  return nlohmann::json{
      {"mult_adds", r.mult_adds},
      {"params", r.params},
      {"skeleton", {{"mult_adds", r.skeleton.mult_adds}, {"params", r.skeleton.params}}},
      {"per_node", per}};
}

}  // namespace srnas
