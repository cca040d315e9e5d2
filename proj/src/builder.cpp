#include "srnas/builder.hpp"

#include <cstdio>
#include <map>
#include <memory>
#include <utility>

#include "srnas/snapshot.hpp"

namespace srnas {

namespace {
constexpr std::uint64_t kGenSalt = 0x67656e5f696e6974ull;
constexpr std::uint64_t kDiscSalt = 0x646973635f696e69ull;
constexpr std::uint64_t kExtSalt = 0x7068695f696e6974ull;
}  // namespace

std::string cell_node_prefix(int node_id) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "cell.node%02d.", node_id);
  return buf;
}

LayerPtr make_cell_op(const std::string& name, const OpSpec& op, int channels) {
  switch (op.family) {
    case OpFamily::Conv:
      return std::make_unique<Conv2d>(name, channels, channels, op.kernel, 1, 1);
    case OpFamily::GroupConv:
      return std::make_unique<Conv2d>(name, channels, channels, op.kernel, 1, op.groups);
    case OpFamily::DSep:
      return std::make_unique<DSepConv>(name, channels, op.kernel);
    case OpFamily::InvBlock:
      return std::make_unique<InvBottleneck>(name, channels, op.kernel);
    case OpFamily::SEBlock:
    case OpFamily::CABlock:
      return std::make_unique<ChannelGate>(name, channels);
    case OpFamily::Identity:
      return nullptr;
  }
  throw Error("unknown op family");
}

LayerPtr make_reduction_op(const std::string& name, const OpSpec& op, int cin) {
  return std::make_unique<Conv2d>(name, cin, 2 * cin, op.kernel, 2, op.groups);
}

Network build_generator(const CellGraph& cell, int n, int scale, const InitSpec& init) {
  if (scale != 1 && scale != 2 && scale != 4)
    throw ConfigError("generator scale must be 1, 2, or 4");
  const auto& ops = generator_ops();

  Network net;
  int cur = net.add_layer(std::make_unique<Conv2d>("head", 3, n, 3), -1);
  cur = net.add_layer(std::make_unique<PReLU>("head_act", n), cur);

  // node_out[0] is the cell input; node_out[i] the post-activation output of
  // node i, matching the genome's input indexing.
  std::vector<int> node_out(cell.nodes.size() + 1);
  node_out[0] = cur;
  for (std::size_t i = 0; i < cell.nodes.size(); ++i) {
    const CellNode& nd = cell.nodes[i];
    const std::string base = cell_node_prefix(static_cast<int>(i) + 1);
    int x = node_out[static_cast<std::size_t>(nd.input)];
    LayerPtr op = make_cell_op(base + "op", ops[static_cast<std::size_t>(nd.op)], n);
    if (op) x = net.add_layer(std::move(op), x);
    x = net.add_layer(std::make_unique<PReLU>(base + "act", n), x);
    node_out[i + 1] = x;
  }

  int cell_out;
  if (cell.leaves.size() == 1) {
    cell_out = node_out[static_cast<std::size_t>(cell.leaves[0])];
  } else {
    std::vector<int> ins;
    ins.reserve(cell.leaves.size());
    for (int leaf : cell.leaves) ins.push_back(node_out[static_cast<std::size_t>(leaf)]);
    cell_out = net.add_sum(std::move(ins));
  }

  cur = net.add_layer(std::make_unique<Conv2d>("post", n, n, 3), cell_out);
  cur = net.add_layer(std::make_unique<PReLU>("post_act", n), cur);

  int stage = 1;
  for (int s = scale; s > 1; s /= 2, ++stage) {
    const std::string p = "up" + std::to_string(stage);
    cur = net.add_layer(std::make_unique<Conv2d>(p + ".conv", n, 4 * n, 3), cur);
    cur = net.add_layer(std::make_unique<PixelShuffle>(p + ".shuffle", 2), cur);
    cur = net.add_layer(std::make_unique<PReLU>(p + ".act", n), cur);
  }

  cur = net.add_layer(std::make_unique<Conv2d>("tail", n, 3, 3), cur);
  net.set_output(cur);

  Rng rng(mix64(init.seed, kGenSalt));
  net.init_weights(rng);
  if (init.cache) warm_start_generator(net, cell, *init.cache);
  if (init.snapshot) overlay_params(*init.snapshot, net.parameters());
  return net;
}

Network build_discriminator(const std::vector<DiscBlock>& blocks, int n,
                            int bottleneck, int patch, const InitSpec& init) {
  if (patch <= 0 || patch % 32 != 0)
    throw ShapeError("discriminator patch must be a positive multiple of 32");
  const auto& ops = generator_ops();
  const auto& reds = reduction_ops();

  Network net;
  int cur = net.add_layer(std::make_unique<Conv2d>("stem", 3, n, 3), -1);
  cur = net.add_layer(std::make_unique<BatchNorm>("stem_bn", n), cur);
  cur = net.add_layer(std::make_unique<PReLU>("stem_act", n), cur);

  int c = n;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const std::string base = "block" + std::to_string(b + 1) + ".";
    LayerPtr op = make_cell_op(base + "op", ops[static_cast<std::size_t>(blocks[b].op)], c);
    if (op) cur = net.add_layer(std::move(op), cur);
    cur = net.add_layer(std::make_unique<BatchNorm>(base + "bn1", c), cur);
    cur = net.add_layer(std::make_unique<PReLU>(base + "act1", c), cur);
    cur = net.add_layer(
        make_reduction_op(base + "red", reds[static_cast<std::size_t>(blocks[b].red)], c), cur);
    c *= 2;
    cur = net.add_layer(std::make_unique<BatchNorm>(base + "bn2", c), cur);
    cur = net.add_layer(std::make_unique<PReLU>(base + "act2", c), cur);
  }

  cur = net.add_layer(std::make_unique<Flatten>("flat"), cur);
  const int side = patch / 32;
  const int flat = c * side * side;
  if (bottleneck > 0) {
    cur = net.add_layer(std::make_unique<Linear>("bottleneck", flat, bottleneck), cur);
    cur = net.add_layer(std::make_unique<PReLU>("bottleneck_act", bottleneck), cur);
    cur = net.add_layer(std::make_unique<Linear>("logit", bottleneck, 1), cur);
  } else {
    cur = net.add_layer(std::make_unique<Linear>("logit", flat, 1), cur);
  }
  net.set_output(cur);

  Rng rng(mix64(init.seed, kDiscSalt));
  net.init_weights(rng);
  net.enable_spectral_norm(rng);
  if (init.snapshot) overlay_params(*init.snapshot, net.parameters());
  return net;
}

ParamGroup extract_param_group(Network& net, const std::string& prefix) {
  ParamGroup group;
  for (const NamedParam& np : net.parameters()) {
    if (np.name.rfind(prefix, 0) != 0) continue;
    TensorBlob b;
    b.name = np.name.substr(prefix.size());
    b.shape = np.param->shape;
    b.data = np.param->value;
    group.push_back(std::move(b));
  }
  return group;
}

int apply_param_group(Network& net, const std::string& prefix, const ParamGroup& group) {
  std::map<std::string, Param*> targets;
  for (const NamedParam& np : net.parameters())
    if (np.name.rfind(prefix, 0) == 0) targets[np.name.substr(prefix.size())] = np.param;
  int written = 0;
  for (const TensorBlob& b : group) {
    auto it = targets.find(b.name);
    if (it == targets.end())
      throw ShapeMismatch("cached tensor " + prefix + b.name + " has no target parameter");
    if (it->second->shape != b.shape)
      throw ShapeMismatch("cached tensor " + prefix + b.name + " shape " + shape_str(b.shape) +
                          " does not match parameter " + shape_str(it->second->shape));
    it->second->value = b.data;
    ++written;
  }
  return written;
}

int warm_start_generator(Network& net, const CellGraph& cell, const WeightCache& cache) {
  int hits = 0;
  for (std::size_t i = 0; i < cell.nodes.size(); ++i) {
    const int node_id = static_cast<int>(i) + 1;
    auto entry = cache.lookup(node_id, cell.nodes[i].op);
    if (!entry) continue;
    apply_param_group(net, cell_node_prefix(node_id), *entry->weights);
    ++hits;
  }
  return hits;
}

FrozenExtractor::FrozenExtractor(std::uint64_t seed) : seed_(seed) {
  int cur = net_.add_layer(std::make_unique<Conv2d>("conv1", 3, 8, 3, 2), -1);   // node 0
  cur = net_.add_layer(std::make_unique<PReLU>("act1", 8), cur);                 // node 1
  cur = net_.add_layer(std::make_unique<Conv2d>("conv2", 8, 16, 3, 2), cur);     // node 2
  cur = net_.add_layer(std::make_unique<PReLU>("act2", 16), cur);                // node 3
  cur = net_.add_layer(std::make_unique<Conv2d>("conv3", 16, 32, 3, 2), cur);    // node 4
  net_.set_output(cur);

  Rng rng(mix64(seed, kExtSalt));
  for (const NamedParam& np : net_.parameters()) {
    Param* p = np.param;
    if (np.name.size() >= 2 && np.name.compare(np.name.size() - 2, 2, ".w") == 0) {
      for (Eigen::Index i = 0; i < p->value.size(); ++i)
        p->value[i] = static_cast<Scalar>(rng.normal());
    } else if (np.name.size() >= 2 && np.name.compare(np.name.size() - 2, 2, ".b") == 0) {
      p->value.setZero();
    }  // PReLU slopes keep their 0.25 construction value
    p->trainable = false;
  }
}

int FrozenExtractor::tap_node(int depth) {
  if (depth < 1 || depth > kMaxDepth)
    throw ConfigError("extractor depth must be 1.." + std::to_string(kMaxDepth));
  return 2 * (depth - 1);
}

int FrozenExtractor::tap_channels(int depth) {
  tap_node(depth);  // range check
  return 8 << (depth - 1);
}

Tensor FrozenExtractor::features(const Tensor& x, int depth) {
  return net_.forward_node(x, tap_node(depth), Mode::Eval);
}

Tensor FrozenExtractor::backward_to_input(int depth, const Tensor& dtap) {
  net_.backward_from(tap_node(depth), dtap);
  return net_.input_grad();
}

}  // namespace srnas
