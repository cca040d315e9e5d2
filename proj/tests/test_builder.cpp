#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "oracle_helpers.hpp"
#include "srnas/builder.hpp"
#include "srnas/errors.hpp"
#include "srnas/rng.hpp"
#include "srnas/search_space.hpp"
#include "srnas/snapshot.hpp"
#include "srnas/weight_cache.hpp"

using namespace srnas;

namespace {

constexpr int kIdentityOp = 15;

Genome random_genome(SpaceKind k, std::uint64_t seed) {
  Rng rng(seed);
  Genome g;
  g.space = k;
  for (int d : decision_dims(k)) g.decisions.push_back(rng.uniform_int(d));
  return g;
}

std::map<std::string, ArrayX> param_map(Network& net) {
  std::map<std::string, ArrayX> m;
  for (const NamedParam& np : net.parameters(false)) m[np.name] = np.param->value;
  return m;
}

bool bitwise_equal(const ArrayX& a, const ArrayX& b) {
  return a.size() == b.size() && (a == b).all();
}

bool has_param(Network& net, const std::string& name) {
  for (const NamedParam& np : net.parameters(false))
    if (np.name == name) return true;
  return false;
}

// Every generator cell parameter lives under cell_node_prefix(id).
bool is_cell_param(const std::string& name) { return name.rfind("cell.node", 0) == 0; }

}  // namespace

TEST_CASE("cell node prefixes are zero padded") {
  CHECK(cell_node_prefix(1) == "cell.node01.");
  CHECK(cell_node_prefix(7) == "cell.node07.");
  CHECK(cell_node_prefix(10) == "cell.node10.");
}

TEST_CASE("generator output is the input scaled by the upsample factor") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 5));
  Rng rng(99);
  const Tensor x = Tensor::randn({2, 3, 12, 11}, rng);
  for (int scale : {1, 2, 4}) {
    Network net = build_generator(cell, 8, scale, InitSpec{77});
    const Tensor y = net.forward(x, Mode::Eval);
    CHECK(y.shape == std::vector<int>({2, 3, 12 * scale, 11 * scale}));
    CHECK(y.all_finite());
    CHECK(has_param(net, "head.w"));
    CHECK(has_param(net, "post.w"));
    CHECK(has_param(net, "tail.b"));
    CHECK(has_param(net, "up1.conv.w") == (scale >= 2));
    CHECK(has_param(net, "up2.conv.w") == (scale == 4));
  }
}

TEST_CASE("generator rejects unsupported scales") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 5));
  CHECK_THROWS_AS(build_generator(cell, 8, 3, InitSpec{}), ConfigError);
  CHECK_THROWS_AS(build_generator(cell, 8, 0, InitSpec{}), ConfigError);
  CHECK_THROWS_AS(build_generator(cell, 8, 8, InitSpec{}), ConfigError);
}

TEST_CASE("identity nodes reduce to bare activations") {
  Genome g;
  g.space = SpaceKind::Generator;
  for (int i = 0; i < kCellNodes; ++i) {
    g.decisions.push_back(kIdentityOp);
    g.decisions.push_back(i);  // chain: node i+1 reads node i
  }
  Network net = build_generator(decode_generator(g), 8, 2, InitSpec{1});
  int acts = 0;
  for (const NamedParam& np : net.parameters(false)) {
    CHECK(np.name.find(".op") == std::string::npos);
    if (is_cell_param(np.name)) ++acts;
  }
  CHECK(acts == kCellNodes);  // one slope vector per node, nothing else
  Rng rng(2);
  const Tensor y = net.forward(Tensor::randn({1, 3, 8, 8}, rng), Mode::Eval);
  CHECK(y.shape == std::vector<int>({1, 3, 16, 16}));
}

TEST_CASE("star shaped cell with every node a leaf still builds") {
  Genome g;
  g.space = SpaceKind::Generator;
  for (int i = 0; i < kCellNodes; ++i) {
    g.decisions.push_back(1);  // conv3
    g.decisions.push_back(0);  // all nodes read the cell input
  }
  const CellGraph cell = decode_generator(g);
  REQUIRE(cell.leaves.size() == static_cast<std::size_t>(kCellNodes));
  Network net = build_generator(cell, 4, 4, InitSpec{3});
  Rng rng(4);
  const Tensor y = net.forward(Tensor::randn({1, 3, 8, 8}, rng), Mode::Eval);
  CHECK(y.shape == std::vector<int>({1, 3, 32, 32}));
  CHECK(net.activations_finite());
}

TEST_CASE("warm start copies cached node weights bit for bit") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 11));
  Network donor = build_generator(cell, 8, 2, InitSpec{111});
  auto donor_params = param_map(donor);

  WeightCache cache;
  for (int id = 1; id <= kCellNodes; ++id) {
    ParamGroup grp = extract_param_group(donor, cell_node_prefix(id));
    REQUIRE(!grp.empty());
    cache.commit(id, cell.nodes[static_cast<std::size_t>(id - 1)].op, std::move(grp), 1.0, id);
  }

  Network fresh = build_generator(cell, 8, 2, InitSpec{222});
  Network warmed = build_generator(cell, 8, 2, InitSpec{222, &cache});
  auto fresh_params = param_map(fresh);
  for (const NamedParam& np : warmed.parameters(false)) {
    if (is_cell_param(np.name)) {
      CHECK_MESSAGE(bitwise_equal(np.param->value, donor_params.at(np.name)), np.name);
    } else {
      CHECK_MESSAGE(bitwise_equal(np.param->value, fresh_params.at(np.name)), np.name);
    }
  }

  Network again = build_generator(cell, 8, 2, InitSpec{222});
  CHECK(warm_start_generator(again, cell, cache) == kCellNodes);
}

TEST_CASE("warm start skips nodes cached under a different op") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 11));
  Network donor = build_generator(cell, 8, 2, InitSpec{111});
  auto donor_params = param_map(donor);

  WeightCache partial;
  partial.commit(3, cell.nodes[2].op, extract_param_group(donor, cell_node_prefix(3)), 1.0, 1);
  partial.commit(7, cell.nodes[6].op, extract_param_group(donor, cell_node_prefix(7)), 1.0, 2);
  const int other_op = (cell.nodes[0].op + 1) % 16;
  partial.commit(1, other_op, extract_param_group(donor, cell_node_prefix(1)), 1.0, 3);

  Network fresh = build_generator(cell, 8, 2, InitSpec{222});
  Network warmed = build_generator(cell, 8, 2, InitSpec{222, &partial});
  auto fresh_params = param_map(fresh);
  for (const NamedParam& np : warmed.parameters(false)) {
    const bool hit = np.name.rfind(cell_node_prefix(3), 0) == 0 ||
                     np.name.rfind(cell_node_prefix(7), 0) == 0;
    const ArrayX& want = hit ? donor_params.at(np.name) : fresh_params.at(np.name);
    CHECK_MESSAGE(bitwise_equal(np.param->value, want), np.name);
  }

  Network again = build_generator(cell, 8, 2, InitSpec{222});
  CHECK(warm_start_generator(again, cell, partial) == 2);
}

TEST_CASE("snapshot overlay wins over cache and fresh init") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 11));
  Network donor = build_generator(cell, 8, 2, InitSpec{111});
  WeightCache cache;
  for (int id = 1; id <= kCellNodes; ++id)
    cache.commit(id, cell.nodes[static_cast<std::size_t>(id - 1)].op,
                 extract_param_group(donor, cell_node_prefix(id)), 1.0, id);

  Network source = build_generator(cell, 8, 2, InitSpec{333});
  const Snapshot full = snapshot_params(source.parameters(false));
  Network loaded = build_generator(cell, 8, 2, InitSpec{222, &cache, &full});
  auto source_params = param_map(source);
  for (const NamedParam& np : loaded.parameters(false))
    CHECK_MESSAGE(bitwise_equal(np.param->value, source_params.at(np.name)), np.name);

  // A partial snapshot overrides only the names it holds; the cache and the
  // fresh init fill in the rest.
  Param* src_head = nullptr;
  for (const NamedParam& np : source.parameters(false))
    if (np.name == "head.w") src_head = np.param;
  REQUIRE(src_head != nullptr);
  Snapshot head_only;
  head_only.put_f32("head.w", src_head->shape, src_head->value.data());

  Network fresh = build_generator(cell, 8, 2, InitSpec{222});
  Network mixed = build_generator(cell, 8, 2, InitSpec{222, &cache, &head_only});
  auto donor_params = param_map(donor);
  auto fresh_params = param_map(fresh);
  for (const NamedParam& np : mixed.parameters(false)) {
    const ArrayX& want = np.name == "head.w"    ? src_head->value
                         : is_cell_param(np.name) ? donor_params.at(np.name)
                                                  : fresh_params.at(np.name);
    CHECK_MESSAGE(bitwise_equal(np.param->value, want), np.name);
  }
}

TEST_CASE("param groups round trip through extract and apply") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 11));
  Network donor = build_generator(cell, 8, 2, InitSpec{111});
  Network target = build_generator(cell, 8, 2, InitSpec{222});

  ParamGroup grp = extract_param_group(donor, cell_node_prefix(3));
  REQUIRE(!grp.empty());
  const int written = apply_param_group(target, cell_node_prefix(3), grp);
  CHECK(written == static_cast<int>(grp.size()));
  auto donor_params = param_map(donor);
  for (const NamedParam& np : target.parameters(false))
    if (np.name.rfind(cell_node_prefix(3), 0) == 0)
      CHECK(bitwise_equal(np.param->value, donor_params.at(np.name)));

  ParamGroup bogus = grp;
  bogus[0].name = "no_such.w";
  CHECK(oracle::thrown_message<ShapeMismatch>([&] {
          apply_param_group(target, cell_node_prefix(3), bogus);
        }).find("no target parameter") != std::string::npos);

  ParamGroup wrong = extract_param_group(donor, cell_node_prefix(3));
  wrong[0].shape = {1, 2, 3};
  wrong[0].data = ArrayX::Zero(6);
  CHECK_THROWS_AS(apply_param_group(target, cell_node_prefix(3), wrong), ShapeMismatch);
}

TEST_CASE("discriminator builds and scores patches") {
  const auto blocks = decode_discriminator(random_genome(SpaceKind::Discriminator, 3));
  Network net = build_discriminator(blocks, 8, 16, 32, InitSpec{9});
  Rng rng(10);
  const Tensor y = net.forward(Tensor::randn({2, 3, 32, 32}, rng), Mode::Eval);
  CHECK(y.shape == std::vector<int>({2, 1}));
  CHECK(y.all_finite());

  CHECK(has_param(net, "stem.sn_u"));
  CHECK(has_param(net, "stem_bn.run_mean"));
  CHECK(has_param(net, "block1.bn1.gamma"));
  CHECK(has_param(net, "block5.bn2.run_var"));
  CHECK(has_param(net, "logit.sn_u"));

  // n doubles per block: 8 -> 256 at 1x1 after five halvings of a 32 patch.
  for (const NamedParam& np : net.parameters(false)) {
    if (np.name == "bottleneck.w") CHECK(np.param->shape == std::vector<int>({16, 256}));
    if (np.name == "logit.w") CHECK(np.param->shape == std::vector<int>({1, 16}));
  }

  Network flat = build_discriminator(blocks, 8, 0, 32, InitSpec{9});
  for (const NamedParam& np : flat.parameters(false)) {
    CHECK(np.name.rfind("bottleneck", 0) != 0);
    if (np.name == "logit.w") CHECK(np.param->shape == std::vector<int>({1, 256}));
  }
  const Tensor y2 = flat.forward(Tensor::randn({1, 3, 32, 32}, rng), Mode::Eval);
  CHECK(y2.shape == std::vector<int>({1, 1}));
}

TEST_CASE("discriminator patch must be a positive multiple of 32") {
  const auto blocks = decode_discriminator(random_genome(SpaceKind::Discriminator, 3));
  CHECK_THROWS_AS(build_discriminator(blocks, 8, 0, 30, InitSpec{}), ShapeError);
  CHECK_THROWS_AS(build_discriminator(blocks, 8, 0, 0, InitSpec{}), ShapeError);
  CHECK_THROWS_AS(build_discriminator(blocks, 8, 0, -32, InitSpec{}), ShapeError);
  CHECK(oracle::thrown_message<ShapeError>([&] {
          build_discriminator(blocks, 8, 0, 33, InitSpec{});
        }).find("multiple of 32") != std::string::npos);
}

TEST_CASE("every discriminator conv and linear carries spectral norm buffers") {
  std::vector<DiscBlock> blocks(kDiscBlocks, DiscBlock{1, 1});  // conv3 ops, rconv3 reductions
  Network net = build_discriminator(blocks, 8, 16, 32, InitSpec{5});
  int sn = 0;
  for (const NamedParam& np : net.parameters(false))
    if (np.name.size() >= 5 && np.name.compare(np.name.size() - 5, 5, ".sn_u") == 0) ++sn;
  // stem + 5 block ops + 5 reductions + bottleneck + logit
  CHECK(sn == 13);
}

TEST_CASE("builds are deterministic in the seed") {
  const CellGraph cell = decode_generator(random_genome(SpaceKind::Generator, 21));
  Network a = build_generator(cell, 8, 2, InitSpec{42});
  Network b = build_generator(cell, 8, 2, InitSpec{42});
  Network c = build_generator(cell, 8, 2, InitSpec{43});
  auto pa = param_map(a);
  auto pc = param_map(c);
  bool differs = false;
  for (const NamedParam& np : b.parameters(false)) {
    CHECK(bitwise_equal(np.param->value, pa.at(np.name)));
    if (!bitwise_equal(np.param->value, pc.at(np.name))) differs = true;
  }
  CHECK(differs);
}

TEST_CASE("frozen extractor taps have fixed channel widths and halved grids") {
  CHECK(FrozenExtractor::tap_channels(1) == 8);
  CHECK(FrozenExtractor::tap_channels(2) == 16);
  CHECK(FrozenExtractor::tap_channels(3) == 32);
  FrozenExtractor ext(9);
  Rng rng(1);
  const Tensor x = Tensor::randn({1, 3, 16, 16}, rng);
  CHECK(ext.features(x, 1).shape == std::vector<int>({1, 8, 8, 8}));
  CHECK(ext.features(x, 2).shape == std::vector<int>({1, 16, 4, 4}));
  CHECK(ext.features(x, 3).shape == std::vector<int>({1, 32, 2, 2}));
}

TEST_CASE("frozen extractor is deterministic and seed sensitive") {
  FrozenExtractor a(9);
  FrozenExtractor b(9);
  FrozenExtractor c(10);
  Rng rng(2);
  const Tensor x = Tensor::randn({2, 3, 16, 16}, rng);
  for (int depth = 1; depth <= 3; ++depth) {
    const Tensor fa = a.features(x, depth);
    const Tensor fb = b.features(x, depth);
    CHECK(bitwise_equal(fa.v, fb.v));
    CHECK(fa.all_finite());
  }
  CHECK_FALSE(bitwise_equal(a.features(x, 1).v, c.features(x, 1).v));
}

TEST_CASE("frozen extractor rejects out of range depths") {
  FrozenExtractor ext(9);
  Rng rng(3);
  const Tensor x = Tensor::randn({1, 3, 16, 16}, rng);
  CHECK_THROWS_AS(ext.features(x, 0), ConfigError);
  CHECK_THROWS_AS(ext.features(x, 4), ConfigError);
  CHECK_THROWS_AS(FrozenExtractor::tap_channels(0), ConfigError);
  CHECK_THROWS_AS(FrozenExtractor::tap_channels(4), ConfigError);
}

TEST_CASE("frozen extractor input gradients match finite differences") {
  // Loss = sum_i w_i * tap_i. The net is piecewise linear, so central
  // differences are exact wherever [x-h, x+h] contains no PReLU kink; entries
  // whose forward and backward differences disagree straddle a kink (or sit in
  // float noise) and are excluded. Everything is seeded, so the excluded set
  // is fixed and the coverage floor below is deterministic.
  auto check_depth = [](int depth, double h, double tol, int max_skipped) {
    FrozenExtractor ext(31);
    Rng rng(mix64(100, static_cast<std::uint64_t>(depth)));
    Tensor x = Tensor::randn({1, 3, 8, 8}, rng);

    Tensor f = ext.features(x, depth);
    Tensor w(f.shape);
    for (std::int64_t i = 0; i < w.numel(); ++i)
      w.v[i] = static_cast<Scalar>(rng.uniform(0.5, 1.5) * (rng.uniform(0.0, 1.0) < 0.5 ? -1 : 1));
    const Tensor dx = ext.backward_to_input(depth, w);
    REQUIRE(dx.shape == x.shape);

    auto loss_at = [&](const Tensor& in) {
      const Tensor out = ext.features(in, depth);
      double s = 0.0;
      for (std::int64_t i = 0; i < out.numel(); ++i)
        s += static_cast<double>(w.v[i]) * static_cast<double>(out.v[i]);
      return s;
    };
    const double base = loss_at(x);
    double worst = 0.0;
    int skipped = 0;
    for (std::int64_t i = 0; i < x.numel(); ++i) {
      const Scalar keep = x.v[i];
      x.v[i] = keep + static_cast<Scalar>(h);
      const double up = loss_at(x);
      x.v[i] = keep - static_cast<Scalar>(h);
      const double dn = loss_at(x);
      x.v[i] = keep;
      const double fwd = (up - base) / h;
      const double bwd = (base - dn) / h;
      if (std::fabs(fwd - bwd) > 1e-3 * std::max({std::fabs(fwd), std::fabs(bwd), 1.0})) {
        ++skipped;
        continue;
      }
      const double fd = (up - dn) / (2.0 * h);
      const double an = static_cast<double>(dx.v[i]);
      const double rel = std::fabs(an - fd) / std::max({std::fabs(an), std::fabs(fd), 1.0});
      worst = std::max(worst, rel);
    }
    CHECK_MESSAGE(worst <= tol, "depth ", depth, " worst rel ", worst);
    CHECK_MESSAGE(skipped <= max_skipped, "depth ", depth, " skipped ", skipped);
  };
  check_depth(1, 5e-2, 5e-4, 0);
  check_depth(2, 1e-2, 2e-3, 40);
  check_depth(3, 1e-2, 2e-3, 60);
}
