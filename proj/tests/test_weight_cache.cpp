#include <thread>
#include <vector>

#include "doctest.h"
#include "oracle_helpers.hpp"
#include "srnas/errors.hpp"
#include "srnas/rng.hpp"
#include "srnas/weight_cache.hpp"

using namespace srnas;

namespace {

ParamGroup tagged_group(float a, float b) {
  TensorBlob blob;
  blob.name = "conv.w";
  blob.shape = {2, 2};
  blob.data = ArrayX(4);
  blob.data << a, b, a + b, 0.5f;
  return {blob};
}

}  // namespace

TEST_CASE("lookup on an empty cache misses") {
  WeightCache cache;
  CHECK(cache.size() == 0);
  CHECK(!cache.lookup(1, 0).has_value());
}

TEST_CASE("commits keep the slot of the strict maximum, ties lose") {
  WeightCache cache;
  CHECK(cache.commit(3, 7, tagged_group(1, 0), 25.0, 1));
  auto v = cache.lookup(3, 7);
  REQUIRE(v.has_value());
  CHECK(v->metric == 25.0);
  CHECK(v->step == 1);

  // Strictly better replaces.
  CHECK(cache.commit(3, 7, tagged_group(2, 0), 30.0, 2));
  v = cache.lookup(3, 7);
  CHECK(v->metric == 30.0);
  CHECK(v->step == 2);
  CHECK((*v->weights)[0].data[0] == 2.0f);

  // An exact tie is rejected: the first writer keeps the slot.
  CHECK_FALSE(cache.commit(3, 7, tagged_group(9, 9), 30.0, 3));
  v = cache.lookup(3, 7);
  CHECK(v->step == 2);
  CHECK((*v->weights)[0].data[0] == 2.0f);

  CHECK_FALSE(cache.commit(3, 7, tagged_group(9, 9), 29.999, 4));
  CHECK(cache.lookup(3, 7)->metric == 30.0);
  CHECK(cache.size() == 1);
}

TEST_CASE("slots are keyed by node and op independently") {
  WeightCache cache;
  CHECK(cache.commit(1, 0, tagged_group(1, 1), 5.0, 1));
  CHECK(cache.commit(1, 1, tagged_group(2, 2), 3.0, 2));
  CHECK(cache.commit(2, 0, tagged_group(3, 3), 4.0, 3));
  CHECK(cache.size() == 3);
  CHECK(cache.lookup(1, 0)->metric == 5.0);
  CHECK(cache.lookup(1, 1)->metric == 3.0);
  CHECK(cache.lookup(2, 0)->metric == 4.0);
  CHECK(!cache.lookup(2, 1).has_value());

  const auto idx = cache.index();
  CHECK(idx.size() == 3);
}

TEST_CASE("a held view survives replacement untouched") {
  WeightCache cache;
  cache.commit(1, 0, tagged_group(7, 7), 1.0, 1);
  const auto old_view = cache.lookup(1, 0);
  REQUIRE(old_view.has_value());

  cache.commit(1, 0, tagged_group(8, 8), 2.0, 2);
  CHECK((*old_view->weights)[0].data[0] == 7.0f);  // immutable snapshot
  CHECK((*cache.lookup(1, 0)->weights)[0].data[0] == 8.0f);
}

TEST_CASE("scripted commit sequence lands in the hand-applied state") {
  WeightCache cache;
  // Step 1: first write wins the empty slot.
  CHECK(cache.commit(5, 2, tagged_group(1, 1), 1.0, 1));
  // Step 2: equal metric, later step: rejected, slot unchanged.
  CHECK_FALSE(cache.commit(5, 2, tagged_group(2, 2), 1.0, 2));
  CHECK(cache.lookup(5, 2)->step == 1);
  // Step 3: strictly better: replaces.
  CHECK(cache.commit(5, 2, tagged_group(3, 3), 2.0, 3));
  const auto v = cache.lookup(5, 2);
  CHECK(v->metric == 2.0);
  CHECK(v->step == 3);
  CHECK((*v->weights)[0].data[1] == 3.0f);
  CHECK(cache.size() == 1);
}

TEST_CASE("concurrent writers settle on the global per-slot maximum") {
  WeightCache cache;
  constexpr int kThreads = 8;
  constexpr int kPerThread = 500;
  // Metrics are globally unique, so the maximum must always win no matter the
  // interleaving, and its payload must be the one committed alongside it.
  std::vector<std::thread> writers;
  for (int t = 0; t < kThreads; ++t) {
    writers.emplace_back([&cache, t] {
      Rng rng(mix64(0xca0de, static_cast<std::uint64_t>(t)));
      for (int i = 0; i < kPerThread; ++i) {
        const int node = rng.uniform_int(4) + 1;
        const int op = rng.uniform_int(4);
        const double metric = static_cast<double>(i * kThreads + t);
        cache.commit(node, op, tagged_group(static_cast<float>(t), static_cast<float>(i)),
                     metric, i);
      }
    });
  }
  for (auto& w : writers) w.join();

  // Replay the same streams serially to find each slot's expected winner.
  struct Best {
    double metric = -1.0;
    float a = 0, b = 0;
  };
  Best best[5][4];
  for (int t = 0; t < kThreads; ++t) {
    Rng rng(mix64(0xca0de, static_cast<std::uint64_t>(t)));
    for (int i = 0; i < kPerThread; ++i) {
      const int node = rng.uniform_int(4) + 1;
      const int op = rng.uniform_int(4);
      const double metric = static_cast<double>(i * kThreads + t);
      if (metric > best[node][op].metric)
        best[node][op] = {metric, static_cast<float>(t), static_cast<float>(i)};
    }
  }
  for (int node = 1; node <= 4; ++node)
    for (int op = 0; op < 4; ++op) {
      const auto v = cache.lookup(node, op);
      REQUIRE(v.has_value());
      CHECK(v->metric == best[node][op].metric);
      CHECK((*v->weights)[0].data[0] == best[node][op].a);
      CHECK((*v->weights)[0].data[1] == best[node][op].b);
    }
}

TEST_CASE("save and load round-trip the table bit for bit") {
  oracle::TempDir dir("cache");
  WeightCache cache;
  Rng rng(21);
  for (int node = 1; node <= 3; ++node)
    for (int op : {0, 5, 15}) {
      TensorBlob w;
      w.name = "op.w";
      w.shape = {3, 2};
      w.data = ArrayX(6);
      for (int i = 0; i < 6; ++i) w.data[i] = static_cast<Scalar>(rng.normal());
      TensorBlob b;
      b.name = "op.b";
      b.shape = {2};
      b.data = ArrayX(2);
      b.data << 0.125f, -7.5f;
      cache.commit(node, op, ParamGroup{w, b}, rng.uniform(0.0, 40.0),
                   node * 100 + op);
    }
  cache.save(dir.path());

  WeightCache loaded;
  loaded.commit(9, 9, tagged_group(1, 1), 1.0, 1);  // must vanish: load replaces
  loaded.load(dir.path());
  CHECK(loaded.size() == cache.size());
  CHECK(!loaded.lookup(9, 9).has_value());
  CHECK(loaded.index() == cache.index());

  for (int node = 1; node <= 3; ++node)
    for (int op : {0, 5, 15}) {
      const auto a = cache.lookup(node, op);
      const auto b = loaded.lookup(node, op);
      REQUIRE(b.has_value());
      CHECK(a->metric == b->metric);
      CHECK(a->step == b->step);
      REQUIRE(a->weights->size() == b->weights->size());
      for (std::size_t i = 0; i < a->weights->size(); ++i) {
        CHECK((*a->weights)[i].name == (*b->weights)[i].name);
        CHECK((*a->weights)[i].shape == (*b->weights)[i].shape);
        CHECK(((*a->weights)[i].data == (*b->weights)[i].data).all());
      }
    }

  // Saving over an existing directory then reloading stays stable.
  loaded.commit(4, 4, tagged_group(2, 3), 9.0, 9);
  loaded.save(dir.path());
  WeightCache again;
  again.load(dir.path());
  CHECK(again.size() == loaded.size());
  CHECK(again.lookup(4, 4)->metric == 9.0);
}

TEST_CASE("loading a directory without an index fails loudly") {
  oracle::TempDir dir("cache_missing");
  WeightCache cache;
  CHECK_THROWS_AS(cache.load(dir.path() + "/nope"), IoError);
}

TEST_CASE("clear empties the table") {
  WeightCache cache;
  cache.commit(1, 1, tagged_group(0, 0), 1.0, 1);
  cache.clear();
  CHECK(cache.size() == 0);
  CHECK(!cache.lookup(1, 1).has_value());
}
