#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "fcil/rng.hpp"
#include "fcil/task_stream.hpp"
#include "support.hpp"

using namespace fcil;

TEST_CASE("schedule covers every class exactly once") {
  const auto s = build_task_schedule(100, 10, 10, 3);
  REQUIRE(s.task_count() == 10);
  std::set<int> all;
  for (const auto& t : s.tasks) {
    CHECK(t.size() == 10);
    CHECK(std::is_sorted(t.begin(), t.end()));
    all.insert(t.begin(), t.end());
  }
  CHECK(all.size() == 100);
  CHECK(*all.begin() == 0);
  CHECK(*all.rbegin() == 99);
  CHECK(s.classes_seen_through(3) == 40);
}

TEST_CASE("single task schedule is the identity set") {
  for (std::uint64_t seed : {0u, 1u, 99u}) {
    const auto s = build_task_schedule(4, 1, 4, seed);
    CHECK(s.tasks == std::vector<std::vector<int>>{{0, 1, 2, 3}});
  }
}

TEST_CASE("schedule matches an independent run of the seeded shuffle") {
  std::vector<int> order(6);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(7);
  std::shuffle(order.begin(), order.end(), rng);
  const auto s = build_task_schedule(6, 3, 2, 7);
  for (int t = 0; t < 3; ++t) {
    std::vector<int> want{order[2 * t], order[2 * t + 1]};
    std::sort(want.begin(), want.end());
    CHECK(s.tasks[t] == want);
    for (int k : want) CHECK(s.task_of_class(k) == t);
  }
}

TEST_CASE("schedule rejects too few classes") {
  CHECK_THROWS_AS(build_task_schedule(10, 3, 4, 0), std::invalid_argument);
  CHECK_THROWS_AS(build_task_schedule(10, 0, 4, 0), std::invalid_argument);
}

namespace {

struct Pool {
  std::vector<std::size_t> idx;
  std::vector<int> labels;
};

Pool make_pool(int classes, int per_class) {
  Pool p;
  for (int k = 0; k < classes; ++k)
    for (int i = 0; i < per_class; ++i) {
      p.idx.push_back(p.idx.size());
      p.labels.push_back(k);
    }
  return p;
}

double mean_client_entropy(const PartitionFragment& frag, const std::vector<int>& labels, int classes) {
  double total = 0.0;
  int clients = 0;
  for (const auto& [c, idx] : frag) {
    if (idx.empty()) continue;
    std::vector<double> h(static_cast<std::size_t>(classes), 0.0);
    for (std::size_t i : idx) h[static_cast<std::size_t>(labels[i])] += 1.0;
    double e = 0.0;
    for (double v : h)
      if (v > 0) {
        const double p = v / static_cast<double>(idx.size());
        e -= p * std::log(p);
      }
    total += e;
    ++clients;
  }
  return total / clients;
}

}  // namespace

TEST_CASE("one client receives every sample") {
  const Pool p = make_pool(3, 20);
  const std::vector<int> clients{5};
  for (double sigma : {0.1, 0.5, 10.0}) {
    const auto frag = dirichlet_partition(p.idx, p.labels, clients, sigma, 11);
    CHECK(frag.at(5) == p.idx);
  }
}

TEST_CASE("partition is a disjoint cover of the samples") {
  const Pool p = make_pool(5, 37);
  const std::vector<int> clients{0, 1, 2, 3};
  const auto frag = dirichlet_partition(p.idx, p.labels, clients, 0.5, 4);
  std::vector<std::size_t> seen;
  for (const auto& [c, idx] : frag) seen.insert(seen.end(), idx.begin(), idx.end());
  std::sort(seen.begin(), seen.end());
  CHECK(seen == p.idx);
}

TEST_CASE("large sigma approaches an even split") {
  const Pool p = make_pool(2, 400);
  const std::vector<int> clients{0, 1, 2, 3};
  std::vector<double> share(4, 0.0);
  const int draws = 1000;
  for (int d = 0; d < draws; ++d) {
    const auto frag = dirichlet_partition(p.idx, p.labels, clients, 1000.0, derive_seed(d, {17}));
    for (int c = 0; c < 4; ++c) {
      std::size_t class0 = 0;
      for (std::size_t i : frag.at(c))
        if (p.labels[i] == 0) ++class0;
      share[c] += static_cast<double>(class0) / 400.0;
    }
  }
  for (double s : share) CHECK(std::abs(s / draws - 0.25) <= 0.02);
}

TEST_CASE("smaller sigma gives less diverse clients") {
  const Pool p = make_pool(10, 60);
  const std::vector<int> clients{0, 1, 2, 3, 4};
  double low = 0.0, high = 0.0;
  for (int d = 0; d < 100; ++d) {
    const std::uint64_t seed = derive_seed(d, {23});
    low += mean_client_entropy(dirichlet_partition(p.idx, p.labels, clients, 0.2, seed), p.labels, 10);
    high += mean_client_entropy(dirichlet_partition(p.idx, p.labels, clients, 0.8, seed), p.labels, 10);
  }
  CHECK(low < high);
}

TEST_CASE("partition rejects non-positive sigma") {
  const Pool p = make_pool(2, 5);
  const std::vector<int> clients{0, 1};
  CHECK_THROWS_AS(dirichlet_partition(p.idx, p.labels, clients, 0.0, 0), std::invalid_argument);
}

TEST_CASE("largest remainder counts") {
  const std::vector<double> prop{0.5, 0.3, 0.2};
  CHECK(largest_remainder_counts(prop, 10) == std::vector<std::size_t>{5, 3, 2});
  const std::vector<double> thirds{1.0, 1.0, 1.0};
  const auto c = largest_remainder_counts(thirds, 10);
  CHECK(std::accumulate(c.begin(), c.end(), std::size_t{0}) == 10);
  CHECK(c == std::vector<std::size_t>{4, 3, 3});
}

TEST_CASE("client groups") {
  const auto g0 = advance_client_groups(std::nullopt, 0, 20, 0.9, 1);
  CHECK(g0.new_group.size() == 20);
  CHECK(g0.old_group.empty());
  CHECK(g0.between.empty());

  const auto ten = advance_client_groups(std::nullopt, 0, 10, 0.9, 1);
  const auto g1 = advance_client_groups(ten, 1, 5, 0.9, 2);
  CHECK(g1.between.size() == 9);
  CHECK(g1.old_group.size() == 1);
  CHECK(g1.new_group == std::vector<int>{10, 11, 12, 13, 14});
  CHECK(g1.total() == 15);

  const auto frozen = advance_client_groups(ten, 1, 0, 0.0, 2);
  CHECK(frozen.old_group.size() == 10);
  CHECK(frozen.between.empty());
  CHECK(frozen.with_current_data().empty());
}

TEST_CASE("round client sampling") {
  ClientGroupAssignment g;
  for (int i = 0; i < 4; ++i) g.between.push_back(i);
  for (int i = 4; i < 10; ++i) g.new_group.push_back(i);
  g.old_group = {10, 11};
  CHECK(sample_round_clients(g, 10, 3) == g.with_current_data());
  CHECK(sample_round_clients(g, 0, 3).empty());

  ClientGroupAssignment wide;
  for (int i = 0; i < 20; ++i) wide.new_group.push_back(i);
  const auto a = sample_round_clients(wide, 5, 42);
  CHECK(a == sample_round_clients(wide, 5, 42));
  CHECK(a.size() == 5);
  CHECK(std::set<int>(a.begin(), a.end()).size() == 5);
  CHECK(sample_round_clients(g, 12, 1, true).size() == 12);
}

TEST_CASE("synthetic dataset is deterministic and well formed") {
  SyntheticSpec spec;
  spec.class_count = 4;
  spec.train_per_class = 5;
  spec.test_per_class = 3;
  spec.seed = 9;
  const auto a = make_synthetic_dataset(spec);
  const auto b = make_synthetic_dataset(spec);
  CHECK(a.train.pixels == b.train.pixels);
  CHECK(a.test.labels == b.test.labels);
  CHECK(a.train.size() == 20);
  CHECK(a.test.size() == 12);
  for (double v : a.train.pixels) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}

TEST_CASE("raw tensor directory round trip") {
  SyntheticSpec spec;
  spec.class_count = 3;
  spec.train_per_class = 10;
  spec.test_per_class = 0;
  const auto data = make_synthetic_dataset(spec);
  const auto dir = fcil::testing::scratch_dir("raw_tensor");
  write_raw_tensor_dir(data.train, dir);
  const auto back = load_raw_tensor_dir(dir, 0.2, 1);
  CHECK(back.train.size() == 24);
  CHECK(back.test.size() == 6);
  CHECK(back.train.shape == spec.shape);
  // u8 quantization: a loaded image matches one original within half a step
  const auto img = back.test.image(0);
  double best = 1e9;
  for (std::size_t i = 0; i < data.train.size(); ++i) {
    if (data.train.labels[i] != back.test.labels[0]) continue;
    double worst = 0.0;
    const auto ref = data.train.image(i);
    for (std::size_t p = 0; p < ref.size(); ++p) worst = std::max(worst, std::abs(ref[p] - img[p]));
    best = std::min(best, worst);
  }
  CHECK(best <= 0.5 / 255.0 + 1e-12);
}
