#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <random>

#include "fcil/metrics.hpp"
#include "support.hpp"

using namespace fcil;

namespace {

AccuracyMatrix make(std::vector<std::vector<double>> rows, std::vector<std::size_t> sizes = {}) {
  AccuracyMatrix m;
  if (sizes.empty()) sizes.assign(rows.size(), 100);
  m.test_sizes = std::move(sizes);
  m.rows = std::move(rows);
  return m;
}

}  // namespace

TEST_CASE("accuracy pair") {
  CHECK(accuracy_pair(make({{0.9}})) == std::pair{0.9, 0.9});
  const auto [avg, last] = accuracy_pair(make({{0.9}, {0.7, 0.8}}));
  CHECK(last == doctest::Approx(0.75));
  CHECK(avg == doctest::Approx(0.825));
  CHECK(accuracy_pair(make({{1.0}, {1.0, 1.0}, {1.0, 1.0, 1.0}})) == std::pair{1.0, 1.0});
  AccuracyMatrix partial = make({{0.9}}, {10, 10});
  CHECK_THROWS_AS(accuracy_pair(partial), std::invalid_argument);
}

TEST_CASE("incremental accuracy") {
  CHECK(incremental_accuracy(make({{0.6}})) == std::pair{0.6, 0.6});
  const auto [avg, last] = incremental_accuracy(make({{0.9}, {0.7, 0.8}}));
  CHECK(last == doctest::Approx(0.825));
  CHECK(avg == doctest::Approx(0.8625));
  const auto [ca, cl] = incremental_accuracy(make({{0.4}, {0.4, 0.4}}));
  CHECK(ca == doctest::Approx(0.4));
  CHECK(cl == doctest::Approx(0.4));
}

TEST_CASE("task-unweighted accuracy") {
  const auto m = make({{0.95}, {0.9, 0.5}}, {1000, 10});
  CHECK(accuracy_a(m).second == doctest::Approx(0.7));
  CHECK(accuracy_pair(m).second == doctest::Approx((1000 * 0.9 + 10 * 0.5) / 1010.0));
  CHECK(accuracy_pair(m).second == doctest::Approx(0.896).epsilon(1e-3));
  const auto eq = make({{0.9}, {0.7, 0.8}});
  CHECK(accuracy_a(eq).first == doctest::Approx(accuracy_pair(eq).first));
  CHECK(accuracy_a(make({{0.3}})).second == 0.3);
}

TEST_CASE("transfer, remembering and forgetting") {
  auto m = make({{0.9}, {0.7, 0.8}});
  CHECK(bwt(m) == doctest::Approx(-0.2));
  CHECK(remembering(bwt(m)) == doctest::Approx(0.8));
  CHECK(bwt(make({{0.9}, {0.9, 0.8}})) == 0.0);
  CHECK(remembering(0.3) == 1.0);
  CHECK(forgetting(make({{0.9}, {0.6, 0.8}})) == doctest::Approx(0.3));
  CHECK(forgetting(make({{0.5}, {0.6, 0.8}, {0.7, 0.8, 0.9}})) == 0.0);

  m.pre = {std::nullopt, 0.1};
  m.baseline = {std::nullopt, 0.1};
  CHECK(fwt(m) == 0.0);
  m.baseline = {std::nullopt, std::nullopt};
  CHECK_THROWS_AS(fwt(m), std::invalid_argument);
  CHECK_THROWS_AS(bwt(make({{0.9}})), std::invalid_argument);
}

TEST_CASE("metrics match the direct formulas on random matrices") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::uniform_int_distribution<int> tasks(2, 8), size(1, 500);
  for (int trial = 0; trial < 50; ++trial) {
    const int T = tasks(rng);
    AccuracyMatrix m;
    std::vector<double> sizes, pre(T, 0.0), base(T, 0.0);
    for (int t = 0; t < T; ++t) {
      m.rows.emplace_back();
      for (int j = 0; j <= t; ++j) m.rows.back().push_back(u(rng));
      m.test_sizes.push_back(static_cast<std::size_t>(size(rng)));
      sizes.push_back(static_cast<double>(m.test_sizes.back()));
      pre[t] = u(rng);
      base[t] = u(rng);
      m.pre.push_back(pre[t]);
      m.baseline.push_back(base[t]);
    }
    const auto want = fcil::testing::direct_metrics(m.rows, sizes, pre, base);
    const auto got = compute_metrics(m);
    CHECK(std::abs(got.a_avg - want.a_avg) <= 1e-9);
    CHECK(std::abs(got.a_last - want.a_last) <= 1e-9);
    CHECK(std::abs(got.a_incre_avg - want.incre_avg) <= 1e-9);
    CHECK(std::abs(got.aa_last - want.aa_last) <= 1e-9);
    CHECK(std::abs(*got.bwt - want.bwt) <= 1e-9);
    CHECK(std::abs(*got.fwt - want.fwt) <= 1e-9);
    CHECK(std::abs(*got.remembering - want.remembering) <= 1e-9);
    CHECK(std::abs(*got.forgetting - want.forgetting) <= 1e-9);
    CHECK(*got.forgetting >= 0.0);
  }
}

TEST_CASE("single task report leaves transfer metrics empty") {
  const auto r = compute_metrics(make({{0.4}}));
  CHECK(!r.bwt);
  CHECK(!r.forgetting);
  CHECK(r.a_last == 0.4);
  const auto j = to_json(r);
  CHECK(j.at("A_last") == 0.4);
  CHECK(j.at("BwT").is_null());
}

TEST_CASE("matrix CSV round trip is exact") {
  const auto m = make({{0.1 + 0.2}, {1.0 / 3.0, 2.0 / 3.0}, {0.5, 0.25, 1e-17}}, {3, 4, 5});
  const auto csv = matrix_csv(m);
  CHECK(csv.rfind("task_0,task_1,task_2\n", 0) == 0);
  const auto path = fcil::testing::scratch_dir("matrix_csv") / "m.csv";
  write_matrix_csv(path, m);
  const auto back = read_matrix_csv(path);
  CHECK(back.rows == m.rows);
  CHECK(matrix_csv(back) == csv);
}

TEST_CASE("validation") {
  CHECK_THROWS_AS(make({{1.2}}).validate(), std::invalid_argument);
  CHECK_THROWS_AS(make({{0.5, 0.5}}).validate(), std::invalid_argument);
}
