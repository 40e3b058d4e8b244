#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>

#include "fcil/fed_runtime.hpp"
#include "fcil/rng.hpp"
#include "fcil/simulation.hpp"
#include "fcil/wire.hpp"
#include "support.hpp"

using namespace fcil;
using fcil::testing::random_batch;

namespace {

ClientUpdate update_of(std::vector<double> values, std::size_t n) {
  ClientUpdate u;
  u.sample_count = n;
  u.params = ParamVector({NamedTensor{"w.weight", {values.size()}, std::move(values)}});
  return u;
}

SharedVAE vae_with(double enc, std::map<int, std::vector<double>> emb) {
  SharedVAE v;
  v.encoder = ParamVector({NamedTensor{"e.weight", {1}, {enc}}});
  v.decoder = ParamVector({NamedTensor{"d.weight", {1}, {enc}}});
  v.class_embedding = std::move(emb);
  return v;
}

double softmax_kl(std::vector<double> zt, std::vector<double> zs, double T) {
  auto soft = [T](std::vector<double> z) {
    double s = 0.0;
    for (double& v : z) s += v = std::exp(v / T);
    for (double& v : z) v /= s;
    return z;
  };
  const auto p = soft(zt), q = soft(zs);
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) kl += p[i] * std::log(p[i] / q[i]);
  return kl;
}

}  // namespace

TEST_CASE("method names") {
  CHECK(parse_method("ecoral") == Method::ecoral);
  CHECK(parse_method("ewc") == Method::ewc);
  CHECK_THROWS_AS(parse_method("icarl"), std::invalid_argument);
  CHECK(to_string(Method::lwf) == "lwf");
  CHECK(Components{}.label() == "A+G+F+C+K");
  CHECK(Components{true, true, true, false, false}.label() == "A+G+F");
}

TEST_CASE("distillation loss") {
  const std::vector<double> student{0.3, -0.2, 1.0, 0.5, 0.1, -1.0};
  const std::vector<int> labels{2, 0};
  const std::vector<double> same{0.3, -0.2, 0.5, 0.1};
  const auto r = kd_loss(student, 3, same, 2, 2.0, labels, 3.0);
  CHECK(r.kl == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(r.total == doctest::Approx(r.ce));

  const std::vector<double> other{1.0, 2.0, -1.0, 0.0};
  CHECK(kd_loss(student, 3, other, 2, 2.0, labels, 0.0).total ==
        doctest::Approx(kd_loss(student, 3, other, 2, 2.0, labels, 0.0).ce));

  // teacher (2, 0), student (0, 2), T = 1: KL = (p1 - p2) * 2 with p = softmax(2, 0)
  const double p1 = 1.0 / (1.0 + std::exp(-2.0));
  const double hand = (p1 - (1.0 - p1)) * 2.0;
  CHECK(hand == doctest::Approx(1.5232).epsilon(1e-4));
  CHECK(hand == doctest::Approx(softmax_kl({2.0, 0.0}, {0.0, 2.0}, 1.0)).epsilon(1e-12));
  const std::vector<double> s2{0.0, 2.0}, t2{2.0, 0.0};
  const std::vector<int> y{0};
  const auto kd = kd_loss(s2, 2, t2, 2, 1.0, y, 3.0);
  CHECK(kd.kl == doctest::Approx(hand).epsilon(1e-12));
  CHECK(kd.total == doctest::Approx(kd.ce + 3.0 * hand).epsilon(1e-12));
}

TEST_CASE("distillation gradient matches central differences") {
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  std::vector<double> s(3 * 5), t(3 * 3);
  for (double& v : s) v = g(rng);
  for (double& v : t) v = g(rng);
  const std::vector<int> labels{4, 1, 3};
  std::vector<double> ds;
  kd_loss(s, 5, t, 3, 2.0, labels, 3.0, &ds);
  for (std::size_t i = 0; i < s.size(); ++i) {
    auto up = s, down = s;
    up[i] += 1e-6;
    down[i] -= 1e-6;
    const double fd =
        (kd_loss(up, 5, t, 3, 2.0, labels, 3.0).total - kd_loss(down, 5, t, 3, 2.0, labels, 3.0).total) / 2e-6;
    CHECK(ds[i] == doctest::Approx(fd).epsilon(1e-6));
  }
}

TEST_CASE("EWC penalty, gradient and proximal step") {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  EwcState ewc;
  ewc.active = true;
  ewc.anchor = ParamVector({NamedTensor{"a.weight", {4}, {0.1, -0.2, 0.3, 0.0}}, NamedTensor{"head.weight", {2}, {1.0, 2.0}}});
  ewc.fisher = ewc.anchor.zeros_like();
  for (auto& t : ewc.fisher.layers())
    for (double& v : t.values) v = u(rng);
  ParamVector theta({NamedTensor{"a.weight", {4}, {0.5, 0.1, -0.4, 0.2}}, NamedTensor{"head.weight", {3}, {0.0, 1.0, 9.0}}});

  double want = 0.0;
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < ewc.anchor[l].numel(); ++i) {
      const double d = theta[l].values[i] - ewc.anchor[l].values[i];
      want += 300.0 * ewc.fisher[l].values[i] * d * d;
    }
  ParamVector gr = theta.zeros_like();
  CHECK(ewc_penalty(theta, ewc, 300.0, &gr) == doctest::Approx(want).epsilon(1e-12));
  CHECK(gr[1].values[2] == 0.0);  // rows beyond the anchor are free
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < theta[l].numel(); ++i) {
      ParamVector up = theta, down = theta;
      up[l].values[i] += 1e-6;
      down[l].values[i] -= 1e-6;
      const double fd = (ewc_penalty(up, ewc, 300.0) - ewc_penalty(down, ewc, 300.0)) / 2e-6;
      CHECK(gr[l].values[i] == doctest::Approx(fd).epsilon(1e-6));
    }

  // the proximal point zeroes the gradient of penalty + |x - theta|^2 / (2 lr)
  const double lr = 0.05;
  ParamVector prox = theta;
  ewc_proximal_step(prox, ewc, 300.0, lr);
  ParamVector g2 = prox.zeros_like();
  ewc_penalty(prox, ewc, 300.0, &g2);
  for (std::size_t l = 0; l < 2; ++l)
    for (std::size_t i = 0; i < prox[l].numel(); ++i)
      CHECK(g2[l].values[i] + (prox[l].values[i] - theta[l].values[i]) / lr == doctest::Approx(0.0).scale(1.0));
  CHECK(prox[1].values[2] == 9.0);

  ewc.active = false;
  CHECK(ewc_penalty(theta, ewc, 300.0) == 0.0);
}

TEST_CASE("FedAvg") {
  const auto even = fedavg_aggregate({update_of({1.0, 3.0}, 5), update_of({3.0, 5.0}, 5)});
  CHECK(even[0].values == std::vector<double>{2.0, 4.0});
  const auto weighted = fedavg_aggregate({update_of({0.0}, 1), update_of({4.0}, 3)});
  CHECK(weighted[0].values[0] == doctest::Approx(3.0).epsilon(1e-15));
  const auto single = update_of({0.25, -7.0}, 11);
  CHECK(fedavg_aggregate({single}) == single.params);
  CHECK_THROWS_AS(fedavg_aggregate({}), std::invalid_argument);
  CHECK_THROWS_AS(fedavg_aggregate({update_of({1.0}, 0)}), std::invalid_argument);
}

TEST_CASE("Shared-VAE aggregation") {
  const auto a = vae_with(1.0, {{0, {1.0}}, {1, {5.0}}});
  const auto b = vae_with(6.0, {{0, {6.0}}, {1, {9.0}}});
  const auto only = aggregate_vae({{&a, 2.0, {}}});
  CHECK(only.encoder == a.encoder);
  CHECK(only.class_embedding == a.class_embedding);

  const auto mixed = aggregate_vae({{&a, 2.0, {0}}, {&b, 3.0, {0}}});
  CHECK(mixed.encoder[0].values[0] == doctest::Approx(4.0));
  CHECK(mixed.class_embedding.at(0)[0] == doctest::Approx(4.0));

  const auto masked = aggregate_vae({{&a, 2.0, {0, 1}}, {&b, 3.0, {0}}});
  CHECK(masked.class_embedding.at(1) == a.class_embedding.at(1));
}

TEST_CASE("round message round trip") {
  const auto spec = fcil::testing::toy_convnet();
  ClientUpdate u;
  u.client_id = 7;
  u.round = 2;
  u.task = 1;
  u.sample_count = 33;
  u.params = init_backbone(spec, 4, 1).params();
  u.vae = init_shared_vae(spec.feature_dim(), 8, 3, 4, 1.0, 2);
  register_class(*u.vae, 3);
  u.vae_classes = {3};
  const auto back = decode_update(encode_update(u));
  CHECK(back.client_id == 7);
  CHECK(back.round == 2);
  CHECK(back.task == 1);
  CHECK(back.sample_count == 33);
  REQUIRE(back.params.same_layout(u.params));
  for (std::size_t t = 0; t < u.params.tensor_count(); ++t)
    CHECK(back.params[t].values == wire::to_wire_precision(u.params[t].values));
  REQUIRE(back.vae);
  CHECK(back.vae->knows(3));
  CHECK(back.vae_classes == std::set<int>{3});
  CHECK(!back.fisher);
}

TEST_CASE("symmetric KL") {
  const std::vector<double> p{0.5, 0.5}, q{0.9, 0.1};
  const double pq = 0.5 * std::log(0.5 / 0.9) + 0.5 * std::log(0.5 / 0.1);
  CHECK(symmetric_kl(p, q) == doctest::Approx(pq).epsilon(1e-12));
  CHECK(symmetric_kl(p, q) == doctest::Approx(0.5108).epsilon(1e-4));
  CHECK(symmetric_kl(p, p) == 0.0);
  const std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
  CHECK(symmetric_kl(a, b) == kKlSentinel);
}

TEST_CASE("heterogeneity report") {
  const ImageShape shape{3, 8, 8};
  const auto model = init_backbone(fcil::testing::toy_convnet(), 2, 1);
  auto bank = [&](int label, std::uint64_t seed) {
    MemoryStore s(4, shape);
    s = rebalance_quota(s, 2);
    const auto b = fcil::testing::single_class_batch(shape, 2, label, seed);
    for (std::size_t i = 0; i < b.size(); ++i) add_summary(s, b.image(i), label, Origin::condensed);
    return s;
  };
  auto mixed = [&](std::uint64_t seed) {
    MemoryStore s = bank(0, seed);
    const auto b = fcil::testing::single_class_batch(shape, 2, 1, seed + 1);
    for (std::size_t i = 0; i < b.size(); ++i) add_summary(s, b.image(i), 1, Origin::condensed);
    return s;
  };
  const auto same = heterogeneity_report({{0, mixed(1)}, {1, mixed(3)}}, 2, model, {});
  CHECK(same.mean_kl == 0.0);
  const auto apart = heterogeneity_report({{0, bank(0, 1)}, {1, bank(1, 2)}}, 2, model, {});
  CHECK(apart.pairwise_kl[0][1] == kKlSentinel);
  CHECK(apart.clients == std::vector<int>{0, 1});
}

namespace {

struct OneTask {
  Dataset train;
  ClientPartition partition;
  ClientGroupAssignment groups;
  ArchSpec spec = fcil::testing::toy_convnet();

  explicit OneTask(int clients) {
    train.class_count = 2;
    train.shape = spec.input;
    const auto b = random_batch(spec.input, 12, 2, 5);
    for (std::size_t i = 0; i < b.size(); ++i) train.push_back(b.image(i), b.labels[i]);
    std::vector<std::size_t> all(12);
    std::iota(all.begin(), all.end(), 0);
    for (int c = 0; c < clients; ++c) {
      partition.add(0, {{c, all}});
      groups.new_group.push_back(c);
    }
  }

  TaskRunInput input(int rounds) const {
    TaskRunInput in;
    in.train = &train;
    in.partition = &partition;
    in.groups = &groups;
    in.ctx.classes_seen = 2;
    in.ctx.omega_spec = spec;
    in.ctx.orig_cap = 4;
    in.rounds = rounds;
    in.round_clients = static_cast<int>(groups.new_group.size());
    in.seed = 17;
    return in;
  }
};

StrategyConfig small_strategy(Method m) {
  StrategyConfig st;
  st.method = m;
  st.local_epochs = 1;
  st.batch_size = 64;
  st.lr = 0.1;
  return st;
}

}  // namespace

TEST_CASE("first task with one full batch is plain gradient descent") {
  OneTask task(1);
  for (Method m : {Method::ecoral, Method::replay, Method::lwf, Method::ewc}) {
    GlobalModelState global;
    global.classifier = init_backbone(task.spec, 2, 3);
    std::map<int, ClientState> clients;
    clients[0].id = 0;
    clients[0].store = rebalance_quota(MemoryStore(4, task.spec.input), 2);
    const auto st = small_strategy(m);
    const auto out = run_task(global, clients, task.input(1), st);

    GradRequest req;
    std::vector<std::size_t> all(12);
    std::iota(all.begin(), all.end(), 0);
    req.batch = task.train.gather(all);
    ParamVector want = init_backbone(task.spec, 2, 3).params();
    want.axpy(-0.1, grad(init_backbone(task.spec, 2, 3), req).param_grad);
    REQUIRE(out.final_updates.size() == 1);
    CHECK(global.classifier.params() == out.final_updates.front().params);
    for (std::size_t t = 0; t < want.tensor_count(); ++t)
      for (std::size_t i = 0; i < want[t].numel(); ++i)
        CHECK(global.classifier.params()[t].values[i] == doctest::Approx(want[t].values[i]).epsilon(1e-6));
  }
}

TEST_CASE("identical clients aggregate to either update") {
  OneTask task(1);
  GlobalModelState global;
  global.classifier = init_backbone(task.spec, 2, 3);
  const auto st = small_strategy(Method::replay);
  TaskContext ctx = task.input(1).ctx;
  std::vector<std::size_t> all(12);
  std::iota(all.begin(), all.end(), 0);
  const auto local = task.train.gather(all);
  ClientState a, b;
  a.store = b.store = rebalance_quota(MemoryStore(4, task.spec.input), 2);
  auto ua = client_local_train(global, local, a, st, ctx, 5);
  auto ub = client_local_train(global, local, b, st, ctx, 5);
  CHECK(ua.params == ub.params);
  const auto agg = fedavg_aggregate({ua, ub});
  for (std::size_t t = 0; t < agg.tensor_count(); ++t)
    for (std::size_t i = 0; i < agg[t].numel(); ++i) CHECK(agg[t].values[i] == doctest::Approx(ua.params[t].values[i]));
}

TEST_CASE("client without data is skipped") {
  OneTask task(1);
  GlobalModelState global;
  global.classifier = init_backbone(task.spec, 2, 3);
  ClientState c;
  c.store = rebalance_quota(MemoryStore(4, task.spec.input), 2);
  CHECK_THROWS_AS(client_local_train(global, ImageBatch(task.spec.input), c, small_strategy(Method::replay),
                                     task.input(1).ctx, 1),
                  SkipClient);
}

TEST_CASE("task runs are deterministic across thread counts") {
  OneTask task(3);
  ParamVector first;
  for (int threads : {1, 3}) {
    GlobalModelState global;
    global.classifier = init_backbone(task.spec, 2, 3);
    global.vae = init_shared_vae(task.spec.feature_dim(), 8, 3, 4, 1.0, 4);
    std::map<int, ClientState> clients;
    for (int c = 0; c < 3; ++c) {
      clients[c].id = c;
      clients[c].store = rebalance_quota(MemoryStore(4, task.spec.input), 2);
    }
    auto in = task.input(2);
    in.threads = threads;
    auto st = small_strategy(Method::ecoral);
    st.batch_size = 4;
    run_task(global, clients, in, st);
    if (threads == 1) first = global.classifier.params();
    else CHECK(global.classifier.params() == first);
  }
}

TEST_CASE("a three-task run fills a lower-triangular accuracy matrix") {
  SyntheticSpec ds;
  ds.class_count = 6;
  ds.train_per_class = 12;
  ds.test_per_class = 4;
  ds.shape = {3, 8, 8};
  const auto data = make_synthetic_dataset(ds);
  SimulationConfig cfg;
  cfg.tasks = 3;
  cfg.classes_per_task = 2;
  cfg.clients_initial = 2;
  cfg.round_clients = 2;
  cfg.memory_budget = 6;
  cfg.rounds = 1;
  cfg.baseline_inits = 1;
  cfg.arch = fcil::testing::toy_convnet();
  cfg.strategy.local_epochs = 1;
  cfg.strategy.lr = 0.05;
  cfg.threads = 1;
  const auto res = run_simulation(data, cfg);
  REQUIRE(res.matrix.completed() == 3);
  for (int t = 0; t < 3; ++t) CHECK(res.matrix.rows[t].size() == static_cast<std::size_t>(t + 1));
  res.matrix.validate();
  CHECK(res.audit.condensed_samples == 0);
  CHECK(res.audit.omega_updates > 0);
}

TEST_CASE("FCIL_THREADS caps the worker count") {
  setenv("FCIL_THREADS", "2", 1);
  CHECK(worker_threads() == 2);
  setenv("FCIL_THREADS", "zero", 1);
  CHECK(worker_threads() >= 1);
  unsetenv("FCIL_THREADS");
}
