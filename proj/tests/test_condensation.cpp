#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <functional>
#include <random>

#include "fcil/condensation.hpp"
#include "fcil/rng.hpp"
#include "fcil/task_stream.hpp"
#include "support.hpp"

using namespace fcil;
using fcil::testing::random_batch;
using fcil::testing::single_class_batch;

namespace {

ParamVector ce_grad(const Backbone& m, const ImageBatch& b) {
  GradRequest r;
  r.batch = b;
  return grad(m, r).param_grad;
}

// Identity feature map: an mlp without hidden layers exposes its input.
Backbone identity_features(int dim, int classes) {
  ArchSpec s;
  s.kind = ArchKind::mlp;
  s.input = {1, 1, dim};
  return init_backbone(s, classes, 1);
}

ImageBatch rows(const std::vector<std::vector<double>>& xs, int label) {
  ImageBatch b(ImageShape{1, 1, static_cast<int>(xs.front().size())});
  for (const auto& x : xs) b.push_back(x, label, Origin::real);
  return b;
}

double max_rel_fd(const std::vector<double>& analytic, ImageBatch batch, const std::function<double(const ImageBatch&)>& f,
                  std::uint64_t seed, int probes) {
  std::mt19937_64 rng(seed);
  const double h = 1e-5;
  double worst = 0.0;
  double scale = 0.0;
  for (double v : analytic) scale = std::max(scale, std::abs(v));
  for (int k = 0; k < probes; ++k) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, batch.pixels.size() - 1)(rng);
    ImageBatch plus = batch, minus = batch;
    plus.pixels[i] += h;
    minus.pixels[i] -= h;
    const double fd = (f(plus) - f(minus)) / (2 * h);
    worst = std::max(worst, std::abs(fd - analytic[i]) / std::max(1e-3 * scale, std::max(std::abs(fd), std::abs(analytic[i]))));
  }
  return worst;
}

}  // namespace

TEST_CASE("gradient distance identities") {
  const auto m = init_backbone(fcil::testing::toy_convnet(), 2, 3);
  const auto g = ce_grad(m, single_class_batch(m.spec().input, 3, 0, 4));
  CHECK(gradient_distance(g, g) == doctest::Approx(0.0).epsilon(1e-12));

  ParamVector a({NamedTensor{"w.weight", {3}, {1.0, -2.0, 0.5}}});
  ParamVector b = a;
  b.scale(-1.0);
  CHECK(gradient_distance(a, b) == doctest::Approx(2.0));
  ParamVector with_bias({NamedTensor{"w.weight", {2}, {1.0, 0.0}}, NamedTensor{"w.bias", {2}, {5.0, 1.0}}});
  ParamVector other({NamedTensor{"w.weight", {2}, {0.0, 1.0}}, NamedTensor{"w.bias", {2}, {-5.0, 1.0}}});
  CHECK(gradient_distance(with_bias, other) == doctest::Approx(1.0));
}

TEST_CASE("gradient matching matches a direct per-layer cosine evaluation") {
  const auto spec = fcil::testing::toy_convnet();
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto omega = init_backbone(spec, 3, seed);
    const auto m_k = single_class_batch(spec.input, 2, 1, seed + 10);
    const auto b_k = single_class_batch(spec.input, 5, 1, seed + 20);
    const auto gm = ce_grad(omega, m_k), gb = ce_grad(omega, b_k);
    double want = 0.0;
    for (std::size_t l = 0; l < gm.tensor_count(); ++l) {
      if (gm[l].shape.size() == 1) continue;
      double dot = 0, na = 0, nb = 0;
      for (std::size_t i = 0; i < gm[l].numel(); ++i) {
        dot += gm[l].values[i] * gb[l].values[i];
        na += gm[l].values[i] * gm[l].values[i];
        nb += gb[l].values[i] * gb[l].values[i];
      }
      want += 1.0 - dot / std::sqrt(na * nb);
    }
    CHECK(grad_match_loss(omega, m_k, b_k) == doctest::Approx(want).epsilon(1e-10));
    CHECK(grad_match_loss(omega, b_k, b_k) == doctest::Approx(0.0).epsilon(1e-12));
  }
}

TEST_CASE("gradient matching rejects mixed labels") {
  const auto spec = fcil::testing::toy_convnet();
  const auto omega = init_backbone(spec, 3, 0);
  CHECK_THROWS_AS(grad_match_loss(omega, random_batch(spec.input, 2, 2, 1), single_class_batch(spec.input, 2, 0, 2)),
                  std::invalid_argument);
}

TEST_CASE("exemplar pixel gradients match central differences") {
  const auto spec = fcil::testing::toy_convnet();
  const auto omega = fcil::testing::with_random_biases(init_backbone(spec, 3, 5), 6);
  const auto m_k = single_class_batch(spec.input, 2, 2, 7);
  const auto b_k = single_class_batch(spec.input, 4, 2, 8);
  const auto rest = random_batch(spec.input, 3, 2, 9);

  const auto gm = grad_match(omega, m_k, b_k, true);
  CHECK(max_rel_fd(gm.pixel_grad, m_k, [&](const ImageBatch& x) { return grad_match_loss(omega, x, b_k); }, 1, 30) <= 1e-3);

  const auto rel = relationship(omega, m_k, b_k, rest, true);
  CHECK(max_rel_fd(rel.pixel_grad, m_k, [&](const ImageBatch& x) { return relationship_loss(omega, x, b_k, rest); }, 2,
                   30) <= 1e-3);

  PrototypeSet protos;
  protos.dim = omega.feature_dim();
  std::mt19937_64 rng(3);
  std::normal_distribution<double> g;
  for (int k = 0; k < 3; ++k)
    for (int v = 0; v < 2; ++v) {
      FeatureVec p(static_cast<std::size_t>(protos.dim));
      for (double& x : p) x = g(rng);
      protos.prototypes[k].push_back(p);
    }
  const auto mk = mkcl_term(omega, m_k, protos, 0.5, true);
  CHECK(max_rel_fd(mk.pixel_grad, m_k, [&](const ImageBatch& x) { return mkcl_term(omega, x, protos, 0.5, false).loss; }, 3,
                   30) <= 1e-3);
}

TEST_CASE("condensation model update") {
  ArchSpec lin;
  lin.kind = ArchKind::mlp;
  lin.input = {1, 1, 1};
  lin.bias = false;
  auto state = init_condensation_state(lin, 2, 0.1, 4);
  const double w0 = state.omega.params()[0].values[0], w1 = state.omega.params()[0].values[1];
  const auto b_n = rows({{1.0}}, 0);
  const auto m_orig = rows({{2.0}}, 1);

  // softmax CE on logits (w0 x, w1 x): d/dw_k = (p_k - y_k) x
  auto step = [](double a, double b, double x, int y, double& ga, double& gb) {
    const double pa = 1.0 / (1.0 + std::exp((b - a) * x));
    ga += (pa - (y == 0)) * x;
    gb += ((1.0 - pa) - (y == 1)) * x;
  };
  double ga = 0, gb = 0;
  step(w0, w1, 1.0, 0, ga, gb);
  const auto single = update_condensation_model(state, b_n, ImageBatch(lin.input));
  CHECK(single.omega.params()[0].values[0] == doctest::Approx(w0 - 0.1 * ga).epsilon(1e-12));
  CHECK(single.omega.params()[0].values[1] == doctest::Approx(w1 - 0.1 * gb).epsilon(1e-12));

  step(w0, w1, 2.0, 1, ga, gb);
  const auto both = update_condensation_model(state, b_n, m_orig);
  CHECK(both.omega.params()[0].values[0] == doctest::Approx(w0 - 0.1 * ga).epsilon(1e-12));
  CHECK(both.omega.params()[0].values[1] == doctest::Approx(w1 - 0.1 * gb).epsilon(1e-12));
  CHECK(both.audit.omega_updates == 1);
  CHECK(both.audit.real_samples == 2);

  state.eta = 0.0;
  CHECK(update_condensation_model(state, b_n, m_orig).omega.params() == state.omega.params());
}

TEST_CASE("condensed exemplars never reach the condensation model") {
  const auto spec = fcil::testing::toy_convnet();
  auto state = init_condensation_state(spec, 3, 0.01, 1);
  const auto real = random_batch(spec.input, 3, 3, 2);
  const auto fake = random_batch(spec.input, 1, 3, 3, Origin::condensed);
  CHECK_THROWS_AS(update_condensation_model(state, real, fake), std::logic_error);
  CHECK_THROWS_AS(update_condensation_model(state, fake, ImageBatch(spec.input)), std::logic_error);
}

TEST_CASE("relationship loss hand case") {
  const auto omega = identity_features(2, 2);
  const auto m_k = rows({{0.0, 1.0}}, 0);
  const auto b_k = rows({{2.0, 0.0}}, 0);
  const auto rest = rows({{1.0, 0.0}}, 1);
  CHECK(relationship_loss(omega, m_k, b_k, rest) == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(relationship_loss(omega, b_k, b_k, rest) == doctest::Approx(0.0).epsilon(1e-12));
  const auto empty = relationship(omega, m_k, b_k, ImageBatch(m_k.shape), false);
  CHECK(empty.loss == 0.0);
  CHECK(empty.skipped);
}

TEST_CASE("total memory loss") {
  CHECK(total_memory_loss(1.0, 0.5, 2.0, 0.5) == doctest::Approx(2.5));
  CHECK(total_memory_loss(1.0, 0.5, 2.0, 0.0) == doctest::Approx(1.5));
  CHECK(CondenseOptions{}.beta == 0.5);
}

namespace {

struct Fixture {
  ArchSpec spec = fcil::testing::toy_convnet();
  CondensationState state = init_condensation_state(spec, 3, 0.01, 5);
  MemoryStore store = rebalance_quota(MemoryStore(6, spec.input), 3);
  ImageBatch b_n = random_batch(spec.input, 9, 3, 6);

  Fixture() { seed_summary(store, random_batch(spec.input, 6, 3, 7)); }
};

}  // namespace

TEST_CASE("zero exemplar step leaves pixels and still trains omega") {
  Fixture f;
  CondenseOptions opt;
  opt.exemplar_lr = 0.0;
  const auto before = f.store.summ;
  const auto out = condense_step(f.state, f.store, f.b_n, {}, opt);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(out.store.summ[i].pixels == before[i].pixels);
  CHECK_FALSE(out.state.omega.params() == f.state.omega.params());
  CHECK(out.report.l_cond > 0.0);
}

TEST_CASE("only classes present in the batch move") {
  Fixture f;
  const auto b_1 = f.b_n.select_class(1);
  CondenseOptions opt;
  const auto before = f.store.summ;
  condense_exemplars(f.state.omega, f.store, b_1, {}, opt);
  for (std::size_t i = 0; i < before.size(); ++i) {
    if (before[i].label == 1) CHECK_FALSE(f.store.summ[i].pixels == before[i].pixels);
    else CHECK(f.store.summ[i].pixels == before[i].pixels);
  }
}

TEST_CASE("exemplar updates lower the matching loss on a frozen problem") {
  SyntheticSpec ds;
  ds.class_count = 3;
  ds.train_per_class = 20;
  ds.test_per_class = 1;
  const auto data = make_synthetic_dataset(ds);
  ArchSpec spec;
  const auto omega = init_backbone(spec, 3, 11);
  const std::vector<int> cls{0};
  const auto idx = data.train.indices_of_classes(cls);
  const std::vector<std::size_t> bidx(idx.begin(), idx.begin() + 16), midx(idx.begin() + 16, idx.begin() + 18);
  MemoryStore store = rebalance_quota(MemoryStore(6, ds.shape), 3);
  seed_summary(store, data.train.gather(midx));
  const auto b = data.train.gather(bidx);
  CondenseOptions opt;
  opt.update_omega = false;
  double first = 0.0, last = 0.0;
  for (int s = 0; s < 100; ++s) {
    const auto r = condense_exemplars(omega, store, b, {}, opt);
    if (s == 0) first = r.l_cond;
    last = r.l_cond;
  }
  CHECK(last <= 0.5 * first);
}

TEST_CASE("loss trace file") {
  const auto path = fcil::testing::scratch_dir("loss_trace") / "trace.csv";
  write_loss_trace(path, {{1, 0.5, 0.25, 0.0, 0.75}});
  std::ifstream in(path);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  CHECK(header == "step,l_cond,l_rel,l_mkcl,l_total");
  CHECK(line == "1,0.5,0.25,0,0.75");
}
