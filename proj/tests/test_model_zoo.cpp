#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "fcil/model_zoo.hpp"
#include "fcil/rng.hpp"
#include "fcil/wire.hpp"
#include "support.hpp"

using namespace fcil;
using fcil::testing::random_batch;

namespace {

double ce_at(const Backbone& m, const ImageBatch& b) {
  GradRequest r;
  r.batch = b;
  return grad(m, r).loss;
}

}  // namespace

TEST_CASE("initialization is deterministic") {
  ArchSpec spec;
  const auto a = init_backbone(spec, 10, 5);
  const auto b = init_backbone(spec, 10, 5);
  CHECK(a.params() == b.params());
  CHECK_FALSE(a.params() == init_backbone(spec, 10, 6).params());
}

TEST_CASE("logit and feature shapes") {
  ArchSpec spec;  // 3 conv blocks, width 32, 16x16x3
  const auto m = init_backbone(spec, 10, 1);
  const auto batch = random_batch(spec.input, 4, 10, 2);
  CHECK(m.logits(batch).size() == 4 * 10);
  // three 2x2 pools take 16x16 to 2x2, so F = 32 * 2 * 2
  const int F = 32 * (16 / 2 / 2 / 2) * (16 / 2 / 2 / 2);
  CHECK(m.feature_dim() == F);
  CHECK(m.features(batch).size() == static_cast<std::size_t>(4 * F));
}

TEST_CASE("duplicated samples give identical feature rows") {
  const auto spec = fcil::testing::toy_convnet();
  const auto m = init_backbone(spec, 3, 1);
  auto one = random_batch(spec.input, 1, 1, 3);
  ImageBatch two = one;
  two.append(one);
  const auto f = m.features(two);
  const auto F = static_cast<std::size_t>(m.feature_dim());
  for (std::size_t i = 0; i < F; ++i) CHECK(f[i] == f[F + i]);
  CHECK(m.features(one) == m.features(one));
}

TEST_CASE("zero network maps a zero image to zero features") {
  const auto spec = fcil::testing::toy_convnet();
  auto m = init_backbone(spec, 3, 1);
  m.params().scale(0.0);
  ImageBatch b(spec.input);
  b.push_back(std::vector<double>(spec.input.numel(), 0.0), 0, Origin::real);
  for (double v : m.features(b)) CHECK(v == 0.0);
}

TEST_CASE("linear model logits match a direct evaluation") {
  ArchSpec spec;
  spec.kind = ArchKind::mlp;
  spec.input = {1, 2, 3};
  const auto m = init_backbone(spec, 4, 8);
  const auto b = random_batch(spec.input, 3, 4, 9);
  const auto z = m.logits(b);
  const auto& W = m.params().find("head.weight")->values;
  const auto& bias = m.params().find("head.bias")->values;
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t k = 0; k < 4; ++k) {
      double acc = bias[k];
      for (std::size_t i = 0; i < 6; ++i) acc += W[k * 6 + i] * b.image(s)[i];
      CHECK(z[s * 4 + k] == doctest::Approx(acc).epsilon(1e-12));
    }
}

TEST_CASE("half squared norm gradient is the parameters") {
  const auto m = init_backbone(fcil::testing::toy_convnet(), 3, 4);
  GradRequest r;
  r.loss = HalfParamNormLoss{};
  const auto g = grad(m, r);
  CHECK(g.param_grad == m.params());
  CHECK(g.loss == doctest::Approx(0.5 * m.params().squared_norm()));
}

TEST_CASE("constant loss has zero gradient") {
  const auto spec = fcil::testing::toy_convnet();
  const auto m = init_backbone(spec, 3, 4);
  GradRequest r;
  r.loss = ConstantLoss{2.5};
  r.batch = random_batch(spec.input, 2, 3, 1);
  const auto g = grad(m, r);
  CHECK(g.loss == 2.5);
  CHECK(g.param_grad.squared_norm() == 0.0);
  r.target = GradTarget::inputs;
  for (double v : grad(m, r).input_grad) CHECK(v == 0.0);
}

TEST_CASE("cross-entropy gradients match central differences") {
  const auto spec = fcil::testing::toy_convnet(8);
  const auto model = fcil::testing::with_random_biases(init_backbone(spec, 3, 12), 15);
  const auto batch = random_batch(spec.input, 4, 3, 13);
  GradRequest req;
  req.batch = batch;
  const auto analytic = grad(model, req).param_grad;
  req.target = GradTarget::inputs;
  const auto analytic_in = grad(model, req).input_grad;

  const double h = 1e-4;
  std::mt19937_64 rng(14);
  double worst = 0.0;
  for (std::size_t t = 0; t < model.params().tensor_count(); ++t) {
    const std::size_t n = model.params()[t].numel();
    for (int k = 0; k < 6; ++k) {
      const std::size_t i = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      Backbone plus = model, minus = model;
      plus.params()[t].values[i] += h;
      minus.params()[t].values[i] -= h;
      const double fd = (ce_at(plus, batch) - ce_at(minus, batch)) / (2 * h);
      const double a = analytic[t].values[i];
      worst = std::max(worst, std::abs(a - fd) / std::max(1e-4, std::max(std::abs(a), std::abs(fd))));
    }
  }
  for (int k = 0; k < 20; ++k) {
    const std::size_t i = std::uniform_int_distribution<std::size_t>(0, batch.pixels.size() - 1)(rng);
    ImageBatch plus = batch, minus = batch;
    plus.pixels[i] += h;
    minus.pixels[i] -= h;
    const double fd = (ce_at(model, plus) - ce_at(model, minus)) / (2 * h);
    const double a = analytic_in[i];
    worst = std::max(worst, std::abs(a - fd) / std::max(1e-4, std::max(std::abs(a), std::abs(fd))));
  }
  CHECK(worst <= 1e-3);
}

TEST_CASE("head expansion") {
  ArchSpec spec = fcil::testing::toy_convnet();
  const auto m = init_backbone(spec, 10, 3);
  CHECK_THROWS_AS(expand_head(m, 0, 1), std::invalid_argument);
  const auto grown = expand_head(m, 5, 77);
  CHECK(grown.head_classes() == 15);
  const auto& before = m.params().find("head.weight")->values;
  const auto& after = grown.params().find("head.weight")->values;
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(after[i] == before[i]);

  const auto batch = random_batch(spec.input, 3, 10, 4);
  const auto z0 = m.logits(batch), z1 = grown.logits(batch);
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t k = 0; k < 10; ++k) CHECK(z1[s * 15 + k] == z0[s * 10 + k]);

  const auto stepwise = expand_head(expand_head(m, 5, 77), 5, 77);
  const auto direct = expand_head(m, 10, 77);
  CHECK(stepwise.params() == direct.params());

  // documented construction: row r ~ N(0, 1/F) from Rng(derive_seed(seed, {r}))
  const auto F = static_cast<std::size_t>(m.feature_dim());
  const auto& rows = direct.params().find("head.weight")->values;
  for (std::size_t r = 10; r < 20; ++r) {
    Rng rng(derive_seed(77, {r}));
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(F)));
    for (std::size_t i = 0; i < F; ++i) CHECK(rows[r * F + i] == g(rng));
  }
}

TEST_CASE("checkpoint round trip at wire precision") {
  const auto spec = fcil::testing::toy_convnet();
  const auto m = init_backbone(spec, 3, 21);
  const auto path = fcil::testing::scratch_dir("checkpoint") / "model.bin";
  save_checkpoint(path, m);
  const auto back = load_checkpoint(path);
  REQUIRE(back.params().same_layout(m.params()));
  CHECK(back.spec() == m.spec());
  for (std::size_t t = 0; t < m.params().tensor_count(); ++t)
    CHECK(back.params()[t].values == wire::to_wire_precision(m.params()[t].values));
}

TEST_CASE("wire format rejects truncated input") {
  const std::vector<NamedTensor> ts{{"a", {2}, {1.0, 2.0}}};
  const auto bytes = wire::encode_tensors(ts, {{"round", 3}});
  const auto dec = wire::decode_tensors(bytes);
  CHECK(dec.header.at("round") == 3);
  CHECK(dec.tensors.front().values == ts.front().values);
  CHECK_THROWS(wire::decode_tensors(std::string_view(bytes).substr(0, bytes.size() - 2)));
  CHECK(wire::unframe(wire::frame("xyz")) == "xyz");
}

TEST_CASE("architecture validation") {
  ArchSpec bad = fcil::testing::toy_convnet();
  bad.depth = 4;  // 8x8 cannot be pooled four times
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
  CHECK_THROWS_AS(parse_arch_kind("resnet"), std::invalid_argument);
}
