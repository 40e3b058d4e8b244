#include "fcil/disentangle.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include <spdlog/spdlog.h>

#include "fcil/rng.hpp"

namespace fcil {

void FeatureBank::add(int label, FeatureVec v) {
  if (dim == 0) dim = static_cast<int>(v.size());
  if (static_cast<int>(v.size()) != dim) throw std::invalid_argument("feature dimension mismatch in bank");
  for (double x : v)
    if (!std::isfinite(x)) throw std::invalid_argument("non-finite feature in bank");
  features[label].push_back(std::move(v));
}

void FeatureBank::add_rows(std::span<const double> rows, std::span<const int> labels) {
  if (labels.empty()) return;
  const std::size_t d = rows.size() / labels.size();
  if (d * labels.size() != rows.size()) throw std::invalid_argument("feature rows do not match label count");
  for (std::size_t i = 0; i < labels.size(); ++i)
    add(labels[i], FeatureVec(rows.begin() + static_cast<std::ptrdiff_t>(i * d),
                              rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * d)));
}

std::size_t FeatureBank::size() const {
  std::size_t n = 0;
  for (const auto& [k, v] : features) n += v.size();
  return n;
}

int PrototypeSet::cluster_count(int label) const {
  auto it = prototypes.find(label);
  return it == prototypes.end() ? 0 : static_cast<int>(it->second.size());
}

std::vector<FeatureVec> PrototypeSet::positives(int label) const {
  auto it = prototypes.find(label);
  return it == prototypes.end() ? std::vector<FeatureVec>{} : it->second;
}

std::vector<FeatureVec> PrototypeSet::negatives(int label) const {
  std::vector<FeatureVec> out;
  for (const auto& [k, us] : prototypes)
    if (k != label) out.insert(out.end(), us.begin(), us.end());
  return out;
}

std::set<int> SharedVAE::classes() const {
  std::set<int> out;
  for (const auto& [k, e] : class_embedding) out.insert(k);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

NamedTensor tensor(std::string name, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return {std::move(name), std::move(shape), std::vector<double>(n, 0.0)};
}

void he_fill(NamedTensor& t, Rng& rng) {
  std::normal_distribution<double> g(0.0, std::sqrt(2.0 / static_cast<double>(t.shape[1])));
  for (double& v : t.values) v = g(rng);
}

// y[o] = b[o] + sum_i W[o, i] x[i]
void linear(const NamedTensor& w, const NamedTensor& b, const double* x, double* y) {
  const std::size_t out = w.shape[0], in = w.shape[1];
  for (std::size_t o = 0; o < out; ++o) {
    double acc = b.values[o];
    const double* row = w.values.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) acc += row[i] * x[i];
    y[o] = acc;
  }
}

// Accumulates dW += dy x^T, db += dy, dx += W^T dy (dx nullable).
void linear_back(const NamedTensor& w, const double* x, const double* dy, NamedTensor& dw, NamedTensor& db, double* dx) {
  const std::size_t out = w.shape[0], in = w.shape[1];
  for (std::size_t o = 0; o < out; ++o) {
    const double g = dy[o];
    db.values[o] += g;
    double* drow = dw.values.data() + o * in;
    const double* row = w.values.data() + o * in;
    for (std::size_t i = 0; i < in; ++i) {
      drow[i] += g * x[i];
      if (dx) dx[i] += g * row[i];
    }
  }
}

enum Enc { enc_fc_w, enc_fc_b, enc_mu_w, enc_mu_b, enc_lv_w, enc_lv_b };
enum Dec { dec_fc_w, dec_fc_b, dec_out_w, dec_out_b };

std::vector<double> decode_one(const SharedVAE& vae, const double* z, const std::vector<double>& emb,
                               std::vector<double>* hidden_pre = nullptr) {
  const auto Z = static_cast<std::size_t>(vae.latent_dim);
  std::vector<double> in(Z + emb.size());
  std::copy(z, z + Z, in.begin());
  std::copy(emb.begin(), emb.end(), in.begin() + static_cast<std::ptrdiff_t>(Z));
  std::vector<double> pre(static_cast<std::size_t>(vae.hidden_dim));
  linear(vae.decoder[dec_fc_w], vae.decoder[dec_fc_b], in.data(), pre.data());
  std::vector<double> h(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) h[i] = std::max(pre[i], 0.0);
  std::vector<double> out(static_cast<std::size_t>(vae.feature_dim));
  linear(vae.decoder[dec_out_w], vae.decoder[dec_out_b], h.data(), out.data());
  if (hidden_pre) *hidden_pre = std::move(pre);
  return out;
}

}  // namespace

SharedVAE init_shared_vae(int feature_dim, int hidden_dim, int latent_dim, int embed_dim, double beta_vae,
                          std::uint64_t seed) {
  if (feature_dim < 1 || hidden_dim < 1 || latent_dim < 1 || embed_dim < 0)
    throw std::invalid_argument("VAE dimensions must be positive");
  if (beta_vae < 0.0) throw std::invalid_argument("beta_vae must be non-negative");
  SharedVAE vae;
  vae.feature_dim = feature_dim;
  vae.hidden_dim = hidden_dim;
  vae.latent_dim = latent_dim;
  vae.embed_dim = embed_dim;
  vae.beta_vae = beta_vae;
  vae.embed_seed = derive_seed(seed, {0x656d62ULL});
  const auto F = static_cast<std::size_t>(feature_dim), H = static_cast<std::size_t>(hidden_dim),
             Z = static_cast<std::size_t>(latent_dim), E = static_cast<std::size_t>(embed_dim);
  Rng rng(seed);
  std::vector<NamedTensor> enc{tensor("enc.fc.weight", {H, F}), tensor("enc.fc.bias", {H}),
                               tensor("enc.mu.weight", {Z, H}), tensor("enc.mu.bias", {Z}),
                               tensor("enc.logvar.weight", {Z, H}), tensor("enc.logvar.bias", {Z})};
  he_fill(enc[enc_fc_w], rng);
  he_fill(enc[enc_mu_w], rng);
  // Small logvar weights keep the initial posterior close to unit variance.
  he_fill(enc[enc_lv_w], rng);
  for (double& v : enc[enc_lv_w].values) v *= 0.1;
  std::vector<NamedTensor> dec{tensor("dec.fc.weight", {H, Z + E}), tensor("dec.fc.bias", {H}),
                               tensor("dec.out.weight", {F, H}), tensor("dec.out.bias", {F})};
  he_fill(dec[dec_fc_w], rng);
  he_fill(dec[dec_out_w], rng);
  for (double& v : dec[dec_out_w].values) v *= std::sqrt(0.5);
  vae.encoder = ParamVector(std::move(enc));
  vae.decoder = ParamVector(std::move(dec));
  return vae;
}

void register_class(SharedVAE& vae, int label) {
  if (vae.knows(label)) return;
  Rng rng(derive_seed(vae.embed_seed, {static_cast<std::uint64_t>(label)}));
  std::normal_distribution<double> g(0.0, 1.0);
  std::vector<double> e(static_cast<std::size_t>(vae.embed_dim));
  for (double& v : e) v = g(rng);
  vae.class_embedding[label] = std::move(e);
}

VaeGrad vae_gradient(const SharedVAE& vae, std::span<const double> features, std::span<const int> labels,
                     std::span<const double> noise) {
  const std::size_t N = labels.size();
  const auto F = static_cast<std::size_t>(vae.feature_dim), H = static_cast<std::size_t>(vae.hidden_dim),
             Z = static_cast<std::size_t>(vae.latent_dim), E = static_cast<std::size_t>(vae.embed_dim);
  if (N == 0) throw std::invalid_argument("VAE step needs a non-empty batch");
  if (features.size() != N * F) throw std::invalid_argument("VAE feature batch has the wrong dimension");
  if (noise.size() != N * Z) throw std::invalid_argument("VAE noise has the wrong size");

  VaeGrad g;
  g.encoder = vae.encoder.zeros_like();
  g.decoder = vae.decoder.zeros_like();
  const double invN = 1.0 / static_cast<double>(N), invNF = invN / static_cast<double>(F);
  const double beta = vae.beta_vae;
  double rec = 0.0, kl = 0.0;

  std::vector<double> pre1(H), h1(H), mu(Z), lv(Z), z(Z), in2(Z + E), pre2(H), h2(H), xhat(F);
  std::vector<double> dxhat(F), dh2(H), dpre2(H), din2(Z + E), dmu(Z), dlv(Z), dh1(H), dpre1(H);
  for (std::size_t n = 0; n < N; ++n) {
    const double* x = features.data() + n * F;
    auto emb_it = vae.class_embedding.find(labels[n]);
    if (emb_it == vae.class_embedding.end())
      throw std::out_of_range("class " + std::to_string(labels[n]) + " is not registered in the shared VAE");
    const auto& emb = emb_it->second;

    linear(vae.encoder[enc_fc_w], vae.encoder[enc_fc_b], x, pre1.data());
    for (std::size_t i = 0; i < H; ++i) h1[i] = std::max(pre1[i], 0.0);
    linear(vae.encoder[enc_mu_w], vae.encoder[enc_mu_b], h1.data(), mu.data());
    linear(vae.encoder[enc_lv_w], vae.encoder[enc_lv_b], h1.data(), lv.data());
    for (std::size_t j = 0; j < Z; ++j) {
      z[j] = mu[j] + std::exp(0.5 * lv[j]) * noise[n * Z + j];
      kl += -0.5 * (1.0 + lv[j] - mu[j] * mu[j] - std::exp(lv[j])) * invN;
    }
    std::copy(z.begin(), z.end(), in2.begin());
    std::copy(emb.begin(), emb.end(), in2.begin() + static_cast<std::ptrdiff_t>(Z));
    linear(vae.decoder[dec_fc_w], vae.decoder[dec_fc_b], in2.data(), pre2.data());
    for (std::size_t i = 0; i < H; ++i) h2[i] = std::max(pre2[i], 0.0);
    linear(vae.decoder[dec_out_w], vae.decoder[dec_out_b], h2.data(), xhat.data());
    for (std::size_t i = 0; i < F; ++i) {
      const double r = xhat[i] - x[i];
      rec += r * r * invNF;
      dxhat[i] = 2.0 * r * invNF;
    }

    std::fill(dh2.begin(), dh2.end(), 0.0);
    linear_back(vae.decoder[dec_out_w], h2.data(), dxhat.data(), g.decoder[dec_out_w], g.decoder[dec_out_b], dh2.data());
    for (std::size_t i = 0; i < H; ++i) dpre2[i] = pre2[i] > 0.0 ? dh2[i] : 0.0;
    std::fill(din2.begin(), din2.end(), 0.0);
    linear_back(vae.decoder[dec_fc_w], in2.data(), dpre2.data(), g.decoder[dec_fc_w], g.decoder[dec_fc_b], din2.data());
    auto& demb = g.embedding[labels[n]];
    demb.resize(E, 0.0);
    for (std::size_t j = 0; j < E; ++j) demb[j] += din2[Z + j];

    for (std::size_t j = 0; j < Z; ++j) {
      const double sigma = std::exp(0.5 * lv[j]);
      dmu[j] = din2[j] + beta * mu[j] * invN;
      dlv[j] = din2[j] * noise[n * Z + j] * 0.5 * sigma - beta * 0.5 * (1.0 - std::exp(lv[j])) * invN;
    }
    std::fill(dh1.begin(), dh1.end(), 0.0);
    linear_back(vae.encoder[enc_mu_w], h1.data(), dmu.data(), g.encoder[enc_mu_w], g.encoder[enc_mu_b], dh1.data());
    linear_back(vae.encoder[enc_lv_w], h1.data(), dlv.data(), g.encoder[enc_lv_w], g.encoder[enc_lv_b], dh1.data());
    for (std::size_t i = 0; i < H; ++i) dpre1[i] = pre1[i] > 0.0 ? dh1[i] : 0.0;
    linear_back(vae.encoder[enc_fc_w], x, dpre1.data(), g.encoder[enc_fc_w], g.encoder[enc_fc_b], nullptr);
  }
  g.report.reconstruction = rec;
  g.report.kl = kl;
  g.report.total = rec + beta * kl;
  return g;
}

VaeStep vae_train_step(SharedVAE vae, std::span<const double> features, std::span<const int> labels, double lr,
                       std::uint64_t seed) {
  if (lr < 0.0) throw std::invalid_argument("VAE learning rate must be non-negative");
  for (int k : labels) register_class(vae, k);
  Rng rng(seed);
  std::normal_distribution<double> g01(0.0, 1.0);
  std::vector<double> noise(labels.size() * static_cast<std::size_t>(vae.latent_dim));
  for (double& e : noise) e = g01(rng);
  VaeGrad g = vae_gradient(vae, features, labels, noise);
  if (lr > 0.0) {
    vae.encoder.axpy(-lr, g.encoder);
    vae.decoder.axpy(-lr, g.decoder);
    for (const auto& [k, d] : g.embedding) {
      auto& e = vae.class_embedding[k];
      for (std::size_t j = 0; j < e.size(); ++j) e[j] -= lr * d[j];
    }
  }
  return {std::move(vae), g.report};
}

std::vector<FeatureVec> generate_features(const SharedVAE& vae, int label, int n, std::uint64_t seed) {
  if (n < 0) throw std::invalid_argument("generate_features needs n >= 0");
  auto it = vae.class_embedding.find(label);
  if (it == vae.class_embedding.end())
    throw std::out_of_range("class " + std::to_string(label) + " not represented in shared model");
  std::vector<FeatureVec> out;
  out.reserve(static_cast<std::size_t>(n));
  Rng rng(seed);
  std::normal_distribution<double> g01(0.0, 1.0);
  std::vector<double> z(static_cast<std::size_t>(vae.latent_dim));
  for (int i = 0; i < n; ++i) {
    for (double& v : z) v = g01(rng);
    out.push_back(decode_one(vae, z.data(), it->second));
  }
  return out;
}

// ---------------------------------------------------------------------------

double cosine(std::span<const double> a, std::span<const double> b) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::sqrt(na) * std::sqrt(nb);
  return denom < 1e-12 ? 0.0 : dot / denom;
}

void add_cosine_grad(std::span<const double> a, std::span<const double> b, double scale, std::span<double> out) {
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double la = std::sqrt(na), lb = std::sqrt(nb);
  if (la * lb < 1e-12) return;
  const double c = dot / (la * lb);
  for (std::size_t i = 0; i < a.size(); ++i) out[i] += scale * (b[i] / (la * lb) - c * a[i] / na);
}

namespace {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(std::size_t n) : parent(n) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  void unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

std::vector<int> finch_cluster(const std::vector<FeatureVec>& points, FinchMetric metric) {
  const std::size_t n = points.size();
  if (n == 0) throw std::invalid_argument("finch_cluster needs at least one point");
  UnionFind uf(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i;
    double best_score = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      double score;
      if (metric == FinchMetric::cosine) {
        score = cosine(points[i], points[j]);
      } else {
        double d = 0.0;
        for (std::size_t k = 0; k < points[i].size(); ++k) d += (points[i][k] - points[j][k]) * (points[i][k] - points[j][k]);
        score = -d;
      }
      if (score > best_score) {
        best_score = score;
        best = j;
      }
    }
    uf.unite(static_cast<int>(i), static_cast<int>(best));
  }
  std::vector<int> out(n);
  std::map<int, int> ids;
  for (std::size_t i = 0; i < n; ++i) {
    const int root = uf.find(static_cast<int>(i));
    auto [it, fresh] = ids.try_emplace(root, static_cast<int>(ids.size()));
    out[i] = it->second;
  }
  return out;
}

PrototypeSet build_prototypes(const FeatureBank& bank, FinchMetric metric) {
  PrototypeSet out;
  out.dim = bank.dim;
  for (const auto& [label, feats] : bank.features) {
    if (feats.empty()) throw std::invalid_argument("class " + std::to_string(label) + " has no features");
    const auto assign = finch_cluster(feats, metric);
    const int clusters = *std::max_element(assign.begin(), assign.end()) + 1;
    std::vector<FeatureVec> centroids(static_cast<std::size_t>(clusters), FeatureVec(feats[0].size(), 0.0));
    std::vector<int> counts(static_cast<std::size_t>(clusters), 0);
    for (std::size_t i = 0; i < feats.size(); ++i) {
      auto& c = centroids[static_cast<std::size_t>(assign[i])];
      for (std::size_t d = 0; d < c.size(); ++d) c[d] += feats[i][d];
      ++counts[static_cast<std::size_t>(assign[i])];
    }
    for (std::size_t j = 0; j < centroids.size(); ++j)
      for (double& v : centroids[j]) v /= counts[j];
    out.prototypes[label] = std::move(centroids);
  }
  return out;
}

double mkcl_loss(std::span<const double> z, const std::vector<FeatureVec>& positives,
                 const std::vector<FeatureVec>& negatives, double tau, std::vector<double>* dz) {
  if (tau <= 0.0) throw std::invalid_argument("tau must be positive");
  if (positives.empty()) throw std::invalid_argument("MKCL needs at least one positive prototype");
  if (dz) dz->assign(z.size(), 0.0);
  if (negatives.empty()) {
    spdlog::warn("MKCL: no negative prototypes, loss is 0");
    return 0.0;
  }
  const std::size_t np = positives.size(), nn = negatives.size();
  std::vector<double> s(np + nn);
  for (std::size_t i = 0; i < np; ++i) s[i] = cosine(z, positives[i]) / tau;
  for (std::size_t i = 0; i < nn; ++i) s[np + i] = cosine(z, negatives[i]) / tau;
  auto lse = [](auto first, auto last) {
    const double mx = *std::max_element(first, last);
    double acc = 0.0;
    for (auto it = first; it != last; ++it) acc += std::exp(*it - mx);
    return mx + std::log(acc);
  };
  const double lse_all = lse(s.begin(), s.end());
  const double lse_pos = lse(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(np));
  if (dz) {
    for (std::size_t i = 0; i < np + nn; ++i) {
      double w = std::exp(s[i] - lse_all);
      if (i < np) w -= std::exp(s[i] - lse_pos);
      const auto& u = i < np ? positives[i] : negatives[i - np];
      add_cosine_grad(z, u, w / tau, *dz);
    }
  }
  return lse_all - lse_pos;
}

}  // namespace fcil
