#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "fcil/model_zoo.hpp"

namespace fcil {

using FeatureVec = std::vector<double>;

struct FeatureBank {
  int dim = 0;
  std::map<int, std::vector<FeatureVec>> features;

  void add(int label, FeatureVec v);
  void add_rows(std::span<const double> rows, std::span<const int> labels);  // rows: N x dim
  std::size_t size() const;
};

struct PrototypeSet {
  int dim = 0;
  std::map<int, std::vector<FeatureVec>> prototypes;  // class -> centroids u_{k,1..V_k}

  int cluster_count(int label) const;
  bool has(int label) const { return prototypes.contains(label); }
  std::vector<FeatureVec> positives(int label) const;
  std::vector<FeatureVec> negatives(int label) const;  // every other class's prototypes
};

// Conditional beta-VAE over feature vectors.
//   encoder: x -> relu(W1 x + b1) -> (mu, logvar)
//   decoder: [z, e_class] -> relu(W2 . + b2) -> W3 . + b3
struct SharedVAE {
  int feature_dim = 0;
  int hidden_dim = 64;
  int latent_dim = 8;
  int embed_dim = 8;
  double beta_vae = 1.0;
  std::uint64_t embed_seed = 0;
  ParamVector encoder;
  ParamVector decoder;
  std::map<int, std::vector<double>> class_embedding;

  bool knows(int label) const { return class_embedding.contains(label); }
  std::set<int> classes() const;
};

SharedVAE init_shared_vae(int feature_dim, int hidden_dim, int latent_dim, int embed_dim, double beta_vae,
                          std::uint64_t seed);

// Embedding of class k is drawn from Rng(derive(embed_seed, k)), so every
// party that registers k obtains the same starting vector.
void register_class(SharedVAE& vae, int label);

struct ElboReport {
  double reconstruction = 0.0;  // mean squared error per feature
  double kl = 0.0;              // mean KL(q(z|x) || N(0, I)) per sample
  double total = 0.0;           // reconstruction + beta_vae * kl
};

struct VaeStep {
  SharedVAE vae;
  ElboReport report;
};

// One SGD step on reconstruction + beta_vae * KL. Unknown labels are
// registered first. `features` is N x feature_dim.
VaeStep vae_train_step(SharedVAE vae, std::span<const double> features, std::span<const int> labels, double lr,
                       std::uint64_t seed);

// Loss and gradients for a fixed noise draw; exposed for gradient checks.
struct VaeGrad {
  ElboReport report;
  ParamVector encoder;
  ParamVector decoder;
  std::map<int, std::vector<double>> embedding;
};
VaeGrad vae_gradient(const SharedVAE& vae, std::span<const double> features, std::span<const int> labels,
                     std::span<const double> noise);

// Decodes n draws z ~ N(0, I) with the class embedding. Throws
// std::out_of_range if the class is not represented in the shared model.
std::vector<FeatureVec> generate_features(const SharedVAE& vae, int label, int n, std::uint64_t seed);

enum class FinchMetric { cosine, euclidean };

// One FINCH pass: link every point to its first neighbour (ties go to the
// lowest index) and return connected-component ids, numbered in order of
// first appearance.
std::vector<int> finch_cluster(const std::vector<FeatureVec>& points, FinchMetric metric = FinchMetric::cosine);

PrototypeSet build_prototypes(const FeatureBank& bank, FinchMetric metric = FinchMetric::cosine);

// -log( sum_P exp(cos/tau) / sum_{P u N} exp(cos/tau) ). Returns 0 when N is
// empty. dz (optional) receives the gradient with respect to z.
double mkcl_loss(std::span<const double> z, const std::vector<FeatureVec>& positives,
                 const std::vector<FeatureVec>& negatives, double tau, std::vector<double>* dz = nullptr);

// Cosine similarity with a 1e-12 floor on the norm product; the gradient
// helper adds d cos(a, b) / d a scaled by `scale` into `out`.
double cosine(std::span<const double> a, std::span<const double> b);
void add_cosine_grad(std::span<const double> a, std::span<const double> b, double scale, std::span<double> out);

}  // namespace fcil
