#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "fcil/image_batch.hpp"

namespace fcil {

struct NamedTensor {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> values;

  std::size_t numel() const { return values.size(); }
  bool is_bias() const;  // rank-1 tensor named "*.bias"
  bool operator==(const NamedTensor&) const = default;
};

// Ordered named tensors. Two vectors of the same architecture share names and
// shapes and support elementwise arithmetic.
class ParamVector {
 public:
  ParamVector() = default;
  explicit ParamVector(std::vector<NamedTensor> layers) : layers_(std::move(layers)) {}

  std::size_t tensor_count() const { return layers_.size(); }
  std::size_t total_dim() const;
  NamedTensor& operator[](std::size_t i) { return layers_[i]; }
  const NamedTensor& operator[](std::size_t i) const { return layers_[i]; }
  std::vector<NamedTensor>& layers() { return layers_; }
  const std::vector<NamedTensor>& layers() const { return layers_; }
  const NamedTensor* find(std::string_view name) const;
  NamedTensor* find(std::string_view name);

  bool same_layout(const ParamVector& other) const;
  ParamVector zeros_like() const;
  ParamVector& axpy(double a, const ParamVector& x);  // this += a * x
  ParamVector& scale(double a);
  double dot(const ParamVector& other) const;
  double squared_norm() const;
  bool all_finite() const;

  std::vector<const double*> data_pointers() const;
  std::vector<double*> data_pointers();

  bool operator==(const ParamVector&) const = default;

 private:
  std::vector<NamedTensor> layers_;
};

enum class ArchKind { convnet, mlp };

ArchKind parse_arch_kind(std::string_view name);  // throws std::invalid_argument on unknown names
std::string to_string(ArchKind kind);

// convnet: depth x [conv3x3(pad 1) -> ReLU -> avgpool 2x2], flatten, linear head.
// Feature dim = width * (H >> depth) * (W >> depth).
// mlp: flatten, hidden x [linear -> ReLU], linear head. With no hidden layers
// the features are the flattened input.
struct ArchSpec {
  ArchKind kind = ArchKind::convnet;
  ImageShape input{3, 16, 16};
  int width = 32;
  int depth = 3;
  std::vector<int> hidden;
  bool bias = true;

  int feature_dim() const;
  void validate() const;
  bool operator==(const ArchSpec&) const = default;
};

class Backbone {
 public:
  Backbone() = default;
  Backbone(ArchSpec spec, ParamVector params, int head_classes);

  const ArchSpec& spec() const { return spec_; }
  const ParamVector& params() const { return params_; }
  ParamVector& params() { return params_; }
  int head_classes() const { return head_classes_; }
  int feature_dim() const { return spec_.feature_dim(); }

  std::vector<double> logits(const ImageBatch& batch) const;    // N x head_classes
  std::vector<double> features(const ImageBatch& batch) const;  // N x feature_dim
  std::vector<int> predict(const ImageBatch& batch) const;

 private:
  ArchSpec spec_;
  ParamVector params_;
  int head_classes_ = 0;
};

// He-normal conv/linear weights, zero biases; head rows N(0, 1/F).
Backbone init_backbone(const ArchSpec& spec, int num_classes, std::uint64_t seed);

std::vector<double> extract_features(const Backbone& model, const ImageBatch& batch);

// ---------------------------------------------------------------------------

enum class GradTarget { params, inputs };

struct CrossEntropyLoss {};               // mean softmax cross-entropy on batch labels
struct HalfParamNormLoss {};              // 0.5 * ||params||^2
struct ConstantLoss { double value = 0.0; };
using LossSpec = std::variant<CrossEntropyLoss, HalfParamNormLoss, ConstantLoss>;

struct GradRequest {
  GradTarget target = GradTarget::params;
  LossSpec loss = CrossEntropyLoss{};
  ImageBatch batch;
};

struct GradResult {
  double loss = 0.0;
  ParamVector param_grad;          // filled for GradTarget::params
  std::vector<double> input_grad;  // filled for GradTarget::inputs, N x C x H x W
};

GradResult grad(const Backbone& model, const GradRequest& request);

// Appends `added_classes` head rows drawn from Rng(seed); existing rows are
// copied bit-exactly. Row r of the grown head depends only on (seed, r), so
// growing 10->15->20 and 10->20 agree on the shared rows when seeds match.
Backbone expand_head(const Backbone& model, int added_classes, std::uint64_t seed);

// Mean softmax cross-entropy and arg-max accuracy helpers on raw logits.
double cross_entropy(const std::vector<double>& logits, std::size_t classes, const std::vector<int>& labels,
                     std::vector<double>* dlogits = nullptr);
double accuracy(const Backbone& model, const ImageBatch& batch);

// Parameter checkpoint: see wire.hpp for the byte layout.
void save_checkpoint(const std::filesystem::path& path, const Backbone& model);
Backbone load_checkpoint(const std::filesystem::path& path);

}  // namespace fcil
