#include "fcil/model_zoo.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <random>
#include <stdexcept>

#include "fcil/network.hpp"
#include "fcil/rng.hpp"
#include "fcil/wire.hpp"

namespace fcil {

bool NamedTensor::is_bias() const {
  return shape.size() == 1 && name.size() >= 5 && name.compare(name.size() - 5, 5, ".bias") == 0;
}

std::size_t ParamVector::total_dim() const {
  std::size_t n = 0;
  for (const auto& t : layers_) n += t.numel();
  return n;
}

const NamedTensor* ParamVector::find(std::string_view name) const {
  for (const auto& t : layers_)
    if (t.name == name) return &t;
  return nullptr;
}

NamedTensor* ParamVector::find(std::string_view name) {
  for (auto& t : layers_)
    if (t.name == name) return &t;
  return nullptr;
}

bool ParamVector::same_layout(const ParamVector& other) const {
  if (layers_.size() != other.layers_.size()) return false;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    if (layers_[i].name != other.layers_[i].name || layers_[i].shape != other.layers_[i].shape) return false;
  return true;
}

ParamVector ParamVector::zeros_like() const {
  ParamVector out(*this);
  for (auto& t : out.layers_) std::fill(t.values.begin(), t.values.end(), 0.0);
  return out;
}

ParamVector& ParamVector::axpy(double a, const ParamVector& x) {
  if (!same_layout(x)) throw std::invalid_argument("parameter layouts differ");
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    auto& dst = layers_[i].values;
    const auto& src = x.layers_[i].values;
    for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += a * src[j];
  }
  return *this;
}

ParamVector& ParamVector::scale(double a) {
  for (auto& t : layers_)
    for (double& v : t.values) v *= a;
  return *this;
}

double ParamVector::dot(const ParamVector& other) const {
  if (!same_layout(other)) throw std::invalid_argument("parameter layouts differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < layers_.size(); ++i)
    for (std::size_t j = 0; j < layers_[i].values.size(); ++j) acc += layers_[i].values[j] * other.layers_[i].values[j];
  return acc;
}

double ParamVector::squared_norm() const { return dot(*this); }

bool ParamVector::all_finite() const {
  for (const auto& t : layers_)
    for (double v : t.values)
      if (!std::isfinite(v)) return false;
  return true;
}

std::vector<const double*> ParamVector::data_pointers() const {
  std::vector<const double*> out;
  for (const auto& t : layers_) out.push_back(t.values.data());
  return out;
}

std::vector<double*> ParamVector::data_pointers() {
  std::vector<double*> out;
  for (auto& t : layers_) out.push_back(t.values.data());
  return out;
}

// ---------------------------------------------------------------------------

ArchKind parse_arch_kind(std::string_view name) {
  if (name == "convnet") return ArchKind::convnet;
  if (name == "mlp") return ArchKind::mlp;
  throw std::invalid_argument("unknown architecture: " + std::string(name));
}

std::string to_string(ArchKind kind) { return kind == ArchKind::convnet ? "convnet" : "mlp"; }

int ArchSpec::feature_dim() const {
  if (kind == ArchKind::convnet) return width * (input.height >> depth) * (input.width >> depth);
  return hidden.empty() ? static_cast<int>(input.numel()) : hidden.back();
}

void ArchSpec::validate() const {
  if (input.channels <= 0 || input.height <= 0 || input.width <= 0) throw std::invalid_argument("input shape must be positive");
  if (kind == ArchKind::convnet) {
    if (width <= 0 || depth <= 0) throw std::invalid_argument("convnet width and depth must be positive");
    const int div = 1 << depth;
    if (input.height % div != 0 || input.width % div != 0)
      throw std::invalid_argument("convnet input must be divisible by 2^depth");
  } else {
    for (int h : hidden)
      if (h <= 0) throw std::invalid_argument("mlp hidden widths must be positive");
  }
}

namespace net {

Layout make_layout(const ArchSpec& spec, int classes) {
  spec.validate();
  Layout L;
  L.kind = spec.kind;
  L.input = spec.input;
  L.classes = classes;
  L.feature_dim = spec.feature_dim();
  L.bias = spec.bias;
  if (spec.kind == ArchKind::convnet) {
    L.blocks = spec.depth;
    int c = spec.input.channels, h = spec.input.height, w = spec.input.width;
    for (int b = 0; b < spec.depth; ++b) {
      L.in_ch.push_back(c);
      L.out_ch.push_back(spec.width);
      L.in_h.push_back(h);
      L.in_w.push_back(w);
      c = spec.width;
      h /= 2;
      w /= 2;
    }
  } else {
    L.blocks = static_cast<int>(spec.hidden.size());
    int d = static_cast<int>(spec.input.numel());
    for (int hdim : spec.hidden) {
      L.in_dim.push_back(d);
      L.out_dim.push_back(hdim);
      d = hdim;
    }
  }
  return L;
}

}  // namespace net

namespace {

void fill_normal(std::vector<double>& v, double stddev, Rng& rng) {
  std::normal_distribution<double> g(0.0, stddev);
  for (double& x : v) x = g(rng);
}

NamedTensor make_tensor(std::string name, std::vector<std::size_t> shape) {
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  return NamedTensor{std::move(name), std::move(shape), std::vector<double>(n, 0.0)};
}

// Head row r is a function of (seed, r) only.
void init_head_rows(NamedTensor& head, std::size_t first_row, std::size_t features, std::uint64_t seed) {
  const std::size_t rows = head.shape[0];
  for (std::size_t r = first_row; r < rows; ++r) {
    Rng rng(derive_seed(seed, {r}));
    std::normal_distribution<double> g(0.0, 1.0 / std::sqrt(static_cast<double>(features)));
    for (std::size_t i = 0; i < features; ++i) head.values[r * features + i] = g(rng);
  }
}

void check_batch(const Backbone& model, const ImageBatch& batch) {
  if (!(batch.shape == model.spec().input)) throw std::invalid_argument("batch image shape does not match the model");
  if (batch.pixels.size() != batch.size() * batch.shape.numel()) throw std::invalid_argument("batch pixel buffer size mismatch");
}

}  // namespace

Backbone::Backbone(ArchSpec spec, ParamVector params, int head_classes)
    : spec_(std::move(spec)), params_(std::move(params)), head_classes_(head_classes) {
  if (head_classes_ < 1) throw std::invalid_argument("a classifier needs at least one class");
  if (static_cast<int>(params_.tensor_count()) != net::make_layout(spec_, head_classes_).tensor_count())
    throw std::invalid_argument("parameter vector does not match the architecture");
}

std::vector<double> Backbone::logits(const ImageBatch& batch) const {
  check_batch(*this, batch);
  if (batch.empty()) return {};
  const auto L = net::make_layout(spec_, head_classes_);
  const auto ptrs = params_.data_pointers();
  auto tr = net::forward<double>(L, ptrs, batch.pixels, static_cast<int>(batch.size()));
  return std::move(tr.logits);
}

std::vector<double> Backbone::features(const ImageBatch& batch) const {
  check_batch(*this, batch);
  if (batch.empty()) return {};
  const auto L = net::make_layout(spec_, head_classes_);
  const auto ptrs = params_.data_pointers();
  auto tr = net::forward<double>(L, ptrs, batch.pixels, static_cast<int>(batch.size()));
  return std::move(tr.block_in.back());
}

std::vector<int> Backbone::predict(const ImageBatch& batch) const {
  const auto z = logits(batch);
  std::vector<int> out(batch.size());
  const auto K = static_cast<std::size_t>(head_classes_);
  for (std::size_t s = 0; s < batch.size(); ++s) {
    const auto first = z.begin() + static_cast<std::ptrdiff_t>(s * K);
    out[s] = static_cast<int>(std::max_element(first, first + static_cast<std::ptrdiff_t>(K)) - first);
  }
  return out;
}

Backbone init_backbone(const ArchSpec& spec, int num_classes, std::uint64_t seed) {
  if (num_classes < 1) throw std::invalid_argument("num_classes must be at least 1");
  const auto L = net::make_layout(spec, num_classes);
  Rng rng(seed);
  std::vector<NamedTensor> tensors;
  for (int b = 0; b < L.blocks; ++b) {
    const std::string prefix = (spec.kind == ArchKind::convnet ? "conv" : "fc") + std::to_string(b);
    NamedTensor w;
    double fan_in = 0.0;
    if (spec.kind == ArchKind::convnet) {
      w = make_tensor(prefix + ".weight", {static_cast<std::size_t>(L.out_ch[b]), static_cast<std::size_t>(L.in_ch[b]), 3, 3});
      fan_in = 9.0 * L.in_ch[b];
    } else {
      w = make_tensor(prefix + ".weight", {static_cast<std::size_t>(L.out_dim[b]), static_cast<std::size_t>(L.in_dim[b])});
      fan_in = L.in_dim[b];
    }
    fill_normal(w.values, std::sqrt(2.0 / fan_in), rng);
    tensors.push_back(std::move(w));
    if (spec.bias) {
      const int out = spec.kind == ArchKind::convnet ? L.out_ch[b] : L.out_dim[b];
      tensors.push_back(make_tensor(prefix + ".bias", {static_cast<std::size_t>(out)}));
    }
  }
  const auto F = static_cast<std::size_t>(L.feature_dim);
  NamedTensor head = make_tensor("head.weight", {static_cast<std::size_t>(num_classes), F});
  init_head_rows(head, 0, F, derive_seed(seed, Stream::head_growth));
  tensors.push_back(std::move(head));
  if (spec.bias) tensors.push_back(make_tensor("head.bias", {static_cast<std::size_t>(num_classes)}));
  return Backbone(spec, ParamVector(std::move(tensors)), num_classes);
}

std::vector<double> extract_features(const Backbone& model, const ImageBatch& batch) { return model.features(batch); }

GradResult grad(const Backbone& model, const GradRequest& request) {
  GradResult out;
  const auto& params = model.params();
  if (std::holds_alternative<ConstantLoss>(request.loss)) {
    out.loss = std::get<ConstantLoss>(request.loss).value;
    if (request.target == GradTarget::params) out.param_grad = params.zeros_like();
    else out.input_grad.assign(request.batch.pixels.size(), 0.0);
    return out;
  }
  if (std::holds_alternative<HalfParamNormLoss>(request.loss)) {
    out.loss = 0.5 * params.squared_norm();
    if (request.target == GradTarget::params) out.param_grad = params;
    else out.input_grad.assign(request.batch.pixels.size(), 0.0);
    return out;
  }

  const ImageBatch& batch = request.batch;
  check_batch(model, batch);
  if (batch.empty()) throw std::invalid_argument("cross-entropy gradient needs a non-empty batch");
  const auto L = net::make_layout(model.spec(), model.head_classes());
  const auto ptrs = params.data_pointers();
  const int n = static_cast<int>(batch.size());
  auto tr = net::forward<double>(L, ptrs, batch.pixels, n);
  std::vector<double> dlogits;
  out.loss = net::softmax_xent<double>(tr.logits, n, model.head_classes(), batch.labels, &dlogits);
  if (request.target == GradTarget::params) {
    out.param_grad = params.zeros_like();
    auto dptrs = out.param_grad.data_pointers();
    net::backward<double>(L, ptrs, tr, dlogits, {}, dptrs, nullptr);
  } else {
    net::backward<double>(L, ptrs, tr, dlogits, {}, {}, &out.input_grad);
  }
  return out;
}

Backbone expand_head(const Backbone& model, int added_classes, std::uint64_t seed) {
  if (added_classes < 1) throw std::invalid_argument("expand_head needs at least one added class");
  const int old_k = model.head_classes();
  const int new_k = old_k + added_classes;
  ParamVector params = model.params();
  NamedTensor* head = params.find("head.weight");
  const std::size_t F = head->shape[1];
  head->shape[0] = static_cast<std::size_t>(new_k);
  head->values.resize(static_cast<std::size_t>(new_k) * F, 0.0);
  init_head_rows(*head, static_cast<std::size_t>(old_k), F, seed);
  if (NamedTensor* hb = params.find("head.bias")) {
    hb->shape[0] = static_cast<std::size_t>(new_k);
    hb->values.resize(static_cast<std::size_t>(new_k), 0.0);
  }
  return Backbone(model.spec(), std::move(params), new_k);
}

double cross_entropy(const std::vector<double>& logits, std::size_t classes, const std::vector<int>& labels,
                     std::vector<double>* dlogits) {
  return net::softmax_xent<double>(logits, static_cast<int>(labels.size()), static_cast<int>(classes), labels, dlogits);
}

double accuracy(const Backbone& model, const ImageBatch& batch) {
  if (batch.empty()) return 0.0;
  const auto pred = model.predict(batch);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hit += pred[i] == batch.labels[i];
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

void save_checkpoint(const std::filesystem::path& path, const Backbone& model) {
  const auto& s = model.spec();
  nlohmann::json extra = {{"arch", to_string(s.kind)},
                          {"input", {s.input.channels, s.input.height, s.input.width}},
                          {"width", s.width},
                          {"depth", s.depth},
                          {"hidden", s.hidden},
                          {"bias", s.bias},
                          {"head_classes", model.head_classes()}};
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  const std::string bytes = wire::encode_tensors(model.params().layers(), extra);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Backbone load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  auto dec = wire::decode_tensors(bytes);
  const auto& h = dec.header;
  ArchSpec spec;
  spec.kind = parse_arch_kind(h.at("arch").get<std::string>());
  const auto input = h.at("input").get<std::vector<int>>();
  spec.input = ImageShape{input.at(0), input.at(1), input.at(2)};
  spec.width = h.at("width").get<int>();
  spec.depth = h.at("depth").get<int>();
  spec.hidden = h.at("hidden").get<std::vector<int>>();
  spec.bias = h.at("bias").get<bool>();
  return Backbone(spec, ParamVector(std::move(dec.tensors)), h.at("head_classes").get<int>());
}

}  // namespace fcil
