#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "fcil/rng.hpp"
#include "fcil/task_stream.hpp"
#include "json.hpp"

namespace fcil {

namespace {

struct Blob {
  double cy, cx, radius;
  std::vector<double> color;
};

void render(const std::vector<Blob>& blobs, const ImageShape& shape, double jitter, double noise, Rng& rng,
            std::vector<double>& out) {
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> amp(0.7, 1.3);
  out.assign(shape.numel(), 0.0);
  const std::size_t plane = static_cast<std::size_t>(shape.height) * static_cast<std::size_t>(shape.width);
  for (const Blob& b : blobs) {
    const double cy = b.cy + jitter * gauss(rng);
    const double cx = b.cx + jitter * gauss(rng);
    const double a = amp(rng);
    const double inv = 1.0 / (2.0 * b.radius * b.radius);
    for (int y = 0; y < shape.height; ++y)
      for (int x = 0; x < shape.width; ++x) {
        const double w = a * std::exp(-((y - cy) * (y - cy) + (x - cx) * (x - cx)) * inv);
        for (int c = 0; c < shape.channels; ++c)
          out[static_cast<std::size_t>(c) * plane + static_cast<std::size_t>(y * shape.width + x)] +=
              w * b.color[static_cast<std::size_t>(c)];
      }
  }
  for (double& v : out) v = std::clamp(v + noise * gauss(rng), 0.0, 1.0);
}

}  // namespace

DatasetSplit make_synthetic_dataset(const SyntheticSpec& spec) {
  if (spec.class_count <= 0 || spec.train_per_class <= 0 || spec.test_per_class < 0 || spec.blobs_per_class <= 0)
    throw std::invalid_argument("synthetic dataset sizes must be positive");
  Rng rng(derive_seed(spec.seed, Stream::dataset));
  std::uniform_real_distribution<double> uy(2.0, spec.shape.height - 2.0);
  std::uniform_real_distribution<double> ux(2.0, spec.shape.width - 2.0);
  std::uniform_real_distribution<double> ur(1.5, 3.5);
  std::uniform_real_distribution<double> uc(0.0, 1.0);

  DatasetSplit split;
  for (Dataset* d : {&split.train, &split.test}) {
    d->name = "synthetic-blobs";
    d->class_count = spec.class_count;
    d->shape = spec.shape;
  }
  std::vector<double> img;
  for (int k = 0; k < spec.class_count; ++k) {
    std::vector<Blob> blobs;
    for (int b = 0; b < spec.blobs_per_class; ++b) {
      Blob blob{uy(rng), ux(rng), ur(rng), {}};
      for (int c = 0; c < spec.shape.channels; ++c) blob.color.push_back(uc(rng));
      blobs.push_back(std::move(blob));
    }
    for (int i = 0; i < spec.train_per_class; ++i) {
      render(blobs, spec.shape, spec.jitter, spec.noise, rng, img);
      split.train.push_back(img, k);
    }
    for (int i = 0; i < spec.test_per_class; ++i) {
      render(blobs, spec.shape, spec.jitter, spec.noise, rng, img);
      split.test.push_back(img, k);
    }
  }
  split.train.validate();
  return split;
}

DatasetSplit load_raw_tensor_dir(const std::filesystem::path& dir, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must lie in [0, 1)");
  std::ifstream meta_in(dir / "meta.json");
  if (!meta_in) throw std::runtime_error("missing meta.json in " + dir.string());
  const auto meta = nlohmann::json::parse(meta_in);
  if (meta.value("dtype", std::string("u8")) != "u8") throw std::runtime_error("only dtype u8 is supported");

  ImageShape shape{meta.at("channels").get<int>(), meta.at("height").get<int>(), meta.at("width").get<int>()};
  const int class_count = meta.at("class_count").get<int>();
  if (shape.channels <= 0 || shape.height <= 0 || shape.width <= 0 || class_count <= 0)
    throw std::runtime_error("meta.json dimensions must be positive");

  DatasetSplit split;
  for (Dataset* d : {&split.train, &split.test}) {
    d->name = dir.filename().string();
    d->class_count = class_count;
    d->shape = shape;
  }
  const std::size_t n_px = shape.numel();
  Rng rng(seed);
  std::vector<double> chw(n_px);
  for (int k = 0; k < class_count; ++k) {
    const auto path = dir / ("class_" + std::to_string(k) + ".bin");
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("missing " + path.string());
    std::vector<unsigned char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (raw.empty() || raw.size() % n_px != 0)
      throw std::runtime_error(path.string() + " is not a whole number of images");
    const std::size_t count = raw.size() / n_px;
    std::vector<std::size_t> order(count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::size_t n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(count)));
    if (n_test >= count) n_test = count - 1;
    for (std::size_t j = 0; j < count; ++j) {
      const unsigned char* src = raw.data() + order[j] * n_px;
      // H x W x C row-major -> C x H x W
      for (int y = 0; y < shape.height; ++y)
        for (int x = 0; x < shape.width; ++x)
          for (int c = 0; c < shape.channels; ++c)
            chw[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x] =
                src[(static_cast<std::size_t>(y) * shape.width + x) * shape.channels + c] / 255.0;
      (j < n_test ? split.test : split.train).push_back(chw, k);
    }
  }
  split.train.validate();
  return split;
}

void write_raw_tensor_dir(const Dataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const ImageShape& s = data.shape;
  nlohmann::json meta = {{"class_count", data.class_count}, {"height", s.height}, {"width", s.width},
                         {"channels", s.channels}, {"dtype", "u8"}};
  std::ofstream(dir / "meta.json") << meta.dump(2) << '\n';
  for (int k = 0; k < data.class_count; ++k) {
    std::ofstream out(dir / ("class_" + std::to_string(k) + ".bin"), std::ios::binary);
    for (std::size_t i = 0; i < data.size(); ++i) {
      if (data.labels[i] != k) continue;
      auto img = data.image(i);
      for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
          for (int c = 0; c < s.channels; ++c) {
            const double v = img[(static_cast<std::size_t>(c) * s.height + y) * s.width + x];
            out.put(static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0))));
          }
    }
  }
}

}  // namespace fcil
