#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

namespace fcil {

struct ImageShape {
  int channels = 3;
  int height = 16;
  int width = 16;

  std::size_t numel() const {
    return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
           static_cast<std::size_t>(width);
  }
  bool operator==(const ImageShape&) const = default;
};

// Where a pixel tensor came from. Condensed exemplars must never reach the
// condensation-model update, so every sample carries its origin.
enum class Origin : std::uint8_t { real, condensed };

// A labeled batch of C x H x W images stored contiguously (N x C x H x W).
struct ImageBatch {
  ImageShape shape;
  std::vector<double> pixels;
  std::vector<int> labels;
  std::vector<Origin> origins;

  ImageBatch() = default;
  explicit ImageBatch(ImageShape s) : shape(s) {}

  std::size_t size() const { return labels.size(); }
  bool empty() const { return labels.empty(); }

  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * shape.numel(), shape.numel()};
  }
  std::span<double> image(std::size_t i) {
    return {pixels.data() + i * shape.numel(), shape.numel()};
  }

  void push_back(std::span<const double> px, int label, Origin origin) {
    if (px.size() != shape.numel()) throw std::invalid_argument("image size does not match batch shape");
    pixels.insert(pixels.end(), px.begin(), px.end());
    labels.push_back(label);
    origins.push_back(origin);
  }

  void append(const ImageBatch& other) {
    if (other.empty()) return;
    if (!(other.shape == shape)) throw std::invalid_argument("cannot append batches of different shapes");
    pixels.insert(pixels.end(), other.pixels.begin(), other.pixels.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
    origins.insert(origins.end(), other.origins.begin(), other.origins.end());
  }

  // Subset with only the given class.
  ImageBatch select_class(int label) const {
    ImageBatch out(shape);
    for (std::size_t i = 0; i < size(); ++i)
      if (labels[i] == label) out.push_back(image(i), labels[i], origins[i]);
    return out;
  }
};

}  // namespace fcil
