#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "fcil/image_batch.hpp"

namespace fcil {

// In-memory labeled image collection. Images are C x H x W, values in [0, 1].
struct Dataset {
  std::string name;
  int class_count = 0;
  ImageShape shape;
  std::vector<double> pixels;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::span<const double> image(std::size_t i) const {
    return {pixels.data() + i * shape.numel(), shape.numel()};
  }
  void push_back(std::span<const double> px, int label);

  // Checks label range, tensor sizes and that every class has a sample.
  void validate() const;

  // Gathers the given sample indices into a batch tagged as real images.
  ImageBatch gather(std::span<const std::size_t> indices) const;
  std::vector<std::size_t> indices_of_classes(std::span<const int> classes) const;
};

struct DatasetSplit {
  Dataset train;
  Dataset test;
};

struct SyntheticSpec {
  int class_count = 10;
  int train_per_class = 60;
  int test_per_class = 30;
  ImageShape shape{3, 16, 16};
  int blobs_per_class = 3;
  double jitter = 1.0;  // pixels of blob-center jitter per sample
  double noise = 0.25;  // std of additive pixel noise
  std::uint64_t seed = 0;
};

// Deterministic Gaussian-blob images: each class owns a few colored blobs,
// samples jitter the blob centers and add pixel noise.
DatasetSplit make_synthetic_dataset(const SyntheticSpec& spec);

// Reads a raw-tensor directory: meta.json {class_count, height, width,
// channels, dtype:"u8"} plus class_<id>.bin files of concatenated H x W x C
// row-major u8 images. A seeded per-class holdout becomes the test split.
DatasetSplit load_raw_tensor_dir(const std::filesystem::path& dir, double test_fraction, std::uint64_t seed);

// Writes the same format; used by tests and for exporting synthetic data.
void write_raw_tensor_dir(const Dataset& data, const std::filesystem::path& dir);

// ---------------------------------------------------------------------------

struct TaskSchedule {
  std::vector<std::vector<int>> tasks;  // disjoint, each sorted ascending

  int task_count() const { return static_cast<int>(tasks.size()); }
  // Classes of tasks 0..t inclusive, in task order.
  std::vector<int> classes_through(int t) const;
  int classes_seen_through(int t) const;
  int task_of_class(int class_id) const;  // -1 if unused
};

// Shuffles 0..class_count-1 with std::shuffle over Rng(seed) and cuts the
// permutation into T consecutive chunks of classes_per_task.
TaskSchedule build_task_schedule(int class_count, int task_count, int classes_per_task, std::uint64_t seed);

// Sample indices per client for one task.
using PartitionFragment = std::map<int, std::vector<std::size_t>>;

struct ClientPartition {
  double sigma = 0.5;
  std::map<std::pair<int, int>, std::vector<std::size_t>> assignment;  // (task, client) -> indices

  void add(int task, const PartitionFragment& fragment);
  const std::vector<std::size_t>& indices(int task, int client) const;  // empty if none
};

// Per-class Dirichlet(sigma) proportions over clients, turned into exact
// counts with the largest-remainder rule.
PartitionFragment dirichlet_partition(std::span<const std::size_t> sample_indices, std::span<const int> labels,
                                      std::span<const int> client_ids, double sigma, std::uint64_t seed);

// Largest-remainder rounding of proportions to counts summing to total.
std::vector<std::size_t> largest_remainder_counts(std::span<const double> proportions, std::size_t total);

struct ClientGroupAssignment {
  int task = 0;
  std::vector<int> old_group;  // past data only
  std::vector<int> between;    // past and current data
  std::vector<int> new_group;  // current data only, joined this task

  std::size_t total() const { return old_group.size() + between.size() + new_group.size(); }
  std::vector<int> all() const;
  std::vector<int> with_current_data() const;
};

// Task 0: `new_clients` initial clients, all in the new group. Later tasks
// add `new_clients` fresh ids and redraw which existing clients move on
// (round(transition_fraction * existing)) and which stay old.
ClientGroupAssignment advance_client_groups(const std::optional<ClientGroupAssignment>& prev, int task_id,
                                            int new_clients, double transition_fraction, std::uint64_t seed);

// Uniform sample without replacement from the clients holding current-task
// data (plus the old group when include_old). Result is sorted.
std::vector<int> sample_round_clients(const ClientGroupAssignment& groups, int count, std::uint64_t seed,
                                      bool include_old = false);

}  // namespace fcil
