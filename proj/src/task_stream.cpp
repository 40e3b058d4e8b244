#include "fcil/task_stream.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include "fcil/rng.hpp"

namespace fcil {

void Dataset::push_back(std::span<const double> px, int label) {
  if (px.size() != shape.numel()) throw std::invalid_argument("image size does not match dataset shape");
  pixels.insert(pixels.end(), px.begin(), px.end());
  labels.push_back(label);
}

void Dataset::validate() const {
  if (class_count <= 0) throw std::invalid_argument("dataset '" + name + "' has no classes");
  if (pixels.size() != labels.size() * shape.numel())
    throw std::invalid_argument("dataset '" + name + "' pixel buffer does not match sample count");
  std::vector<int> counts(static_cast<std::size_t>(class_count), 0);
  for (int y : labels) {
    if (y < 0 || y >= class_count) throw std::invalid_argument("dataset '" + name + "' label out of range");
    ++counts[static_cast<std::size_t>(y)];
  }
  for (int k = 0; k < class_count; ++k)
    if (counts[static_cast<std::size_t>(k)] == 0)
      throw std::invalid_argument("dataset '" + name + "' has no sample for class " + std::to_string(k));
}

ImageBatch Dataset::gather(std::span<const std::size_t> indices) const {
  ImageBatch batch(shape);
  batch.pixels.reserve(indices.size() * shape.numel());
  for (std::size_t i : indices) batch.push_back(image(i), labels[i], Origin::real);
  return batch;
}

std::vector<std::size_t> Dataset::indices_of_classes(std::span<const int> classes) const {
  std::set<int> wanted(classes.begin(), classes.end());
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < labels.size(); ++i)
    if (wanted.contains(labels[i])) out.push_back(i);
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> TaskSchedule::classes_through(int t) const {
  std::vector<int> out;
  for (int i = 0; i <= t && i < task_count(); ++i)
    out.insert(out.end(), tasks[static_cast<std::size_t>(i)].begin(), tasks[static_cast<std::size_t>(i)].end());
  return out;
}

int TaskSchedule::classes_seen_through(int t) const { return static_cast<int>(classes_through(t).size()); }

int TaskSchedule::task_of_class(int class_id) const {
  for (int t = 0; t < task_count(); ++t) {
    const auto& ks = tasks[static_cast<std::size_t>(t)];
    if (std::find(ks.begin(), ks.end(), class_id) != ks.end()) return t;
  }
  return -1;
}

TaskSchedule build_task_schedule(int class_count, int task_count, int classes_per_task, std::uint64_t seed) {
  if (class_count <= 0 || task_count <= 0 || classes_per_task <= 0)
    throw std::invalid_argument("task schedule arguments must be positive");
  if (static_cast<long long>(task_count) * classes_per_task > class_count)
    throw std::invalid_argument("insufficient classes: " + std::to_string(task_count) + " tasks x " +
                                std::to_string(classes_per_task) + " classes > " + std::to_string(class_count));
  std::vector<int> order(static_cast<std::size_t>(class_count));
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  TaskSchedule schedule;
  for (int t = 0; t < task_count; ++t) {
    auto first = order.begin() + static_cast<std::ptrdiff_t>(t) * classes_per_task;
    std::vector<int> ks(first, first + classes_per_task);
    std::sort(ks.begin(), ks.end());
    schedule.tasks.push_back(std::move(ks));
  }
  return schedule;
}

// ---------------------------------------------------------------------------

void ClientPartition::add(int task, const PartitionFragment& fragment) {
  for (const auto& [client, idx] : fragment) assignment[{task, client}] = idx;
}

const std::vector<std::size_t>& ClientPartition::indices(int task, int client) const {
  static const std::vector<std::size_t> empty;
  auto it = assignment.find({task, client});
  return it == assignment.end() ? empty : it->second;
}

std::vector<std::size_t> largest_remainder_counts(std::span<const double> proportions, std::size_t total) {
  const std::size_t n = proportions.size();
  std::vector<std::size_t> counts(n, 0);
  if (n == 0) return counts;
  double mass = std::accumulate(proportions.begin(), proportions.end(), 0.0);
  if (!(mass > 0.0)) throw std::invalid_argument("proportions must have positive mass");

  std::vector<double> remainder(n);
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double exact = proportions[i] / mass * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    remainder[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Floating error can push the floor sum past total by one in pathological
  // cases; trim from the smallest remainders.
  while (assigned > total) {
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i)
      if (counts[i] > 0 && (counts[j] == 0 || remainder[i] < remainder[j])) j = i;
    --counts[j];
    --assigned;
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % n) {
    ++counts[order[i]];
    ++assigned;
  }
  return counts;
}

PartitionFragment dirichlet_partition(std::span<const std::size_t> sample_indices, std::span<const int> labels,
                                      std::span<const int> client_ids, double sigma, std::uint64_t seed) {
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  if (client_ids.empty()) throw std::invalid_argument("dirichlet_partition needs at least one client");
  if (sample_indices.size() != labels.size()) throw std::invalid_argument("sample indices and labels differ in length");

  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < sample_indices.size(); ++i) by_class[labels[i]].push_back(sample_indices[i]);

  PartitionFragment out;
  for (int c : client_ids) out[c];

  Rng rng(seed);
  std::gamma_distribution<double> gamma(sigma, 1.0);
  std::vector<double> share(client_ids.size());
  for (auto& [label, members] : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    double mass = 0.0;
    for (double& s : share) {
      s = gamma(rng);
      mass += s;
    }
    if (!(mass > 0.0)) {
      // Every gamma draw underflowed (tiny sigma): the whole class goes to one client.
      std::fill(share.begin(), share.end(), 0.0);
      share[std::uniform_int_distribution<std::size_t>(0, share.size() - 1)(rng)] = 1.0;
    }
    const auto counts = largest_remainder_counts(share, members.size());
    std::size_t offset = 0;
    for (std::size_t c = 0; c < client_ids.size(); ++c) {
      auto& dst = out[client_ids[c]];
      dst.insert(dst.end(), members.begin() + static_cast<std::ptrdiff_t>(offset),
                 members.begin() + static_cast<std::ptrdiff_t>(offset + counts[c]));
      offset += counts[c];
    }
  }
  for (auto& [client, idx] : out) std::sort(idx.begin(), idx.end());
  return out;
}

// ---------------------------------------------------------------------------

std::vector<int> ClientGroupAssignment::all() const {
  std::vector<int> out;
  out.insert(out.end(), old_group.begin(), old_group.end());
  out.insert(out.end(), between.begin(), between.end());
  out.insert(out.end(), new_group.begin(), new_group.end());
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<int> ClientGroupAssignment::with_current_data() const {
  std::vector<int> out(between);
  out.insert(out.end(), new_group.begin(), new_group.end());
  std::sort(out.begin(), out.end());
  return out;
}

ClientGroupAssignment advance_client_groups(const std::optional<ClientGroupAssignment>& prev, int task_id,
                                            int new_clients, double transition_fraction, std::uint64_t seed) {
  if (new_clients < 0) throw std::invalid_argument("client increment must be non-negative");
  if (!(transition_fraction >= 0.0 && transition_fraction <= 1.0))
    throw std::invalid_argument("transition_fraction must lie in [0, 1]");
  if (task_id == 0 && prev) throw std::invalid_argument("task 0 has no previous group assignment");
  if (task_id > 0 && !prev) throw std::invalid_argument("tasks after 0 need the previous group assignment");

  ClientGroupAssignment next;
  next.task = task_id;
  std::vector<int> existing;
  if (prev) existing = prev->all();
  const int first_new = existing.empty() ? 0 : existing.back() + 1;
  for (int i = 0; i < new_clients; ++i) next.new_group.push_back(first_new + i);
  if (existing.empty()) return next;

  Rng rng(seed);
  std::shuffle(existing.begin(), existing.end(), rng);
  const auto movers = static_cast<std::size_t>(std::lround(transition_fraction * static_cast<double>(existing.size())));
  next.between.assign(existing.begin(), existing.begin() + static_cast<std::ptrdiff_t>(movers));
  next.old_group.assign(existing.begin() + static_cast<std::ptrdiff_t>(movers), existing.end());
  std::sort(next.between.begin(), next.between.end());
  std::sort(next.old_group.begin(), next.old_group.end());
  return next;
}

std::vector<int> sample_round_clients(const ClientGroupAssignment& groups, int count, std::uint64_t seed,
                                      bool include_old) {
  std::vector<int> eligible = include_old ? groups.all() : groups.with_current_data();
  if (count <= 0) return {};
  if (static_cast<std::size_t>(count) >= eligible.size()) return eligible;
  Rng rng(seed);
  std::shuffle(eligible.begin(), eligible.end(), rng);
  eligible.resize(static_cast<std::size_t>(count));
  std::sort(eligible.begin(), eligible.end());
  return eligible;
}

}  // namespace fcil
