#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <vector>

#include "fcil/image_batch.hpp"

namespace fcil {

struct StoredImage {
  std::vector<double> pixels;
  int label = 0;
};

// SGD has no accumulator; the state tracks step bookkeeping only.
struct ExemplarOptState {
  long steps = 0;
  double last_grad_norm = 0.0;
};

// A learnable synthetic image. The label never changes after creation.
struct CondensedExemplar {
  std::vector<double> pixels;
  int label = 0;
  Origin origin = Origin::condensed;
  ExemplarOptState opt_state;
};

// Per-client rehearsal memory. `orig` holds a reservoir of current-task real
// images for the condensation-model update and does not count against the
// budget; `cond` and `summ` share the budget M.
struct MemoryStore {
  int budget = 100;
  ImageShape shape;
  int quota_per_class = 0;
  std::map<int, int> quota;  // admitted class -> per-class cap
  std::vector<StoredImage> orig;
  std::size_t orig_seen = 0;
  std::vector<CondensedExemplar> cond;  // past tasks
  std::vector<CondensedExemplar> summ;  // current task, under optimization
  std::map<int, std::size_t> summ_seen;  // per-class stream counters for reservoir filling

  MemoryStore() = default;
  MemoryStore(int budget_, ImageShape shape_) : budget(budget_), shape(shape_) {}

  std::size_t condensed_size() const { return cond.size() + summ.size(); }
  std::size_t count(int label) const;  // condensed exemplars of `label` in cond and summ
  int quota_for(int label) const;      // admitted quota or the current default
  std::vector<std::size_t> summ_indices(int label) const;
  // Throws std::logic_error if the budget or a per-class quota is exceeded.
  void check_invariants() const;
};

// Sets the per-class quota to floor(M / total_classes_seen) and truncates
// every class's condensed set to its oldest entries. Throws when the quota
// would be zero.
MemoryStore rebalance_quota(MemoryStore store, int total_classes_seen);

// Fixed split used when adjustable memory is off: the quota is set once and
// never changed.
MemoryStore set_fixed_quota(MemoryStore store, int per_class);

// Reservoir sampling (algorithm R) of real current-task images into orig.
// The replacement draw for stream item i comes from Rng(derive(seed, i)).
MemoryStore admit_original(MemoryStore store, const ImageBatch& batch, int cap, std::uint64_t seed);

// Adds a summary exemplar if its class quota and the budget allow it.
bool add_summary(MemoryStore& store, std::span<const double> pixels, int label, Origin origin);

// Per-class reservoir of real images into summ (Replay baseline memory).
MemoryStore reservoir_summary(MemoryStore store, const ImageBatch& batch, std::uint64_t seed);

// Task-end transition: summ moves into cond, summ and orig are cleared.
MemoryStore promote_summary(MemoryStore store);

// Uniform sample of up to B_m exemplars from cond and summ.
ImageBatch sample_replay(const MemoryStore& store, int batch_size, std::uint64_t seed);

// JSON manifest plus raw f32 tensors (wire format) in `dir`.
void save_memory_snapshot(const MemoryStore& store, const std::filesystem::path& dir);
MemoryStore load_memory_snapshot(const std::filesystem::path& dir);

}  // namespace fcil
