#include "fcil/rehearsal_memory.hpp"

#include <algorithm>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <stdexcept>
#include <string>

#include "fcil/rng.hpp"
#include "fcil/wire.hpp"

namespace fcil {

std::size_t MemoryStore::count(int label) const {
  auto same = [label](const CondensedExemplar& e) { return e.label == label; };
  return static_cast<std::size_t>(std::count_if(cond.begin(), cond.end(), same) +
                                  std::count_if(summ.begin(), summ.end(), same));
}

int MemoryStore::quota_for(int label) const {
  auto it = quota.find(label);
  return it == quota.end() ? quota_per_class : it->second;
}

std::vector<std::size_t> MemoryStore::summ_indices(int label) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < summ.size(); ++i)
    if (summ[i].label == label) out.push_back(i);
  return out;
}

void MemoryStore::check_invariants() const {
  if (condensed_size() > static_cast<std::size_t>(budget)) throw std::logic_error("memory budget exceeded");
  std::map<int, std::size_t> counts;
  for (const auto& e : cond) ++counts[e.label];
  for (const auto& e : summ) ++counts[e.label];
  for (const auto& [label, n] : counts)
    if (n > static_cast<std::size_t>(quota_for(label)))
      throw std::logic_error("class " + std::to_string(label) + " exceeds its quota");
}

namespace {

std::vector<CondensedExemplar> truncate_per_class(std::vector<CondensedExemplar> items, int cap) {
  std::map<int, int> kept;
  std::vector<CondensedExemplar> out;
  for (auto& e : items)
    if (kept[e.label]++ < cap) out.push_back(std::move(e));
  return out;
}

}  // namespace

MemoryStore rebalance_quota(MemoryStore store, int total_classes_seen) {
  if (total_classes_seen < 1) throw std::invalid_argument("total_classes_seen must be at least 1");
  if (store.budget < total_classes_seen)
    throw std::invalid_argument("memory budget " + std::to_string(store.budget) + " is smaller than the " +
                                std::to_string(total_classes_seen) + " classes seen");
  const int m = store.budget / total_classes_seen;
  store.quota_per_class = m;
  for (auto& [label, q] : store.quota) q = m;
  store.cond = truncate_per_class(std::move(store.cond), m);
  store.summ = truncate_per_class(std::move(store.summ), m);
  return store;
}

MemoryStore set_fixed_quota(MemoryStore store, int per_class) {
  if (per_class < 1) throw std::invalid_argument("fixed per-class quota must be at least 1");
  store.quota_per_class = per_class;
  for (auto& [label, q] : store.quota) q = per_class;
  return store;
}

MemoryStore admit_original(MemoryStore store, const ImageBatch& batch, int cap, std::uint64_t seed) {
  if (cap < 0) throw std::invalid_argument("reservoir cap must be non-negative");
  if (cap == 0) return store;
  const auto ucap = static_cast<std::size_t>(cap);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.origins[i] != Origin::real) throw std::logic_error("only real images may enter M_orig");
    const std::size_t seen = store.orig_seen++;
    auto px = batch.image(i);
    if (store.orig.size() < ucap) {
      store.orig.push_back({{px.begin(), px.end()}, batch.labels[i]});
      continue;
    }
    Rng rng(derive_seed(seed, {seen}));
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, seen)(rng);
    if (j < ucap) store.orig[j] = {{px.begin(), px.end()}, batch.labels[i]};
  }
  return store;
}

bool add_summary(MemoryStore& store, std::span<const double> pixels, int label, Origin origin) {
  if (pixels.size() != store.shape.numel()) throw std::invalid_argument("exemplar size does not match memory shape");
  if (!store.quota.contains(label)) store.quota[label] = store.quota_per_class;
  if (store.count(label) >= static_cast<std::size_t>(store.quota_for(label))) return false;
  if (store.condensed_size() >= static_cast<std::size_t>(store.budget)) return false;
  store.summ.push_back({{pixels.begin(), pixels.end()}, label, origin, {}});
  return true;
}

MemoryStore reservoir_summary(MemoryStore store, const ImageBatch& batch, std::uint64_t seed) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const int label = batch.labels[i];
    const std::size_t seen = store.summ_seen[label]++;
    if (add_summary(store, batch.image(i), label, Origin::real)) continue;
    const auto slots = store.summ_indices(label);
    if (slots.empty()) continue;
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(label), seen}));
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, seen)(rng);
    if (j < slots.size()) {
      auto px = batch.image(i);
      store.summ[slots[j]].pixels.assign(px.begin(), px.end());
    }
  }
  return store;
}

MemoryStore promote_summary(MemoryStore store) {
  std::map<int, std::size_t> counts;
  for (const auto& e : store.cond) ++counts[e.label];
  for (const auto& e : store.summ)
    if (++counts[e.label] > static_cast<std::size_t>(store.quota_for(e.label)))
      throw std::logic_error("promoting class " + std::to_string(e.label) + " would exceed its quota");
  for (auto& e : store.summ) store.cond.push_back(std::move(e));
  store.summ.clear();
  store.summ_seen.clear();
  store.orig.clear();
  store.orig_seen = 0;
  store.check_invariants();
  return store;
}

ImageBatch sample_replay(const MemoryStore& store, int batch_size, std::uint64_t seed) {
  if (batch_size < 0) throw std::invalid_argument("replay batch size must be non-negative");
  ImageBatch out(store.shape);
  const std::size_t pool = store.condensed_size();
  auto at = [&](std::size_t i) -> const CondensedExemplar& {
    return i < store.cond.size() ? store.cond[i] : store.summ[i - store.cond.size()];
  };
  std::vector<std::size_t> pick(pool);
  std::iota(pick.begin(), pick.end(), 0);
  if (static_cast<std::size_t>(batch_size) < pool) {
    Rng rng(seed);
    std::shuffle(pick.begin(), pick.end(), rng);
    pick.resize(static_cast<std::size_t>(batch_size));
    std::sort(pick.begin(), pick.end());
  }
  for (std::size_t i : pick) out.push_back(at(i).pixels, at(i).label, at(i).origin);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

NamedTensor pack(const std::string& name, const ImageShape& s, std::size_t n, auto&& pixels_of) {
  NamedTensor t{name, {n, static_cast<std::size_t>(s.channels), static_cast<std::size_t>(s.height),
                       static_cast<std::size_t>(s.width)}, {}};
  t.values.reserve(n * s.numel());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& px = pixels_of(i);
    t.values.insert(t.values.end(), px.begin(), px.end());
  }
  return t;
}

}  // namespace

void save_memory_snapshot(const MemoryStore& store, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["budget"] = store.budget;
  manifest["shape"] = {store.shape.channels, store.shape.height, store.shape.width};
  manifest["quota_per_class"] = store.quota_per_class;
  manifest["quota"] = nlohmann::json::object();
  for (const auto& [k, q] : store.quota) manifest["quota"][std::to_string(k)] = q;
  manifest["orig_seen"] = store.orig_seen;
  auto labels = [](const auto& items) {
    std::vector<int> out;
    for (const auto& e : items) out.push_back(e.label);
    return out;
  };
  auto origins = [](const auto& items) {
    std::vector<std::string> out;
    for (const auto& e : items) out.push_back(e.origin == Origin::real ? "real" : "condensed");
    return out;
  };
  manifest["orig_labels"] = labels(store.orig);
  manifest["cond_labels"] = labels(store.cond);
  manifest["summ_labels"] = labels(store.summ);
  manifest["cond_origins"] = origins(store.cond);
  manifest["summ_origins"] = origins(store.summ);
  manifest["tensor_file"] = "exemplars.bin";
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';

  std::vector<NamedTensor> tensors;
  tensors.push_back(pack("orig", store.shape, store.orig.size(), [&](std::size_t i) -> const auto& { return store.orig[i].pixels; }));
  tensors.push_back(pack("cond", store.shape, store.cond.size(), [&](std::size_t i) -> const auto& { return store.cond[i].pixels; }));
  tensors.push_back(pack("summ", store.shape, store.summ.size(), [&](std::size_t i) -> const auto& { return store.summ[i].pixels; }));
  const std::string bytes = wire::encode_tensors(tensors);
  std::ofstream out(dir / "exemplars.bin", std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

MemoryStore load_memory_snapshot(const std::filesystem::path& dir) {
  std::ifstream min(dir / "manifest.json");
  if (!min) throw std::runtime_error("missing memory manifest in " + dir.string());
  const auto manifest = nlohmann::json::parse(min);
  const auto shape = manifest.at("shape").get<std::vector<int>>();
  MemoryStore store(manifest.at("budget").get<int>(), ImageShape{shape.at(0), shape.at(1), shape.at(2)});
  store.quota_per_class = manifest.at("quota_per_class").get<int>();
  for (const auto& [k, q] : manifest.at("quota").items()) store.quota[std::stoi(k)] = q.get<int>();
  store.orig_seen = manifest.at("orig_seen").get<std::size_t>();

  std::ifstream bin(dir / manifest.at("tensor_file").get<std::string>(), std::ios::binary);
  const std::string bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  const auto dec = wire::decode_tensors(bytes);
  const std::size_t n_px = store.shape.numel();
  auto slice = [&](const std::string& name, std::size_t i) {
    for (const auto& t : dec.tensors)
      if (t.name == name)
        return std::vector<double>(t.values.begin() + static_cast<std::ptrdiff_t>(i * n_px),
                                   t.values.begin() + static_cast<std::ptrdiff_t>((i + 1) * n_px));
    throw std::runtime_error("snapshot lacks tensor " + name);
  };
  const auto orig_labels = manifest.at("orig_labels").get<std::vector<int>>();
  for (std::size_t i = 0; i < orig_labels.size(); ++i) store.orig.push_back({slice("orig", i), orig_labels[i]});
  for (const char* part : {"cond", "summ"}) {
    const auto ls = manifest.at(std::string(part) + "_labels").get<std::vector<int>>();
    const auto os = manifest.at(std::string(part) + "_origins").get<std::vector<std::string>>();
    auto& dst = std::string(part) == "cond" ? store.cond : store.summ;
    for (std::size_t i = 0; i < ls.size(); ++i)
      dst.push_back({slice(part, i), ls[i], os.at(i) == "real" ? Origin::real : Origin::condensed, {}});
  }
  store.check_invariants();
  return store;
}

}  // namespace fcil
