#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace fcil {

using Rng = std::mt19937_64;

// Stream tags keep the random draws of different subsystems independent, so
// toggling one component never shifts the numbers another component sees.
enum class Stream : std::uint64_t {
  schedule = 1,
  partition,
  groups,
  round_sampling,
  classifier_init,
  head_growth,
  omega_init,
  local_batches,
  replay,
  reservoir,
  exemplar_init,
  vae_init,
  vae_train,
  vae_generate,
  baseline_init,
  heterogeneity,
  dataset,
};

// splitmix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> tags) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, Stream stream,
                                 std::initializer_list<std::uint64_t> tags = {}) {
  std::uint64_t h = derive_seed(base, {static_cast<std::uint64_t>(stream)});
  for (std::uint64_t t : tags) h = mix64(h ^ mix64(t + 0x632be59bd9b4e019ULL));
  return h;
}

}  // namespace fcil
