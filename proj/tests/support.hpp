#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <queue>
#include <random>
#include <string>
#include <vector>

#include "fcil/image_batch.hpp"
#include "fcil/model_zoo.hpp"

namespace fcil::testing {

// Small convnet used by gradient checks: 3 blocks of width 4 on 3x8x8 input.
inline ArchSpec toy_convnet(int width = 4) {
  ArchSpec s;
  s.input = {3, 8, 8};
  s.width = width;
  s.depth = 3;
  return s;
}

inline ImageBatch random_batch(const ImageShape& shape, int n, int classes, std::uint64_t seed,
                               Origin origin = Origin::real) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBatch b(shape);
  std::vector<double> px(shape.numel());
  for (int i = 0; i < n; ++i) {
    for (double& v : px) v = u(rng);
    b.push_back(px, i % classes, origin);
  }
  return b;
}

inline ImageBatch single_class_batch(const ImageShape& shape, int n, int label, std::uint64_t seed,
                                     Origin origin = Origin::real) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBatch b(shape);
  std::vector<double> px(shape.numel());
  for (int i = 0; i < n; ++i) {
    for (double& v : px) v = u(rng);
    b.push_back(px, label, origin);
  }
  return b;
}

// Zero biases put pre-activations of all-zero receptive fields exactly on the
// ReLU kink, where central differences see a one-sided slope.
inline Backbone with_random_biases(Backbone m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& t : m.params().layers())
    if (t.is_bias())
      for (double& v : t.values) v = u(rng);
  return m;
}

inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(1e-6, std::max(std::abs(a), std::abs(b))); }

// First-neighbour graph components by breadth-first search over an explicit
// adjacency list, numbered in order of first appearance.
inline std::vector<int> brute_force_finch(const std::vector<std::vector<double>>& pts, bool use_cosine) {
  const std::size_t n = pts.size();
  auto score = [&](std::size_t i, std::size_t j) {
    double dot = 0, ni = 0, nj = 0, d2 = 0;
    for (std::size_t k = 0; k < pts[i].size(); ++k) {
      dot += pts[i][k] * pts[j][k];
      ni += pts[i][k] * pts[i][k];
      nj += pts[j][k] * pts[j][k];
      d2 += (pts[i][k] - pts[j][k]) * (pts[i][k] - pts[j][k]);
    }
    return use_cosine ? dot / std::max(std::sqrt(ni) * std::sqrt(nj), 1e-12) : -d2;
  };
  std::vector<std::vector<std::size_t>> adj(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = i;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i && (best == i || score(i, j) > score(i, best))) best = j;
    if (best != i) {
      adj[i].push_back(best);
      adj[best].push_back(i);
    }
  }
  std::vector<int> label(n, -1);
  int next = 0;
  for (std::size_t s = 0; s < n; ++s) {
    if (label[s] >= 0) continue;
    std::queue<std::size_t> q;
    q.push(s);
    label[s] = next;
    while (!q.empty()) {
      const std::size_t u = q.front();
      q.pop();
      for (std::size_t v : adj[u])
        if (label[v] < 0) {
          label[v] = next;
          q.push(v);
        }
    }
    ++next;
  }
  return label;
}

// Direct evaluation of the metric definitions on a complete matrix R.
struct DirectMetrics {
  double a_avg, a_last, incre_avg, incre_last, aa_avg, aa_last, bwt, fwt, remembering, forgetting;
};

inline DirectMetrics direct_metrics(const std::vector<std::vector<double>>& R, const std::vector<double>& sizes,
                                    const std::vector<double>& pre, const std::vector<double>& base) {
  const std::size_t T = R.size();
  std::vector<double> overall(T), plain(T), incre(T);
  for (std::size_t t = 0; t < T; ++t) {
    double num = 0, den = 0, sum = 0;
    for (std::size_t j = 0; j <= t; ++j) {
      num += sizes[j] * R[t][j];
      den += sizes[j];
      sum += R[t][j];
    }
    overall[t] = num / den;
    plain[t] = sum / static_cast<double>(t + 1);
    double run = 0;
    for (std::size_t u = 0; u <= t; ++u) run += overall[u];
    incre[t] = run / static_cast<double>(t + 1);
  }
  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  DirectMetrics m{mean(overall), overall.back(), mean(incre), incre.back(), mean(plain), plain.back(), 0, 0, 0, 0};
  if (T >= 2) {
    for (std::size_t i = 0; i + 1 < T; ++i) m.bwt += (R[T - 1][i] - R[i][i]) / static_cast<double>(T - 1);
    for (std::size_t i = 1; i < T; ++i) m.fwt += (pre[i] - base[i]) / static_cast<double>(T - 1);
    m.remembering = 1.0 - (m.bwt < 0 ? -m.bwt : 0.0);
    for (std::size_t j = 0; j + 1 < T; ++j) {
      double best = R[j][j];
      for (std::size_t l = j + 1; l < T; ++l) best = best > R[l][j] ? best : R[l][j];
      m.forgetting += (best - R[T - 1][j]) / static_cast<double>(T - 1);
    }
  }
  return m;
}

// Fresh directory under the test binary's working directory.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::current_path() / "scratch" / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace fcil::testing
