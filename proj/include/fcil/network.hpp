#pragma once

// Scalar-generic forward and backward passes for the desk architectures.
// Instantiated with double for training and with Dual for forward-mode
// derivatives of gradients (exemplar pixel updates).

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "fcil/dual.hpp"
#include "fcil/model_zoo.hpp"

namespace fcil::net {

struct Layout {
  ArchKind kind = ArchKind::convnet;
  ImageShape input;
  int classes = 0;
  int feature_dim = 0;
  bool bias = true;
  int blocks = 0;
  // convnet: channels and spatial size entering each block
  std::vector<int> in_ch, out_ch, in_h, in_w;
  // mlp: widths entering/leaving each block
  std::vector<int> in_dim, out_dim;

  int weight_index(int block) const { return block * (bias ? 2 : 1); }
  int bias_index(int block) const { return bias ? block * 2 + 1 : -1; }
  int head_weight_index() const { return blocks * (bias ? 2 : 1); }
  int head_bias_index() const { return bias ? head_weight_index() + 1 : -1; }
  int tensor_count() const { return (blocks + 1) * (bias ? 2 : 1); }
};

Layout make_layout(const ArchSpec& spec, int classes);

template <class T>
struct Trace {
  int n = 0;
  std::vector<std::vector<T>> block_in;  // blocks + 1 entries, the last one holds the features
  std::vector<std::vector<T>> pre;       // pre-activation of each block
  std::vector<T> logits;

  const std::vector<T>& features() const { return block_in.back(); }
};

namespace detail {

template <class T>
inline T relu(const T& x) {
  return value_of(x) > 0.0 ? x : T(0.0);
}

template <class T>
void conv3x3_forward(const T* in, int n, int ci, int h, int w, const T* wt, const T* bias, int co, T* out) {
  const int hw = h * w;
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o) {
      T* dst = out + static_cast<std::ptrdiff_t>(b * co + o) * hw;
      std::fill(dst, dst + hw, bias ? bias[o] : T(0.0));
      for (int c = 0; c < ci; ++c) {
        const T* src = in + static_cast<std::ptrdiff_t>(b * ci + c) * hw;
        const T* k = wt + static_cast<std::ptrdiff_t>(o * ci + c) * 9;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const T kv = k[ky * 3 + kx];
            const int dy = ky - 1, dx = kx - 1;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            for (int y = y0; y < y1; ++y) {
              const T* s = src + (y + dy) * w + dx;
              T* d = dst + y * w;
              for (int x = x0; x < x1; ++x) d[x] += kv * s[x];
            }
          }
      }
    }
}

// dout: N x co x h x w. Accumulates into dwt/dbias (nullable) and din (nullable).
template <class T>
void conv3x3_backward(const T* in, int n, int ci, int h, int w, const T* wt, int co, const T* dout, T* dwt, T* dbias,
                      T* din) {
  const int hw = h * w;
  for (int b = 0; b < n; ++b)
    for (int o = 0; o < co; ++o) {
      const T* g = dout + static_cast<std::ptrdiff_t>(b * co + o) * hw;
      if (dbias) {
        T acc(0.0);
        for (int i = 0; i < hw; ++i) acc += g[i];
        dbias[o] += acc;
      }
      for (int c = 0; c < ci; ++c) {
        const T* src = in + static_cast<std::ptrdiff_t>(b * ci + c) * hw;
        T* dsrc = din ? din + static_cast<std::ptrdiff_t>(b * ci + c) * hw : nullptr;
        const T* k = wt + static_cast<std::ptrdiff_t>(o * ci + c) * 9;
        T* dk = dwt ? dwt + static_cast<std::ptrdiff_t>(o * ci + c) * 9 : nullptr;
        for (int ky = 0; ky < 3; ++ky)
          for (int kx = 0; kx < 3; ++kx) {
            const int dy = ky - 1, dx = kx - 1;
            const int y0 = std::max(0, -dy), y1 = std::min(h, h - dy);
            const int x0 = std::max(0, -dx), x1 = std::min(w, w - dx);
            const T kv = k[ky * 3 + kx];
            T acc(0.0);
            for (int y = y0; y < y1; ++y) {
              const T* s = src + (y + dy) * w + dx;
              const T* gy = g + y * w;
              if (dk)
                for (int x = x0; x < x1; ++x) acc += gy[x] * s[x];
              if (dsrc) {
                T* ds = dsrc + (y + dy) * w + dx;
                for (int x = x0; x < x1; ++x) ds[x] += kv * gy[x];
              }
            }
            if (dk) dk[ky * 3 + kx] += acc;
          }
      }
    }
}

}  // namespace detail

template <class T>
Trace<T> forward(const Layout& L, std::span<const T* const> params, std::span<const T> input, int n) {
  if (static_cast<int>(params.size()) != L.tensor_count()) throw std::invalid_argument("parameter count mismatch");
  if (input.size() != static_cast<std::size_t>(n) * L.input.numel())
    throw std::invalid_argument("input batch does not match the model's image shape");
  Trace<T> tr;
  tr.n = n;
  tr.block_in.reserve(static_cast<std::size_t>(L.blocks) + 1);
  tr.block_in.emplace_back(input.begin(), input.end());
  for (int b = 0; b < L.blocks; ++b) {
    const T* wt = params[static_cast<std::size_t>(L.weight_index(b))];
    const T* bias = L.bias ? params[static_cast<std::size_t>(L.bias_index(b))] : nullptr;
    const std::vector<T>& x = tr.block_in.back();
    std::vector<T> pre;
    std::vector<T> next;
    if (L.kind == ArchKind::convnet) {
      const int ci = L.in_ch[b], co = L.out_ch[b], h = L.in_h[b], w = L.in_w[b];
      pre.assign(static_cast<std::size_t>(n) * co * h * w, T(0.0));
      detail::conv3x3_forward(x.data(), n, ci, h, w, wt, bias, co, pre.data());
      const int ho = h / 2, wo = w / 2;
      next.assign(static_cast<std::size_t>(n) * co * ho * wo, T(0.0));
      for (int i = 0; i < n * co; ++i) {
        const T* p = pre.data() + static_cast<std::ptrdiff_t>(i) * h * w;
        T* q = next.data() + static_cast<std::ptrdiff_t>(i) * ho * wo;
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx) {
            const int o = 2 * y * w + 2 * xx;
            q[y * wo + xx] = (detail::relu(p[o]) + detail::relu(p[o + 1]) + detail::relu(p[o + w]) +
                              detail::relu(p[o + w + 1])) *
                             T(0.25);
          }
      }
    } else {
      const int di = L.in_dim[b], dout = L.out_dim[b];
      pre.assign(static_cast<std::size_t>(n) * dout, T(0.0));
      for (int s = 0; s < n; ++s)
        for (int o = 0; o < dout; ++o) {
          T acc = bias ? bias[o] : T(0.0);
          const T* row = wt + static_cast<std::ptrdiff_t>(o) * di;
          const T* xs = x.data() + static_cast<std::ptrdiff_t>(s) * di;
          for (int i = 0; i < di; ++i) acc += row[i] * xs[i];
          pre[static_cast<std::size_t>(s * dout + o)] = acc;
        }
      next.resize(pre.size());
      for (std::size_t i = 0; i < pre.size(); ++i) next[i] = detail::relu(pre[i]);
    }
    tr.pre.push_back(std::move(pre));
    tr.block_in.push_back(std::move(next));
  }

  const std::vector<T>& f = tr.block_in.back();
  const int F = L.feature_dim, K = L.classes;
  const T* hw = params[static_cast<std::size_t>(L.head_weight_index())];
  const T* hb = L.bias ? params[static_cast<std::size_t>(L.head_bias_index())] : nullptr;
  tr.logits.assign(static_cast<std::size_t>(n) * K, T(0.0));
  for (int s = 0; s < n; ++s)
    for (int k = 0; k < K; ++k) {
      T acc = hb ? hb[k] : T(0.0);
      const T* row = hw + static_cast<std::ptrdiff_t>(k) * F;
      const T* fs = f.data() + static_cast<std::ptrdiff_t>(s) * F;
      for (int i = 0; i < F; ++i) acc += row[i] * fs[i];
      tr.logits[static_cast<std::size_t>(s * K + k)] = acc;
    }
  return tr;
}

// Back-propagates upstream gradients on the logits and/or the features.
// dparams (may be empty) receives accumulated parameter gradients; dinput
// (may be null) receives the gradient on the input images.
template <class T>
void backward(const Layout& L, std::span<const T* const> params, const Trace<T>& tr, std::span<const T> dlogits,
              std::span<const T> dfeatures, std::span<T* const> dparams, std::vector<T>* dinput) {
  const int n = tr.n, F = L.feature_dim, K = L.classes;
  const bool want_params = !dparams.empty();
  std::vector<T> g(static_cast<std::size_t>(n) * F, T(0.0));
  if (!dfeatures.empty()) {
    if (dfeatures.size() != g.size()) throw std::invalid_argument("feature gradient has the wrong size");
    std::copy(dfeatures.begin(), dfeatures.end(), g.begin());
  }
  if (!dlogits.empty()) {
    if (dlogits.size() != static_cast<std::size_t>(n) * K) throw std::invalid_argument("logit gradient has the wrong size");
    const T* hw = params[static_cast<std::size_t>(L.head_weight_index())];
    const std::vector<T>& f = tr.features();
    T* dhw = want_params ? dparams[static_cast<std::size_t>(L.head_weight_index())] : nullptr;
    T* dhb = want_params && L.bias ? dparams[static_cast<std::size_t>(L.head_bias_index())] : nullptr;
    for (int s = 0; s < n; ++s)
      for (int k = 0; k < K; ++k) {
        const T gk = dlogits[static_cast<std::size_t>(s * K + k)];
        const T* row = hw + static_cast<std::ptrdiff_t>(k) * F;
        T* gs = g.data() + static_cast<std::ptrdiff_t>(s) * F;
        for (int i = 0; i < F; ++i) gs[i] += gk * row[i];
        if (dhw) {
          T* drow = dhw + static_cast<std::ptrdiff_t>(k) * F;
          const T* fs = f.data() + static_cast<std::ptrdiff_t>(s) * F;
          for (int i = 0; i < F; ++i) drow[i] += gk * fs[i];
        }
        if (dhb) dhb[k] += gk;
      }
  }

  for (int b = L.blocks - 1; b >= 0; --b) {
    const std::vector<T>& pre = tr.pre[static_cast<std::size_t>(b)];
    const std::vector<T>& x = tr.block_in[static_cast<std::size_t>(b)];
    const T* wt = params[static_cast<std::size_t>(L.weight_index(b))];
    T* dwt = want_params ? dparams[static_cast<std::size_t>(L.weight_index(b))] : nullptr;
    T* dbias = want_params && L.bias ? dparams[static_cast<std::size_t>(L.bias_index(b))] : nullptr;
    const bool need_din = b > 0 || dinput != nullptr;
    std::vector<T> gin;
    if (L.kind == ArchKind::convnet) {
      const int ci = L.in_ch[b], co = L.out_ch[b], h = L.in_h[b], w = L.in_w[b];
      const int ho = h / 2, wo = w / 2;
      std::vector<T> gpre(pre.size(), T(0.0));
      for (int i = 0; i < n * co; ++i) {
        const T* gq = g.data() + static_cast<std::ptrdiff_t>(i) * ho * wo;
        const T* p = pre.data() + static_cast<std::ptrdiff_t>(i) * h * w;
        T* gp = gpre.data() + static_cast<std::ptrdiff_t>(i) * h * w;
        for (int y = 0; y < ho; ++y)
          for (int xx = 0; xx < wo; ++xx) {
            const T v = gq[y * wo + xx] * T(0.25);
            const int o = 2 * y * w + 2 * xx;
            for (int off : {o, o + 1, o + w, o + w + 1})
              if (value_of(p[off]) > 0.0) gp[off] = v;
          }
      }
      if (need_din) gin.assign(x.size(), T(0.0));
      detail::conv3x3_backward(x.data(), n, ci, h, w, wt, co, gpre.data(), dwt, dbias, need_din ? gin.data() : nullptr);
    } else {
      const int di = L.in_dim[b], dout = L.out_dim[b];
      std::vector<T> gpre(pre.size(), T(0.0));
      for (std::size_t i = 0; i < pre.size(); ++i)
        if (value_of(pre[i]) > 0.0) gpre[i] = g[i];
      if (need_din) gin.assign(x.size(), T(0.0));
      for (int s = 0; s < n; ++s)
        for (int o = 0; o < dout; ++o) {
          const T go = gpre[static_cast<std::size_t>(s * dout + o)];
          const T* xs = x.data() + static_cast<std::ptrdiff_t>(s) * di;
          if (dwt) {
            T* drow = dwt + static_cast<std::ptrdiff_t>(o) * di;
            for (int i = 0; i < di; ++i) drow[i] += go * xs[i];
          }
          if (dbias) dbias[o] += go;
          if (need_din) {
            const T* row = wt + static_cast<std::ptrdiff_t>(o) * di;
            T* gs = gin.data() + static_cast<std::ptrdiff_t>(s) * di;
            for (int i = 0; i < di; ++i) gs[i] += go * row[i];
          }
        }
    }
    if (!need_din) return;
    g = std::move(gin);
  }
  if (dinput) *dinput = std::move(g);
}

// Mean softmax cross-entropy over n rows of k logits.
template <class T>
T softmax_xent(std::span<const T> logits, int n, int k, std::span<const int> labels, std::vector<T>* dlogits) {
  if (logits.size() != static_cast<std::size_t>(n) * k || labels.size() != static_cast<std::size_t>(n))
    throw std::invalid_argument("cross-entropy shape mismatch");
  if (dlogits) dlogits->assign(logits.size(), T(0.0));
  T total(0.0);
  const double inv_n = 1.0 / static_cast<double>(n);
  std::vector<T> e(static_cast<std::size_t>(k));
  for (int s = 0; s < n; ++s) {
    const T* row = logits.data() + static_cast<std::ptrdiff_t>(s) * k;
    double mx = value_of(row[0]);
    for (int j = 1; j < k; ++j) mx = std::max(mx, value_of(row[j]));
    T z(0.0);
    for (int j = 0; j < k; ++j) {
      using std::exp;
      e[static_cast<std::size_t>(j)] = exp(row[j] - T(mx));
      z += e[static_cast<std::size_t>(j)];
    }
    const int y = labels[static_cast<std::size_t>(s)];
    if (y < 0 || y >= k) throw std::out_of_range("label outside the classifier head");
    using std::log;
    total += (log(z) - (row[y] - T(mx)));
    if (dlogits) {
      T* d = dlogits->data() + static_cast<std::ptrdiff_t>(s) * k;
      for (int j = 0; j < k; ++j) d[j] = e[static_cast<std::size_t>(j)] / z * T(inv_n);
      d[y] -= T(inv_n);
    }
  }
  return total * T(inv_n);
}

// Buffers shaped like a ParamVector, for scalar types other than double.
template <class T>
struct ParamBuffers {
  std::vector<std::vector<T>> tensors;

  static ParamBuffers zeros_like(const ParamVector& p) {
    ParamBuffers out;
    for (const auto& t : p.layers()) out.tensors.emplace_back(t.numel(), T(0.0));
    return out;
  }
  std::vector<const T*> cptrs() const {
    std::vector<const T*> v;
    for (const auto& t : tensors) v.push_back(t.data());
    return v;
  }
  std::vector<T*> ptrs() {
    std::vector<T*> v;
    for (auto& t : tensors) v.push_back(t.data());
    return v;
  }
};

}  // namespace fcil::net
