#include "fcil/condensation.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "fcil/network.hpp"
#include "fcil/rng.hpp"

namespace fcil {

CondensationState init_condensation_state(const ArchSpec& spec, int classes, double eta, std::uint64_t seed) {
  if (eta < 0.0) throw std::invalid_argument("eta must be non-negative");
  return CondensationState{init_backbone(spec, classes, seed), eta, 0, {}};
}

double gradient_distance(const ParamVector& a, const ParamVector& b, ParamVector* d_a) {
  if (!a.same_layout(b)) throw std::invalid_argument("gradient layouts differ");
  if (d_a) *d_a = a.zeros_like();
  double total = 0.0;
  for (std::size_t l = 0; l < a.tensor_count(); ++l) {
    if (a[l].is_bias()) continue;
    const auto& x = a[l].values;
    const auto& y = b[l].values;
    double dot = 0.0, nx = 0.0, ny = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      dot += x[i] * y[i];
      nx += x[i] * x[i];
      ny += y[i] * y[i];
    }
    const double lx = std::sqrt(nx), ly = std::sqrt(ny);
    const double denom = std::max(lx * ly, 1e-12);
    const double c = dot / denom;
    total += 1.0 - c;
    if (d_a && lx * ly >= 1e-12) {
      auto& g = (*d_a)[l].values;
      for (std::size_t i = 0; i < x.size(); ++i) g[i] = -(y[i] / denom - c * x[i] / nx);
    }
  }
  return total;
}

namespace {

int single_label(const ImageBatch& batch, const char* what) {
  if (batch.empty()) throw std::invalid_argument(std::string(what) + " batch is empty");
  const int k = batch.labels.front();
  for (int y : batch.labels)
    if (y != k) throw std::invalid_argument(std::string(what) + " batch mixes labels");
  return k;
}

ParamVector param_grad(const Backbone& model, const ImageBatch& batch) {
  GradRequest req{GradTarget::params, CrossEntropyLoss{}, batch};
  return grad(model, req).param_grad;
}

struct FeaturePass {
  net::Layout layout;
  net::Trace<double> trace;
};

FeaturePass feature_pass(const Backbone& model, const ImageBatch& batch) {
  FeaturePass fp{net::make_layout(model.spec(), model.head_classes()), {}};
  const auto ptrs = model.params().data_pointers();
  fp.trace = net::forward<double>(fp.layout, ptrs, batch.pixels, static_cast<int>(batch.size()));
  return fp;
}

std::vector<double> pixels_from_features(const Backbone& model, const FeaturePass& fp, const std::vector<double>& dfeat) {
  const auto ptrs = model.params().data_pointers();
  std::vector<double> din;
  net::backward<double>(fp.layout, ptrs, fp.trace, {}, dfeat, {}, &din);
  return din;
}

std::span<const double> row(const std::vector<double>& m, std::size_t i, std::size_t d) {
  return {m.data() + i * d, d};
}

}  // namespace

TermResult grad_match(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k, bool want_pixel_grad) {
  if (single_label(m_k, "exemplar") != single_label(b_k, "real"))
    throw std::invalid_argument("exemplar and real batches carry different labels");
  const ParamVector g_m = param_grad(omega, m_k);
  const ParamVector g_b = param_grad(omega, b_k);
  TermResult out;
  ParamVector direction;
  out.loss = gradient_distance(g_m, g_b, want_pixel_grad ? &direction : nullptr);
  if (!want_pixel_grad) return out;

  // d/d eps of grad_x CE(omega + eps * direction; x) at eps = 0.
  const auto L = net::make_layout(omega.spec(), omega.head_classes());
  net::ParamBuffers<Dual> P;
  for (std::size_t l = 0; l < omega.params().tensor_count(); ++l) {
    const auto& w = omega.params()[l].values;
    const auto& d = direction[l].values;
    std::vector<Dual> t(w.size());
    for (std::size_t i = 0; i < w.size(); ++i) t[i] = Dual{w[i], d[i]};
    P.tensors.push_back(std::move(t));
  }
  std::vector<Dual> input(m_k.pixels.begin(), m_k.pixels.end());
  const auto cptrs = P.cptrs();
  const int n = static_cast<int>(m_k.size());
  auto tr = net::forward<Dual>(L, cptrs, input, n);
  std::vector<Dual> dlogits;
  net::softmax_xent<Dual>(tr.logits, n, omega.head_classes(), m_k.labels, &dlogits);
  std::vector<Dual> din;
  net::backward<Dual>(L, cptrs, tr, dlogits, {}, {}, &din);
  out.pixel_grad.resize(din.size());
  for (std::size_t i = 0; i < din.size(); ++i) out.pixel_grad[i] = din[i].d;
  return out;
}

double grad_match_loss(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k) {
  return grad_match(omega, m_k, b_k, false).loss;
}

CondensationState update_condensation_model(CondensationState state, const ImageBatch& b_n, const ImageBatch& m_orig) {
  if (b_n.empty()) throw std::invalid_argument("omega update needs a non-empty current batch");
  for (const ImageBatch* b : {&b_n, &m_orig})
    for (Origin o : b->origins)
      if (o != Origin::real) {
        ++state.audit.rejected_batches;
        throw std::logic_error("condensed exemplar offered to the condensation-model update");
      }
  ParamVector g = param_grad(state.omega, b_n);
  if (!m_orig.empty()) g.axpy(1.0, param_grad(state.omega, m_orig));
  state.omega.params().axpy(-state.eta, g);
  ++state.audit.omega_updates;
  state.audit.real_samples += static_cast<long>(b_n.size() + m_orig.size());
  ++state.step_count;
  return state;
}

TermResult relationship(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k, const ImageBatch& m_rest,
                        bool want_pixel_grad) {
  single_label(m_k, "exemplar");
  single_label(b_k, "real");
  TermResult out;
  if (m_rest.empty()) {
    spdlog::warn("relationship loss: no reference set, term skipped");
    out.skipped = true;
    if (want_pixel_grad) out.pixel_grad.assign(m_k.pixels.size(), 0.0);
    return out;
  }
  const auto F = static_cast<std::size_t>(omega.feature_dim());
  const auto fm = feature_pass(omega, m_k);
  const auto fr = omega.features(m_rest);
  const auto fb = omega.features(b_k);
  const std::size_t J = m_rest.size();
  auto rho = [&](const std::vector<double>& feats, std::size_t rows) {
    std::vector<double> r(J, 0.0);
    for (std::size_t a = 0; a < rows; ++a)
      for (std::size_t j = 0; j < J; ++j) r[j] += cosine(row(feats, a, F), row(fr, j, F)) / static_cast<double>(rows);
    return r;
  };
  const auto& feat_m = fm.trace.features();
  const auto rho_m = rho(feat_m, m_k.size());
  const auto rho_b = rho(fb, b_k.size());
  for (std::size_t j = 0; j < J; ++j) out.loss += (rho_m[j] - rho_b[j]) * (rho_m[j] - rho_b[j]) / static_cast<double>(J);
  if (!want_pixel_grad) return out;

  std::vector<double> dfeat(feat_m.size(), 0.0);
  const double inv_rows = 1.0 / static_cast<double>(m_k.size());
  for (std::size_t j = 0; j < J; ++j) {
    const double dr = 2.0 * (rho_m[j] - rho_b[j]) / static_cast<double>(J);
    for (std::size_t a = 0; a < m_k.size(); ++a)
      add_cosine_grad(row(feat_m, a, F), row(fr, j, F), dr * inv_rows, {dfeat.data() + a * F, F});
  }
  out.pixel_grad = pixels_from_features(omega, fm, dfeat);
  return out;
}

double relationship_loss(const Backbone& omega, const ImageBatch& m_k, const ImageBatch& b_k, const ImageBatch& m_rest) {
  return relationship(omega, m_k, b_k, m_rest, false).loss;
}

double total_memory_loss(double l_cond, double l_rel, double l_mkcl, double beta) {
  if (beta < 0.0) throw std::invalid_argument("beta must be non-negative");
  return l_cond + l_rel + beta * l_mkcl;
}

TermResult mkcl_term(const Backbone& feature_model, const ImageBatch& m_k, const PrototypeSet& prototypes, double tau,
                     bool want_pixel_grad) {
  const int k = single_label(m_k, "exemplar");
  TermResult out;
  const auto pos = prototypes.positives(k);
  if (pos.empty()) {
    out.skipped = true;
    if (want_pixel_grad) out.pixel_grad.assign(m_k.pixels.size(), 0.0);
    return out;
  }
  const auto neg = prototypes.negatives(k);
  const auto F = static_cast<std::size_t>(feature_model.feature_dim());
  const auto fp = feature_pass(feature_model, m_k);
  const auto& feats = fp.trace.features();
  std::vector<double> dfeat(feats.size(), 0.0);
  std::vector<double> dz;
  const double inv = 1.0 / static_cast<double>(m_k.size());
  for (std::size_t i = 0; i < m_k.size(); ++i) {
    out.loss += inv * mkcl_loss(row(feats, i, F), pos, neg, tau, want_pixel_grad ? &dz : nullptr);
    if (want_pixel_grad)
      for (std::size_t d = 0; d < F; ++d) dfeat[i * F + d] = inv * dz[d];
  }
  if (want_pixel_grad) out.pixel_grad = pixels_from_features(feature_model, fp, dfeat);
  return out;
}

// ---------------------------------------------------------------------------

void seed_summary(MemoryStore& store, const ImageBatch& batch) {
  for (std::size_t i = 0; i < batch.size(); ++i) {
    if (batch.origins[i] != Origin::real) continue;
    add_summary(store, batch.image(i), batch.labels[i], Origin::condensed);
  }
}

ImageBatch memory_batch(const std::vector<StoredImage>& items, const ImageShape& shape) {
  ImageBatch out(shape);
  for (const auto& it : items) out.push_back(it.pixels, it.label, Origin::real);
  return out;
}

namespace {

ImageBatch exemplar_batch(const std::vector<CondensedExemplar>& items, const std::vector<std::size_t>& idx,
                          const ImageShape& shape) {
  ImageBatch out(shape);
  for (std::size_t i : idx) out.push_back(items[i].pixels, items[i].label, items[i].origin);
  return out;
}

}  // namespace

CondenseReport condense_exemplars(const Backbone& omega, MemoryStore& store, const ImageBatch& b_n,
                                  const MkclContext& mkcl, const CondenseOptions& opt) {
  if (opt.exemplar_lr < 0.0) throw std::invalid_argument("exemplar_lr must be non-negative");
  const bool use_mkcl = opt.beta > 0.0 && mkcl.feature_model && mkcl.prototypes;
  std::set<int> present(b_n.labels.begin(), b_n.labels.end());
  CondenseReport report;
  const std::size_t npx = store.shape.numel();

  for (int it = 0; it < std::max(1, opt.iterations); ++it) {
    CondenseReport r;
    std::vector<std::pair<std::size_t, std::vector<double>>> updates;
    for (int k : present) {
      const auto idx = store.summ_indices(k);
      if (idx.empty()) continue;
      const ImageBatch m_k = exemplar_batch(store.summ, idx, store.shape);
      const ImageBatch b_k = b_n.select_class(k);
      std::vector<double> g(m_k.pixels.size(), 0.0);
      auto add = [&](const TermResult& t, double w) {
        if (t.pixel_grad.empty()) return;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += w * t.pixel_grad[i];
      };
      if (opt.grad_match) {
        const auto t = grad_match(omega, m_k, b_k, true);
        r.l_cond += t.loss;
        add(t, 1.0);
      }
      if (opt.relationship) {
        ImageBatch rest(store.shape);
        for (const auto* part : {&store.cond, &store.summ})
          for (const auto& e : *part)
            if (e.label != k) rest.push_back(e.pixels, e.label, e.origin);
        if (!rest.empty()) {
          const auto t = relationship(omega, m_k, b_k, rest, true);
          r.l_rel += t.loss;
          add(t, 1.0);
        }
      }
      if (use_mkcl) {
        const auto t = mkcl_term(*mkcl.feature_model, m_k, *mkcl.prototypes, opt.tau, true);
        r.l_mkcl += t.loss;
        add(t, opt.beta);
      }
      for (std::size_t j = 0; j < idx.size(); ++j)
        updates.emplace_back(idx[j], std::vector<double>(g.begin() + static_cast<std::ptrdiff_t>(j * npx),
                                                         g.begin() + static_cast<std::ptrdiff_t>((j + 1) * npx)));
    }
    for (auto& [i, g] : updates) {
      auto& ex = store.summ[i];
      double sq = 0.0;
      for (std::size_t p = 0; p < npx; ++p) {
        ex.pixels[p] -= opt.exemplar_lr * g[p];
        sq += g[p] * g[p];
      }
      for (double v : ex.pixels)
        if (!std::isfinite(v)) throw std::runtime_error("exemplar pixels became non-finite");
      ++ex.opt_state.steps;
      ex.opt_state.last_grad_norm = std::sqrt(sq);
    }
    r.l_total = total_memory_loss(r.l_cond, r.l_rel, r.l_mkcl, use_mkcl ? opt.beta : 0.0);
    if (it == 0) report = r;
  }
  return report;
}

CondenseStepResult condense_step(CondensationState state, MemoryStore store, const ImageBatch& b_n,
                                 const MkclContext& mkcl, const CondenseOptions& opt) {
  CondenseReport report = condense_exemplars(state.omega, store, b_n, mkcl, opt);
  if (opt.update_omega) state = update_condensation_model(std::move(state), b_n, memory_batch(store.orig, store.shape));
  store = admit_original(std::move(store), b_n, opt.orig_cap, opt.seed);
  report.step = state.step_count;
  return {std::move(store), std::move(state), report};
}

void write_loss_trace(const std::filesystem::path& path, const std::vector<CondenseReport>& trace) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write loss trace " + path.string());
  out << "step,l_cond,l_rel,l_mkcl,l_total\n";
  out.precision(10);
  for (const auto& r : trace) out << r.step << ',' << r.l_cond << ',' << r.l_rel << ',' << r.l_mkcl << ',' << r.l_total << '\n';
}

}  // namespace fcil
