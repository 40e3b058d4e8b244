#include "fcil/fed_runtime.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <random>
#include <stdexcept>
#include <thread>

#include "fcil/network.hpp"
#include "fcil/rng.hpp"
#include "fcil/wire.hpp"

namespace fcil {

Method parse_method(std::string_view name) {
  if (name == "ecoral") return Method::ecoral;
  if (name == "replay") return Method::replay;
  if (name == "lwf") return Method::lwf;
  if (name == "ewc") return Method::ewc;
  throw std::invalid_argument("unknown method: " + std::string(name));
}

std::string to_string(Method m) {
  switch (m) {
    case Method::ecoral: return "ecoral";
    case Method::replay: return "replay";
    case Method::lwf: return "lwf";
    case Method::ewc: return "ewc";
  }
  return "?";
}

std::string Components::label() const {
  std::string out;
  auto add = [&](bool on, const char* tag) {
    if (!on) return;
    if (!out.empty()) out += '+';
    out += tag;
  };
  add(adjustable_memory, "A");
  add(grad_match, "G");
  add(relationship, "F");
  add(compensation, "C");
  add(contrastive, "K");
  return out.empty() ? "none" : out;
}

void StrategyConfig::validate() const {
  auto positive = [](double v, const char* name) {
    if (!(v > 0.0)) throw std::invalid_argument(std::string(name) + " must be positive");
  };
  auto non_negative = [](double v, const char* name) {
    if (!(v >= 0.0)) throw std::invalid_argument(std::string(name) + " must be non-negative");
  };
  positive(lr, "lr");
  non_negative(lambda_kd, "lambda");
  non_negative(lambda_mem, "lambda_mem");
  positive(kd_temperature, "kd_temperature");
  non_negative(ewc_factor, "ewc_factor");
  non_negative(beta, "beta");
  positive(tau, "tau");
  positive(eta, "eta");
  non_negative(exemplar_lr, "exemplar_lr");
  non_negative(vae_lr, "vae_lr");
  non_negative(beta_vae, "beta_vae");
  if (local_epochs < 1) throw std::invalid_argument("E must be at least 1");
  if (batch_size < 1) throw std::invalid_argument("batch_size must be at least 1");
  if (memory_batch < 0) throw std::invalid_argument("memory_batch must be non-negative");
  if (condense_iterations < 1) throw std::invalid_argument("condense_iterations must be at least 1");
  if (generated_per_class < 0) throw std::invalid_argument("generated_per_class must be non-negative");
}

// ---------------------------------------------------------------------------

KdResult kd_loss(std::span<const double> student, int student_classes, std::span<const double> teacher, int old_classes,
                 double temperature, std::span<const int> labels, double lambda, std::vector<double>* dstudent) {
  if (temperature <= 0.0) throw std::invalid_argument("temperature must be positive");
  if (old_classes > student_classes) throw std::invalid_argument("teacher has more classes than the student");
  const int n = static_cast<int>(labels.size());
  if (teacher.size() != static_cast<std::size_t>(n) * static_cast<std::size_t>(old_classes))
    throw std::invalid_argument("teacher logits shape mismatch");
  KdResult r;
  r.ce = net::softmax_xent<double>(student, n, student_classes, labels, dstudent);
  if (old_classes == 0 || n == 0) {
    r.total = r.ce;
    return r;
  }
  const double T = temperature, inv_n = 1.0 / n;
  std::vector<double> pt(static_cast<std::size_t>(old_classes)), ps(pt.size());
  auto soft = [&](const double* z, std::vector<double>& p) {
    double mx = z[0];
    for (int j = 1; j < old_classes; ++j) mx = std::max(mx, z[j]);
    double sum = 0.0;
    for (int j = 0; j < old_classes; ++j) sum += p[static_cast<std::size_t>(j)] = std::exp((z[j] - mx) / T);
    for (double& v : p) v /= sum;
  };
  for (int s = 0; s < n; ++s) {
    soft(teacher.data() + static_cast<std::ptrdiff_t>(s) * old_classes, pt);
    soft(student.data() + static_cast<std::ptrdiff_t>(s) * student_classes, ps);
    double kl = 0.0;
    for (std::size_t j = 0; j < pt.size(); ++j)
      if (pt[j] > 0.0) kl += pt[j] * (std::log(pt[j]) - std::log(ps[j]));
    r.kl += T * T * kl * inv_n;
    if (dstudent)
      for (int j = 0; j < old_classes; ++j)
        (*dstudent)[static_cast<std::size_t>(s * student_classes + j)] +=
            lambda * T * (ps[static_cast<std::size_t>(j)] - pt[static_cast<std::size_t>(j)]) * inv_n;
  }
  r.total = r.ce + lambda * r.kl;
  return r;
}

double ewc_penalty(const ParamVector& theta, const EwcState& ewc, double factor, ParamVector* grad) {
  if (!ewc.active) return 0.0;
  if (theta.tensor_count() != ewc.anchor.tensor_count()) throw std::invalid_argument("EWC anchor layout mismatch");
  double total = 0.0;
  for (std::size_t l = 0; l < theta.tensor_count(); ++l) {
    const auto& th = theta[l].values;
    const auto& an = ewc.anchor[l].values;
    const auto& fi = ewc.fisher[l].values;
    const std::size_t m = std::min(th.size(), an.size());
    for (std::size_t i = 0; i < m; ++i) {
      const double d = th[i] - an[i];
      total += factor * fi[i] * d * d;
      if (grad) (*grad)[l].values[i] += 2.0 * factor * fi[i] * d;
    }
  }
  return total;
}

void ewc_proximal_step(ParamVector& theta, const EwcState& ewc, double factor, double lr) {
  if (!ewc.active) return;
  if (theta.tensor_count() != ewc.anchor.tensor_count()) throw std::invalid_argument("EWC anchor layout mismatch");
  for (std::size_t l = 0; l < theta.tensor_count(); ++l) {
    auto& th = theta[l].values;
    const auto& an = ewc.anchor[l].values;
    const auto& fi = ewc.fisher[l].values;
    const std::size_t m = std::min(th.size(), an.size());
    for (std::size_t i = 0; i < m; ++i) {
      const double k = 2.0 * lr * factor * fi[i];
      th[i] = (th[i] + k * an[i]) / (1.0 + k);
    }
  }
}

ParamVector diagonal_fisher(const Backbone& model, const ImageBatch& batch) {
  ParamVector fisher = model.params().zeros_like();
  if (batch.empty()) return fisher;
  const double inv = 1.0 / static_cast<double>(batch.size());
  for (std::size_t i = 0; i < batch.size(); ++i) {
    ImageBatch one(batch.shape);
    one.push_back(batch.image(i), batch.labels[i], batch.origins[i]);
    const auto g = grad(model, GradRequest{GradTarget::params, CrossEntropyLoss{}, one}).param_grad;
    for (std::size_t l = 0; l < g.tensor_count(); ++l)
      for (std::size_t j = 0; j < g[l].values.size(); ++j) fisher[l].values[j] += inv * g[l].values[j] * g[l].values[j];
  }
  return fisher;
}

EwcState grow_ewc(const EwcState& ewc, const ParamVector& theta) {
  if (!ewc.active) return ewc;
  EwcState out = ewc;
  for (std::size_t l = 0; l < theta.tensor_count(); ++l) {
    for (ParamVector* pv : {&out.anchor, &out.fisher}) {
      auto& t = (*pv)[l];
      if (t.shape == theta[l].shape) continue;
      // Head tensors grow by whole rows; pad at the end.
      t.shape = theta[l].shape;
      t.values.resize(theta[l].values.size(), 0.0);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

PrototypeSet client_prototypes(const SharedVAE& vae, const Backbone& feature_model, const ImageBatch& local_data,
                               int generated_per_class, std::uint64_t seed) {
  FeatureBank bank;
  bank.dim = vae.feature_dim;
  for (int k : vae.classes())
    for (auto& f : generate_features(vae, k, generated_per_class, derive_seed(seed, {static_cast<std::uint64_t>(k)})))
      bank.add(k, std::move(f));
  if (!local_data.empty()) bank.add_rows(feature_model.features(local_data), local_data.labels);
  return build_prototypes(bank);
}

namespace {

struct BatchPlan {
  std::vector<std::vector<std::size_t>> batches;
};

BatchPlan plan_epoch(std::size_t n, int batch_size, Rng& rng) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  BatchPlan p;
  for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size))
    p.batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                           order.begin() + static_cast<std::ptrdiff_t>(std::min(n, i + static_cast<std::size_t>(batch_size))));
  return p;
}

ImageBatch subset(const ImageBatch& data, const std::vector<std::size_t>& idx) {
  ImageBatch out(data.shape);
  for (std::size_t i : idx) out.push_back(data.image(i), data.labels[i], data.origins[i]);
  return out;
}

// Accumulates scale * d(loss)/d(theta) for one batch and returns the loss
// parts. KD applies when a teacher is given.
KdResult accumulate_classifier_grad(const Backbone& model, const ImageBatch& batch, const Backbone* teacher,
                                    const StrategyConfig& cfg, double scale, ParamVector& g) {
  const auto L = net::make_layout(model.spec(), model.head_classes());
  const auto ptrs = model.params().data_pointers();
  const int n = static_cast<int>(batch.size());
  auto tr = net::forward<double>(L, ptrs, batch.pixels, n);
  std::vector<double> dlogits;
  KdResult r;
  if (teacher) {
    const auto tl = teacher->logits(batch);
    r = kd_loss(tr.logits, model.head_classes(), tl, teacher->head_classes(), cfg.kd_temperature, batch.labels,
                cfg.lambda_kd, &dlogits);
  } else {
    r.ce = r.total = net::softmax_xent<double>(tr.logits, n, model.head_classes(), batch.labels, &dlogits);
  }
  if (scale != 1.0)
    for (double& d : dlogits) d *= scale;
  auto gptrs = g.data_pointers();
  net::backward<double>(L, ptrs, tr, dlogits, {}, gptrs, nullptr);
  return r;
}

}  // namespace

ClientUpdate client_local_train(const GlobalModelState& global, const ImageBatch& local_data, ClientState& client,
                                const StrategyConfig& cfg, const TaskContext& ctx, std::uint64_t seed) {
  const bool has_data = !local_data.empty();
  const bool memory_only = !has_data && cfg.include_old_group && cfg.uses_memory() && client.store.condensed_size() > 0;
  if (!has_data && !memory_only) throw SkipClient("client " + std::to_string(client.id) + " has no data to train on");
  if (global.classifier.head_classes() != ctx.classes_seen)
    throw std::logic_error("global head width does not match the classes seen");

  Backbone model = global.classifier;
  const Backbone* teacher = cfg.uses_kd() && global.teacher ? &*global.teacher : nullptr;
  ClientUpdate up;
  up.client_id = client.id;
  up.round = ctx.round;
  up.task = ctx.task;
  LocalReport& rep = up.report;

  const bool condense = cfg.uses_condensation() && has_data;
  if (condense && client.cond_task != ctx.task) {
    client.cond = init_condensation_state(ctx.omega_spec, ctx.classes_seen, cfg.eta, ctx.omega_seed);
    client.cond_task = ctx.task;
  }

  PrototypeSet prototypes;
  bool prototypes_ready = false;
  if (cfg.uses_vae() && global.vae && has_data) {
    SharedVAE vae = *global.vae;
    const auto feats = global.classifier.features(local_data);
    const auto F = static_cast<std::size_t>(global.classifier.feature_dim());
    Rng rng(derive_seed(seed, Stream::vae_train));
    const auto plan = plan_epoch(local_data.size(), cfg.batch_size, rng);
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      std::vector<double> rows;
      std::vector<int> labels;
      for (std::size_t i : plan.batches[b]) {
        rows.insert(rows.end(), feats.begin() + static_cast<std::ptrdiff_t>(i * F),
                    feats.begin() + static_cast<std::ptrdiff_t>((i + 1) * F));
        labels.push_back(local_data.labels[i]);
      }
      auto step = vae_train_step(std::move(vae), rows, labels, cfg.vae_lr, derive_seed(seed, Stream::vae_train, {b}));
      vae = std::move(step.vae);
      rep.vae_total = step.report.total;
    }
    up.vae_classes.insert(local_data.labels.begin(), local_data.labels.end());
    if (cfg.components.contrastive && cfg.beta > 0.0) {
      prototypes = client_prototypes(vae, global.classifier, local_data, cfg.generated_per_class,
                                     derive_seed(seed, Stream::vae_generate));
      prototypes_ready = true;
    }
    up.vae = std::move(vae);
  }

  CondenseOptions copt;
  copt.grad_match = cfg.components.grad_match;
  copt.relationship = cfg.components.relationship;
  copt.beta = cfg.components.contrastive ? cfg.beta : 0.0;
  copt.tau = cfg.tau;
  copt.exemplar_lr = cfg.exemplar_lr;
  copt.iterations = cfg.condense_iterations;
  copt.orig_cap = ctx.orig_cap;
  copt.seed = derive_seed(seed, Stream::reservoir);
  const MkclContext mkcl{prototypes_ready ? &global.classifier : nullptr, prototypes_ready ? &prototypes : nullptr};
  const bool any_condense_term = copt.grad_match || copt.relationship || (prototypes_ready && copt.beta > 0.0);

  Rng batch_rng(derive_seed(seed, Stream::local_batches));
  const std::size_t steps_source = has_data ? local_data.size() : client.store.condensed_size();
  for (int e = 0; e < cfg.local_epochs; ++e) {
    const auto plan = plan_epoch(steps_source, cfg.batch_size, batch_rng);
    for (std::size_t b = 0; b < plan.batches.size(); ++b) {
      ParamVector g = model.params().zeros_like();
      const std::uint64_t replay_seed =
          derive_seed(seed, Stream::replay, {static_cast<std::uint64_t>(e), static_cast<std::uint64_t>(b)});
      ImageBatch b_n(local_data.shape);
      if (has_data) {
        b_n = subset(local_data, plan.batches[b]);
        const auto r = accumulate_classifier_grad(model, b_n, teacher, cfg, 1.0, g);
        rep.ce += r.ce;
        rep.kd += r.kl;
      }
      if (cfg.uses_memory()) {
        const int bm = has_data ? cfg.memory_batch : cfg.batch_size;
        const ImageBatch b_m = sample_replay(client.store, bm, replay_seed);
        if (!b_m.empty()) {
          const auto r = accumulate_classifier_grad(model, b_m, nullptr, cfg, has_data ? cfg.lambda_mem : 1.0, g);
          rep.memory += r.ce;
        }
      }
      model.params().axpy(-cfg.lr, g);
      if (cfg.method == Method::ewc) {
        ewc_proximal_step(model.params(), global.ewc, cfg.ewc_factor, cfg.lr);
        rep.ewc += ewc_penalty(model.params(), global.ewc, cfg.ewc_factor);
      }
      ++rep.batches;

      if (!has_data) continue;
      if (condense) {
        seed_summary(client.store, b_n);
        // With every memory term off the exemplars stay copies of real images
        // and omega has no consumer.
        if (any_condense_term) {
          auto res = condense_step(std::move(*client.cond), std::move(client.store), b_n, mkcl, copt);
          client.store = std::move(res.store);
          client.cond = std::move(res.state);
          client.trace.push_back(res.report);
          rep.last_condense = res.report;
        }
      } else if (cfg.method == Method::replay) {
        client.store = reservoir_summary(std::move(client.store), b_n, replay_seed);
      }
    }
  }
  if (!model.params().all_finite()) throw std::runtime_error("local training diverged on client " + std::to_string(client.id));
  if (rep.batches > 0) {
    const double inv = 1.0 / static_cast<double>(rep.batches);
    rep.ce *= inv;
    rep.kd *= inv;
    rep.memory *= inv;
    rep.ewc *= inv;
  }
  if (cfg.method == Method::ewc && ctx.final_round && has_data) up.fisher = diagonal_fisher(model, local_data);
  up.sample_count = has_data ? local_data.size() : client.store.condensed_size();
  up.params = std::move(model.params());
  if (condense) client.audit = client.cond->audit;
  return up;
}

// ---------------------------------------------------------------------------

ParamVector fedavg_aggregate(const std::vector<ClientUpdate>& updates) {
  if (updates.empty()) throw std::invalid_argument("fedavg_aggregate needs at least one update");
  double total = 0.0;
  for (const auto& u : updates) {
    if (!u.params.same_layout(updates.front().params)) throw std::invalid_argument("client updates have different shapes");
    if (u.sample_count == 0) throw std::invalid_argument("client update with zero samples");
    total += static_cast<double>(u.sample_count);
  }
  if (updates.size() == 1) return updates.front().params;
  ParamVector out = updates.front().params.zeros_like();
  for (const auto& u : updates) out.axpy(static_cast<double>(u.sample_count) / total, u.params);
  return out;
}

SharedVAE aggregate_vae(const std::vector<VaeContribution>& contributions) {
  if (contributions.empty()) throw std::invalid_argument("aggregate_vae needs at least one contribution");
  const SharedVAE& first = *contributions.front().vae;
  double total = 0.0;
  for (const auto& c : contributions) {
    if (!c.vae || !(c.weight > 0.0)) throw std::invalid_argument("VAE contribution needs a model and a positive weight");
    if (!c.vae->encoder.same_layout(first.encoder) || !c.vae->decoder.same_layout(first.decoder))
      throw std::invalid_argument("VAE contributions have different shapes");
    total += c.weight;
  }
  if (contributions.size() == 1) return first;
  SharedVAE out = first;
  out.encoder = first.encoder.zeros_like();
  out.decoder = first.decoder.zeros_like();
  for (const auto& c : contributions) {
    out.encoder.axpy(c.weight / total, c.vae->encoder);
    out.decoder.axpy(c.weight / total, c.vae->decoder);
  }
  std::set<int> all;
  for (const auto& c : contributions)
    for (const auto& [k, e] : c.vae->class_embedding) all.insert(k);
  out.class_embedding.clear();
  for (int k : all) {
    std::vector<double> acc;
    double w = 0.0;
    for (const auto& c : contributions) {
      auto it = c.vae->class_embedding.find(k);
      if (it == c.vae->class_embedding.end()) continue;
      if (!c.classes.empty() && !c.classes.contains(k)) continue;
      if (acc.empty()) acc.assign(it->second.size(), 0.0);
      for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += c.weight * it->second[j];
      w += c.weight;
    }
    if (w == 0.0) {
      // Nobody trained k: keep the registered vector from the first holder.
      for (const auto& c : contributions)
        if (auto it = c.vae->class_embedding.find(k); it != c.vae->class_embedding.end()) {
          out.class_embedding[k] = it->second;
          break;
        }
      continue;
    }
    for (double& v : acc) v /= w;
    out.class_embedding[k] = std::move(acc);
  }
  return out;
}

namespace {

void append_prefixed(std::vector<NamedTensor>& out, const ParamVector& pv, const std::string& prefix) {
  for (const auto& t : pv.layers()) out.push_back({prefix + t.name, t.shape, t.values});
}

ParamVector take_prefixed(const std::vector<NamedTensor>& tensors, const std::string& prefix) {
  std::vector<NamedTensor> out;
  for (const auto& t : tensors)
    if (t.name.rfind(prefix, 0) == 0) out.push_back({t.name.substr(prefix.size()), t.shape, t.values});
  return ParamVector(std::move(out));
}

}  // namespace

std::string encode_update(const ClientUpdate& u) {
  nlohmann::json h = {{"round", u.round}, {"task", u.task}, {"client_id", u.client_id}, {"n_l", u.sample_count}};
  h["report"] = {{"ce", u.report.ce},         {"kd", u.report.kd},   {"memory", u.report.memory},
                 {"ewc", u.report.ewc},       {"vae", u.report.vae_total}, {"batches", u.report.batches},
                 {"l_cond", u.report.last_condense.l_cond}, {"l_rel", u.report.last_condense.l_rel},
                 {"l_mkcl", u.report.last_condense.l_mkcl}};
  std::vector<NamedTensor> tensors;
  append_prefixed(tensors, u.params, "classifier/");
  if (u.vae) {
    const auto& v = *u.vae;
    h["vae"] = {{"feature_dim", v.feature_dim}, {"hidden_dim", v.hidden_dim}, {"latent_dim", v.latent_dim},
                {"embed_dim", v.embed_dim},     {"beta_vae", v.beta_vae},     {"embed_seed", v.embed_seed},
                {"classes", u.vae_classes}};
    append_prefixed(tensors, v.encoder, "vae/");
    append_prefixed(tensors, v.decoder, "vae/");
    for (const auto& [k, e] : v.class_embedding)
      tensors.push_back({"vae.emb/" + std::to_string(k), {e.size()}, e});
  }
  if (u.fisher) append_prefixed(tensors, *u.fisher, "fisher/");
  return wire::frame(wire::encode_tensors(tensors, h));
}

ClientUpdate decode_update(std::string_view bytes) {
  const auto dec = wire::decode_tensors(wire::unframe(bytes));
  const auto& h = dec.header;
  ClientUpdate u;
  u.round = h.at("round").get<int>();
  u.task = h.at("task").get<int>();
  u.client_id = h.at("client_id").get<int>();
  u.sample_count = h.at("n_l").get<std::size_t>();
  const auto& r = h.at("report");
  u.report.ce = r.at("ce").get<double>();
  u.report.kd = r.at("kd").get<double>();
  u.report.memory = r.at("memory").get<double>();
  u.report.ewc = r.at("ewc").get<double>();
  u.report.vae_total = r.at("vae").get<double>();
  u.report.batches = r.at("batches").get<long>();
  u.report.last_condense.l_cond = r.at("l_cond").get<double>();
  u.report.last_condense.l_rel = r.at("l_rel").get<double>();
  u.report.last_condense.l_mkcl = r.at("l_mkcl").get<double>();
  u.params = take_prefixed(dec.tensors, "classifier/");
  if (h.contains("vae")) {
    const auto& v = h.at("vae");
    SharedVAE vae;
    vae.feature_dim = v.at("feature_dim").get<int>();
    vae.hidden_dim = v.at("hidden_dim").get<int>();
    vae.latent_dim = v.at("latent_dim").get<int>();
    vae.embed_dim = v.at("embed_dim").get<int>();
    vae.beta_vae = v.at("beta_vae").get<double>();
    vae.embed_seed = v.at("embed_seed").get<std::uint64_t>();
    const auto all = take_prefixed(dec.tensors, "vae/");
    std::vector<NamedTensor> enc, decd;
    for (const auto& t : all.layers()) (t.name.rfind("enc.", 0) == 0 ? enc : decd).push_back(t);
    vae.encoder = ParamVector(std::move(enc));
    vae.decoder = ParamVector(std::move(decd));
    const auto emb = take_prefixed(dec.tensors, "vae.emb/");
    for (const auto& t : emb.layers())
      vae.class_embedding[std::stoi(t.name)] = t.values;
    u.vae_classes = v.at("classes").get<std::set<int>>();
    u.vae = std::move(vae);
  }
  auto fisher = take_prefixed(dec.tensors, "fisher/");
  if (fisher.tensor_count() > 0) u.fisher = std::move(fisher);
  return u;
}

// ---------------------------------------------------------------------------

double symmetric_kl(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("histograms differ in length");
  const double sp = std::accumulate(p.begin(), p.end(), 0.0), sq = std::accumulate(q.begin(), q.end(), 0.0);
  if (!(sp > 0.0) || !(sq > 0.0)) throw std::invalid_argument("histogram has no mass");
  auto kl = [&](std::span<const double> a, double sa, std::span<const double> b, double sb) {
    double acc = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
      const double pa = a[i] / sa, pb = b[i] / sb;
      if (pa == 0.0) continue;
      if (pb == 0.0) return kKlSentinel;
      acc += pa * std::log(pa / pb);
    }
    return std::min(acc, kKlSentinel);
  };
  return std::max(kl(p, sp, q, sq), kl(q, sq, p, sp));
}

namespace {

double fedavg_loss(const Backbone& global, const std::vector<ImageBatch>& parts, const ImageBatch& all,
                   const HeterogeneityOptions& opt) {
  std::vector<ClientUpdate> ups;
  for (const auto& part : parts) {
    if (part.empty()) continue;
    Backbone m = global;
    for (int s = 0; s < opt.local_steps; ++s) {
      auto g = grad(m, GradRequest{GradTarget::params, CrossEntropyLoss{}, part}).param_grad;
      m.params().axpy(-opt.lr, g);
    }
    ClientUpdate u;
    u.sample_count = part.size();
    u.params = m.params();
    ups.push_back(std::move(u));
  }
  Backbone agg = global;
  agg.params() = fedavg_aggregate(ups);
  return cross_entropy(agg.logits(all), static_cast<std::size_t>(agg.head_classes()), all.labels);
}

}  // namespace

HeterogeneityReport heterogeneity_report(const std::map<int, MemoryStore>& banks, int class_count,
                                         const Backbone& global, const HeterogeneityOptions& opt) {
  HeterogeneityReport rep;
  std::vector<std::vector<double>> hists;
  std::vector<ImageBatch> parts;
  ImageBatch all(global.spec().input);
  for (const auto& [id, store] : banks) {
    if (store.condensed_size() == 0) continue;
    std::vector<double> h(static_cast<std::size_t>(class_count), 0.0);
    ImageBatch part(store.shape);
    for (const auto* p : {&store.cond, &store.summ})
      for (const auto& e : *p) {
        h.at(static_cast<std::size_t>(e.label)) += 1.0;
        part.push_back(e.pixels, e.label, e.origin);
      }
    rep.clients.push_back(id);
    hists.push_back(std::move(h));
    all.append(part);
    parts.push_back(std::move(part));
  }
  if (rep.clients.size() < 2) throw std::invalid_argument("heterogeneity report needs at least two clients with exemplars");
  const std::size_t n = rep.clients.size();
  rep.pairwise_kl.assign(n, std::vector<double>(n, 0.0));
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      rep.pairwise_kl[i][j] = rep.pairwise_kl[j][i] = symmetric_kl(hists[i], hists[j]);
      sum += rep.pairwise_kl[i][j];
    }
  rep.mean_kl = sum / static_cast<double>(n * (n - 1) / 2);

  std::vector<std::size_t> perm(all.size());
  std::iota(perm.begin(), perm.end(), 0);
  Rng rng(derive_seed(opt.seed, Stream::heterogeneity));
  std::shuffle(perm.begin(), perm.end(), rng);
  std::vector<ImageBatch> iid;
  std::size_t pos = 0;
  for (const auto& part : parts) {
    ImageBatch b(all.shape);
    for (std::size_t i = 0; i < part.size(); ++i, ++pos) b.push_back(all.image(perm[pos]), all.labels[perm[pos]], all.origins[perm[pos]]);
    iid.push_back(std::move(b));
  }
  rep.delta_loss = fedavg_loss(global, parts, all, opt) - fedavg_loss(global, iid, all, opt);
  return rep;
}

int worker_threads() {
  if (const char* env = std::getenv("FCIL_THREADS")) {
    try {
      const int v = std::stoi(env);
      if (v >= 1) return v;
    } catch (const std::exception&) {
    }
  }
  return static_cast<int>(std::max(1u, std::thread::hardware_concurrency()));
}

}  // namespace fcil
