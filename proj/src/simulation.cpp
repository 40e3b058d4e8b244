#include "fcil/simulation.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "fcil/parallel.hpp"
#include "fcil/rng.hpp"

namespace fcil {

void SimulationConfig::validate(const DatasetSplit& data) const {
  if (tasks < 1) throw std::invalid_argument("T must be at least 1");
  if (classes_per_task < 1) throw std::invalid_argument("classes_per_task must be at least 1");
  if (tasks * classes_per_task > data.train.class_count)
    throw std::invalid_argument("T x classes_per_task exceeds the dataset's class count");
  if (clients_initial < 1) throw std::invalid_argument("clients_initial must be at least 1");
  if (clients_increment < 0) throw std::invalid_argument("clients_increment must be non-negative");
  if (round_clients < 1) throw std::invalid_argument("round_clients must be at least 1");
  if (!(transition_fraction >= 0.0 && transition_fraction <= 1.0))
    throw std::invalid_argument("transition_fraction must lie in [0, 1]");
  if (!(sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  if (memory_budget < tasks * classes_per_task && strategy.uses_memory())
    throw std::invalid_argument("M must hold at least one exemplar per class");
  if (orig_cap < 0 || orig_cap > memory_budget) throw std::invalid_argument("orig_cap must lie in [0, M]");
  if (rounds < 1) throw std::invalid_argument("R must be at least 1");
  if (baseline_inits < 1) throw std::invalid_argument("baseline_inits must be at least 1");
  if (!(arch.input == data.train.shape)) throw std::invalid_argument("architecture input does not match the dataset");
  arch.validate();
  strategy.validate();
}

DatasetSplit relabel_for_schedule(const DatasetSplit& data, const TaskSchedule& schedule) {
  std::map<int, int> to_head;
  for (int k : schedule.classes_through(schedule.task_count() - 1)) to_head.emplace(k, static_cast<int>(to_head.size()));
  auto remap = [&](const Dataset& d) {
    Dataset out;
    out.name = d.name;
    out.shape = d.shape;
    out.class_count = static_cast<int>(to_head.size());
    for (std::size_t i = 0; i < d.size(); ++i)
      if (auto it = to_head.find(d.labels[i]); it != to_head.end()) out.push_back(d.image(i), it->second);
    return out;
  };
  return {remap(data.train), remap(data.test)};
}

namespace {

std::vector<int> head_range(int first, int count) {
  std::vector<int> out(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) out[static_cast<std::size_t>(i)] = first + i;
  return out;
}

double task_accuracy(const Backbone& model, const Dataset& test, const std::vector<int>& classes) {
  const auto idx = test.indices_of_classes(classes);
  return accuracy(model, test.gather(idx));
}

double norm(const ParamVector& p) { return std::sqrt(p.squared_norm()); }

}  // namespace

TaskRunOutput run_task(GlobalModelState& global, std::map<int, ClientState>& clients, const TaskRunInput& in,
                       const StrategyConfig& st) {
  TaskRunOutput out;
  TaskContext ctx = in.ctx;
  const int t = ctx.task;
  const std::uint64_t seed = in.seed;
  for (int r = 0; r < in.rounds; ++r) {
    global.round = r;
    ctx.round = r;
    ctx.final_round = r == in.rounds - 1;
    const auto participants =
        sample_round_clients(*in.groups, in.round_clients,
                             derive_seed(seed, Stream::round_sampling, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(r)}),
                             st.include_old_group);
    std::vector<ClientState*> states;
    for (int id : participants) states.push_back(&clients.at(id));
    std::vector<std::optional<std::string>> messages(participants.size());
    parallel_for(participants.size(), in.threads, [&](std::size_t i) {
      ClientState& c = *states[i];
      const ImageBatch local = in.train->gather(in.partition->indices(t, c.id));
      const std::uint64_t cseed = derive_seed(seed, {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(r),
                                                      static_cast<std::uint64_t>(c.id), 0x6c6f63ULL});
      try {
        messages[i] = encode_update(client_local_train(global, local, c, st, ctx, cseed));
      } catch (const SkipClient& e) {
        spdlog::debug("{}", e.what());
      }
    });

    std::vector<ClientUpdate> updates;
    RoundReport rep;
    rep.task = t;
    rep.round = r;
    for (const auto& m : messages) {
      if (!m) continue;
      rep.message_bytes += m->size();
      updates.push_back(decode_update(*m));
    }
    if (updates.empty()) {
      spdlog::warn("task {} round {}: no client produced an update", t, r);
      continue;
    }
    global.classifier.params() = fedavg_aggregate(updates);
    if (global.vae && (st.vae_every_round || ctx.final_round)) {
      std::vector<VaeContribution> contribs;
      for (const auto& u : updates)
        if (u.vae) contribs.push_back({&*u.vae, static_cast<double>(u.sample_count), u.vae_classes});
      if (!contribs.empty()) {
        SharedVAE next = aggregate_vae(contribs);
        for (const auto& [k, e] : global.vae->class_embedding)
          if (!next.knows(k)) next.class_embedding[k] = e;
        global.vae = std::move(next);
      }
    }

    const double inv = 1.0 / static_cast<double>(updates.size());
    for (const auto& u : updates) {
      rep.participants.push_back(u.client_id);
      rep.ce += inv * u.report.ce;
      rep.kd += inv * u.report.kd;
      rep.memory += inv * u.report.memory;
      rep.ewc += inv * u.report.ewc;
      rep.vae += inv * u.report.vae_total;
      rep.l_cond += inv * u.report.last_condense.l_cond;
      rep.l_rel += inv * u.report.last_condense.l_rel;
      rep.l_mkcl += inv * u.report.last_condense.l_mkcl;
    }
    rep.global_norm = norm(global.classifier.params());
    if (global.vae) rep.vae_norm = std::sqrt(global.vae->encoder.squared_norm() + global.vae->decoder.squared_norm());
    spdlog::debug("task {} round {}: clients={} ce={:.4f} kd={:.4f} mem={:.4f} l_cond={:.4f}", t, r, updates.size(), rep.ce,
                  rep.kd, rep.memory, rep.l_cond);
    out.rounds.push_back(std::move(rep));
    if (ctx.final_round) out.final_updates = std::move(updates);
  }
  return out;
}

SimulationResult run_simulation(const DatasetSplit& raw, const SimulationConfig& cfg) {
  cfg.validate(raw);
  const std::uint64_t seed = cfg.seed;
  const StrategyConfig& st = cfg.strategy;
  const int T = cfg.tasks, cpt = cfg.classes_per_task;
  const int total_classes = T * cpt;
  const int threads = cfg.threads > 0 ? cfg.threads : worker_threads();

  SimulationResult res;
  res.schedule = build_task_schedule(raw.train.class_count, T, cpt, derive_seed(seed, Stream::schedule));
  const DatasetSplit data = relabel_for_schedule(raw, res.schedule);
  res.matrix.test_sizes.resize(static_cast<std::size_t>(T));
  res.matrix.pre.resize(static_cast<std::size_t>(T));
  res.matrix.baseline.resize(static_cast<std::size_t>(T));
  for (int t = 0; t < T; ++t)
    res.matrix.test_sizes[static_cast<std::size_t>(t)] = data.test.indices_of_classes(head_range(t * cpt, cpt)).size();

  ClientPartition partition;
  partition.sigma = cfg.sigma;
  std::optional<ClientGroupAssignment> groups;
  std::map<int, ClientState> clients;
  GlobalModelState global;

  for (int t = 0; t < T; ++t) {
    const auto task_classes = head_range(t * cpt, cpt);
    const int seen = (t + 1) * cpt;
    global.task = t;

    groups = advance_client_groups(groups, t, t == 0 ? cfg.clients_initial : cfg.clients_increment,
                                   cfg.transition_fraction, derive_seed(seed, Stream::groups, {static_cast<std::uint64_t>(t)}));
    const auto train_idx = data.train.indices_of_classes(task_classes);
    std::vector<int> train_labels;
    for (std::size_t i : train_idx) train_labels.push_back(data.train.labels[i]);
    const auto holders = groups->with_current_data();
    if (!holders.empty())
      partition.add(t, dirichlet_partition(train_idx, train_labels, holders, cfg.sigma,
                                           derive_seed(seed, Stream::partition, {static_cast<std::uint64_t>(t)})));
    for (int id : groups->all())
      if (!clients.contains(id)) clients.emplace(id, ClientState{id, MemoryStore(cfg.memory_budget, data.train.shape), {}, -1, {}, {}});

    // Head growth and teacher snapshot.
    if (t == 0) {
      global.classifier = init_backbone(cfg.arch, seen, derive_seed(seed, Stream::classifier_init));
    } else {
      global.teacher = global.classifier;
      global.classifier = expand_head(global.classifier, cpt, derive_seed(seed, Stream::head_growth));
      global.ewc = grow_ewc(global.ewc, global.classifier.params());
    }

    // Memory quotas.
    int quota = cfg.memory_budget / total_classes;
    for (auto& [id, c] : clients) {
      if (st.method == Method::ecoral && st.components.adjustable_memory) {
        c.store = rebalance_quota(std::move(c.store), seen);
        quota = c.store.quota_per_class;
      } else if (st.uses_memory()) {
        c.store = set_fixed_quota(std::move(c.store), std::max(1, cfg.memory_budget / total_classes));
      }
    }
    const int orig_cap = cfg.orig_cap > 0 ? cfg.orig_cap : std::min(cfg.memory_budget, 2 * quota * cpt);

    // Shared-VAE: created once, new classes registered by the server.
    if (st.uses_vae()) {
      if (!global.vae)
        global.vae = init_shared_vae(global.classifier.feature_dim(), st.vae_hidden, st.vae_latent, st.vae_embed,
                                     st.beta_vae, derive_seed(seed, Stream::vae_init));
      for (int k : task_classes) register_class(*global.vae, k);
    }

    // Pre-training accuracy and random-init baseline for forward transfer.
    res.matrix.pre[static_cast<std::size_t>(t)] = task_accuracy(global.classifier, data.test, task_classes);
    double base = 0.0;
    for (int i = 0; i < cfg.baseline_inits; ++i)
      base += task_accuracy(init_backbone(cfg.arch, seen, derive_seed(seed, Stream::baseline_init,
                                                                      {static_cast<std::uint64_t>(t), static_cast<std::uint64_t>(i)})),
                            data.test, task_classes);
    res.matrix.baseline[static_cast<std::size_t>(t)] = base / cfg.baseline_inits;

    TaskContext ctx;
    ctx.task = t;
    ctx.classes_seen = seen;
    ctx.orig_cap = orig_cap;
    ctx.omega_spec = cfg.arch;
    ctx.omega_seed = derive_seed(seed, Stream::omega_init, {static_cast<std::uint64_t>(t)});

    TaskRunInput in{&data.train, &partition, &*groups, ctx, cfg.rounds, cfg.round_clients, threads, seed};
    auto out = run_task(global, clients, in, st);
    std::vector<ClientUpdate> final_updates = std::move(out.final_updates);
    for (auto& r : out.rounds) res.rounds.push_back(std::move(r));

    // Evaluation row after finishing task t.
    std::vector<double> row;
    for (int j = 0; j <= t; ++j) row.push_back(task_accuracy(global.classifier, data.test, head_range(j * cpt, cpt)));
    res.matrix.rows.push_back(std::move(row));

    if (st.method == Method::ewc) {
      ParamVector fisher = global.classifier.params().zeros_like();
      double total = 0.0;
      for (const auto& u : final_updates)
        if (u.fisher) total += static_cast<double>(u.sample_count);
      for (const auto& u : final_updates)
        if (u.fisher) fisher.axpy(static_cast<double>(u.sample_count) / total, *u.fisher);
      if (global.ewc.active) fisher.axpy(1.0, global.ewc.fisher);
      global.ewc = EwcState{true, global.classifier.params(), std::move(fisher)};
    }

    for (auto& [id, c] : clients) {
      if (st.uses_memory()) c.store = promote_summary(std::move(c.store));
      if (c.cond) res.audit += c.cond->audit;
      c.cond.reset();
      c.cond_task = -1;
    }
  }

  for (auto& [id, c] : clients) {
    if (!c.trace.empty()) res.loss_traces[id] = c.trace;
    res.heatmap_clients.push_back(id);
    std::vector<std::size_t> counts(static_cast<std::size_t>(total_classes), 0);
    for (int t = 0; t < T; ++t)
      for (std::size_t i : partition.indices(t, id)) ++counts[static_cast<std::size_t>(data.train.labels[i])];
    res.heatmap.push_back(std::move(counts));
  }

  if (st.uses_memory()) {
    std::map<int, MemoryStore> banks;
    for (const auto& [id, c] : clients) banks.emplace(id, c.store);
    try {
      res.heterogeneity = heterogeneity_report(banks, total_classes, global.classifier,
                                               HeterogeneityOptions{5, st.lr, seed});
    } catch (const std::invalid_argument& e) {
      spdlog::debug("heterogeneity report skipped: {}", e.what());
    }
  }
  res.final_model = global.classifier;
  return res;
}

}  // namespace fcil
