#include "fcil/experiment.hpp"

#include <chrono>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <stdexcept>

#include <spdlog/spdlog.h>

#include "fcil/parallel.hpp"

namespace fcil {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void apply_profile(ExperimentConfig& c, const std::string& profile) {
  c = ExperimentConfig{};
  c.profile = profile;
  SimulationConfig& s = c.sim;
  StrategyConfig& st = s.strategy;
  if (profile == "full") {
    // 10 tasks x 10 classes, 20 clients growing by 5, 10 per round, M = 100.
    c.synthetic.class_count = 100;
    c.synthetic.train_per_class = 500;
    c.synthetic.test_per_class = 100;
    s.tasks = 10;
    s.classes_per_task = 10;
    s.clients_initial = 20;
    s.clients_increment = 5;
    s.round_clients = 10;
    s.memory_budget = 100;
    s.rounds = 50;
    st.local_epochs = 30;
    s.arch.width = 32;
    s.arch.depth = 3;
  } else if (profile == "desk") {
    c.synthetic.class_count = 9;
    c.synthetic.train_per_class = 100;
    c.synthetic.test_per_class = 50;
    s.tasks = 3;
    s.classes_per_task = 3;
    s.clients_initial = 4;
    s.clients_increment = 0;
    s.round_clients = 4;
    s.memory_budget = 18;
    s.rounds = 3;
    st.local_epochs = 6;
    s.arch.width = 8;
    s.arch.depth = 3;
    st.lr = 0.005;
    c.seeds = {0, 1, 2};
  } else {
    throw std::invalid_argument("profile must be \"full\" or \"desk\"");
  }
  s.arch.input = c.synthetic.shape;
}

Components parse_components(const std::string& text) {
  Components c{false, false, false, false, false};
  if (text == "none") return c;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const std::size_t end = std::min(text.find('+', pos), text.size());
    const std::string tag = text.substr(pos, end - pos);
    if (tag == "A") c.adjustable_memory = true;
    else if (tag == "G") c.grad_match = true;
    else if (tag == "F") c.relationship = true;
    else if (tag == "C") c.compensation = true;
    else if (tag == "K") c.contrastive = true;
    else throw std::invalid_argument("components: unknown tag \"" + tag + "\"");
    pos = end + 1;
  }
  return c;
}

using Setter = std::function<void(ExperimentConfig&, const json&)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> m;
    auto num = [&](const char* key, auto ptr) {
      m[key] = [ptr](ExperimentConfig& c, const json& v) { ptr(c) = v.get<std::remove_reference_t<decltype(ptr(c))>>(); };
    };
    num("test_fraction", [](ExperimentConfig& c) -> double& { return c.test_fraction; });
    num("synthetic_classes", [](ExperimentConfig& c) -> int& { return c.synthetic.class_count; });
    num("train_per_class", [](ExperimentConfig& c) -> int& { return c.synthetic.train_per_class; });
    num("test_per_class", [](ExperimentConfig& c) -> int& { return c.synthetic.test_per_class; });
    num("image_channels", [](ExperimentConfig& c) -> int& { return c.synthetic.shape.channels; });
    num("image_size", [](ExperimentConfig& c) -> int& { return c.synthetic.shape.height; });
    num("blobs_per_class", [](ExperimentConfig& c) -> int& { return c.synthetic.blobs_per_class; });
    num("jitter", [](ExperimentConfig& c) -> double& { return c.synthetic.jitter; });
    num("noise", [](ExperimentConfig& c) -> double& { return c.synthetic.noise; });
    num("data_seed", [](ExperimentConfig& c) -> std::uint64_t& { return c.synthetic.seed; });
    num("T", [](ExperimentConfig& c) -> int& { return c.sim.tasks; });
    num("classes_per_task", [](ExperimentConfig& c) -> int& { return c.sim.classes_per_task; });
    num("clients_initial", [](ExperimentConfig& c) -> int& { return c.sim.clients_initial; });
    num("clients_increment", [](ExperimentConfig& c) -> int& { return c.sim.clients_increment; });
    num("round_clients", [](ExperimentConfig& c) -> int& { return c.sim.round_clients; });
    num("transition_fraction", [](ExperimentConfig& c) -> double& { return c.sim.transition_fraction; });
    num("sigma", [](ExperimentConfig& c) -> double& { return c.sim.sigma; });
    num("M", [](ExperimentConfig& c) -> int& { return c.sim.memory_budget; });
    num("orig_cap", [](ExperimentConfig& c) -> int& { return c.sim.orig_cap; });
    num("R", [](ExperimentConfig& c) -> int& { return c.sim.rounds; });
    num("baseline_inits", [](ExperimentConfig& c) -> int& { return c.sim.baseline_inits; });
    num("threads", [](ExperimentConfig& c) -> int& { return c.sim.threads; });
    num("width", [](ExperimentConfig& c) -> int& { return c.sim.arch.width; });
    num("depth", [](ExperimentConfig& c) -> int& { return c.sim.arch.depth; });
    num("hidden", [](ExperimentConfig& c) -> std::vector<int>& { return c.sim.arch.hidden; });
    num("lr", [](ExperimentConfig& c) -> double& { return c.sim.strategy.lr; });
    num("lambda", [](ExperimentConfig& c) -> double& { return c.sim.strategy.lambda_kd; });
    num("lambda_mem", [](ExperimentConfig& c) -> double& { return c.sim.strategy.lambda_mem; });
    num("kd_temperature", [](ExperimentConfig& c) -> double& { return c.sim.strategy.kd_temperature; });
    num("ewc_factor", [](ExperimentConfig& c) -> double& { return c.sim.strategy.ewc_factor; });
    num("beta", [](ExperimentConfig& c) -> double& { return c.sim.strategy.beta; });
    num("tau", [](ExperimentConfig& c) -> double& { return c.sim.strategy.tau; });
    num("eta", [](ExperimentConfig& c) -> double& { return c.sim.strategy.eta; });
    num("exemplar_lr", [](ExperimentConfig& c) -> double& { return c.sim.strategy.exemplar_lr; });
    num("E", [](ExperimentConfig& c) -> int& { return c.sim.strategy.local_epochs; });
    num("batch_size", [](ExperimentConfig& c) -> int& { return c.sim.strategy.batch_size; });
    num("memory_batch", [](ExperimentConfig& c) -> int& { return c.sim.strategy.memory_batch; });
    num("condense_iterations", [](ExperimentConfig& c) -> int& { return c.sim.strategy.condense_iterations; });
    num("vae_hidden", [](ExperimentConfig& c) -> int& { return c.sim.strategy.vae_hidden; });
    num("vae_latent", [](ExperimentConfig& c) -> int& { return c.sim.strategy.vae_latent; });
    num("vae_embed", [](ExperimentConfig& c) -> int& { return c.sim.strategy.vae_embed; });
    num("vae_lr", [](ExperimentConfig& c) -> double& { return c.sim.strategy.vae_lr; });
    num("beta_vae", [](ExperimentConfig& c) -> double& { return c.sim.strategy.beta_vae; });
    num("generated_per_class", [](ExperimentConfig& c) -> int& { return c.sim.strategy.generated_per_class; });
    num("vae_every_round", [](ExperimentConfig& c) -> bool& { return c.sim.strategy.vae_every_round; });
    num("include_old_group", [](ExperimentConfig& c) -> bool& { return c.sim.strategy.include_old_group; });
    num("seeds", [](ExperimentConfig& c) -> std::vector<std::uint64_t>& { return c.seeds; });
    num("parallel_seeds", [](ExperimentConfig& c) -> bool& { return c.parallel_seeds; });
    num("dataset", [](ExperimentConfig& c) -> std::string& { return c.dataset; });
    m["data_dir"] = [](ExperimentConfig& c, const json& v) { c.data_dir = v.get<std::string>(); };
    m["output_dir"] = [](ExperimentConfig& c, const json& v) { c.output_dir = v.get<std::string>(); };
    m["arch"] = [](ExperimentConfig& c, const json& v) { c.sim.arch.kind = parse_arch_kind(v.get<std::string>()); };
    m["method"] = [](ExperimentConfig& c, const json& v) { c.sim.strategy.method = parse_method(v.get<std::string>()); };
    m["components"] = [](ExperimentConfig& c, const json& v) {
      c.sim.strategy.components = parse_components(v.get<std::string>());
    };
    return m;
  }();
  return table;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

json audit_json(const LeakageAudit& a) {
  return {{"omega_updates", a.omega_updates},
          {"real_samples", a.real_samples},
          {"condensed_samples", a.condensed_samples},
          {"rejected_batches", a.rejected_batches}};
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

void write_rounds_csv(const fs::path& path, const std::vector<RoundReport>& rounds) {
  std::string out = "task,round,clients,ce,kd,memory,ewc,vae,l_cond,l_rel,l_mkcl,global_norm,vae_norm,message_bytes\n";
  for (const auto& r : rounds) {
    out += std::to_string(r.task) + ',' + std::to_string(r.round) + ',' + std::to_string(r.participants.size());
    for (double v : {r.ce, r.kd, r.memory, r.ewc, r.vae, r.l_cond, r.l_rel, r.l_mkcl, r.global_norm, r.vae_norm})
      out += ',' + fmt(v);
    out += ',' + std::to_string(r.message_bytes) + '\n';
  }
  write_text(path, out);
}

void write_heatmap_csv(const fs::path& path, const SimulationResult& res) {
  const std::size_t K = res.heatmap.empty() ? 0 : res.heatmap.front().size();
  std::string out = "client";
  for (std::size_t k = 0; k < K; ++k) out += ",class_" + std::to_string(k);
  out += '\n';
  for (std::size_t i = 0; i < res.heatmap.size(); ++i) {
    out += std::to_string(res.heatmap_clients[i]);
    for (std::size_t v : res.heatmap[i]) out += ',' + std::to_string(v);
    out += '\n';
  }
  write_text(path, out);
}

void write_artifacts(const fs::path& dir, const ExperimentConfig& snapshot, const SimulationResult& res,
                     const MetricReport& metrics, double seconds) {
  write_json(dir / "config.json", config_to_json(snapshot));
  write_matrix_csv(dir / "accuracy_matrix.csv", res.matrix);
  json m = to_json(metrics);
  m["test_sizes"] = res.matrix.test_sizes;
  m["schedule"] = res.schedule.tasks;
  m["method"] = to_string(snapshot.sim.strategy.method);
  m["components"] = snapshot.sim.strategy.components.label();
  m["seed"] = snapshot.sim.seed;
  m["elapsed_seconds"] = seconds;
  write_json(dir / "metrics.json", m);
  write_rounds_csv(dir / "rounds.csv", res.rounds);

  const fs::path traces = dir / "loss_traces";
  fs::create_directories(traces);
  std::string global = "task,round,ce,kd,memory,ewc,vae\n";
  for (const auto& r : res.rounds) {
    global += std::to_string(r.task) + ',' + std::to_string(r.round);
    for (double v : {r.ce, r.kd, r.memory, r.ewc, r.vae}) global += ',' + fmt(v);
    global += '\n';
  }
  write_text(traces / "global.csv", global);
  for (const auto& [id, trace] : res.loss_traces) write_loss_trace(traces / ("client_" + std::to_string(id) + ".csv"), trace);

  write_heatmap_csv(dir / "heatmap.csv", res);
  write_json(dir / "audit.json", audit_json(res.audit));
  if (res.heterogeneity) {
    const auto& h = *res.heterogeneity;
    write_json(dir / "heterogeneity.json",
               {{"clients", h.clients}, {"pairwise_kl", h.pairwise_kl}, {"mean_kl", h.mean_kl}, {"delta_loss", h.delta_loss}});
  }
}

double mean_of(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void ExperimentConfig::validate() const {
  if (dataset != "synthetic" && dataset != "raw") throw std::invalid_argument("dataset must be \"synthetic\" or \"raw\"");
  if (dataset == "raw" && data_dir.empty()) throw std::invalid_argument("data_dir is required for the raw dataset");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must lie in (0, 1)");
  if (dataset == "synthetic") {
    if (synthetic.class_count < 1) throw std::invalid_argument("synthetic_classes must be at least 1");
    if (synthetic.train_per_class < 1) throw std::invalid_argument("train_per_class must be at least 1");
    if (synthetic.test_per_class < 1) throw std::invalid_argument("test_per_class must be at least 1");
    if (synthetic.shape.channels < 1) throw std::invalid_argument("image_channels must be at least 1");
    if (synthetic.shape.height < 4) throw std::invalid_argument("image_size must be at least 4");
    if (synthetic.blobs_per_class < 1) throw std::invalid_argument("blobs_per_class must be at least 1");
    if (!(synthetic.noise >= 0.0)) throw std::invalid_argument("noise must be non-negative");
    if (!(synthetic.jitter >= 0.0)) throw std::invalid_argument("jitter must be non-negative");
    if (sim.tasks * sim.classes_per_task > synthetic.class_count)
      throw std::invalid_argument("T x classes_per_task exceeds synthetic_classes");
  }
  if (seeds.empty()) throw std::invalid_argument("seeds must not be empty");
  if (sim.tasks < 1) throw std::invalid_argument("T must be at least 1");
  if (sim.classes_per_task < 1) throw std::invalid_argument("classes_per_task must be at least 1");
  if (sim.clients_initial < 1) throw std::invalid_argument("clients_initial must be at least 1");
  if (sim.clients_increment < 0) throw std::invalid_argument("clients_increment must be non-negative");
  if (sim.round_clients < 1) throw std::invalid_argument("round_clients must be at least 1");
  if (!(sim.transition_fraction >= 0.0 && sim.transition_fraction <= 1.0))
    throw std::invalid_argument("transition_fraction must lie in [0, 1]");
  if (!(sim.sigma > 0.0)) throw std::invalid_argument("sigma must be positive");
  if (sim.strategy.uses_memory() && sim.memory_budget < sim.tasks * sim.classes_per_task)
    throw std::invalid_argument("M must hold at least one exemplar per class");
  if (sim.orig_cap < 0 || sim.orig_cap > sim.memory_budget) throw std::invalid_argument("orig_cap must lie in [0, M]");
  if (sim.rounds < 1) throw std::invalid_argument("R must be at least 1");
  if (sim.baseline_inits < 1) throw std::invalid_argument("baseline_inits must be at least 1");
  if (sim.threads < 0) throw std::invalid_argument("threads must be non-negative");
  try {
    sim.arch.validate();
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(std::string("arch: ") + e.what());
  }
  sim.strategy.validate();
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw std::invalid_argument("config must be a JSON object");
  ExperimentConfig c;
  std::string profile = "full";
  if (auto it = j.find("profile"); it != j.end()) {
    if (!it->is_string()) throw std::invalid_argument("profile must be a string");
    profile = it->get<std::string>();
  }
  apply_profile(c, profile);
  const auto& table = setters();
  for (const auto& [key, value] : j.items()) {
    if (key == "profile") continue;
    auto it = table.find(key);
    if (it == table.end()) throw std::invalid_argument("unknown config key: " + key);
    try {
      it->second(c, value);
    } catch (const json::exception& e) {
      throw std::invalid_argument(key + ": " + e.what());
    }
  }
  c.synthetic.shape.width = c.synthetic.shape.height;
  if (c.dataset == "synthetic") c.sim.arch.input = c.synthetic.shape;
  c.validate();
  return c;
}

json config_to_json(const ExperimentConfig& c) {
  const SimulationConfig& s = c.sim;
  const StrategyConfig& st = s.strategy;
  json j = {{"profile", c.profile},
            {"dataset", c.dataset},
            {"test_fraction", c.test_fraction},
            {"synthetic_classes", c.synthetic.class_count},
            {"train_per_class", c.synthetic.train_per_class},
            {"test_per_class", c.synthetic.test_per_class},
            {"image_channels", c.synthetic.shape.channels},
            {"image_size", c.synthetic.shape.height},
            {"blobs_per_class", c.synthetic.blobs_per_class},
            {"jitter", c.synthetic.jitter},
            {"noise", c.synthetic.noise},
            {"data_seed", c.synthetic.seed},
            {"T", s.tasks},
            {"classes_per_task", s.classes_per_task},
            {"clients_initial", s.clients_initial},
            {"clients_increment", s.clients_increment},
            {"round_clients", s.round_clients},
            {"transition_fraction", s.transition_fraction},
            {"sigma", s.sigma},
            {"M", s.memory_budget},
            {"orig_cap", s.orig_cap},
            {"R", s.rounds},
            {"baseline_inits", s.baseline_inits},
            {"threads", s.threads},
            {"arch", to_string(s.arch.kind)},
            {"width", s.arch.width},
            {"depth", s.arch.depth},
            {"hidden", s.arch.hidden},
            {"method", to_string(st.method)},
            {"components", st.components.label()},
            {"lr", st.lr},
            {"lambda", st.lambda_kd},
            {"lambda_mem", st.lambda_mem},
            {"kd_temperature", st.kd_temperature},
            {"ewc_factor", st.ewc_factor},
            {"beta", st.beta},
            {"tau", st.tau},
            {"eta", st.eta},
            {"exemplar_lr", st.exemplar_lr},
            {"E", st.local_epochs},
            {"batch_size", st.batch_size},
            {"memory_batch", st.memory_batch},
            {"condense_iterations", st.condense_iterations},
            {"vae_hidden", st.vae_hidden},
            {"vae_latent", st.vae_latent},
            {"vae_embed", st.vae_embed},
            {"vae_lr", st.vae_lr},
            {"beta_vae", st.beta_vae},
            {"generated_per_class", st.generated_per_class},
            {"vae_every_round", st.vae_every_round},
            {"include_old_group", st.include_old_group},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir.string()},
            {"parallel_seeds", c.parallel_seeds}};
  if (!c.data_dir.empty()) j["data_dir"] = c.data_dir.string();
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read config " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

DatasetSplit load_dataset(const ExperimentConfig& c) {
  if (c.dataset == "raw") return load_raw_tensor_dir(c.data_dir, c.test_fraction, c.synthetic.seed);
  return make_synthetic_dataset(c.synthetic);
}

bool RunSummary::all_ok() const {
  for (const auto& s : seeds)
    if (!s.ok) return false;
  return !seeds.empty();
}

double RunSummary::mean_a_avg() const {
  std::vector<double> v;
  for (const auto& s : seeds)
    if (s.ok) v.push_back(s.metrics.a_avg);
  return mean_of(v);
}

double RunSummary::mean_a_last() const {
  std::vector<double> v;
  for (const auto& s : seeds)
    if (s.ok) v.push_back(s.metrics.a_last);
  return mean_of(v);
}

RunSummary run_experiment(const ExperimentConfig& c, const fs::path& dir, const std::string& label) {
  c.validate();
  RunSummary summary;
  summary.label = label;
  summary.seeds.resize(c.seeds.size());
  fs::create_directories(dir);

  std::optional<DatasetSplit> data;
  std::string data_error;
  try {
    data = load_dataset(c);
  } catch (const std::exception& e) {
    data_error = e.what();
  }

  const int workers = c.parallel_seeds ? worker_threads() : 1;
  parallel_for(c.seeds.size(), workers, [&](std::size_t i) {
    SeedOutcome& out = summary.seeds[i];
    out.seed = c.seeds[i];
    out.dir = dir / ("seed_" + std::to_string(out.seed));
    fs::create_directories(out.dir);
    ExperimentConfig snapshot = c;
    snapshot.seeds = {out.seed};
    snapshot.sim.seed = out.seed;
    snapshot.parallel_seeds = false;
    if (data && c.dataset == "raw") snapshot.sim.arch.input = data->train.shape;
    try {
      if (!data) throw std::runtime_error("dataset: " + data_error);
      const auto start = std::chrono::steady_clock::now();
      SimulationResult res = run_simulation(*data, snapshot.sim);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      out.metrics = compute_metrics(res.matrix);
      out.matrix = res.matrix;
      out.audit = res.audit;
      write_artifacts(out.dir, snapshot, res, out.metrics, secs);
      fs::remove(out.dir / "error.json");
      out.ok = true;
      spdlog::info("{} seed {}: A_avg={:.4f} A_last={:.4f} ({:.1f}s)", label, out.seed, out.metrics.a_avg,
                   out.metrics.a_last, secs);
    } catch (const std::exception& e) {
      out.ok = false;
      out.error = e.what();
      spdlog::error("{} seed {} failed: {}", label, out.seed, out.error);
      try {
        write_json(out.dir / "config.json", config_to_json(snapshot));
        write_json(out.dir / "error.json", {{"seed", out.seed}, {"label", label}, {"error", out.error}});
      } catch (const std::exception& w) {
        spdlog::error("cannot record the failure: {}", w.what());
      }
    }
  });

  json seeds = json::array();
  for (const auto& s : summary.seeds) {
    json e = {{"seed", s.seed}, {"ok", s.ok}, {"dir", s.dir.filename().string()}};
    if (s.ok) e["metrics"] = to_json(s.metrics);
    else e["error"] = s.error;
    seeds.push_back(std::move(e));
  }
  write_json(dir / "summary.json", {{"label", label},
                                    {"all_ok", summary.all_ok()},
                                    {"mean_A_avg", summary.mean_a_avg()},
                                    {"mean_A_last", summary.mean_a_last()},
                                    {"seeds", seeds}});
  return summary;
}

std::vector<std::string> missing_artifacts(const fs::path& seed_dir) {
  std::vector<std::string> missing;
  for (const char* f : {"config.json", "accuracy_matrix.csv", "metrics.json", "rounds.csv", "loss_traces/global.csv",
                        "heatmap.csv", "audit.json"})
    if (!fs::is_regular_file(seed_dir / f)) missing.emplace_back(f);
  return missing;
}

std::vector<Components> ablation_ladder() {
  return {{true, false, false, false, false},
          {true, true, false, false, false},
          {true, true, true, false, false},
          {true, true, true, true, false},
          {true, true, true, true, true}};
}

std::string AblationTable::markdown() const {
  std::string out = "| Method | A_avg | A_last | Δ A_avg | Δ A_last |\n|---|---|---|---|---|\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.2f | %.2f | %+.2f | %+.2f |\n", r.label.c_str(), 100.0 * r.a_avg,
                  100.0 * r.a_last, 100.0 * r.delta_avg, 100.0 * r.delta_last);
    out += buf;
  }
  return out;
}

json AblationTable::to_json() const {
  json arr = json::array();
  for (const auto& r : rows)
    arr.push_back({{"label", r.label},
                   {"A_avg", r.a_avg},
                   {"A_last", r.a_last},
                   {"delta_A_avg", r.delta_avg},
                   {"delta_A_last", r.delta_last},
                   {"seed_A_avg", r.seed_a_avg}});
  return {{"rows", arr}};
}

AblationTable run_ablation(const ExperimentConfig& c) {
  c.validate();
  const fs::path root = c.output_dir / "ablation";
  std::vector<std::pair<std::string, ExperimentConfig>> arms;
  ExperimentConfig replay = c;
  replay.sim.strategy.method = Method::replay;
  arms.emplace_back("Replay", replay);
  for (const Components& comp : ablation_ladder()) {
    ExperimentConfig e = c;
    e.sim.strategy.method = Method::ecoral;
    e.sim.strategy.components = comp;
    arms.emplace_back(comp.label(), e);
  }

  AblationTable table;
  for (const auto& [label, cfg] : arms) {
    const RunSummary s = run_experiment(cfg, root / label, label);
    if (!s.all_ok()) throw std::runtime_error("ablation arm " + label + " had failing seeds");
    AblationRow row;
    row.label = label;
    row.a_avg = s.mean_a_avg();
    row.a_last = s.mean_a_last();
    for (const auto& o : s.seeds) row.seed_a_avg.push_back(o.metrics.a_avg);
    table.rows.push_back(std::move(row));
  }
  for (auto& r : table.rows) {
    r.delta_avg = r.a_avg - table.rows.front().a_avg;
    r.delta_last = r.a_last - table.rows.front().a_last;
  }

  write_text(root / "ablation.md", table.markdown());
  std::string csv = "label,A_avg,A_last,delta_A_avg,delta_A_last\n";
  for (const auto& r : table.rows)
    csv += r.label + ',' + fmt(r.a_avg) + ',' + fmt(r.a_last) + ',' + fmt(r.delta_avg) + ',' + fmt(r.delta_last) + '\n';
  write_text(root / "ablation.csv", csv);
  write_json(root / "ablation.json", table.to_json());
  return table;
}

}  // namespace fcil
