#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <vector>

#include "fcil/condensation.hpp"
#include "fcil/fed_runtime.hpp"
#include "fcil/metrics.hpp"
#include "fcil/task_stream.hpp"

namespace fcil {

struct SimulationConfig {
  int tasks = 3;
  int classes_per_task = 3;
  int clients_initial = 4;
  int clients_increment = 0;
  int round_clients = 4;
  double transition_fraction = 0.9;
  double sigma = 0.5;
  int memory_budget = 18;
  int orig_cap = 0;  // 0: min(M, 2 x current-task quota total)
  int rounds = 3;
  int baseline_inits = 3;
  ArchSpec arch;
  StrategyConfig strategy;
  std::uint64_t seed = 0;
  int threads = 0;  // 0: FCIL_THREADS or hardware concurrency

  void validate(const DatasetSplit& data) const;
};

struct RoundReport {
  int task = 0;
  int round = 0;
  std::vector<int> participants;
  double ce = 0.0, kd = 0.0, memory = 0.0, ewc = 0.0, vae = 0.0;
  double l_cond = 0.0, l_rel = 0.0, l_mkcl = 0.0;
  double global_norm = 0.0;
  double vae_norm = 0.0;
  std::size_t message_bytes = 0;
};

struct SimulationResult {
  TaskSchedule schedule;  // in original class ids
  AccuracyMatrix matrix;
  std::vector<RoundReport> rounds;
  LeakageAudit audit;
  std::map<int, std::vector<CondenseReport>> loss_traces;  // client -> condense steps
  std::vector<int> heatmap_clients;
  std::vector<std::vector<std::size_t>> heatmap;  // client x class (head order) training samples
  std::optional<HeterogeneityReport> heterogeneity;
  Backbone final_model;
};

struct TaskRunInput {
  const Dataset* train = nullptr;  // relabelled to head order
  const ClientPartition* partition = nullptr;
  const ClientGroupAssignment* groups = nullptr;
  TaskContext ctx;
  int rounds = 1;
  int round_clients = 1;
  int threads = 1;
  std::uint64_t seed = 0;
};

struct TaskRunOutput {
  std::vector<RoundReport> rounds;
  std::vector<ClientUpdate> final_updates;  // decoded messages of the last round
};

// R rounds of sample, broadcast, local training, serialized upload and
// aggregation of the classifier and the Shared-VAE. The head must already
// cover ctx.classes_seen.
TaskRunOutput run_task(GlobalModelState& global, std::map<int, ClientState>& clients, const TaskRunInput& in,
                       const StrategyConfig& st);

// Relabels classes so that head index = position in the schedule. Classes
// outside the schedule are dropped.
DatasetSplit relabel_for_schedule(const DatasetSplit& data, const TaskSchedule& schedule);

// One full federated class-incremental run for cfg.seed.
SimulationResult run_simulation(const DatasetSplit& data, const SimulationConfig& cfg);

}  // namespace fcil
