#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "fcil/metrics.hpp"
#include "fcil/simulation.hpp"
#include "fcil/task_stream.hpp"
#include "json.hpp"

namespace fcil {

// Flat JSON configuration. Keys not listed in the schema are rejected.
// "profile": "full" applies the reference hyperparameters (lr 0.003, R 50,
// E 30, lambda 3, T_kd 2, beta 0.5, EWC 300); "desk" is a 3-task, 4-client
// stream on 9 synthetic classes with a narrow net, R 3, E 6 and lr 0.005.
// Explicit keys override the profile.
struct ExperimentConfig {
  std::string profile = "full";
  std::string dataset = "synthetic";  // "synthetic" or "raw"
  std::filesystem::path data_dir;     // raw-tensor directory
  double test_fraction = 0.2;
  SyntheticSpec synthetic;
  SimulationConfig sim;
  std::vector<std::uint64_t> seeds{0};
  std::filesystem::path output_dir = "runs";
  bool parallel_seeds = false;

  void validate() const;  // throws std::invalid_argument naming the field
};

ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

DatasetSplit load_dataset(const ExperimentConfig& c);

struct SeedOutcome {
  std::uint64_t seed = 0;
  bool ok = false;
  std::string error;
  std::filesystem::path dir;
  MetricReport metrics;
  AccuracyMatrix matrix;
  LeakageAudit audit;
};

struct RunSummary {
  std::string label;
  std::vector<SeedOutcome> seeds;
  bool all_ok() const;
  double mean_a_avg() const;
  double mean_a_last() const;
};

// Writes one self-describing directory per seed under `dir`:
// config.json, accuracy_matrix.csv, metrics.json, rounds.csv,
// loss_traces/, heatmap.csv, audit.json and (when available)
// heterogeneity.json. A failing seed leaves error.json and the others go on.
RunSummary run_experiment(const ExperimentConfig& c, const std::filesystem::path& dir, const std::string& label);

// Files every seed directory must contain; returns the missing ones.
std::vector<std::string> missing_artifacts(const std::filesystem::path& seed_dir);

struct AblationRow {
  std::string label;
  double a_avg = 0.0;
  double a_last = 0.0;
  double delta_avg = 0.0;  // vs Replay
  double delta_last = 0.0;
  std::vector<double> seed_a_avg;
};

struct AblationTable {
  std::vector<AblationRow> rows;  // Replay first, then the cumulative ladder
  std::string markdown() const;
  nlohmann::json to_json() const;
};

// Cumulative ladder {A}, {A,G}, {A,G,F}, {A,G,F,C}, {A,G,F,C,K}.
std::vector<Components> ablation_ladder();

// Runs Replay and every ladder rung over the configured seeds, writing run
// directories under output_dir/ablation/<label>/ and the table beside them.
AblationTable run_ablation(const ExperimentConfig& c);

}  // namespace fcil
