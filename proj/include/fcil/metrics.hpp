#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

namespace fcil {

// R[t][j] = accuracy on task j's test set after finishing task t (j <= t).
struct AccuracyMatrix {
  std::vector<std::vector<double>> rows;
  std::vector<std::size_t> test_sizes;
  // pre[i]: accuracy on task i after its head expansion, before training it.
  std::vector<std::optional<double>> pre;
  // baseline[i]: mean accuracy of fresh initializations on task i.
  std::vector<std::optional<double>> baseline;

  int task_count() const { return static_cast<int>(test_sizes.size()); }
  int completed() const { return static_cast<int>(rows.size()); }
  bool complete() const;
  double at(int t, int j) const { return rows.at(static_cast<std::size_t>(t)).at(static_cast<std::size_t>(j)); }
  void validate() const;  // shape and range checks; throws std::invalid_argument

  // Sample-weighted accuracy over tasks 0..t at time t.
  double overall(int t) const;
  // Task-unweighted mean over tasks 0..t at time t.
  double task_mean(int t) const;
};

std::pair<double, double> accuracy_pair(const AccuracyMatrix& m);         // (A_avg, A_last)
std::pair<double, double> incremental_accuracy(const AccuracyMatrix& m);  // (A_incre_avg, A_incre_last)
std::pair<double, double> accuracy_a(const AccuracyMatrix& m);            // (Aa_avg, Aa_last)
double bwt(const AccuracyMatrix& m);
double fwt(const AccuracyMatrix& m);  // needs pre[1..T-1] and baseline[1..T-1]
double remembering(double bwt_value);
double forgetting(const AccuracyMatrix& m);

struct MetricReport {
  double a_avg = 0.0, a_last = 0.0;
  double a_incre_avg = 0.0, a_incre_last = 0.0;
  double aa_avg = 0.0, aa_last = 0.0;
  std::optional<double> bwt, fwt, remembering, forgetting;  // absent when T < 2
};

MetricReport compute_metrics(const AccuracyMatrix& m);
nlohmann::json to_json(const MetricReport& r);

// Header task_0..task_{T-1}; one row per completed task; blank cells above
// the diagonal. Values use %.17g so the file round-trips exactly.
std::string matrix_csv(const AccuracyMatrix& m);
void write_matrix_csv(const std::filesystem::path& path, const AccuracyMatrix& m);
AccuracyMatrix read_matrix_csv(const std::filesystem::path& path);

}  // namespace fcil
