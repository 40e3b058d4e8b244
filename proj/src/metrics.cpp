#include "fcil/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace fcil {

bool AccuracyMatrix::complete() const { return task_count() > 0 && completed() == task_count(); }

void AccuracyMatrix::validate() const {
  if (task_count() < 1) throw std::invalid_argument("accuracy matrix has no tasks");
  if (completed() > task_count()) throw std::invalid_argument("more rows than tasks");
  for (int t = 0; t < completed(); ++t) {
    const auto& r = rows[static_cast<std::size_t>(t)];
    if (static_cast<int>(r.size()) != t + 1) throw std::invalid_argument("row " + std::to_string(t) + " is not lower-triangular");
    for (double v : r)
      if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("accuracy outside [0, 1]");
  }
}

namespace {

void require_complete(const AccuracyMatrix& m) {
  m.validate();
  if (!m.complete()) throw std::invalid_argument("accuracy matrix is incomplete");
}

void require_two_tasks(const AccuracyMatrix& m) {
  require_complete(m);
  if (m.task_count() < 2) throw std::invalid_argument("transfer metrics need at least two tasks");
}

template <class F>
std::pair<double, double> avg_last(const AccuracyMatrix& m, F&& at_time) {
  require_complete(m);
  const int T = m.task_count();
  double sum = 0.0;
  for (int t = 0; t < T; ++t) sum += at_time(t);
  return {sum / T, at_time(T - 1)};
}

}  // namespace

double AccuracyMatrix::overall(int t) const {
  double num = 0.0, den = 0.0;
  for (int j = 0; j <= t; ++j) {
    const auto n = static_cast<double>(test_sizes.at(static_cast<std::size_t>(j)));
    num += n * at(t, j);
    den += n;
  }
  if (den <= 0.0) throw std::invalid_argument("test sizes must be positive");
  return num / den;
}

double AccuracyMatrix::task_mean(int t) const {
  double sum = 0.0;
  for (int j = 0; j <= t; ++j) sum += at(t, j);
  return sum / (t + 1);
}

std::pair<double, double> accuracy_pair(const AccuracyMatrix& m) {
  return avg_last(m, [&](int t) { return m.overall(t); });
}

std::pair<double, double> incremental_accuracy(const AccuracyMatrix& m) {
  double running = 0.0;
  std::vector<double> incre;
  require_complete(m);
  for (int t = 0; t < m.task_count(); ++t) {
    running += m.overall(t);
    incre.push_back(running / (t + 1));
  }
  return avg_last(m, [&](int t) { return incre[static_cast<std::size_t>(t)]; });
}

std::pair<double, double> accuracy_a(const AccuracyMatrix& m) {
  return avg_last(m, [&](int t) { return m.task_mean(t); });
}

double bwt(const AccuracyMatrix& m) {
  require_two_tasks(m);
  const int T = m.task_count();
  double sum = 0.0;
  for (int i = 0; i < T - 1; ++i) sum += m.at(T - 1, i) - m.at(i, i);
  return sum / (T - 1);
}

double fwt(const AccuracyMatrix& m) {
  require_two_tasks(m);
  const int T = m.task_count();
  double sum = 0.0;
  for (int i = 1; i < T; ++i) {
    const auto idx = static_cast<std::size_t>(i);
    if (m.pre.size() <= idx || m.baseline.size() <= idx || !m.pre[idx] || !m.baseline[idx])
      throw std::invalid_argument("FwT needs the pre-training row and random baseline for task " + std::to_string(i));
    sum += *m.pre[idx] - *m.baseline[idx];
  }
  return sum / (T - 1);
}

double remembering(double bwt_value) { return std::clamp(1.0 - std::abs(std::min(bwt_value, 0.0)), 0.0, 1.0); }

double forgetting(const AccuracyMatrix& m) {
  require_two_tasks(m);
  const int T = m.task_count();
  double sum = 0.0;
  for (int j = 0; j < T - 1; ++j) {
    double best = 0.0;
    for (int l = j; l < T; ++l) best = std::max(best, m.at(l, j));
    sum += best - m.at(T - 1, j);
  }
  return sum / (T - 1);
}

MetricReport compute_metrics(const AccuracyMatrix& m) {
  MetricReport r;
  std::tie(r.a_avg, r.a_last) = accuracy_pair(m);
  std::tie(r.a_incre_avg, r.a_incre_last) = incremental_accuracy(m);
  std::tie(r.aa_avg, r.aa_last) = accuracy_a(m);
  if (m.task_count() >= 2) {
    r.bwt = bwt(m);
    r.remembering = remembering(*r.bwt);
    r.forgetting = forgetting(m);
    bool have_fwt = true;
    for (int i = 1; i < m.task_count(); ++i) {
      const auto idx = static_cast<std::size_t>(i);
      have_fwt = have_fwt && m.pre.size() > idx && m.baseline.size() > idx && m.pre[idx] && m.baseline[idx];
    }
    if (have_fwt) r.fwt = fwt(m);
  }
  return r;
}

nlohmann::json to_json(const MetricReport& r) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"A_avg", r.a_avg},
          {"A_last", r.a_last},
          {"A_incre_avg", r.a_incre_avg},
          {"A_incre_last", r.a_incre_last},
          {"Aa_avg", r.aa_avg},
          {"Aa_last", r.aa_last},
          {"BwT", opt(r.bwt)},
          {"FwT", opt(r.fwt)},
          {"Remembering", opt(r.remembering)},
          {"Forgetting", opt(r.forgetting)}};
}

std::string matrix_csv(const AccuracyMatrix& m) {
  std::string out;
  const int T = m.task_count();
  for (int j = 0; j < T; ++j) out += (j ? ",task_" : "task_") + std::to_string(j);
  out += '\n';
  char buf[64];
  for (int t = 0; t < m.completed(); ++t) {
    for (int j = 0; j < T; ++j) {
      if (j) out += ',';
      if (j <= t) {
        std::snprintf(buf, sizeof buf, "%.17g", m.at(t, j));
        out += buf;
      }
    }
    out += '\n';
  }
  return out;
}

void write_matrix_csv(const std::filesystem::path& path, const AccuracyMatrix& m) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << matrix_csv(m);
}

AccuracyMatrix read_matrix_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::string line;
  std::getline(in, line);
  const int T = static_cast<int>(std::count(line.begin(), line.end(), ',')) + 1;
  AccuracyMatrix m;
  m.test_sizes.assign(static_cast<std::size_t>(T), 1);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<double> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ','))
      if (!cell.empty()) row.push_back(std::stod(cell));
    m.rows.push_back(std::move(row));
  }
  return m;
}

}  // namespace fcil
