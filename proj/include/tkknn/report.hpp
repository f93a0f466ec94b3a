#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <boost/math/distributions/students_t.hpp>
#include <json.hpp>

#include "tkknn/data.hpp"
#include "tkknn/error.hpp"

namespace tkknn {

inline double accuracy(std::span<const ClassId> predicted, std::span<const ClassId> truth) {
  if (predicted.size() != truth.size()) throw DimensionError("accuracy: length mismatch");
  if (predicted.empty()) return 0.0;
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i) hits += predicted[i] == truth[i] ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

struct Interval {
  double mean = 0.0;
  std::optional<double> half_width;  // absent for fewer than two values
};

// Student-t 95% interval: mean +- t_{0.975, n-1} * s / sqrt(n).
inline Interval ci95(std::span<const double> values) {
  Interval out;
  if (values.empty()) return out;
  // Sorted summation keeps the result independent of input order.
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const double n = static_cast<double>(v.size());
  out.mean = std::accumulate(v.begin(), v.end(), 0.0) / n;
  if (v.size() < 2) return out;
  if (v.front() == v.back()) {
    out.mean = v.front();  // exact for constant input
    out.half_width = 0.0;
    return out;
  }
  double ss = 0.0;
  for (double x : v) ss += (x - out.mean) * (x - out.mean);
  const double sd = std::sqrt(ss / (n - 1.0));
  const boost::math::students_t dist(n - 1.0);
  const double t = boost::math::quantile(dist, 0.975);
  out.half_width = t * sd / std::sqrt(n);
  return out;
}

// "mean ± half" in percent with two decimals; "mean ± n/a" without an interval.
inline std::string format_interval(const Interval& ci) {
  char buf[64];
  if (ci.half_width) {
    std::snprintf(buf, sizeof buf, "%.2f ± %.2f", 100.0 * ci.mean, 100.0 * *ci.half_width);
  } else {
    std::snprintf(buf, sizeof buf, "%.2f ± n/a", 100.0 * ci.mean);
  }
  return buf;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

// Per-seed test accuracy indexed by cycle (index 0 is the initial model).
struct ConvergenceSeries {
  std::string strategy;
  std::vector<std::vector<double>> per_seed;
};

struct ConvergenceRow {
  int cycle = 0;
  std::string strategy;
  double mean_test_accuracy = 0.0;
  bool carried_forward = false;
};

// Mean curve over seeds. A seed whose run ended early (pool exhausted)
// repeats its last value for later cycles and the row is flagged.
inline std::vector<ConvergenceRow> convergence_rows(std::span<const ConvergenceSeries> series) {
  std::size_t points = 0;
  for (const auto& s : series) {
    for (const auto& seed : s.per_seed) points = std::max(points, seed.size());
  }
  std::vector<ConvergenceRow> rows;
  for (const auto& s : series) {
    for (std::size_t c = 0; c < points; ++c) {
      ConvergenceRow row;
      row.cycle = static_cast<int>(c);
      row.strategy = s.strategy;
      double sum = 0.0;
      std::size_t used = 0;
      for (const auto& seed : s.per_seed) {
        if (seed.empty()) continue;
        if (c >= seed.size()) row.carried_forward = true;
        sum += seed[std::min(c, seed.size() - 1)];
        ++used;
      }
      row.mean_test_accuracy = used ? sum / static_cast<double>(used) : 0.0;
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

inline constexpr const char* kConvergenceHeader = "cycle,strategy,mean_test_accuracy,carried_forward";

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n\r") == std::string::npos) return s;
  std::string out = "\"";
  for (char ch : s) {
    if (ch == '"') out += '"';
    out += ch;
  }
  return out + "\"";
}

inline std::string emit_convergence(std::span<const ConvergenceSeries> series) {
  std::string out = std::string(kConvergenceHeader) + "\r\n";
  for (const auto& r : convergence_rows(series)) {
    out += std::to_string(r.cycle) + "," + csv_field(r.strategy) + "," + format_double(r.mean_test_accuracy) + "," +
           (r.carried_forward ? "1" : "0") + "\r\n";
  }
  return out;
}

// Minimal RFC-4180 record splitter for the files written above.
inline std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> records;
  std::vector<std::string> fields;
  std::string field;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const char ch = text[i];
    if (quoted) {
      if (ch == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          field += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        field += ch;
      }
      continue;
    }
    if (ch == '"') {
      quoted = true;
      any = true;
    } else if (ch == ',') {
      fields.push_back(std::move(field));
      field.clear();
      any = true;
    } else if (ch == '\r' || ch == '\n') {
      if (ch == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
      if (any || !field.empty()) {
        fields.push_back(std::move(field));
        records.push_back(std::move(fields));
      }
      fields.clear();
      field.clear();
      any = false;
    } else {
      field += ch;
      any = true;
    }
  }
  if (any || !field.empty()) {
    fields.push_back(std::move(field));
    records.push_back(std::move(fields));
  }
  return records;
}

inline std::vector<ConvergenceRow> parse_convergence(const std::string& csv) {
  const auto records = parse_csv(csv);
  if (records.empty() || records.front().size() != 4) throw FormatError("convergence CSV lacks header");
  std::vector<ConvergenceRow> rows;
  for (std::size_t i = 1; i < records.size(); ++i) {
    const auto& f = records[i];
    if (f.size() != 4) throw ParseError(i + 1, "expected 4 fields");
    rows.push_back({std::stoi(f[0]), f[1], std::stod(f[2]), f[3] == "1"});
  }
  return rows;
}

// One cell of the ablation grid: selection variant x label regime x loss terms.
struct AblationCell {
  std::string variant;   // e.g. "B+KNN", "U", ...
  std::string regime;    // e.g. "1 label/class", "5%"
  std::string losses;    // e.g. "CE+CON+DER"
  Interval accuracy;
};

inline std::string ablation_table(std::span<const AblationCell> cells) {
  std::ostringstream os;
  os << "| variant | regime | losses | accuracy |\n";
  os << "|---|---|---|---|\n";
  for (const auto& c : cells) {
    os << "| " << c.variant << " | " << c.regime << " | " << c.losses << " | " << format_interval(c.accuracy)
       << " |\n";
  }
  return os.str();
}

struct StrategySummary {
  Interval final_accuracy;
  std::vector<double> per_seed;
  std::vector<double> curve;  // mean test accuracy per cycle
};

using Summary = std::map<std::string, StrategySummary>;

inline nlohmann::json summary_to_json(const Summary& s) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, st] : s) {
    out[name] = {{"mean", st.final_accuracy.mean},
                 {"ci95", st.final_accuracy.half_width ? nlohmann::json(*st.final_accuracy.half_width)
                                                       : nlohmann::json(nullptr)},
                 {"per_seed", st.per_seed},
                 {"curve", st.curve}};
  }
  return out;
}

inline StrategySummary summarize(const ConvergenceSeries& series) {
  StrategySummary st;
  for (const auto& seed : series.per_seed) {
    if (!seed.empty()) st.per_seed.push_back(seed.back());
  }
  st.final_accuracy = ci95(st.per_seed);
  const ConvergenceSeries one[] = {series};
  for (const auto& r : convergence_rows(one)) st.curve.push_back(r.mean_test_accuracy);
  return st;
}

}  // namespace tkknn
