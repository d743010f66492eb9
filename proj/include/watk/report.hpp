#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "watk/analysis.hpp"
#include "watk/sweep.hpp"

namespace watk::report {

/// "%.10g" formatting used for every number in CSV and JSON reports.
std::string num(double v);

void write_text(const std::filesystem::path& path, const std::string& text);

/// Every CSV starts with "# config: <json>".
std::string csv_header(const std::string& config_json);

std::string sparsity_csv(const std::string& config_json, const std::string& method, double p, double q,
                         double actual_sparsity);
std::string neuron_sweep_csv(const std::string& config_json, const std::string& method,
                             const std::vector<SweepRow>& rows);
std::string rank_sweep_csv(const std::string& config_json, const std::vector<SweepRow>& rows);
std::string sweep_json(const std::string& config_json, const std::vector<SweepRow>& rows, bool ranks,
                       const EvalReport& baseline);
std::string eval_json(const std::string& config_json, const EvalReport& r);

/// Evaluation suite as JSON; read_suite ignores the "config" field.
std::string suite_json(const std::string& config_json, const EvalSuite& suite);
EvalSuite read_suite(const std::filesystem::path& path);

struct LabeledValue {
  std::string label;
  double value = 0.0;
};

/// CSV "block,<key>,value".
std::string block_value_csv(const std::string& config_json, const std::string& key,
                            const std::vector<std::pair<std::size_t, LabeledValue>>& rows);
std::string probe_csv(const std::string& config_json, const ProbeResult& r);
std::string freeze_csv(const std::string& config_json, const FreezeReport& r);
std::string train_curve_csv(const std::string& config_json, const std::vector<std::pair<std::size_t, std::vector<double>>>& rows,
                            const std::vector<std::string>& columns);

struct Point {
  double x = 0.0;
  double y = 0.0;
  bool highlight = false;
};

std::string svg_scatter(const std::string& config_json, const std::string& title, const std::string& x_label,
                        const std::string& y_label, const std::vector<Point>& points);
std::string svg_bars(const std::string& config_json, const std::string& title, const std::string& y_label,
                     const std::vector<LabeledValue>& bars);

}  // namespace watk::report
