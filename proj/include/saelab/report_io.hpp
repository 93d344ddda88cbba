#pragma once

#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "saelab/metrics.hpp"
#include "saelab/training.hpp"

namespace saelab {

/// One JSON object, no trailing newline.
std::string to_json_line(const StepReport& r);
std::string to_json_line(const MetricsReport& r);
MetricsReport metrics_from_json(std::string_view line);

/// Metric name/value rows in a fixed order; absent optional metrics are skipped.
std::vector<std::pair<std::string, double>> metric_rows(const MetricsReport& r);
/// "metric\tvalue" table with a header row.
std::string to_table(const MetricsReport& r);

struct MetricDiff {
  std::string metric;
  double a = 0.0;
  double b = 0.0;
  double abs_delta = 0.0;  // b - a
  double rel_delta = 0.0;  // (b - a) / |a|, NaN when a == 0
};

/// Metrics present in both reports.
std::vector<MetricDiff> compare_reports(const MetricsReport& a, const MetricsReport& b);
std::string to_table(const std::vector<MetricDiff>& diffs);

std::string cdf_table(const ExpertActivationCdf& cdf);
std::string histogram_table(const OverlapHistogram& h);

}  // namespace saelab
