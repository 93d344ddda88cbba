#include "saelab/report_io.hpp"

#include <cmath>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "saelab/error.hpp"

namespace saelab {

namespace {

using nlohmann::json;

std::string fmt(double v) {
  std::ostringstream o;
  o.precision(17);
  o << v;
  return o.str();
}

}  // namespace

std::string to_json_line(const StepReport& r) {
  json j;
  j["step"] = r.step;
  j["recon_loss"] = r.recon_loss;
  j["aux_loss"] = r.aux_loss;
  j["total_loss"] = r.total_loss;
  j["mean_l0"] = r.mean_l0;
  j["load"] = r.load;
  j["mean_probs"] = r.mean_probs;
  j["omega"] = r.omega;
  return j.dump();
}

std::vector<std::pair<std::string, double>> metric_rows(const MetricsReport& r) {
  std::vector<std::pair<std::string, double>> rows;
  rows.emplace_back("mse", r.mse);
  rows.emplace_back("measured_l0", r.measured_l0);
  if (r.loss_recovered) rows.emplace_back("loss_recovered", *r.loss_recovered);
  rows.emplace_back("redundancy_fraction", r.redundancy_fraction);
  if (r.intra_expert_sim) rows.emplace_back("intra_expert_sim", *r.intra_expert_sim);
  if (r.inter_expert_sim) rows.emplace_back("inter_expert_sim", *r.inter_expert_sim);
  rows.emplace_back("activation_similarity", r.activation_similarity);
  if (r.dictionary_recovery) rows.emplace_back("dictionary_recovery", *r.dictionary_recovery);
  return rows;
}

std::string to_json_line(const MetricsReport& r) {
  json j = json::object();
  for (const auto& [k, v] : metric_rows(r)) j[k] = v;
  return j.dump();
}

MetricsReport metrics_from_json(std::string_view line) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw Error(ErrorKind::Parse, std::string("metrics report: ") + e.what());
  }
  if (!j.is_object()) throw Error(ErrorKind::Parse, "metrics report: expected a JSON object");
  auto req = [&](const char* key) {
    if (!j.contains(key) || !j[key].is_number()) throw Error(ErrorKind::Parse, std::string("metrics report: missing ") + key);
    return j[key].get<double>();
  };
  auto opt = [&](const char* key) -> std::optional<double> {
    if (!j.contains(key)) return std::nullopt;
    return j[key].get<double>();
  };
  MetricsReport r;
  r.mse = req("mse");
  r.measured_l0 = req("measured_l0");
  r.loss_recovered = opt("loss_recovered");
  r.redundancy_fraction = req("redundancy_fraction");
  r.intra_expert_sim = opt("intra_expert_sim");
  r.inter_expert_sim = opt("inter_expert_sim");
  r.activation_similarity = req("activation_similarity");
  r.dictionary_recovery = opt("dictionary_recovery");
  return r;
}

std::string to_table(const MetricsReport& r) {
  std::string out = "metric\tvalue\n";
  for (const auto& [k, v] : metric_rows(r)) out += k + "\t" + fmt(v) + "\n";
  return out;
}

std::vector<MetricDiff> compare_reports(const MetricsReport& a, const MetricsReport& b) {
  std::vector<MetricDiff> diffs;
  const auto rows_b = metric_rows(b);
  for (const auto& [name, va] : metric_rows(a)) {
    for (const auto& [nb, vb] : rows_b) {
      if (nb != name) continue;
      MetricDiff d{name, va, vb, vb - va, std::numeric_limits<double>::quiet_NaN()};
      if (va != 0.0) d.rel_delta = (vb - va) / std::fabs(va);
      diffs.push_back(d);
    }
  }
  return diffs;
}

std::string to_table(const std::vector<MetricDiff>& diffs) {
  std::string out = "metric\ta\tb\tabs_delta\trel_delta\n";
  for (const auto& d : diffs) {
    out += d.metric + "\t" + fmt(d.a) + "\t" + fmt(d.b) + "\t" + fmt(d.abs_delta) + "\t" +
           (std::isnan(d.rel_delta) ? std::string("nan") : fmt(d.rel_delta)) + "\n";
  }
  return out;
}

std::string cdf_table(const ExpertActivationCdf& cdf) {
  std::string out = "rank\texpert\tcount\tcumulative\n";
  for (std::size_t r = 0; r < cdf.cumulative.size(); ++r) {
    out += std::to_string(r + 1) + "\t" + std::to_string(cdf.expert[r]) + "\t" + std::to_string(cdf.count[r]) +
           "\t" + fmt(cdf.cumulative[r]) + "\n";
  }
  return out;
}

std::string histogram_table(const OverlapHistogram& h) {
  std::string out = "overlap\tpairs\n";
  for (std::size_t k = 0; k < h.counts.size(); ++k) out += std::to_string(k) + "\t" + std::to_string(h.counts[k]) + "\n";
  return out;
}

}  // namespace saelab
