#pragma once

// Overlap metrics per branch (System / Expert-only / Model-only), empirical
// 0-1 deferral risk, workload ratios, and dataset-level aggregation.

#include <cmath>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/errors.hpp"
#include "dseg/grid.hpp"
#include "dseg/routing.hpp"

namespace dseg {

struct OverlapMetrics {
  std::size_t tp = 0, fp = 0, fn = 0, tn = 0;
  std::optional<double> dsc, jaccard, sensitivity;  // undefined: empty region or no truth FG

  std::size_t pixels() const { return tp + fp + fn + tn; }
  bool defined() const { return dsc.has_value(); }
};

inline OverlapMetrics overlap_metrics(const BinaryGrid& pred, const BinaryGrid& truth,
                                      const BinaryGrid* region = nullptr) {
  if (!pred.same_shape(truth)) throw ShapeError("overlap_metrics: prediction and truth differ in shape");
  if (region && !region->same_shape(truth)) throw ShapeError("overlap_metrics: region shape mismatch");
  OverlapMetrics m;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (region && !(*region)[i]) continue;
    const bool p = pred[i], t = truth[i];
    if (p && t) ++m.tp;
    else if (p) ++m.fp;
    else if (t) ++m.fn;
    else ++m.tn;
  }
  if (m.tp + m.fn == 0) return m;
  const double tp = static_cast<double>(m.tp), fp = static_cast<double>(m.fp), fn = static_cast<double>(m.fn);
  m.dsc = 2.0 * tp / (2.0 * tp + fp + fn);
  m.jaccard = tp / (tp + fp + fn);
  m.sensitivity = tp / (tp + fn);
  return m;
}

inline OverlapMetrics overlap_metrics(const BinaryGrid& pred, const BinaryGrid& truth, const BinaryGrid& region) {
  return overlap_metrics(pred, truth, &region);
}

// Mean over pixels of: model error where routed to the model, expert-j error where routed to j.
inline double risk_01(const RoutingDecisionField& decisions, const BinaryGrid& model_mask,
                      const std::vector<BinaryGrid>& expert_preds, const BinaryGrid& truth) {
  require_same_plane(model_mask, decisions.height, decisions.width, "risk_01 model mask");
  require_same_plane(truth, decisions.height, decisions.width, "risk_01 truth");
  std::size_t errors = 0;
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const int d = decisions[i];
    const std::uint8_t pred = d == 0 ? model_mask[i] : expert_preds.at(static_cast<std::size_t>(d - 1))[i];
    errors += pred != truth[i];
  }
  return decisions.size() ? static_cast<double>(errors) / static_cast<double>(decisions.size()) : 0.0;
}

struct BranchMetrics {
  OverlapMetrics system;
  OverlapMetrics expert;  // expert predictions on deferred pixels
  OverlapMetrics model;   // thresholded model prediction on retained pixels
  std::vector<OverlapMetrics> per_expert;
  std::size_t deferred_pixels = 0;
  std::size_t retained_pixels = 0;
  double risk01 = 0.0;
  std::vector<double> workload;       // soft rho_j = mean_i M_j
  std::vector<double> hard_workload;  // fraction of pixels routed to expert j
};

inline BranchMetrics evaluate_branches(const FusedPrediction& fused, const ValueGrid& seg_prob,
                                       const std::vector<BinaryGrid>& expert_preds, const BinaryGrid& truth,
                                       const RoutingField& routing) {
  const BinaryGrid model_mask = threshold(seg_prob);
  BranchMetrics b;
  BinaryGrid deferred(truth.height(), truth.width());
  for (std::size_t i = 0; i < deferred.size(); ++i) deferred.set(i, fused.source[i] != 0);
  b.system = overlap_metrics(fused.system_mask, truth);
  b.expert = overlap_metrics(fused.system_mask, truth, deferred);
  b.model = overlap_metrics(model_mask, truth, fused.model_region);
  for (const auto& region : fused.expert_regions) b.per_expert.push_back(overlap_metrics(fused.system_mask, truth, region));
  b.deferred_pixels = deferred.count();
  b.retained_pixels = fused.model_region.count();
  b.risk01 = risk_01(fused.source, model_mask, expert_preds, truth);
  const std::size_t J = routing.experts(), P = routing.probs.plane();
  for (std::size_t j = 1; j <= J; ++j) {
    double s = 0.0;
    for (double v : routing.probs.channel(j)) s += v;
    b.workload.push_back(s / static_cast<double>(P));
    b.hard_workload.push_back(static_cast<double>(fused.expert_regions[j - 1].count()) / static_cast<double>(P));
  }
  return b;
}

// --- aggregation ---------------------------------------------------------

struct Summary {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation; 0 for fewer than two values
  std::size_t n = 0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  s.n = v.size();
  if (v.empty()) return s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double acc = 0.0;
    for (double x : v) acc += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(acc / static_cast<double>(v.size() - 1));
  }
  return s;
}

inline const std::vector<std::string>& branch_names() {
  static const std::vector<std::string> n = {"System", "Expert", "Model"};
  return n;
}
inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> n = {"DSC", "Jaccard", "Sensitivity"};
  return n;
}

// Macro averages over samples; undefined per-sample values are skipped.
struct DatasetMetrics {
  Summary values[3][3];  // [branch][metric]
  Summary risk01;
  std::vector<Summary> workload;
  std::vector<Summary> hard_workload;
  std::size_t samples = 0;

  const Summary& get(std::size_t branch, std::size_t metric) const { return values[branch][metric]; }
  double system_dsc() const { return values[0][0].mean; }
  double expert_dsc() const { return values[1][0].mean; }
  double model_dsc() const { return values[2][0].mean; }
};

inline DatasetMetrics aggregate(const std::vector<BranchMetrics>& per_sample) {
  DatasetMetrics d;
  d.samples = per_sample.size();
  std::vector<double> acc[3][3];
  std::vector<double> risk;
  std::vector<std::vector<double>> work, hard;
  for (const auto& b : per_sample) {
    const OverlapMetrics* branches[3] = {&b.system, &b.expert, &b.model};
    for (std::size_t k = 0; k < 3; ++k) {
      const auto& m = *branches[k];
      if (m.dsc) acc[k][0].push_back(*m.dsc);
      if (m.jaccard) acc[k][1].push_back(*m.jaccard);
      if (m.sensitivity) acc[k][2].push_back(*m.sensitivity);
    }
    risk.push_back(b.risk01);
    if (work.size() < b.workload.size()) {
      work.resize(b.workload.size());
      hard.resize(b.workload.size());
    }
    for (std::size_t j = 0; j < b.workload.size(); ++j) {
      work[j].push_back(b.workload[j]);
      hard[j].push_back(b.hard_workload[j]);
    }
  }
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t m = 0; m < 3; ++m) d.values[k][m] = summarize(acc[k][m]);
  d.risk01 = summarize(risk);
  for (std::size_t j = 0; j < work.size(); ++j) {
    d.workload.push_back(summarize(work[j]));
    d.hard_workload.push_back(summarize(hard[j]));
  }
  return d;
}

inline nlohmann::json to_json(const DatasetMetrics& d) {
  nlohmann::json j;
  j["samples"] = d.samples;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t m = 0; m < 3; ++m) {
      const Summary& s = d.values[k][m];
      j["branches"][branch_names()[k]][metric_names()[m]] = {{"mean", s.mean}, {"std", s.std}, {"n", s.n}};
    }
  j["risk01"] = {{"mean", d.risk01.mean}, {"std", d.risk01.std}};
  j["workload"] = nlohmann::json::array();
  for (std::size_t i = 0; i < d.workload.size(); ++i)
    j["workload"].push_back({{"expert", i + 1},
                             {"rho_mean", d.workload[i].mean},
                             {"rho_std", d.workload[i].std},
                             {"hard_mean", d.hard_workload[i].mean}});
  return j;
}

inline nlohmann::json to_json(const OverlapMetrics& m) {
  auto opt = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
  return {{"dsc", opt(m.dsc)}, {"jaccard", opt(m.jaccard)}, {"sensitivity", opt(m.sensitivity)},
          {"tp", m.tp},        {"fp", m.fp},                {"fn", m.fn},
          {"tn", m.tn}};
}

inline nlohmann::json to_json(const BranchMetrics& b) {
  nlohmann::json j = {{"System", to_json(b.system)},
                      {"Expert", to_json(b.expert)},
                      {"Model", to_json(b.model)},
                      {"deferred_pixels", b.deferred_pixels},
                      {"retained_pixels", b.retained_pixels},
                      {"risk01", b.risk01},
                      {"workload", b.workload},
                      {"hard_workload", b.hard_workload}};
  j["per_expert"] = nlohmann::json::array();
  for (const auto& m : b.per_expert) j["per_expert"].push_back(to_json(m));
  return j;
}

inline void write_csv_header(std::ostream& os) { os << "dataset,config,branch,metric,mean,std\n"; }

inline void write_csv_rows(std::ostream& os, const std::string& dataset, const std::string& config,
                           const DatasetMetrics& d) {
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t m = 0; m < 3; ++m)
      os << dataset << ',' << config << ',' << branch_names()[k] << ',' << metric_names()[m] << ','
         << d.values[k][m].mean << ',' << d.values[k][m].std << '\n';
  os << dataset << ',' << config << ",System,Risk01," << d.risk01.mean << ',' << d.risk01.std << '\n';
  for (std::size_t j = 0; j < d.workload.size(); ++j)
    os << dataset << ',' << config << ",Expert" << j + 1 << ",Rho," << d.workload[j].mean << ','
       << d.workload[j].std << '\n';
}

}  // namespace dseg
