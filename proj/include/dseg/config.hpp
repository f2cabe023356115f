#pragma once

// Run configuration: one JSON document with dataset, experts, loss, training
// and sweep sections. Unknown keys are rejected in every section.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/errors.hpp"
#include "dseg/experts.hpp"
#include "dseg/losses.hpp"
#include "dseg/rng.hpp"
#include "dseg/synthdata.hpp"
#include "dseg/trainer.hpp"

namespace dseg {

enum class SweepKind { Lambda, Scalability, Complementary };

inline std::string to_string(SweepKind k) {
  switch (k) {
    case SweepKind::Scalability: return "scalability";
    case SweepKind::Complementary: return "complementary";
    default: return "lambda";
  }
}

inline SweepKind sweep_kind_from(const std::string& s) {
  if (s == "lambda") return SweepKind::Lambda;
  if (s == "scalability") return SweepKind::Scalability;
  if (s == "complementary") return SweepKind::Complementary;
  throw ConfigError("unknown sweep kind '" + s + "' (lambda | scalability | complementary)");
}

struct SweepSpec {
  SweepKind kind = SweepKind::Lambda;
  std::vector<double> values = lambda_grid_values();
  std::vector<std::vector<std::string>> subsets;  // empty: the standard list for the kind
  std::size_t workers = 1;
};

struct RunConfig {
  DatasetSpec dataset;
  std::string dataset_dir;  // load instead of generating when set
  ExpertPool pool;          // full pool the experts were selected from
  std::vector<std::string> selected;
  TrainingConfig training;  // training.experts holds the selection
  SweepSpec sweep;
};

// Canonical form; parse_run_config(to_json(c)) reproduces c.
inline nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  j["dataset"] = c.dataset;
  if (!c.dataset_dir.empty()) j["dataset"]["dir"] = c.dataset_dir;
  j["experts"] = {{"inline", nlohmann::json(c.pool)}, {"select", c.selected}};
  j["model"] = {{"channels", c.training.channels}, {"adp_channels", c.training.adp_channels}};
  j["loss"] = c.training.resolved_loss();
  nlohmann::json t = c.training;
  for (const char* k : {"loss", "experts", "channels", "adp_channels"}) t.erase(k);
  j["training"] = t;
  j["sweep"] = {{"kind", to_string(c.sweep.kind)},
                {"values", c.sweep.values},
                {"subsets", c.sweep.subsets},
                {"workers", c.sweep.workers}};
  return j;
}

inline std::uint64_t config_hash(const RunConfig& c) {
  nlohmann::json j = to_json(c);
  j["sweep"].erase("workers");
  return fnv1a(j.dump());
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

namespace detail {

inline void reject_unknown(const nlohmann::json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!allowed.count(k)) throw ConfigError("unknown key '" + k + "' in " + where);
}

inline ExpertPool resolve_pool(const nlohmann::json& e, const std::filesystem::path& base_dir) {
  if (e.contains("inline")) return e.at("inline").get<ExpertPool>();
  if (e.contains("file")) {
    std::filesystem::path p = e.at("file").get<std::string>();
    if (p.is_relative()) p = base_dir / p;
    return load_pool(p);
  }
  return standard_pool(e.value("pool", std::string("comparative")));
}

}  // namespace detail

inline RunConfig parse_run_config(const nlohmann::json& j, const std::filesystem::path& base_dir = ".") {
  try {
    detail::reject_unknown(j, {"dataset", "experts", "model", "loss", "training", "sweep"}, "config");
    RunConfig c;
    if (j.contains("dataset")) {
      nlohmann::json d = j.at("dataset");
      detail::reject_unknown(
          d, {"count", "height", "width", "shape", "noise_sigma", "blur_radius", "band_width", "seed", "dir"},
          "dataset");
      if (d.contains("dir")) {
        std::filesystem::path p = d.at("dir").get<std::string>();
        if (p.is_relative()) p = base_dir / p;
        c.dataset_dir = p.string();
        d.erase("dir");
      }
      c.dataset = d.get<DatasetSpec>();
    }
    c.dataset.validate();

    const nlohmann::json e = j.value("experts", nlohmann::json::object());
    detail::reject_unknown(e, {"pool", "inline", "file", "select"}, "experts");
    c.pool = detail::resolve_pool(e, base_dir);
    if (e.contains("select")) {
      c.selected = e.at("select").get<std::vector<std::string>>();
    } else {
      for (const auto& x : c.pool.experts) c.selected.push_back(x.name);
    }
    c.training.experts = c.pool.select(c.selected).experts;

    if (j.contains("model")) {
      const auto& m = j.at("model");
      detail::reject_unknown(m, {"channels", "adp_channels"}, "model");
      c.training.channels = m.value("channels", c.training.channels);
      c.training.adp_channels = m.value("adp_channels", c.training.adp_channels);
    }
    if (j.contains("loss")) {
      const auto& l = j.at("loss");
      detail::reject_unknown(l, {"lambda1", "lambda2", "beta1", "beta2", "lb_upper", "lb_lower", "lb_single_expert"},
                             "loss");
      c.training.loss = l.get<LossConfig>();
      c.training.bounds_explicit = l.contains("lb_upper") || l.contains("lb_lower");
    }
    if (j.contains("training")) {
      const auto& t = j.at("training");
      detail::reject_unknown(t,
                             {"learning_rate", "weight_decay", "gamma", "step_epochs", "batch_size", "accumulation",
                              "max_epochs", "patience_dsc", "patience_rho", "rho_tolerance", "seed", "objective",
                              "augment", "channels", "adp_channels"},
                             "training");
      read_training_fields(t, c.training);
    }
    if (j.contains("sweep")) {
      const auto& s = j.at("sweep");
      detail::reject_unknown(s, {"kind", "values", "subsets", "workers"}, "sweep");
      if (s.contains("kind")) c.sweep.kind = sweep_kind_from(s.at("kind").get<std::string>());
      if (s.contains("values")) c.sweep.values = s.at("values").get<std::vector<double>>();
      if (s.contains("subsets")) c.sweep.subsets = s.at("subsets").get<std::vector<std::vector<std::string>>>();
      c.sweep.workers = s.value("workers", c.sweep.workers);
      if (c.sweep.values.empty()) throw ConfigError("sweep.values must be nonempty");
      if (c.sweep.workers == 0) throw ConfigError("sweep.workers must be >= 1");
    }
    c.training.validate();
    if (c.training.bounds_explicit && c.training.loss.lb_upper.size() != c.training.J() &&
        c.training.loss.lb_weight(c.training.J()) != 0.0 && c.sweep.kind == SweepKind::Lambda)
      throw ConfigError("loss bounds list " + std::to_string(c.training.loss.lb_upper.size()) +
                        " entries but " + std::to_string(c.training.J()) + " experts are selected");
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read config " + path.string());
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return parse_run_config(j, path.parent_path());
}

// Sweep cells for the configured kind.
inline std::vector<SweepCell> build_sweep(const RunConfig& c) {
  switch (c.sweep.kind) {
    case SweepKind::Lambda: return lambda_grid(c.training, c.sweep.values);
    case SweepKind::Scalability: {
      const ExpertPool pool = c.pool.name == "scalability" ? c.pool : standard_pool("scalability");
      return expert_subsets(c.training, pool, c.sweep.subsets.empty() ? scalability_subsets() : c.sweep.subsets);
    }
    case SweepKind::Complementary: {
      const ExpertPool pool = c.pool.name == "complementary" ? c.pool : standard_pool("complementary");
      return expert_subsets(c.training, pool, c.sweep.subsets.empty() ? complementary_subsets() : c.sweep.subsets);
    }
  }
  throw ConfigError("unhandled sweep kind");
}

}  // namespace dseg
