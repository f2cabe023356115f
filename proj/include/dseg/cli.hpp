#pragma once

// `dseg` command line: gen-data | train | eval | sweep | serve | report.
// Exit status: 0 ok, 1 config error, 2 data error, 3 training abort.

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "dseg/config.hpp"
#include "dseg/errors.hpp"
#include "dseg/metrics.hpp"
#include "dseg/model.hpp"
#include "dseg/pgm.hpp"
#include "dseg/routing.hpp"
#include "dseg/synthdata.hpp"
#include "dseg/trainer.hpp"

#ifndef DSEG_VERSION
#define DSEG_VERSION "0.0.0"
#endif

namespace dseg::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitConfig = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitAbort = 3;

inline constexpr const char* kRunManifest = "run_manifest.json";

// Optional hook so the serve command can live in a translation unit that links httplib.
using ServeFn = std::function<int(const std::filesystem::path& checkpoint, const std::optional<RunConfig>& cfg,
                                  const std::string& host, int port, const std::string& sessions_dir,
                                  std::ostream& out)>;

namespace detail {

inline std::string quote(const std::string& s) {
  std::string o = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') o += '\\';
    if (c == '\n') {
      o += "\\n";
      continue;
    }
    o += c;
  }
  return o + "\"";
}

inline void write_json(const std::filesystem::path& p, const nlohmann::json& j) {
  std::ofstream f(p);
  if (!f) throw DataError("cannot write " + p.string());
  f << j.dump(2) << '\n';
}

inline void prepare_out(const std::filesystem::path& out, bool overwrite) {
  if (std::filesystem::exists(out / kRunManifest) && !overwrite)
    throw ConfigError("output directory " + out.string() + " already holds a completed run (use --overwrite)");
  std::filesystem::create_directories(out);
}

inline void write_manifest(const std::filesystem::path& out, const std::string& command, const RunConfig& cfg,
                           const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json m = {{"command", command},
                      {"code_version", DSEG_VERSION},
                      {"config_hash", hex64(config_hash(cfg))},
                      {"seeds",
                       {{"dataset", cfg.dataset.seed},
                        {"training", cfg.training.seed},
                        {"init", cfg.training.init_seed()}}},
                      {"config", to_json(cfg)}};
  for (const auto& [k, v] : extra.items()) m[k] = v;
  write_json(out / kRunManifest, m);
}

inline std::vector<Sample> load_samples(const RunConfig& cfg) {
  if (!cfg.dataset_dir.empty()) return load_dataset(cfg.dataset_dir).samples;
  return generate(cfg.dataset);
}

inline void write_visuals(const std::filesystem::path& dir, const DeferralNet& net, const std::vector<Sample>& val,
                          const std::vector<ExpertProfile>& experts, std::uint64_t seed, std::size_t count) {
  std::filesystem::create_directories(dir);
  for (std::size_t s = 0; s < std::min(count, val.size()); ++s) {
    const Sample& smp = val[s];
    const ForwardOutputs out = forward(net, smp.image);
    const RoutingField routing = RoutingField::from_logits(out.routing_logits);
    const RoutingDecisionField dec = decide(routing);
    const auto preds = simulate(smp.mask, smp.band, experts, validation_expert_seed(seed, s)).predictions;
    const FusedPrediction fused = fuse(out.seg_prob, dec, preds);
    pgm::write(dir / (smp.id + "_image.pgm"), pgm::from_values(smp.image));
    pgm::write(dir / (smp.id + "_truth.pgm"), pgm::from_mask(smp.mask));
    pgm::write(dir / (smp.id + "_prob.pgm"), pgm::from_values(out.seg_prob));
    pgm::write(dir / (smp.id + "_decisions.pgm"),
               pgm::from_labels(dec.decisions, dec.height, dec.width, static_cast<int>(dec.experts)));
    pgm::write(dir / (smp.id + "_heatmap.pgm"), pgm::from_values(deferral_heatmap(routing)));
    pgm::write(dir / (smp.id + "_deferral_map.pgm"), pgm::from_values(out.deferral_map));
    pgm::write(dir / (smp.id + "_system.pgm"), pgm::from_mask(fused.system_mask));
  }
}

inline nlohmann::json eval_json(const EvalResult& ev) {
  nlohmann::json j = to_json(ev.summary);
  j["model_full_dsc"] = {{"mean", ev.model_full_dsc.mean}, {"std", ev.model_full_dsc.std}};
  j["model_full_risk"] = {{"mean", ev.model_full_risk.mean}, {"std", ev.model_full_risk.std}};
  j["expert_risk"] = nlohmann::json::array();
  for (const auto& s : ev.expert_risk) j["expert_risk"].push_back({{"mean", s.mean}, {"std", s.std}});
  j["heatmap_band_mean"] = ev.heatmap_band_mean;
  j["heatmap_off_band_mean"] = ev.heatmap_off_band_mean;
  return j;
}

inline void write_metrics(const std::filesystem::path& out, const std::string& dataset, const std::string& key,
                          const EvalResult& ev) {
  write_json(out / "metrics.json", eval_json(ev));
  std::ofstream csv(out / "metrics.csv");
  write_csv_header(csv);
  write_csv_rows(csv, dataset, key, ev.summary);
}

struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<double> lambda1, lambda2;
  std::optional<std::size_t> count;

  void apply(RunConfig& c) const {
    if (seed) c.training.seed = *seed;
    if (epochs) {
      c.training.max_epochs = *epochs;
      c.training.patience_dsc = std::min(c.training.patience_dsc, *epochs);
      c.training.patience_rho = std::min(c.training.patience_rho, *epochs);
    }
    if (lr) c.training.learning_rate = *lr;
    if (lambda1) c.training.loss.lambda1 = *lambda1;
    if (lambda2) c.training.loss.lambda2 = *lambda2;
    if (count) c.dataset.count = *count;
    c.dataset.validate();
    c.training.validate();
  }
};

inline void add_overrides(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--seed", o.seed, "Override training.seed");
  cmd->add_option("--epochs", o.epochs, "Override training.max_epochs");
  cmd->add_option("--lr", o.lr, "Override training.learning_rate");
  cmd->add_option("--lambda1", o.lambda1, "Override loss.lambda1");
  cmd->add_option("--lambda2", o.lambda2, "Override loss.lambda2");
  cmd->add_option("--count", o.count, "Override dataset.count");
}

inline RunConfig read_config(const std::string& path, const Overrides& o) {
  RunConfig c = path.empty() ? parse_run_config(nlohmann::json::object()) : load_run_config(path);
  o.apply(c);
  return c;
}

// Fixed-width table in the layout System / Expert / Model x Jaccard / DSC / Sens.
inline void print_table(std::ostream& os, const std::vector<std::pair<std::string, nlohmann::json>>& rows) {
  static const char* metrics[3] = {"Jaccard", "DSC", "Sensitivity"};
  static const char* labels[3] = {"Jac", "DSC", "Sens"};
  std::size_t kw = 4;
  for (const auto& [k, v] : rows) kw = std::max(kw, k.size());
  os << std::left << std::setw(static_cast<int>(kw)) << "cell";
  for (const auto& b : branch_names())
    for (const char* m : labels) os << "  " << std::setw(14) << (b + "." + m);
  os << '\n';
  for (const auto& [key, j] : rows) {
    os << std::left << std::setw(static_cast<int>(kw)) << key;
    for (const auto& b : branch_names())
      for (const char* m : metrics) {
        std::ostringstream cell;
        if (j.is_null()) {
          cell << "failed";
        } else {
          const auto& s = j.at("branches").at(b).at(m);
          if (s.at("n").get<std::size_t>() == 0) cell << "n/a";
          else cell << std::fixed << std::setprecision(2) << 100.0 * s.at("mean").get<double>() << "+-"
                    << 100.0 * s.at("std").get<double>();
        }
        os << "  " << std::setw(14) << cell.str();
      }
    os << '\n';
  }
}

}  // namespace detail

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr,
               const ServeFn& serve = {}) {
  CLI::App app{"Pixel-wise learning-to-defer segmentation at desk scale", "dseg"};
  app.require_subcommand(1);
  app.set_version_flag("--version", DSEG_VERSION);

  std::string config_path, out_dir, checkpoint, sessions_dir, kind, host = "127.0.0.1", format = "table";
  bool overwrite = false, zero_init = false;
  std::size_t workers = 0, visuals = 4;
  int port = 8080;
  detail::Overrides ov;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset directory");
  auto* tr = app.add_subcommand("train", "Train a deferral net");
  auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the validation split");
  auto* sw = app.add_subcommand("sweep", "Run a lambda grid or expert-subset sweep");
  auto* sv = app.add_subcommand("serve", "Serve the annotation session API");
  auto* rp = app.add_subcommand("report", "Print the result table of a run or sweep directory");

  for (auto* c : {gen, tr, ev, sw}) {
    c->add_option("--config,-c", config_path, "Run config JSON");
    c->add_option("--out,-o", out_dir, "Output directory")->required();
    c->add_flag("--overwrite", overwrite, "Replace an existing completed run");
    detail::add_overrides(c, ov);
  }
  for (auto* c : {tr, ev}) c->add_option("--visuals", visuals, "Number of validation samples to render as PGM");
  ev->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate");
  ev->add_flag("--zero-init", zero_init, "Evaluate an all-zero net instead of a checkpoint");
  sw->add_option("--kind", kind, "lambda | scalability | complementary (overrides sweep.kind)");
  sw->add_option("--workers", workers, "Concurrent sweep cells (overrides sweep.workers)");
  sv->add_option("--checkpoint", checkpoint, "Checkpoint to serve")->required();
  sv->add_option("--config,-c", config_path, "Run config; its dataset backs the sample browser");
  sv->add_option("--host", host, "Bind address");
  sv->add_option("--port", port, "Port");
  sv->add_option("--sessions", sessions_dir, "Directory for session persistence");
  rp->add_option("--dir,-d", out_dir, "Run or sweep directory")->required();
  rp->add_option("--format", format, "table | csv | json");

  auto fail = [&err](int code, const char* kind_name, const std::string& msg) {
    err << "dseg: error=" << kind_name << " message=" << detail::quote(msg) << '\n';
    return code;
  };

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return kExitOk;
    } catch (const CLI::CallForVersion&) {
      out << DSEG_VERSION << '\n';
      return kExitOk;
    } catch (const CLI::ParseError& e) {
      return fail(kExitConfig, "config", e.what());
    }
    const std::filesystem::path outp = out_dir;

    if (gen->parsed()) {
      RunConfig cfg = detail::read_config(config_path, ov);
      detail::prepare_out(outp, overwrite);
      const auto samples = generate(cfg.dataset);
      save_dataset(outp, cfg.dataset, samples);
      detail::write_manifest(outp, "gen-data", cfg, {{"samples", samples.size()}});
      out << "wrote " << samples.size() << " samples to " << outp.string() << '\n';
      return kExitOk;
    }

    if (tr->parsed()) {
      RunConfig cfg = detail::read_config(config_path, ov);
      detail::prepare_out(outp, overwrite);
      const Split split = split_by_id(detail::load_samples(cfg));
      std::ofstream progress(outp / "progress.log");
      TrainResult res;
      try {
        res = train_fresh(split.train, split.val, cfg.training, [&](const EpochRecord& e) {
          progress << "epoch " << e.epoch << " lr " << e.lr << " total " << e.train.total << " val " << e.val_score
                   << '\n';
          progress.flush();
        });
      } catch (const TrainingAbort& a) {
        std::ofstream(outp / "abort_snapshot.json") << a.snapshot() << '\n';
        throw;
      }
      save_checkpoint(outp / "best.dsn", res.net);
      save_checkpoint(outp / "last.dsn", res.last);
      detail::write_json(outp / "train_log.json", to_json(res.log));
      {
        std::ofstream csv(outp / "epochs.csv");
        write_epoch_csv(csv, res.log);
      }
      const EvalResult evr = evaluate(res.net, split.val, cfg.training.experts, cfg.training.seed);
      detail::write_metrics(outp, "synthetic", "train", evr);
      detail::write_visuals(outp / "visuals", res.net, split.val, cfg.training.experts, cfg.training.seed, visuals);
      detail::write_manifest(outp, "train", cfg,
                             {{"best_epoch", res.log.best_epoch}, {"epochs_run", res.log.epochs.size()},
                              {"stop_reason", res.log.stop_reason}});
      out << "best epoch " << res.log.best_epoch << " System DSC " << evr.summary.system_dsc() << '\n';
      return kExitOk;
    }

    if (ev->parsed()) {
      RunConfig cfg = detail::read_config(config_path, ov);
      if (zero_init == !checkpoint.empty()) throw ConfigError("eval needs exactly one of --checkpoint or --zero-init");
      detail::prepare_out(outp, overwrite);
      const Split split = split_by_id(detail::load_samples(cfg));
      const auto& m = split.val.front().mask;
      DeferralNet net = zero_init ? DeferralNet(cfg.training.net_shape(m.height(), m.width()))
                                  : load_checkpoint(checkpoint);
      if (net.experts() != cfg.training.J())
        throw ConfigError("checkpoint has " + std::to_string(net.experts()) + " experts, config selects " +
                          std::to_string(cfg.training.J()));
      const EvalResult evr = evaluate(net, split.val, cfg.training.experts, cfg.training.seed);
      double min_p = 1.0, max_p = 0.0;
      for (const auto& s : split.val) {
        const ValueGrid p = softmax_values(forward(net, s.image).routing_logits);
        for (double v : p.data()) {
          min_p = std::min(min_p, v);
          max_p = std::max(max_p, v);
        }
      }
      nlohmann::json j = detail::eval_json(evr);
      j["routing_prob_range"] = {min_p, max_p};
      detail::write_json(outp / "metrics.json", j);
      {
        std::ofstream csv(outp / "metrics.csv");
        write_csv_header(csv);
        write_csv_rows(csv, "synthetic", zero_init ? "zero-init" : "checkpoint", evr.summary);
      }
      detail::write_visuals(outp / "visuals", net, split.val, cfg.training.experts, cfg.training.seed, visuals);
      detail::write_manifest(outp, "eval", cfg, {{"checkpoint", zero_init ? "zero-init" : checkpoint}});
      out << "System DSC " << evr.summary.system_dsc() << " Expert DSC " << evr.summary.expert_dsc()
          << " Model DSC " << evr.summary.model_dsc() << '\n';
      return kExitOk;
    }

    if (sw->parsed()) {
      RunConfig cfg = detail::read_config(config_path, ov);
      if (!kind.empty()) cfg.sweep.kind = sweep_kind_from(kind);
      if (workers > 0) cfg.sweep.workers = workers;
      detail::prepare_out(outp, overwrite);
      const Split split = split_by_id(detail::load_samples(cfg));
      const auto cells = build_sweep(cfg);
      const auto results = run_sweep(cells, split.train, split.val, cfg.sweep.workers);
      nlohmann::json rows = nlohmann::json::array();
      std::size_t failed = 0;
      for (std::size_t i = 0; i < results.size(); ++i) {
        const auto& r = results[i];
        nlohmann::json row = {{"key", r.key}, {"params", r.params}};
        if (r.ok()) {
          row["metrics"] = detail::eval_json(*r.final_metrics);
          row["best_epoch"] = r.log->best_epoch;
          row["epochs_run"] = r.log->epochs.size();
          const auto cell_dir = outp / "cells" / std::to_string(i);
          std::filesystem::create_directories(cell_dir);
          detail::write_json(cell_dir / "train_log.json", to_json(*r.log, false));
          save_checkpoint(cell_dir / "best.dsn", *r.net);
        } else {
          row["error"] = r.error;
          ++failed;
        }
        rows.push_back(std::move(row));
      }
      detail::write_json(outp / "sweep.json", {{"kind", to_string(cfg.sweep.kind)}, {"cells", rows}});
      {
        std::ofstream csv(outp / "sweep.csv");
        write_sweep_csv(csv, "synthetic", results);
      }
      detail::write_manifest(outp, "sweep", cfg, {{"cells", results.size()}, {"failed_cells", failed}});
      out << "sweep " << to_string(cfg.sweep.kind) << ": " << results.size() << " cells, " << failed << " failed\n";
      return kExitOk;
    }

    if (sv->parsed()) {
      if (!serve) throw ConfigError("this build has no HTTP server");
      std::optional<RunConfig> cfg;
      if (!config_path.empty()) cfg = detail::read_config(config_path, ov);
      return serve(checkpoint, cfg, host, port, sessions_dir, out);
    }

    if (rp->parsed()) {
      std::vector<std::pair<std::string, nlohmann::json>> rows;
      if (std::filesystem::exists(outp / "sweep.json")) {
        std::ifstream f(outp / "sweep.json");
        const nlohmann::json s = nlohmann::json::parse(f);
        for (const auto& c : s.at("cells"))
          rows.emplace_back(c.at("key").get<std::string>(), c.contains("metrics") ? c.at("metrics") : nlohmann::json());
      } else if (std::filesystem::exists(outp / "metrics.json")) {
        std::ifstream f(outp / "metrics.json");
        rows.emplace_back(outp.filename().string(), nlohmann::json::parse(f));
      } else {
        throw DataError("no sweep.json or metrics.json in " + outp.string());
      }
      if (format == "json") {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& [k, v] : rows) j.push_back({{"key", k}, {"metrics", v}});
        out << j.dump(2) << '\n';
      } else if (format == "csv") {
        out << "cell,branch,metric,mean,std\n";
        for (const auto& [k, v] : rows) {
          if (v.is_null()) continue;
          for (const auto& b : branch_names())
            for (const auto& m : metric_names()) {
              const auto& s = v.at("branches").at(b).at(m);
              out << '"' << k << "\"," << b << ',' << m << ',' << s.at("mean").get<double>() << ','
                  << s.at("std").get<double>() << '\n';
            }
        }
      } else if (format == "table") {
        detail::print_table(out, rows);
      } else {
        throw ConfigError("unknown report format '" + format + "'");
      }
      return kExitOk;
    }
  } catch (const ConfigError& e) {
    return fail(kExitConfig, "config", e.what());
  } catch (const TrainingAbort& e) {
    return fail(kExitAbort, "training-abort", e.what());
  } catch (const DataError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const ShapeError& e) {
    return fail(kExitData, "data", e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(kExitData, "data", e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(kExitData, "data", e.what());
  }
  return kExitConfig;
}

}  // namespace dseg::cli
