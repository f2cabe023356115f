#pragma once

// Mini-batch training with gradient accumulation, AdamW + step decay, early
// stopping on validation DSC and deferral-ratio stability, plus grid sweeps.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <mutex>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/errors.hpp"
#include "dseg/experts.hpp"
#include "dseg/losses.hpp"
#include "dseg/metrics.hpp"
#include "dseg/model.hpp"
#include "dseg/optimizer.hpp"
#include "dseg/routing.hpp"
#include "dseg/rng.hpp"
#include "dseg/synthdata.hpp"

namespace dseg {

enum class Objective { Deferral, BceOnly };

inline std::string to_string(Objective o) { return o == Objective::BceOnly ? "bce-only" : "deferral"; }

inline Objective objective_from(const std::string& s) {
  if (s == "deferral") return Objective::Deferral;
  if (s == "bce-only" || s == "bce_only") return Objective::BceOnly;
  throw ConfigError("unknown training objective '" + s + "'");
}

struct TrainingConfig {
  double learning_rate = 1e-4;
  double weight_decay = 0.01;
  double gamma = 0.8;
  std::size_t step_epochs = 2;
  std::size_t batch_size = 2;
  std::size_t accumulation = 4;
  std::size_t max_epochs = 200;
  std::size_t patience_dsc = 50;
  std::size_t patience_rho = 50;
  double rho_tolerance = 0.005;
  std::uint64_t seed = 0;
  Objective objective = Objective::Deferral;
  bool augment = true;
  std::size_t channels = 16;
  std::size_t adp_channels = 8;
  LossConfig loss;
  bool bounds_explicit = false;
  std::vector<ExpertProfile> experts;

  void validate() const {
    if (!(learning_rate >= 0.0) || !(weight_decay >= 0.0) || !(gamma > 0.0))
      throw ConfigError("training: learning_rate and weight_decay must be >= 0, gamma > 0");
    if (step_epochs == 0 || batch_size == 0 || accumulation == 0 || max_epochs == 0)
      throw ConfigError("training: step_epochs, batch_size, accumulation and max_epochs must be positive");
    if (patience_dsc == 0 || patience_rho == 0 || patience_dsc > max_epochs || patience_rho > max_epochs)
      throw ConfigError("training: patience must lie in [1, max_epochs]");
    if (!(rho_tolerance >= 0.0)) throw ConfigError("training: rho_tolerance must be >= 0");
    if (experts.empty()) throw ConfigError("training: at least one expert is required");
    for (const auto& e : experts) e.validate();
    loss.validate();
  }

  std::size_t J() const { return experts.size(); }
  LossConfig resolved_loss() const { return resolve_bounds(loss, J(), bounds_explicit); }
  NetShape net_shape(std::size_t h, std::size_t w) const { return {J(), channels, adp_channels, h, w}; }
  std::uint64_t init_seed() const { return derive_seed(seed, {0x1417}); }
};

inline void to_json(nlohmann::json& j, const TrainingConfig& c) {
  nlohmann::json experts = nlohmann::json::array();
  for (const auto& e : c.experts)
    experts.push_back({{"name", e.name}, {"fg", e.fg_acc}, {"bg", e.bg_acc}, {"bd", e.bd_param},
                       {"mode", to_string(e.bd_mode)}});
  j = {{"learning_rate", c.learning_rate},
       {"weight_decay", c.weight_decay},
       {"gamma", c.gamma},
       {"step_epochs", c.step_epochs},
       {"batch_size", c.batch_size},
       {"accumulation", c.accumulation},
       {"max_epochs", c.max_epochs},
       {"patience_dsc", c.patience_dsc},
       {"patience_rho", c.patience_rho},
       {"rho_tolerance", c.rho_tolerance},
       {"seed", c.seed},
       {"objective", to_string(c.objective)},
       {"augment", c.augment},
       {"channels", c.channels},
       {"adp_channels", c.adp_channels},
       {"loss", c.resolved_loss()},
       {"experts", experts}};
}

// Reads the scalar training fields; experts and loss are handled by the run config.
inline void read_training_fields(const nlohmann::json& j, TrainingConfig& c) {
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.gamma = j.value("gamma", c.gamma);
  c.step_epochs = j.value("step_epochs", c.step_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.accumulation = j.value("accumulation", c.accumulation);
  c.max_epochs = j.value("max_epochs", c.max_epochs);
  c.patience_dsc = j.value("patience_dsc", c.patience_dsc);
  c.patience_rho = j.value("patience_rho", c.patience_rho);
  c.rho_tolerance = j.value("rho_tolerance", c.rho_tolerance);
  c.seed = j.value("seed", c.seed);
  if (j.contains("objective")) c.objective = objective_from(j.at("objective").get<std::string>());
  c.augment = j.value("augment", c.augment);
  c.channels = j.value("channels", c.channels);
  c.adp_channels = j.value("adp_channels", c.adp_channels);
}

// --- evaluation ----------------------------------------------------------

inline std::uint64_t validation_expert_seed(std::uint64_t seed, std::size_t index) {
  return derive_seed(seed, {0xE7A1, index});
}

struct EvalResult {
  std::vector<BranchMetrics> per_sample;
  DatasetMetrics summary;
  Summary model_full_dsc;            // thresholded model prediction over every pixel
  Summary model_full_risk;           // 0-1 error of the model alone
  std::vector<Summary> expert_risk;  // 0-1 error of each expert alone (always defer to j)
  double heatmap_band_mean = 0.0;
  double heatmap_off_band_mean = 0.0;
};

inline EvalResult evaluate(const DeferralNet& net, const std::vector<Sample>& samples,
                           const std::vector<ExpertProfile>& experts, std::uint64_t seed) {
  if (experts.size() != net.experts())
    throw ConfigError("evaluate: net has " + std::to_string(net.experts()) + " expert channels but " +
                      std::to_string(experts.size()) + " experts were given");
  EvalResult r;
  std::vector<double> full_dsc, full_risk;
  std::vector<std::vector<double>> exp_risk(experts.size());
  double band_sum = 0.0, off_sum = 0.0;
  std::size_t band_n = 0, off_n = 0;
  for (std::size_t s = 0; s < samples.size(); ++s) {
    const Sample& smp = samples[s];
    const ForwardOutputs out = forward(net, smp.image);
    const auto preds = simulate(smp.mask, smp.band, experts, validation_expert_seed(seed, s)).predictions;
    const RoutingField routing = RoutingField::from_logits(out.routing_logits);
    const FusedPrediction fused = fuse(out.seg_prob, decide(routing), preds);
    r.per_sample.push_back(evaluate_branches(fused, out.seg_prob, preds, smp.mask, routing));
    const BinaryGrid model_mask = threshold(out.seg_prob);
    const OverlapMetrics full = overlap_metrics(model_mask, smp.mask);
    if (full.dsc) full_dsc.push_back(*full.dsc);
    const double P = static_cast<double>(smp.mask.size());
    full_risk.push_back(static_cast<double>(full.fp + full.fn) / P);
    for (std::size_t j = 0; j < preds.size(); ++j) {
      const OverlapMetrics e = overlap_metrics(preds[j], smp.mask);
      exp_risk[j].push_back(static_cast<double>(e.fp + e.fn) / P);
    }
    const ValueGrid heat = deferral_heatmap(routing);
    for (std::size_t i = 0; i < heat.size(); ++i) {
      if (smp.band[i]) {
        band_sum += heat[i];
        ++band_n;
      } else {
        off_sum += heat[i];
        ++off_n;
      }
    }
  }
  r.summary = aggregate(r.per_sample);
  r.model_full_dsc = summarize(full_dsc);
  r.model_full_risk = summarize(full_risk);
  for (auto& v : exp_risk) r.expert_risk.push_back(summarize(v));
  r.heatmap_band_mean = band_n ? band_sum / static_cast<double>(band_n) : 0.0;
  r.heatmap_off_band_mean = off_n ? off_sum / static_cast<double>(off_n) : 0.0;
  return r;
}

// --- gradients -----------------------------------------------------------

struct TrainItem {
  ValueGrid image;
  BinaryGrid mask;
  std::vector<BinaryGrid> experts;
};

struct GroupGradient {
  DeferralNet::Params grads;
  LossBreakdown loss;  // sample-weighted mean over micro-batches
  std::vector<double> rho;
  bool finite = true;
};

// Gradient of one optimizer step over `items`, split into micro-batches of
// `micro` samples. Each micro-batch loss is scaled by its share of the group.
inline GroupGradient group_gradient(const DeferralNet& net, std::span<const TrainItem> items, std::size_t micro,
                                    const LossConfig& loss, Objective objective) {
  if (items.empty()) throw ShapeError("group_gradient: empty group");
  if (micro == 0) throw ConfigError("group_gradient: micro-batch size must be positive");
  GroupGradient g;
  for (std::size_t k = 0; k < kParamCount; ++k) g.grads[k] = ValueGrid(net.params()[k].shape());
  g.rho.assign(net.experts(), 0.0);
  const double n_group = static_cast<double>(items.size());
  for (std::size_t start = 0; start < items.size(); start += micro) {
    const std::size_t n = std::min(micro, items.size() - start);
    const double share = static_cast<double>(n) / n_group;
    Tape tape;
    const ParamBinding p = bind(net, tape);
    std::vector<ForwardVars> outs;
    std::vector<BinaryGrid> truths;
    std::vector<std::vector<BinaryGrid>> experts;
    for (std::size_t b = start; b < start + n; ++b) {
      outs.push_back(forward(p, tape.constant(items[b].image)));
      truths.push_back(items[b].mask);
      experts.push_back(items[b].experts);
    }
    Var objective_var;
    if (objective == Objective::BceOnly) {
      objective_var = bce_only_loss(outs, truths);
      const double v = objective_var.value().item();
      g.loss.total += share * v;
    } else {
      TotalLoss tl = total_loss(outs, truths, experts, loss);
      objective_var = tl.total;
      g.loss.dc += share * tl.breakdown.dc;
      g.loss.sc += share * tl.breakdown.sc;
      g.loss.lb += share * tl.breakdown.lb;
      g.loss.total += share * tl.breakdown.total;
      g.loss.lb_weight = tl.breakdown.lb_weight;
      for (std::size_t j = 0; j < g.rho.size() && j < tl.workload.rho.size(); ++j)
        g.rho[j] += share * tl.workload.rho[j];
    }
    if (!std::isfinite(objective_var.value().item())) {
      g.finite = false;
      return g;
    }
    tape.backward(objective_var);
    for (std::size_t k = 0; k < kParamCount; ++k) {
      const ValueGrid& gk = p[static_cast<ParamId>(k)].grad();
      auto dst = g.grads[k].data();
      for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += share * gk[i];
    }
  }
  return g;
}

// --- training ------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double lr = 0.0;
  LossBreakdown train;
  std::vector<double> rho;  // epoch mean of the batch routing ratios
  double total_deferral = 0.0;
  double val_score = 0.0;  // selection metric
  DatasetMetrics val;
  double val_model_full_dsc = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> epochs;
  std::size_t best_epoch = 0;
  double best_score = 0.0;
  std::string stop_reason;
  std::size_t steps = 0;
};

inline nlohmann::json to_json(const EpochRecord& e, bool with_timing = true) {
  nlohmann::json j = {{"epoch", e.epoch},
                      {"lr", e.lr},
                      {"dc", e.train.dc},
                      {"sc", e.train.sc},
                      {"lb", e.train.lb},
                      {"total", e.train.total},
                      {"rho", e.rho},
                      {"total_deferral", e.total_deferral},
                      {"val_score", e.val_score},
                      {"val_model_full_dsc", e.val_model_full_dsc},
                      {"val", to_json(e.val)}};
  if (with_timing) j["seconds"] = e.seconds;
  return j;
}

inline nlohmann::json to_json(const TrainLog& log, bool with_timing = true) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : log.epochs) epochs.push_back(to_json(e, with_timing));
  return {{"rho_stability",
           "stop counter resets when the epoch-mean total deferral ratio moves by more than rho_tolerance"},
          {"best_epoch", log.best_epoch},
          {"best_score", log.best_score},
          {"stop_reason", log.stop_reason},
          {"steps", log.steps},
          {"epochs", epochs}};
}

inline void write_epoch_csv(std::ostream& os, const TrainLog& log) {
  const std::size_t J = log.epochs.empty() ? 0 : log.epochs.front().rho.size();
  os << "epoch,lr,dc,sc,lb,total";
  for (std::size_t j = 1; j <= J; ++j) os << ",rho_" << j;
  os << ",val_system_dsc,val_expert_dsc,val_model_dsc,val_model_full_dsc,val_risk01,seconds\n";
  for (const auto& e : log.epochs) {
    os << e.epoch << ',' << e.lr << ',' << e.train.dc << ',' << e.train.sc << ',' << e.train.lb << ','
       << e.train.total;
    for (double r : e.rho) os << ',' << r;
    os << ',' << e.val.system_dsc() << ',' << e.val.expert_dsc() << ',' << e.val.model_dsc() << ','
       << e.val_model_full_dsc << ',' << e.val.risk01.mean << ',' << e.seconds << '\n';
  }
}

struct TrainResult {
  DeferralNet net;  // best-validation checkpoint
  DeferralNet last;
  TrainLog log;
};

using EpochCallback = std::function<void(const EpochRecord&)>;

inline Dihedral draw_dihedral(Rng& rng, bool square) {
  const auto r = rng();
  Dihedral d;
  d.flip = (r & 1u) != 0;
  d.quarter_turns = static_cast<int>((r >> 1) % 4);
  if (!square) d.quarter_turns = (d.quarter_turns / 2) * 2;
  return d;
}

inline TrainResult train(DeferralNet net, const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                         const TrainingConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty() || val_set.empty()) throw DataError("train: training and validation sets must be nonempty");
  if (net.experts() != cfg.J())
    throw ConfigError("train: net has " + std::to_string(net.experts()) + " expert channels but the config lists " +
                      std::to_string(cfg.J()) + " experts");
  const LossConfig loss = cfg.resolved_loss();
  if (cfg.objective == Objective::Deferral && loss.lb_weight(cfg.J()) != 0.0 && loss.lb_upper.size() != cfg.J())
    throw ConfigError("train: load-balancing bounds have " + std::to_string(loss.lb_upper.size()) +
                      " entries but J=" + std::to_string(cfg.J()));
  AdamW opt(net, AdamWConfig{0.9, 0.999, 1e-8, cfg.weight_decay});
  const StepLR sched{cfg.learning_rate, cfg.gamma, cfg.step_epochs};
  const std::size_t group = cfg.batch_size * cfg.accumulation;

  TrainResult res{net, net, {}};
  bool have_best = false;
  std::size_t stale_dsc = 0, stable_rho = 0;
  std::optional<double> prev_deferral;
  std::vector<std::size_t> order(train_set.size());

  for (std::size_t epoch = 0; epoch < cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sched.at(epoch);
    rec.rho.assign(cfg.J(), 0.0);
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng(derive_seed(cfg.seed, {0x5EED, epoch}));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    for (std::size_t start = 0; start < order.size(); start += group) {
      const std::size_t n = std::min(group, order.size() - start);
      std::vector<TrainItem> items;
      std::vector<std::string> ids;
      for (std::size_t k = start; k < start + n; ++k) {
        const std::size_t idx = order[k];
        const Sample& s = train_set[idx];
        Rng aug(derive_seed(cfg.seed, {0xA06, epoch, idx}));
        const Dihedral d = cfg.augment ? draw_dihedral(aug, s.mask.height() == s.mask.width()) : Dihedral{};
        TrainItem it{apply(d, s.image), apply(d, s.mask), {}};
        const BinaryGrid band = apply(d, s.band);
        it.experts = simulate(it.mask, band, cfg.experts, derive_seed(cfg.seed, {0xE8, epoch, idx})).predictions;
        items.push_back(std::move(it));
        ids.push_back(s.id);
      }
      GroupGradient g = group_gradient(net, items, cfg.batch_size, loss, cfg.objective);
      bool finite = g.finite;
      for (const auto& gk : g.grads) finite = finite && gk.all_finite();
      if (!finite)
        throw TrainingAbort("non-finite loss or gradient at epoch " + std::to_string(epoch),
                            nlohmann::json{{"epoch", epoch},
                                           {"step", res.log.steps},
                                           {"samples", ids},
                                           {"dc", g.loss.dc},
                                           {"sc", g.loss.sc},
                                           {"lb", g.loss.lb},
                                           {"total", g.loss.total}}
                                .dump());
      opt.step(net, g.grads, rec.lr);
      ++res.log.steps;
      const double w = static_cast<double>(n) / static_cast<double>(order.size());
      rec.train.dc += w * g.loss.dc;
      rec.train.sc += w * g.loss.sc;
      rec.train.lb += w * g.loss.lb;
      rec.train.total += w * g.loss.total;
      rec.train.lb_weight = g.loss.lb_weight;
      for (std::size_t j = 0; j < cfg.J(); ++j) rec.rho[j] += w * g.rho[j];
    }
    for (const auto& p : net.params())
      if (!p.all_finite())
        throw TrainingAbort("non-finite parameters after epoch " + std::to_string(epoch),
                            nlohmann::json{{"epoch", epoch}}.dump());
    for (double r : rec.rho) rec.total_deferral += r;

    const EvalResult ev = evaluate(net, val_set, cfg.experts, cfg.seed);
    rec.val = ev.summary;
    rec.val_model_full_dsc = ev.model_full_dsc.mean;
    rec.val_score = cfg.objective == Objective::BceOnly ? ev.model_full_dsc.mean : ev.summary.system_dsc();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    if (!have_best || rec.val_score > res.log.best_score) {
      have_best = true;
      res.log.best_score = rec.val_score;
      res.log.best_epoch = epoch;
      res.net = net;
      stale_dsc = 0;
    } else {
      ++stale_dsc;
    }
    if (prev_deferral && std::abs(rec.total_deferral - *prev_deferral) > cfg.rho_tolerance) stable_rho = 0;
    else if (prev_deferral) ++stable_rho;
    prev_deferral = rec.total_deferral;

    res.log.epochs.push_back(rec);
    if (on_epoch) on_epoch(res.log.epochs.back());
    if (stale_dsc >= cfg.patience_dsc && stable_rho >= cfg.patience_rho) {
      res.log.stop_reason = "early-stop";
      break;
    }
  }
  if (res.log.stop_reason.empty()) res.log.stop_reason = "max-epochs";
  res.last = net;
  return res;
}

// Fresh net initialized from the config seed, then trained.
inline TrainResult train_fresh(const std::vector<Sample>& train_set, const std::vector<Sample>& val_set,
                               const TrainingConfig& cfg, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw DataError("train: empty training set");
  const auto& m = train_set.front().mask;
  return train(init(cfg.init_seed(), cfg.net_shape(m.height(), m.width())), train_set, val_set, cfg, on_epoch);
}

// --- sweeps --------------------------------------------------------------

struct SweepCell {
  std::string key;
  nlohmann::json params;
  TrainingConfig cfg;
};

inline const std::vector<double>& lambda_grid_values() {
  static const std::vector<double> v = {0.1, 1.0, 5.0, 10.0};
  return v;
}

inline std::string format_number(double v) {
  nlohmann::json j = v;
  return j.dump();
}

inline std::vector<SweepCell> lambda_grid(const TrainingConfig& base, const std::vector<double>& values = lambda_grid_values()) {
  std::vector<SweepCell> cells;
  for (double l1 : values)
    for (double l2 : values) {
      SweepCell c{"lambda1=" + format_number(l1) + ",lambda2=" + format_number(l2),
                  {{"lambda1", l1}, {"lambda2", l2}},
                  base};
      c.cfg.loss.lambda1 = l1;
      c.cfg.loss.lambda2 = l2;
      cells.push_back(std::move(c));
    }
  return cells;
}

inline std::vector<std::vector<std::string>> scalability_subsets() {
  return {{"E1"}, {"E2", "E3"}, {"E1", "E2", "E3"}, {"E2", "E3", "E4", "E5"}, {"E1", "E2", "E3", "E4", "E5"}};
}

inline std::vector<std::vector<std::string>> complementary_subsets() {
  return {{"E1"}, {"E1", "E6"}, {"E1", "E2", "E3"}, {"E1", "E2", "E3", "E4"}, {"E1", "E2", "E3", "E4", "E5"}};
}

// One cell per subset; bounds are re-derived for each J unless the base config pins them for that J.
inline std::vector<SweepCell> expert_subsets(const TrainingConfig& base, const ExpertPool& pool,
                                             const std::vector<std::vector<std::string>>& subsets) {
  std::vector<SweepCell> cells;
  for (const auto& names : subsets) {
    std::string joined;
    for (const auto& n : names) joined += (joined.empty() ? "" : "+") + n;
    SweepCell c{"J=" + std::to_string(names.size()) + ",experts=" + joined,
                {{"J", names.size()}, {"experts", names}},
                base};
    c.cfg.experts = pool.select(names).experts;
    if (!(base.bounds_explicit && base.loss.lb_upper.size() == names.size())) c.cfg.bounds_explicit = false;
    cells.push_back(std::move(c));
  }
  return cells;
}

struct SweepResult {
  std::string key;
  nlohmann::json params;
  std::optional<TrainLog> log;
  std::optional<EvalResult> final_metrics;
  std::optional<DeferralNet> net;
  std::string error;

  bool ok() const { return error.empty(); }
};

// Each cell trains an independent net from its own config seed. Results are
// ordered as the cells regardless of worker count.
inline std::vector<SweepResult> run_sweep(const std::vector<SweepCell>& cells, const std::vector<Sample>& train_set,
                                          const std::vector<Sample>& val_set, std::size_t workers = 1,
                                          const std::function<void(const SweepResult&)>& on_cell = {}) {
  if (cells.empty()) throw ConfigError("sweep: empty grid");
  std::vector<SweepResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex report_mu;
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      SweepResult& r = results[i];
      r.key = cells[i].key;
      r.params = cells[i].params;
      try {
        TrainResult tr = train_fresh(train_set, val_set, cells[i].cfg);
        r.final_metrics = evaluate(tr.net, val_set, cells[i].cfg.experts, cells[i].cfg.seed);
        r.log = std::move(tr.log);
        r.net = std::move(tr.net);
      } catch (const std::exception& e) {
        r.error = e.what();
      }
      if (on_cell) {
        std::lock_guard lk(report_mu);
        on_cell(r);
      }
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, cells.size());
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& t : pool) t.join();
  }
  return results;
}

inline void write_sweep_csv(std::ostream& os, const std::string& dataset, const std::vector<SweepResult>& results) {
  write_csv_header(os);
  for (const auto& r : results) {
    if (!r.ok() || !r.final_metrics) continue;
    write_csv_rows(os, dataset, "\"" + r.key + "\"", r.final_metrics->summary);
  }
}

}  // namespace dseg
