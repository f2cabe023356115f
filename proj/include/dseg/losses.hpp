#pragma once

// Training objectives, all recorded on the tape:
//   deferral collaboration (DC), spatial coherence (SC), load balancing (LB),
//   their weighted total, and the instance-level softmax surrogate used as a
//   reference.

#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/autodiff.hpp"
#include "dseg/errors.hpp"
#include "dseg/grid.hpp"
#include "dseg/model.hpp"
#include "dseg/routing.hpp"

namespace dseg {

struct LossConfig {
  double lambda1 = 1.0;
  double lambda2 = 5.0;
  double beta1 = 0.5;
  double beta2 = 0.1;
  // Empty means "derive from J" (see default_bounds).
  std::vector<double> lb_upper = {0.35, 0.25, 0.30};
  std::vector<double> lb_lower = {0.15, 0.10, 0.10};
  // With a single expert the LB term is reported but weighted by zero unless this is set.
  bool lb_single_expert = false;

  void validate() const {
    for (double w : {lambda1, lambda2, beta1, beta2})
      if (!(w >= 0.0)) throw ConfigError("loss weights must be >= 0");
    if (lb_upper.size() != lb_lower.size())
      throw ConfigError("lb_upper and lb_lower must have the same length");
    for (std::size_t j = 0; j < lb_upper.size(); ++j)
      if (!(0.0 <= lb_lower[j] && lb_lower[j] <= lb_upper[j] && lb_upper[j] <= 1.0))
        throw ConfigError("load-balancing bounds must satisfy 0 <= l_j <= u_j <= 1 (j=" +
                          std::to_string(j + 1) + ")");
  }

  double lb_weight(std::size_t experts) const {
    return experts == 1 && !lb_single_expert ? 0.0 : lambda2;
  }
};

// Tabulated bounds for three experts; otherwise the same total slack spread evenly.
inline std::pair<std::vector<double>, std::vector<double>> default_bounds(std::size_t experts) {
  if (experts == 3) return {{0.15, 0.10, 0.10}, {0.35, 0.25, 0.30}};
  const double J = static_cast<double>(experts);
  return {std::vector<double>(experts, 0.35 / J), std::vector<double>(experts, std::min(1.0, 0.90 / J))};
}

// Copy of `cfg` whose bounds have J entries, filling defaults when the bounds
// were left empty or are the three-expert defaults applied to J != 3.
inline LossConfig resolve_bounds(LossConfig cfg, std::size_t experts, bool bounds_explicit) {
  if (!bounds_explicit || cfg.lb_upper.empty()) {
    auto [l, u] = default_bounds(experts);
    cfg.lb_lower = std::move(l);
    cfg.lb_upper = std::move(u);
  }
  return cfg;
}

inline void to_json(nlohmann::json& j, const LossConfig& c) {
  j = {{"lambda1", c.lambda1}, {"lambda2", c.lambda2},   {"beta1", c.beta1},
       {"beta2", c.beta2},     {"lb_upper", c.lb_upper}, {"lb_lower", c.lb_lower},
       {"lb_single_expert", c.lb_single_expert}};
}

inline void from_json(const nlohmann::json& j, LossConfig& c) {
  c.lambda1 = j.value("lambda1", c.lambda1);
  c.lambda2 = j.value("lambda2", c.lambda2);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  if (j.contains("lb_upper")) c.lb_upper = j.at("lb_upper").get<std::vector<double>>();
  if (j.contains("lb_lower")) c.lb_lower = j.at("lb_lower").get<std::vector<double>>();
  c.lb_single_expert = j.value("lb_single_expert", c.lb_single_expert);
  c.validate();
}

struct LossBreakdown {
  double dc = 0.0;
  double sc = 0.0;
  double lb = 0.0;
  double total = 0.0;
  double lb_weight = 0.0;  // weight actually applied to lb
};

struct WorkloadReport {
  std::vector<double> rho;  // rho_1..rho_J
};

namespace detail {

inline void check_plane(const Var& v, std::size_t channels, std::size_t h, std::size_t w, const char* what) {
  const Shape s = v.shape();
  if (s.channels != channels || s.height != h || s.width != w)
    throw ShapeError(std::string(what) + ": expected " + Shape{channels, h, w}.str() + ", got " + s.str());
}

}  // namespace detail

// Per-pixel routing coefficients of the DC loss: channel 0 gets -I[y~ = y],
// channel j gets (1 - 2 I[m_j = y]).
inline ValueGrid dc_routing_weights(const ValueGrid& seg_prob, const BinaryGrid& truth,
                                    const std::vector<BinaryGrid>& expert_preds) {
  const std::size_t P = truth.size(), J = expert_preds.size();
  ValueGrid w(J + 1, truth.height(), truth.width());
  for (std::size_t i = 0; i < P; ++i) {
    const bool model_correct = (seg_prob[i] >= 0.5) == (truth[i] != 0);
    w[i] = model_correct ? -1.0 : 0.0;
    for (std::size_t j = 0; j < J; ++j)
      w[(j + 1) * P + i] = expert_preds[j][i] == truth[i] ? -1.0 : 1.0;
  }
  return w;
}

// DC loss from routing probabilities (already softmax-normalised).
inline Var dc_loss_from_probs(const Var& seg_prob, const Var& routing_probs, const BinaryGrid& truth,
                              const std::vector<BinaryGrid>& expert_preds) {
  const std::size_t H = truth.height(), W = truth.width(), J = expert_preds.size();
  if (J < 1) throw ConfigError("dc_loss: at least one expert is required");
  detail::check_plane(seg_prob, 1, H, W, "dc_loss seg_prob");
  if (routing_probs.shape().channels != J + 1)
    throw ShapeError("dc_loss: " + std::to_string(routing_probs.shape().channels) +
                     " routing channels but " + std::to_string(J) + " expert predictions");
  detail::check_plane(routing_probs, J + 1, H, W, "dc_loss routing");
  for (const auto& m : expert_preds) require_same_plane(m, H, W, "dc_loss expert prediction");
  const ValueGrid weights = dc_routing_weights(seg_prob.value(), truth, expert_preds);
  Var routing = scale(sum(mul_const(log_clamped(routing_probs), weights)), 1.0 / static_cast<double>(H * W));
  return add(routing, bce_mean(seg_prob, to_values(truth)));
}

inline Var dc_loss(const Var& seg_prob, const Var& routing_logits, const BinaryGrid& truth,
                   const std::vector<BinaryGrid>& expert_preds) {
  if (routing_logits.shape().channels != expert_preds.size() + 1)
    throw ShapeError("dc_loss: " + std::to_string(routing_logits.shape().channels) +
                     " routing channels but " + std::to_string(expert_preds.size()) + " expert predictions");
  return dc_loss_from_probs(seg_prob, channel_softmax(routing_logits), truth, expert_preds);
}

// SC loss: BCE(M~, M-bar) + beta1 (M~ - sum_j M_j)^2 + beta2 M~, averaged over pixels.
inline Var sc_loss(const Var& deferral_map, const Var& routing_probs, const LossConfig& cfg) {
  const Shape ps = routing_probs.shape();
  if (ps.channels < 2) throw ShapeError("sc_loss: routing probabilities need at least two channels");
  detail::check_plane(deferral_map, 1, ps.height, ps.width, "sc_loss deferral map");
  const ValueGrid target = to_values(pseudo_mask(routing_probs.value()));
  Var bce = bce_mean(deferral_map, target);
  Var mse = mse_mean(deferral_map, channel_sum(routing_probs, 1, ps.channels));
  return add(add(bce, scale(mse, cfg.beta1)), scale(mean(deferral_map), cfg.beta2));
}

struct LbResult {
  Var penalty;
  WorkloadReport workload;
};

// rho_j = batch mean of M_j; penalty = sum_j max(rho_j - u_j, 0) + max(l_j - rho_j, 0).
inline LbResult lb_penalty(std::span<const Var> routing_probs, const LossConfig& cfg) {
  if (routing_probs.empty()) throw ShapeError("lb_penalty: empty batch");
  const std::size_t C = routing_probs.front().shape().channels;
  const std::size_t J = C - 1;
  if (C < 2) throw ShapeError("lb_penalty: routing probabilities need at least two channels");
  if (cfg.lb_upper.size() != J || cfg.lb_lower.size() != J)
    throw ConfigError("lb_penalty: bounds have " + std::to_string(cfg.lb_upper.size()) + " entries but J=" +
                      std::to_string(J));
  Var acc = channel_mean(routing_probs.front());
  for (std::size_t b = 1; b < routing_probs.size(); ++b) {
    if (routing_probs[b].shape() != routing_probs.front().shape())
      throw ShapeError("lb_penalty: batch members differ in shape");
    acc = add(acc, channel_mean(routing_probs[b]));
  }
  Var rho = channel_slice(scale(acc, 1.0 / static_cast<double>(routing_probs.size())), 1, C);
  ValueGrid neg_u(J, 1, 1), l(J, 1, 1);
  for (std::size_t j = 0; j < J; ++j) {
    neg_u[j] = -cfg.lb_upper[j];
    l[j] = cfg.lb_lower[j];
  }
  Var over = relu(add_const(rho, neg_u));
  Var under = relu(add_const(scale(rho, -1.0), l));
  LbResult out{sum(add(over, under)), {}};
  out.workload.rho.assign(rho.value().data().begin(), rho.value().data().end());
  return out;
}

struct TotalLoss {
  Var total;
  Var dc, sc, lb;
  LossBreakdown breakdown;
  WorkloadReport workload;
};

// Batch objective: mean DC + lambda1 * mean SC + lambda2 * LB(batch).
inline TotalLoss total_loss(std::span<const ForwardVars> outputs, std::span<const BinaryGrid> truths,
                            std::span<const std::vector<BinaryGrid>> expert_preds, const LossConfig& cfg) {
  if (outputs.empty()) throw ShapeError("total_loss: empty batch");
  if (truths.size() != outputs.size() || expert_preds.size() != outputs.size())
    throw ShapeError("total_loss: batch members disagree in count");
  const double inv_b = 1.0 / static_cast<double>(outputs.size());
  std::vector<Var> probs;
  Var dc, sc;
  for (std::size_t b = 0; b < outputs.size(); ++b) {
    Var p = channel_softmax(outputs[b].routing_logits);
    probs.push_back(p);
    Var d = dc_loss_from_probs(outputs[b].seg_prob, p, truths[b], expert_preds[b]);
    Var s = sc_loss(outputs[b].deferral_map, p, cfg);
    dc = b == 0 ? d : add(dc, d);
    sc = b == 0 ? s : add(sc, s);
  }
  dc = scale(dc, inv_b);
  sc = scale(sc, inv_b);
  const std::size_t J = probs.front().shape().channels - 1;
  const double w_lb = cfg.lb_weight(J);
  TotalLoss out;
  out.dc = dc;
  out.sc = sc;
  const bool have_bounds = cfg.lb_upper.size() == J && cfg.lb_lower.size() == J;
  Var total = add(dc, scale(sc, cfg.lambda1));
  if (have_bounds) {
    LbResult lb = lb_penalty(probs, cfg);
    out.lb = lb.penalty;
    out.workload = std::move(lb.workload);
    if (w_lb != 0.0) total = add(total, scale(lb.penalty, w_lb));
    out.breakdown.lb = lb.penalty.value().item();
  } else if (w_lb != 0.0) {
    throw ConfigError("lb_penalty: bounds have " + std::to_string(cfg.lb_upper.size()) + " entries but J=" +
                      std::to_string(J));
  } else {
    // Single expert without bounds: only the workload is reported.
    ValueGrid acc(J + 1, 1, 1);
    for (const Var& p : probs) {
      const ValueGrid& pv = p.value();
      for (std::size_t c = 0; c <= J; ++c) {
        double s = 0.0;
        for (double v : pv.channel(c)) s += v;
        acc[c] += s / static_cast<double>(pv.plane()) * inv_b;
      }
    }
    out.workload.rho.assign(acc.data().begin() + 1, acc.data().end());
  }
  out.total = total;
  out.breakdown.dc = dc.value().item();
  out.breakdown.sc = sc.value().item();
  out.breakdown.lb_weight = have_bounds ? w_lb : 0.0;
  out.breakdown.total = total.value().item();
  return out;
}

// Segmentation-only baseline objective (mean pixel BCE), used for the no-deferral comparison.
inline Var bce_only_loss(std::span<const ForwardVars> outputs, std::span<const BinaryGrid> truths) {
  if (outputs.empty() || truths.size() != outputs.size()) throw ShapeError("bce_only_loss: bad batch");
  Var acc;
  for (std::size_t b = 0; b < outputs.size(); ++b) {
    Var l = bce_mean(outputs[b].seg_prob, to_values(truths[b]));
    acc = b == 0 ? l : add(acc, l);
  }
  return scale(acc, 1.0 / static_cast<double>(outputs.size()));
}

// Value-level evaluation of the objective for one sample (no parameter gradients).
inline LossBreakdown evaluate_losses(const ForwardOutputs& out, const BinaryGrid& truth,
                                     const std::vector<BinaryGrid>& expert_preds, const LossConfig& cfg) {
  Tape tape;
  ForwardVars v{tape.constant(out.seg_prob), tape.constant(out.routing_logits), tape.constant(out.deferral_map),
                tape.constant(out.features)};
  std::vector<BinaryGrid> truths{truth};
  std::vector<std::vector<BinaryGrid>> experts{expert_preds};
  return total_loss(std::span<const ForwardVars>(&v, 1), truths, experts, cfg).breakdown;
}

// Instance-level softmax surrogate over the augmented label space
// {classes 1..K} u {defer to expert 1..J}. `label` and `expert_labels` are class
// indices in [0, K).
inline Var sm_loss_reference(const Var& logits, std::size_t classes, std::size_t label,
                             const std::vector<std::size_t>& expert_labels) {
  const std::size_t J = expert_labels.size();
  if (classes < 2 || J < 1) throw ShapeError("sm_loss_reference: need K >= 2 and J >= 1");
  if (logits.shape().size() != classes + J)
    throw ShapeError("sm_loss_reference: expected " + std::to_string(classes + J) + " logits");
  if (label >= classes) throw ShapeError("sm_loss_reference: label out of range");
  Var flat = logits;
  if (logits.shape().channels != classes + J) throw ShapeError("sm_loss_reference: logits must be (K+J) x 1 x 1");
  ValueGrid w(classes + J, 1, 1);
  w[label] = -1.0;
  for (std::size_t j = 0; j < J; ++j) w[classes + j] = expert_labels[j] == label ? -1.0 : 0.0;
  return sum(mul_const(log_clamped(channel_softmax(flat)), w));
}

inline double sm_loss_reference(std::span<const double> class_logits, std::span<const double> defer_logits,
                                std::size_t label, const std::vector<std::size_t>& expert_labels) {
  if (defer_logits.size() != expert_labels.size())
    throw ShapeError("sm_loss_reference: one deferral logit per expert is required");
  Tape tape;
  ValueGrid l(class_logits.size() + defer_logits.size(), 1, 1);
  std::copy(class_logits.begin(), class_logits.end(), l.data().begin());
  std::copy(defer_logits.begin(), defer_logits.end(), l.data().begin() + static_cast<long>(class_logits.size()));
  return sm_loss_reference(tape.constant(l), class_logits.size(), label, expert_labels).value().item();
}

}  // namespace dseg
