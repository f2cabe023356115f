#pragma once

// Per-pixel routing between the model branch (channel 0) and experts 1..J.

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/autodiff.hpp"
#include "dseg/errors.hpp"
#include "dseg/grid.hpp"

namespace dseg {

struct RoutingField {
  ValueGrid logits;  // (J+1) x H x W
  ValueGrid probs;   // channel softmax of logits

  static RoutingField from_logits(ValueGrid logits) {
    if (logits.channels() < 2)
      throw ShapeError("RoutingField: need the model channel plus at least one expert channel");
    ValueGrid p = softmax_values(logits);
    return {std::move(logits), std::move(p)};
  }

  std::size_t experts() const { return logits.channels() - 1; }
  std::size_t height() const { return logits.height(); }
  std::size_t width() const { return logits.width(); }
};

// 0 = model branch, j in 1..J = expert j.
struct RoutingDecisionField {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t experts = 0;
  std::vector<int> decisions;

  int operator[](std::size_t i) const { return decisions[i]; }
  std::size_t size() const { return decisions.size(); }

  BinaryGrid region(int branch) const {
    BinaryGrid r(height, width);
    for (std::size_t i = 0; i < decisions.size(); ++i) r.set(i, decisions[i] == branch);
    return r;
  }

  bool operator==(const RoutingDecisionField&) const = default;
};

// Model branch only when its logit strictly beats every expert logit; otherwise
// the best expert, ties going to the lowest expert index.
inline RoutingDecisionField decide(const RoutingField& r) {
  const std::size_t J = r.experts(), P = r.logits.plane();
  RoutingDecisionField out{r.height(), r.width(), J, std::vector<int>(P, 0)};
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = 1;
    for (std::size_t j = 2; j <= J; ++j)
      if (r.logits[j * P + i] > r.logits[best * P + i]) best = j;
    out.decisions[i] = r.logits[i] > r.logits[best * P + i] ? 0 : static_cast<int>(best);
  }
  return out;
}

// Hard pseudo-supervision: 0 where the most probable channel is the model, else 1.
// Ties resolve toward the lowest channel index.
inline BinaryGrid pseudo_mask(const ValueGrid& probs) {
  const std::size_t C = probs.channels(), P = probs.plane();
  BinaryGrid out(probs.height(), probs.width());
  for (std::size_t i = 0; i < P; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (probs[c * P + i] > probs[best * P + i]) best = c;
    out.set(i, best != 0);
  }
  return out;
}

inline BinaryGrid pseudo_mask(const RoutingField& r) { return pseudo_mask(r.probs); }

// Total routing mass on the experts at each pixel.
inline ValueGrid deferral_heatmap(const ValueGrid& probs) {
  const std::size_t C = probs.channels(), P = probs.plane();
  ValueGrid out(1, probs.height(), probs.width());
  for (std::size_t c = 1; c < C; ++c)
    for (std::size_t i = 0; i < P; ++i) out[i] += probs[c * P + i];
  return out;
}

inline ValueGrid deferral_heatmap(const RoutingField& r) { return deferral_heatmap(r.probs); }

struct FusedPrediction {
  BinaryGrid system_mask;
  RoutingDecisionField source;
  BinaryGrid model_region;
  std::vector<BinaryGrid> expert_regions;  // index j-1 holds expert j
};

inline FusedPrediction fuse(const ValueGrid& seg_prob, const RoutingDecisionField& decisions,
                            const std::vector<BinaryGrid>& expert_preds) {
  if (seg_prob.channels() != 1 || seg_prob.height() != decisions.height ||
      seg_prob.width() != decisions.width)
    throw ShapeError("fuse: segmentation probability shape does not match decisions");
  for (const auto& m : expert_preds) require_same_plane(m, decisions.height, decisions.width, "fuse");
  const BinaryGrid model_mask = threshold(seg_prob);
  FusedPrediction out;
  out.source = decisions;
  out.system_mask = BinaryGrid(decisions.height, decisions.width);
  out.model_region = BinaryGrid(decisions.height, decisions.width);
  std::size_t max_ref = 0;
  for (int d : decisions.decisions) max_ref = std::max<std::size_t>(max_ref, static_cast<std::size_t>(std::max(d, 0)));
  if (max_ref > expert_preds.size())
    throw std::out_of_range("fuse: decisions reference expert " + std::to_string(max_ref) + " but only " +
                            std::to_string(expert_preds.size()) + " expert predictions were supplied");
  const std::size_t regions = std::max(expert_preds.size(), decisions.experts);
  out.expert_regions.assign(regions, BinaryGrid(decisions.height, decisions.width));
  for (std::size_t i = 0; i < decisions.size(); ++i) {
    const int d = decisions[i];
    if (d < 0) throw std::out_of_range("fuse: negative routing decision");
    if (d == 0) {
      out.model_region.set(i, true);
      out.system_mask.set(i, model_mask[i]);
    } else {
      out.expert_regions[static_cast<std::size_t>(d - 1)].set(i, true);
      out.system_mask.set(i, expert_preds[static_cast<std::size_t>(d - 1)][i]);
    }
  }
  return out;
}

// --- run-length encodings used by the service ------------------------------
//
// Binary masks: {"shape": [H, W], "rle": [n0, n1, n0, n1, ...]} alternating run
// lengths over row-major order, starting with a (possibly empty) run of zeros.
// Label fields: {"shape": [H, W], "labels": [[value, run], ...]}.

inline nlohmann::json rle_encode(const BinaryGrid& m) {
  nlohmann::json runs = nlohmann::json::array();
  std::uint8_t cur = 0;
  std::size_t n = 0;
  for (auto v : m.data()) {
    if (v == cur) {
      ++n;
    } else {
      runs.push_back(n);
      cur = v;
      n = 1;
    }
  }
  runs.push_back(n);
  return {{"shape", {m.height(), m.width()}}, {"rle", runs}};
}

inline BinaryGrid rle_decode(const nlohmann::json& j) {
  try {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw DataError("rle: shape must be [H, W]");
    BinaryGrid m(shape[0], shape[1]);
    std::size_t pos = 0;
    bool value = false;
    for (const auto& r : j.at("rle")) {
      const auto n = r.get<std::size_t>();
      if (pos + n > m.size()) throw DataError("rle: runs exceed grid size");
      for (std::size_t k = 0; k < n; ++k) m.set(pos + k, value);
      pos += n;
      value = !value;
    }
    if (pos != m.size()) throw DataError("rle: runs do not cover the grid");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("rle: ") + e.what());
  }
}

inline nlohmann::json rle_encode_labels(const std::vector<int>& labels, std::size_t h, std::size_t w) {
  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t i = 0; i < labels.size();) {
    std::size_t k = i;
    while (k < labels.size() && labels[k] == labels[i]) ++k;
    runs.push_back({labels[i], k - i});
    i = k;
  }
  return {{"shape", {h, w}}, {"labels", runs}};
}

inline std::vector<int> rle_decode_labels(const nlohmann::json& j) {
  std::vector<int> out;
  for (const auto& r : j.at("labels")) out.insert(out.end(), r.at(1).get<std::size_t>(), r.at(0).get<int>());
  const auto shape = j.at("shape").get<std::vector<std::size_t>>();
  if (shape.size() != 2 || out.size() != shape[0] * shape[1]) throw DataError("label rle: size mismatch");
  return out;
}

}  // namespace dseg
