#pragma once

// Synthetic experts with region-conditional accuracy (foreground, background,
// boundary band) and the fixed expert pools used by the experiments.

#include <algorithm>
#include <array>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/errors.hpp"
#include "dseg/grid.hpp"
#include "dseg/rng.hpp"

namespace dseg {

enum class BoundaryMode {
  IndependentAccuracy,  // bd is the accuracy on the band
  EdgeBoost,            // band accuracy = region accuracy - bd
};

inline std::string to_string(BoundaryMode m) {
  return m == BoundaryMode::EdgeBoost ? "edge-boost" : "independent-accuracy";
}

inline BoundaryMode boundary_mode_from(const std::string& s) {
  if (s == "independent-accuracy" || s == "independent") return BoundaryMode::IndependentAccuracy;
  if (s == "edge-boost") return BoundaryMode::EdgeBoost;
  throw ConfigError("unknown expert boundary mode '" + s + "'");
}

struct ExpertProfile {
  std::string name;
  double fg_acc = 1.0;
  double bg_acc = 1.0;
  double bd_param = 1.0;
  BoundaryMode bd_mode = BoundaryMode::IndependentAccuracy;

  void validate() const {
    auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!unit(fg_acc) || !unit(bg_acc))
      throw ConfigError("expert " + name + ": fg/bg accuracy must lie in [0,1]");
    const double bd_max = bd_mode == BoundaryMode::EdgeBoost ? 0.5 : 1.0;
    if (bd_param < 0.0 || bd_param > bd_max)
      throw ConfigError("expert " + name + ": bd parameter outside [0," + std::to_string(bd_max) + "]");
  }

  // Probability of reproducing the truth at a pixel with label y, in or out of the band.
  double accuracy(bool in_band, bool y) const {
    const double base = y ? fg_acc : bg_acc;
    if (!in_band) return base;
    if (bd_mode == BoundaryMode::IndependentAccuracy) return bd_param;
    return std::clamp(base - bd_param, 0.0, 1.0);
  }

  bool operator==(const ExpertProfile&) const = default;
};

struct ExpertPool {
  std::string name;
  BoundaryMode mode = BoundaryMode::IndependentAccuracy;
  std::vector<ExpertProfile> experts;

  // Subset by expert name, in the requested order.
  ExpertPool select(const std::vector<std::string>& names) const {
    ExpertPool out{name, mode, {}};
    for (const auto& n : names) {
      auto it = std::find_if(experts.begin(), experts.end(), [&](const auto& e) { return e.name == n; });
      if (it == experts.end()) throw ConfigError("pool " + name + " has no expert named '" + n + "'");
      out.experts.push_back(*it);
    }
    return out;
  }
};

struct ExpertPredictionSet {
  std::vector<BinaryGrid> predictions;
  std::vector<ExpertProfile> profiles;
  std::uint64_t seed = 0;

  std::size_t size() const { return predictions.size(); }
};

// Emits m_j(i) = y(i) with probability acc_j(region(i)), else 1 - y(i).
// Each expert draws from its own stream, row-major over pixels.
inline ExpertPredictionSet simulate(const BinaryGrid& mask, const BinaryGrid& band,
                                    const std::vector<ExpertProfile>& profiles, std::uint64_t seed) {
  if (profiles.empty()) throw ConfigError("simulate: at least one expert profile is required");
  if (!band.same_shape(mask)) throw ShapeError("simulate: band shape differs from mask shape");
  ExpertPredictionSet out;
  out.profiles = profiles;
  out.seed = seed;
  for (std::size_t j = 0; j < profiles.size(); ++j) {
    Rng rng(derive_seed(seed, {j}));
    BinaryGrid m(mask.height(), mask.width());
    const ExpertProfile& p = profiles[j];
    for (std::size_t i = 0; i < mask.size(); ++i) {
      const bool y = mask[i] != 0;
      const bool correct = uniform01(rng) < p.accuracy(band[i] != 0, y);
      m.set(i, correct ? y : !y);
    }
    out.predictions.push_back(std::move(m));
  }
  return out;
}

// Named pools: "comparative" (three experts, absolute band accuracy),
// "scalability" (E1-E5, edge boost) and "complementary" (E1-E7, edge boost).
inline ExpertPool standard_pool(const std::string& name) {
  using B = BoundaryMode;
  auto make = [](std::string pool, B mode, std::vector<std::array<double, 3>> rows,
                 std::vector<std::string> names) {
    ExpertPool p{std::move(pool), mode, {}};
    for (std::size_t k = 0; k < rows.size(); ++k)
      p.experts.push_back({names[k], rows[k][0], rows[k][1], rows[k][2], mode});
    return p;
  };
  if (name == "comparative")
    return make(name, B::IndependentAccuracy,
                {{0.92, 0.98, 0.98}, {0.85, 0.99, 0.94}, {0.75, 0.95, 0.90}}, {"1", "2", "3"});
  if (name == "scalability")
    return make(name, B::EdgeBoost,
                {{0.92, 0.98, 0.05}, {0.91, 0.99, 0.05}, {0.93, 0.97, 0.05}, {0.90, 0.97, 0.10},
                 {0.94, 0.99, 0.06}},
                {"E1", "E2", "E3", "E4", "E5"});
  if (name == "complementary")
    return make(name, B::EdgeBoost,
                {{0.97, 0.90, 0.08}, {0.88, 0.99, 0.08}, {0.88, 0.90, 0.12}, {0.97, 0.99, 0.03},
                 {0.97, 0.90, 0.10}, {0.88, 0.99, 0.12}, {0.97, 0.99, 0.03}},
                {"E1", "E2", "E3", "E4", "E5", "E6", "E7"});
  throw ConfigError("unknown expert pool '" + name + "'");
}

inline std::vector<std::string> standard_pool_names() {
  return {"comparative", "scalability", "complementary"};
}

inline void to_json(nlohmann::json& j, const ExpertPool& p) {
  j = {{"name", p.name}, {"mode", to_string(p.mode)}, {"experts", nlohmann::json::array()}};
  for (const auto& e : p.experts)
    j["experts"].push_back({{"name", e.name}, {"fg", e.fg_acc}, {"bg", e.bg_acc}, {"bd", e.bd_param}});
}

inline void from_json(const nlohmann::json& j, ExpertPool& p) {
  p.name = j.value("name", std::string("custom"));
  p.mode = boundary_mode_from(j.value("mode", std::string("independent-accuracy")));
  p.experts.clear();
  for (const auto& e : j.at("experts")) {
    ExpertProfile prof{e.value("name", std::to_string(p.experts.size() + 1)), e.at("fg").get<double>(),
                       e.at("bg").get<double>(), e.at("bd").get<double>(), p.mode};
    prof.validate();
    p.experts.push_back(std::move(prof));
  }
  if (p.experts.empty()) throw ConfigError("expert pool " + p.name + " is empty");
}

inline void save_pool(const std::filesystem::path& path, const ExpertPool& p) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path.string());
  f << nlohmann::json(p).dump(2) << '\n';
}

inline ExpertPool load_pool(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot read expert pool " + path.string());
  try {
    return nlohmann::json::parse(f).get<ExpertPool>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("expert pool " + path.string() + ": " + e.what());
  }
}

}  // namespace dseg
