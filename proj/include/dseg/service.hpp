#pragma once

// Annotation sessions: inference and expert assignment, per-expert corrections
// clipped to the assigned regions, and fusion with the model branch.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dseg/errors.hpp"
#include "dseg/grid.hpp"
#include "dseg/metrics.hpp"
#include "dseg/model.hpp"
#include "dseg/pgm.hpp"
#include "dseg/routing.hpp"

namespace dseg::service {

enum class SessionState { Inferred, PartiallyAnnotated, Fused };

inline std::string to_string(SessionState s) {
  switch (s) {
    case SessionState::PartiallyAnnotated: return "partially-annotated";
    case SessionState::Fused: return "fused";
    default: return "inferred";
  }
}

inline SessionState session_state_from(const std::string& s) {
  if (s == "inferred") return SessionState::Inferred;
  if (s == "partially-annotated") return SessionState::PartiallyAnnotated;
  if (s == "fused") return SessionState::Fused;
  throw DataError("unknown session state '" + s + "'");
}

// Client-facing failure with an HTTP status and a stable code.
class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }

 private:
  int status_;
  std::string code_;
};

struct Session {
  std::string id;
  ValueGrid image;
  std::optional<BinaryGrid> truth;
  ForwardOutputs outputs;
  RoutingDecisionField decisions;
  std::vector<BinaryGrid> regions;  // index j-1 holds expert j
  BinaryGrid model_region;
  std::map<std::size_t, BinaryGrid> corrections;  // expert index (1-based) -> clipped mask
  SessionState state = SessionState::Inferred;
  std::optional<std::string> fused;  // serialized fusion result, returned verbatim on repeat calls
  mutable std::mutex mu;
};

struct CreateRequest {
  ValueGrid image;
  std::optional<BinaryGrid> truth;
  std::optional<std::size_t> experts;
};

inline BinaryGrid mask_from_json(const nlohmann::json& j) {
  if (j.contains("rle")) return rle_decode(j);
  if (j.contains("pgm_base64")) return pgm::to_mask(pgm::decode(pgm::unbase64(j.at("pgm_base64").get<std::string>())));
  throw ServiceError(400, "bad-request", "mask must be {shape, rle} or {pgm_base64}");
}

inline ValueGrid image_from_json(const nlohmann::json& j) {
  if (j.contains("pgm_base64")) return pgm::to_values(pgm::decode(pgm::unbase64(j.at("pgm_base64").get<std::string>())));
  if (j.contains("values")) {
    const auto shape = j.at("shape").get<std::vector<std::size_t>>();
    if (shape.size() != 2) throw ServiceError(400, "bad-request", "image shape must be [H, W]");
    auto values = j.at("values").get<std::vector<double>>();
    if (values.size() != shape[0] * shape[1])
      throw ServiceError(400, "bad-request", "image values do not match shape");
    return ValueGrid(Shape{1, shape[0], shape[1]}, std::move(values));
  }
  throw ServiceError(400, "bad-request", "image must be {pgm_base64} or {shape, values}");
}

inline std::string preview_b64(const pgm::Image& img) { return pgm::base64(pgm::encode(img)); }

class SessionStore {
 public:
  explicit SessionStore(DeferralNet net, std::optional<std::filesystem::path> dir = std::nullopt)
      : net_(std::move(net)), dir_(std::move(dir)) {
    if (dir_) {
      std::filesystem::create_directories(*dir_);
      resume();
    }
  }

  const DeferralNet& net() const { return net_; }
  std::size_t experts() const { return net_.experts(); }

  nlohmann::json create(const CreateRequest& req) {
    const NetShape& s = net_.shape();
    if (req.experts && *req.experts != net_.experts())
      throw ServiceError(422, "expert-count-mismatch",
                         "checkpoint has " + std::to_string(net_.experts()) + " experts, request asked for " +
                             std::to_string(*req.experts));
    if (req.image.channels() != 1 || req.image.height() != s.height || req.image.width() != s.width)
      throw ServiceError(422, "unsupported-image-shape",
                         "checkpoint expects 1x" + std::to_string(s.height) + "x" + std::to_string(s.width) +
                             ", got " + req.image.shape().str());
    if (req.truth) require_shape(*req.truth, "truth");
    auto sess = std::make_shared<Session>();
    sess->image = req.image;
    sess->truth = req.truth;
    infer(*sess);
    {
      std::unique_lock lk(mu_);
      sess->id = next_id();
      sessions_[sess->id] = sess;
    }
    std::lock_guard slk(sess->mu);
    persist(*sess);
    return summary(*sess);
  }

  nlohmann::json get(const std::string& id) const {
    auto sess = find(id);
    std::lock_guard lk(sess->mu);
    return summary(*sess);
  }

  // Stores mask & region_j, replacing any earlier correction for j. Returns the accepted pixel count.
  nlohmann::json submit_correction(const std::string& id, std::size_t expert, const BinaryGrid& mask) {
    auto sess = find(id);
    std::lock_guard lk(sess->mu);
    if (expert < 1 || expert > sess->regions.size())
      throw ServiceError(404, "unknown-expert",
                         "expert index " + std::to_string(expert) + " outside 1.." + std::to_string(sess->regions.size()));
    if (sess->state == SessionState::Fused) throw ServiceError(409, "session-fused", "session " + id + " is already fused");
    require_shape(mask, "correction");
    BinaryGrid clipped = mask & sess->regions[expert - 1];
    const std::size_t accepted = clipped.count();
    if (accepted > 0) {
      sess->corrections[expert] = std::move(clipped);
      sess->state = SessionState::PartiallyAnnotated;
      persist(*sess);
    }
    return {{"id", id}, {"expert", expert}, {"accepted", accepted}, {"state", to_string(sess->state)}};
  }

  nlohmann::json fuse(const std::string& id) {
    auto sess = find(id);
    std::lock_guard lk(sess->mu);
    if (!sess->fused) {
      sess->fused = fusion_payload(*sess).dump();
      sess->state = SessionState::Fused;
      persist(*sess);
    }
    return nlohmann::json::parse(*sess->fused);
  }

  // Serialized fusion result, byte-identical across calls.
  std::string fuse_bytes(const std::string& id) {
    fuse(id);
    auto sess = find(id);
    std::lock_guard lk(sess->mu);
    return *sess->fused;
  }

  std::string result_bytes(const std::string& id) const {
    auto sess = find(id);
    std::lock_guard lk(sess->mu);
    if (!sess->fused) throw ServiceError(409, "not-fused", "session " + id + " has not been fused yet");
    return *sess->fused;
  }

  std::vector<std::string> ids() const {
    std::shared_lock lk(mu_);
    std::vector<std::string> out;
    for (const auto& [k, v] : sessions_) out.push_back(k);
    return out;
  }

  // Direct access for tests and persistence checks.
  std::shared_ptr<const Session> session(const std::string& id) const { return find(id); }

 private:
  void require_shape(const BinaryGrid& m, const char* what) const {
    if (m.height() != net_.shape().height || m.width() != net_.shape().width)
      throw ServiceError(422, "mask-shape-mismatch",
                         std::string(what) + " mask is " + std::to_string(m.height()) + "x" +
                             std::to_string(m.width()) + ", session grid is " + std::to_string(net_.shape().height) +
                             "x" + std::to_string(net_.shape().width));
  }

  void infer(Session& s) const {
    s.outputs = forward(net_, s.image);
    const RoutingField routing = RoutingField::from_logits(s.outputs.routing_logits);
    s.decisions = decide(routing);
    s.regions.clear();
    for (std::size_t j = 1; j <= net_.experts(); ++j) s.regions.push_back(s.decisions.region(static_cast<int>(j)));
    s.model_region = s.decisions.region(0);
  }

  std::shared_ptr<Session> find(const std::string& id) const {
    std::shared_lock lk(mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown-session", "no session '" + id + "'");
    return it->second;
  }

  std::string next_id() {
    char buf[32];
    std::snprintf(buf, sizeof buf, "s-%06zu", ++counter_);
    return buf;
  }

  nlohmann::json summary(const Session& s) const {
    const BinaryGrid base = threshold(s.outputs.seg_prob);
    nlohmann::json regions = nlohmann::json::array();
    for (std::size_t j = 0; j < s.regions.size(); ++j) {
      nlohmann::json r = {{"expert", j + 1}, {"pixels", s.regions[j].count()}, {"mask", rle_encode(s.regions[j])}};
      auto c = s.corrections.find(j + 1);
      r["correction"] = c == s.corrections.end() ? nlohmann::json(nullptr) : rle_encode(c->second);
      regions.push_back(std::move(r));
    }
    const ValueGrid heat = deferral_heatmap(softmax_values(s.outputs.routing_logits));
    return {{"id", s.id},
            {"state", to_string(s.state)},
            {"shape", {s.image.height(), s.image.width()}},
            {"experts", s.regions.size()},
            {"has_truth", s.truth.has_value()},
            {"base_prediction", rle_encode(base)},
            {"model_region", {{"pixels", s.model_region.count()}, {"mask", rle_encode(s.model_region)}}},
            {"regions", regions},
            {"decisions", rle_encode_labels(s.decisions.decisions, s.decisions.height, s.decisions.width)},
            {"previews",
             {{"image", preview_b64(pgm::from_values(s.image))},
              {"prediction", preview_b64(pgm::from_mask(base))},
              {"heatmap", preview_b64(pgm::from_values(heat))},
              {"decisions", preview_b64(pgm::from_labels(s.decisions.decisions, s.decisions.height,
                                                               s.decisions.width, static_cast<int>(s.regions.size())))}}},
            {"links",
             {{"self", "/v1/sessions/" + s.id},
              {"fuse", "/v1/sessions/" + s.id + "/fuse"},
              {"result", "/v1/sessions/" + s.id + "/result"}}}};
  }

  // Expert j's prediction is its correction inside region_j and the model's
  // thresholded prediction everywhere else.
  nlohmann::json fusion_payload(const Session& s) const {
    const BinaryGrid base = threshold(s.outputs.seg_prob);
    std::vector<BinaryGrid> preds;
    for (std::size_t j = 1; j <= s.regions.size(); ++j) {
      BinaryGrid p = base;
      auto c = s.corrections.find(j);
      if (c != s.corrections.end())
        for (std::size_t i = 0; i < p.size(); ++i)
          if (s.regions[j - 1][i]) p.set(i, c->second[i]);
      preds.push_back(std::move(p));
    }
    const FusedPrediction fused = dseg::fuse(s.outputs.seg_prob, s.decisions, preds);
    nlohmann::json corrected = nlohmann::json::array();
    for (const auto& [j, m] : s.corrections) corrected.push_back(j);
    nlohmann::json out = {{"id", s.id},
                          {"state", to_string(SessionState::Fused)},
                          {"system_mask", rle_encode(fused.system_mask)},
                          {"source", rle_encode_labels(fused.source.decisions, fused.source.height, fused.source.width)},
                          {"corrected_experts", corrected},
                          {"preview", preview_b64(pgm::from_mask(fused.system_mask))}};
    if (s.truth) {
      const RoutingField routing = RoutingField::from_logits(s.outputs.routing_logits);
      out["metrics"] = to_json(evaluate_branches(fused, s.outputs.seg_prob, preds, *s.truth, routing));
    }
    return out;
  }

  // --- persistence: <dir>/<id>.json ------------------------------------

  void persist(const Session& s) const {
    if (!dir_) return;
    nlohmann::json j;
    j["id"] = s.id;
    j["state"] = to_string(s.state);
    j["image"] = {{"shape", {s.image.height(), s.image.width()}},
                  {"values", std::vector<double>(s.image.data().begin(), s.image.data().end())}};
    if (s.truth) j["truth"] = rle_encode(*s.truth);
    j["corrections"] = nlohmann::json::object();
    for (const auto& [k, m] : s.corrections) j["corrections"][std::to_string(k)] = rle_encode(m);
    if (s.fused) j["fused"] = *s.fused;
    const auto tmp = *dir_ / (s.id + ".json.tmp");
    {
      std::ofstream f(tmp);
      if (!f) throw DataError("cannot write session file " + tmp.string());
      f << j.dump() << '\n';
    }
    std::filesystem::rename(tmp, *dir_ / (s.id + ".json"));
    pgm::write(*dir_ / (s.id + "_image.pgm"), pgm::from_values(s.image));
  }

  void resume() {
    for (const auto& entry : std::filesystem::directory_iterator(*dir_)) {
      if (entry.path().extension() != ".json") continue;
      std::ifstream f(entry.path());
      nlohmann::json j;
      try {
        f >> j;
        auto s = std::make_shared<Session>();
        s->id = j.at("id").get<std::string>();
        s->image = image_from_json(j.at("image"));
        if (j.contains("truth")) s->truth = rle_decode(j.at("truth"));
        infer(*s);
        for (const auto& [k, m] : j.at("corrections").items()) s->corrections[std::stoul(k)] = rle_decode(m);
        s->state = session_state_from(j.at("state").get<std::string>());
        if (j.contains("fused")) s->fused = j.at("fused").get<std::string>();
        unsigned long n = 0;
        if (std::sscanf(s->id.c_str(), "s-%lu", &n) == 1) counter_ = std::max<std::size_t>(counter_, n);
        sessions_[s->id] = s;
      } catch (const std::exception& e) {
        throw DataError("cannot resume session " + entry.path().string() + ": " + e.what());
      }
    }
  }

  DeferralNet net_;
  std::optional<std::filesystem::path> dir_;
  mutable std::shared_mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::size_t counter_ = 0;
};

}  // namespace dseg::service
