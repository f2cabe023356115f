#pragma once

// /v1 HTTP+JSON routes over a SessionStore. Requires vendor/httplib.h.

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "dseg/pgm.hpp"
#include "dseg/routing.hpp"
#include "dseg/service.hpp"
#include "dseg/synthdata.hpp"

namespace dseg::service {

// Optional dataset browser backing GET /v1/samples and {"sample": id} session creation.
struct SampleCatalog {
  std::vector<Sample> samples;

  const Sample* find(const std::string& id) const {
    for (const auto& s : samples)
      if (s.id == id) return &s;
    return nullptr;
  }
};

namespace detail {

inline void send_json(httplib::Response& res, int status, const std::string& body) {
  res.status = status;
  res.set_content(body, "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, nlohmann::json{{"error", {{"code", code}, {"message", message}}}}.dump());
}

template <class Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ServiceError& e) {
    send_error(res, e.status(), e.code(), e.what());
  } catch (const nlohmann::json::exception& e) {
    send_error(res, 400, "bad-request", e.what());
  } catch (const ShapeError& e) {
    send_error(res, 422, "shape-mismatch", e.what());
  } catch (const DataError& e) {
    send_error(res, 400, "bad-request", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  if (req.body.empty()) return nlohmann::json::object();
  return nlohmann::json::parse(req.body);
}

}  // namespace detail

inline void register_routes(httplib::Server& srv, SessionStore& store, const SampleCatalog* catalog = nullptr) {
  using detail::guarded;
  using detail::send_json;

  auto health = [&store](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200,
              nlohmann::json{{"status", "ok"}, {"experts", store.experts()},
                             {"shape", {store.net().shape().height, store.net().shape().width}}}
                  .dump());
  };
  srv.Get("/v1/healthz", health);
  srv.Get("/healthz", health);

  srv.Post("/v1/sessions", [&store, catalog](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const nlohmann::json body = detail::parse_body(req);
      CreateRequest cr;
      if (body.contains("sample")) {
        const std::string id = body.at("sample").get<std::string>();
        const Sample* s = catalog ? catalog->find(id) : nullptr;
        if (!s) throw ServiceError(404, "unknown-sample", "no sample '" + id + "'");
        cr.image = s->image;
        cr.truth = s->mask;
      } else {
        if (!body.contains("image")) throw ServiceError(400, "bad-request", "missing 'image'");
        cr.image = image_from_json(body.at("image"));
        if (body.contains("truth")) cr.truth = mask_from_json(body.at("truth"));
      }
      if (body.contains("experts")) cr.experts = body.at("experts").get<std::size_t>();
      send_json(res, 201, store.create(cr).dump());
    });
  });

  srv.Get(R"(/v1/sessions/([^/]+))", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, store.get(req.matches[1]).dump()); });
  });

  srv.Post(R"(/v1/sessions/([^/]+)/corrections/(\d+))", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const nlohmann::json body = detail::parse_body(req);
      if (!body.contains("mask")) throw ServiceError(400, "bad-request", "missing 'mask'");
      const std::size_t expert = std::stoul(req.matches[2]);
      send_json(res, 200, store.submit_correction(req.matches[1], expert, mask_from_json(body.at("mask"))).dump());
    });
  });

  srv.Post(R"(/v1/sessions/([^/]+)/fuse)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, store.fuse_bytes(req.matches[1])); });
  });

  srv.Get(R"(/v1/sessions/([^/]+)/result)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, store.result_bytes(req.matches[1])); });
  });

  srv.Get("/v1/samples", [catalog](const httplib::Request&, httplib::Response& res) {
    nlohmann::json ids = nlohmann::json::array();
    if (catalog)
      for (const auto& s : catalog->samples) ids.push_back(s.id);
    send_json(res, 200, nlohmann::json{{"samples", ids}}.dump());
  });

  srv.Get(R"(/v1/samples/([^/]+))", [catalog](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const Sample* s = catalog ? catalog->find(req.matches[1]) : nullptr;
      if (!s) throw ServiceError(404, "unknown-sample", "no sample '" + std::string(req.matches[1]) + "'");
      send_json(res, 200,
                nlohmann::json{{"id", s->id},
                               {"image", {{"pgm_base64", preview_b64(pgm::from_values(s->image))}}},
                               {"truth", rle_encode(s->mask)}}
                    .dump());
    });
  });

  srv.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) detail::send_error(res, res.status, "not-found", "no such route");
  });
}

}  // namespace dseg::service
