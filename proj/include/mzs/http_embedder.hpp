#pragma once

// External-inference adapter. Talks to a model server over HTTP/JSON:
//
//   POST <path>  {"kind": "image", "shape": [h, w], "payload": base64(float32 LE, row-major)}
//                {"kind": "text",  "shape": [n_bytes], "payload": "<utf-8 text>"}
//   200          {"dim": d, "payload": base64(float32 LE)}
//
// The response vector is treated as raw; embed_image/embed_text normalize it.

#include <httplib.h>
// <resolv.h> (via httplib) defines _res, which clashes with Eigen internals.
#ifdef _res
#undef _res
#endif

#include <json.hpp>
#include <string>
#include <utility>

#include "mzs/embedder.hpp"

namespace mzs {

namespace wire {

using nlohmann::json;

inline json image_request(const Image2D& img) {
  return {{"kind", "image"}, {"shape", {img.height, img.width}}, {"payload", detail::floats_to_base64(img.pixels)}};
}

inline json text_request(std::string_view text) {
  return {{"kind", "text"}, {"shape", {text.size()}}, {"payload", std::string(text)}};
}

inline json vector_response(const std::vector<float>& v) {
  return {{"dim", v.size()}, {"payload", detail::floats_to_base64(v)}};
}

inline std::vector<float> parse_vector_response(const json& j) {
  const auto dim = j.at("dim").get<std::size_t>();
  auto v = detail::floats_from_base64(j.at("payload").get<std::string>());
  if (v.size() != dim)
    throw EmbedderError("adapter response declares dim " + std::to_string(dim) + " but carries " +
                        std::to_string(v.size()) + " floats");
  return v;
}

// Decodes a request and runs it against a local backend. Used by model-server
// shims and tests.
inline json handle_request(const EmbedderBackend& backend, const json& req) {
  const auto kind = req.at("kind").get<std::string>();
  const auto& shape = req.at("shape");
  if (kind == "image") {
    Image2D img;
    img.height = shape.at(0).get<int>();
    img.width = shape.at(1).get<int>();
    img.pixels = detail::floats_from_base64(req.at("payload").get<std::string>());
    if (img.pixels.size() != static_cast<std::size_t>(img.height) * img.width)
      throw std::invalid_argument("image payload does not match shape");
    return vector_response(backend.raw_image(img));
  }
  if (kind == "text") {
    const auto text = req.at("payload").get<std::string>();
    if (text.size() != shape.at(0).get<std::size_t>()) throw std::invalid_argument("text payload does not match shape");
    return vector_response(backend.raw_text(text));
  }
  throw std::invalid_argument("unknown request kind '" + kind + "'");
}

// Registers POST <path> on a server, answering with `backend`.
inline void mount_embedding_endpoint(httplib::Server& server, const EmbedderBackend& backend,
                                     const std::string& path = "/embed") {
  server.Post(path, [&backend](const httplib::Request& req, httplib::Response& res) {
    try {
      res.set_content(handle_request(backend, json::parse(req.body)).dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", e.what()}}.dump(), "application/json");
    }
  });
}

}  // namespace wire

class HttpEmbedder final : public EmbedderBackend {
 public:
  // info describes the remote model (name, dim, resolution, capabilities).
  HttpEmbedder(BackendInfo info, std::string host, int port, std::string path = "/embed", int timeout_s = 60)
      : info_(std::move(info)), host_(std::move(host)), port_(port), path_(std::move(path)), timeout_s_(timeout_s) {}

  const BackendInfo& info() const override { return info_; }

  std::vector<float> raw_image(const Image2D& image) const override { return call(wire::image_request(image)); }
  std::vector<float> raw_text(std::string_view text) const override { return call(wire::text_request(text)); }

 private:
  std::vector<float> call(const nlohmann::json& req) const {
    httplib::Client client(host_, port_);
    client.set_read_timeout(timeout_s_, 0);
    client.set_connection_timeout(timeout_s_, 0);
    auto res = client.Post(path_, req.dump(), "application/json");
    if (!res) throw EmbedderError(info_.name + ": request to " + host_ + ":" + std::to_string(port_) + path_ +
                                  " failed (" + httplib::to_string(res.error()) + ")");
    if (res->status != 200)
      throw EmbedderError(info_.name + ": model server returned HTTP " + std::to_string(res->status) + ": " + res->body);
    return wire::parse_vector_response(nlohmann::json::parse(res->body));
  }

  BackendInfo info_;
  std::string host_;
  int port_;
  std::string path_;
  int timeout_s_;
};

}  // namespace mzs
