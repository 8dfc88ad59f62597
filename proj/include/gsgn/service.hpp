#pragma once

// HTTP inference service over an immutable, atomically swappable model
// snapshot. Endpoints:
//   POST /v1/enhance  JSON {image: base64 PNG, style, return_metrics} or
//                     multipart (image file, style, return_metrics fields)
//                     -> image/png, metadata JSON in the X-GSGN-Metadata header
//   GET  /v1/styles   -> [{index, name}]
//   GET  /healthz     -> {status, model_id, checkpoint_hash} or 503
//
// Images are padded bottom/right to a multiple of 2^levels and cropped back,
// so the response has the input's dimensions.

#include <chrono>
#include <mutex>
#include <nlohmann/json.hpp>

#include "gsgn/checkpoint.hpp"
#include "gsgn/metrics.hpp"

// After Eigen: <resolv.h> (pulled in by httplib) defines a `_res` macro that
// collides with Eigen parameter names.
#include <httplib.h>

namespace gsgn {

inline std::string base64_decode(std::string_view in) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+' || c == '-') return 62;
    if (c == '/' || c == '_') return 63;
    return -1;
  };
  std::string out;
  out.reserve(in.size() * 3 / 4);
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : in) {
    if (c == '=' || c == '\n' || c == '\r' || c == ' ') continue;
    const int v = value(c);
    if (v < 0) throw Error("invalid base64 character");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

inline std::string base64_encode(const std::string& in) { return httplib::detail::base64_encode(in); }

struct ModelSnapshot {
  Gsgn<float> model;
  std::vector<std::string> task_names;
  std::string model_id;
  std::uint64_t checkpoint_hash = 0;

  static std::shared_ptr<const ModelSnapshot> from_checkpoint(const Checkpoint& ck, std::string id) {
    return std::make_shared<const ModelSnapshot>(
        ModelSnapshot{load_generator(ck), ck.task_names, std::move(id), ck.content_hash()});
  }
};

struct ServiceOptions {
  std::size_t max_edge = 1024;
};

class EnhanceService {
 public:
  struct Response {
    int status = 200;
    std::string body;
    std::string content_type = "application/json";
    std::map<std::string, std::string> headers;
  };

  explicit EnhanceService(ServiceOptions options = {}) : options_(options) {}

  void load_file(const std::filesystem::path& path) {
    swap(ModelSnapshot::from_checkpoint(Checkpoint::load(path), path.stem().string()));
  }

  /// Requests already holding the previous snapshot finish on it.
  void swap(std::shared_ptr<const ModelSnapshot> next) {
    std::lock_guard lock(mutex_);
    snapshot_ = std::move(next);
  }

  std::shared_ptr<const ModelSnapshot> snapshot() const {
    std::lock_guard lock(mutex_);
    return snapshot_;
  }

  Response health() const {
    auto snap = snapshot();
    if (!snap) return json_response(503, {{"status", "unavailable"}, {"error", "no checkpoint loaded"}});
    return json_response(200, {{"status", "ok"}, {"model_id", snap->model_id},
                               {"checkpoint_hash", hex64(snap->checkpoint_hash)}});
  }

  Response styles() const {
    auto snap = snapshot();
    if (!snap) return error(503, "no checkpoint loaded");
    nlohmann::json list = nlohmann::json::array();
    for (std::size_t i = 0; i < snap->task_names.size(); ++i)
      list.push_back({{"index", i}, {"name", snap->task_names[i]}});
    return json_response(200, list);
  }

  /// `style`: null (first style), a task name, or a weight vector (clamped to [0, 1]).
  Response enhance(const std::string& png, const nlohmann::json& style, bool return_metrics) const {
    auto snap = snapshot();
    if (!snap) return error(503, "no checkpoint loaded");
    Image input;
    try {
      input = decode_png(png);
    } catch (const Error& e) {
      return error(400, std::string("undecodable image: ") + e.what());
    }
    const std::size_t H = input.size(1), W = input.size(2);
    if (H > options_.max_edge || W > options_.max_edge)
      return error(413, "image " + std::to_string(W) + "x" + std::to_string(H) + " exceeds the maximum edge " +
                            std::to_string(options_.max_edge));
    nlohmann::json style_used;
    Tensor<float> z;
    try {
      z = resolve_style(*snap, style, style_used);
    } catch (const Error& e) {
      return error(400, e.what());
    }
    const auto t0 = std::chrono::steady_clock::now();
    auto padded = pad_to_multiple(input, snap->model.config().spatial_multiple());
    auto y = snap->model.enhance(as_batch(padded.image), z);
    Image out = crop(unstack(y, 0), H, W);
    const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();

    nlohmann::json meta{{"model_id", snap->model_id},
                        {"checkpoint_hash", hex64(snap->checkpoint_hash)},
                        {"style", style_used},
                        {"width", W},
                        {"height", H},
                        {"inference_ms", ms}};
    if (return_metrics) {
      const Image q = quantize(out);
      meta["metrics"] = {{"psnr_vs_input_db", psnr(q, input)},
                         {"ssim_vs_input", std::min(H, W) >= static_cast<std::size_t>(kSsimWindow)
                                               ? nlohmann::json(ssim(q, input))
                                               : nlohmann::json()}};
    }
    Response r;
    r.status = 200;
    r.body = encode_png(out);
    r.content_type = "image/png";
    r.headers["X-GSGN-Metadata"] = meta.dump();
    return r;
  }

  /// Registers the endpoints on `server`.
  void mount(httplib::Server& server) const {
    auto send = [](httplib::Response& res, const Response& r) {
      res.status = r.status;
      for (const auto& [k, v] : r.headers) res.set_header(k, v);
      res.set_content(r.body, r.content_type);
    };
    server.Get("/healthz", [this, send](const httplib::Request&, httplib::Response& res) { send(res, health()); });
    server.Get("/v1/styles", [this, send](const httplib::Request&, httplib::Response& res) { send(res, styles()); });
    server.Post("/v1/enhance", [this, send](const httplib::Request& req, httplib::Response& res) {
      send(res, handle_enhance(req));
    });
  }

  Response handle_enhance(const httplib::Request& req) const {
    std::string png;
    nlohmann::json style;
    bool metrics = false;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) return error(400, "multipart request needs an 'image' part");
      png = req.get_file_value("image").content;
      if (req.has_file("style")) {
        try {
          style = parse_style_field(req.get_file_value("style").content);
        } catch (const Error& e) {
          return error(400, e.what());
        }
      }
      if (req.has_file("return_metrics")) {
        const auto v = req.get_file_value("return_metrics").content;
        metrics = v == "1" || v == "true";
      }
    } else {
      nlohmann::json body;
      try {
        body = nlohmann::json::parse(req.body);
      } catch (const nlohmann::json::exception&) {
        return error(400, "request body is neither JSON nor multipart");
      }
      if (!body.is_object() || !body.contains("image") || !body["image"].is_string())
        return error(400, "JSON request needs a base64 'image' string");
      try {
        png = base64_decode(body["image"].get<std::string>());
      } catch (const Error& e) {
        return error(400, std::string("image field: ") + e.what());
      }
      style = body.value("style", nlohmann::json());
      const auto& rm = body.value("return_metrics", nlohmann::json(false));
      if (!rm.is_boolean()) return error(400, "return_metrics must be a boolean");
      metrics = rm.get<bool>();
    }
    return enhance(png, style, metrics);
  }

 private:
  static Response json_response(int status, const nlohmann::json& j) {
    Response r;
    r.status = status;
    r.body = j.dump();
    return r;
  }
  static Response error(int status, const std::string& message) { return json_response(status, {{"error", message}}); }

  /// Multipart style field: a task name, comma-separated weights or a JSON array.
  static nlohmann::json parse_style_field(const std::string& text) {
    if (text.empty()) return nullptr;
    if (text.front() == '[') {
      try {
        return nlohmann::json::parse(text);
      } catch (const nlohmann::json::exception&) {
        throw Error("style is not a valid JSON array");
      }
    }
    const bool numeric = text.find_first_not_of("0123456789.,-+eE ") == std::string::npos;
    if (!numeric) return text;
    nlohmann::json arr = nlohmann::json::array();
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        arr.push_back(std::stod(item));
      } catch (const std::exception&) {
        throw Error("style weight '" + item + "' is not a number");
      }
    }
    return arr;
  }

  static Tensor<float> resolve_style(const ModelSnapshot& snap, const nlohmann::json& style, nlohmann::json& used) {
    const std::size_t K = snap.task_names.size();
    std::vector<float> z(K, 0.0f);
    if (style.is_null()) {
      z[0] = 1.0f;
      used = {{"name", snap.task_names[0]}};
    } else if (style.is_string()) {
      const auto name = style.get<std::string>();
      auto it = std::find(snap.task_names.begin(), snap.task_names.end(), name);
      if (it == snap.task_names.end()) throw Error("unknown style '" + name + "'");
      z[static_cast<std::size_t>(it - snap.task_names.begin())] = 1.0f;
      used = {{"name", name}};
    } else if (style.is_array()) {
      if (style.size() != K)
        throw Error("style weight vector has length " + std::to_string(style.size()) + ", the model has " +
                    std::to_string(K) + " styles");
      for (std::size_t i = 0; i < K; ++i) {
        if (!style[i].is_number()) throw Error("style weights must be numbers");
        const double w = style[i].get<double>();
        if (!std::isfinite(w)) throw Error("style weights must be finite");
        z[i] = static_cast<float>(std::clamp(w, 0.0, 1.0));
      }
      used = {{"weights", z}};
    } else {
      throw Error("style must be a name or a weight vector");
    }
    if (!snap.model.conditional()) return Tensor<float>();
    return Tensor<float>(Shape{K}, std::move(z));
  }

  ServiceOptions options_;
  mutable std::mutex mutex_;
  std::shared_ptr<const ModelSnapshot> snapshot_;
};

}  // namespace gsgn
