#include "ircl/http_service.hpp"

#include <httplib.h>

namespace ircl {

using nlohmann::json;

struct HttpService::Impl {
  TriageService& service;
  httplib::Server server;
  explicit Impl(TriageService& s) : service(s) {}
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

json parse_body(const httplib::Request& req) {
  try {
    return json::parse(req.body);
  } catch (const json::exception& e) {
    throw InvalidArgument(std::string("request body is not valid JSON: ") + e.what());
  }
}

std::size_t query_size(const httplib::Request& req, const char* name, std::size_t fallback) {
  if (!req.has_param(name)) return fallback;
  const auto v = req.get_param_value(name);
  try {
    std::size_t used = 0;
    const auto n = std::stoll(v, &used);
    if (used != v.size() || n < 0) throw std::invalid_argument(v);
    return static_cast<std::size_t>(n);
  } catch (const std::logic_error&) {
    throw InvalidArgument(std::string("query parameter ") + name + " must be a non-negative integer");
  }
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFound& e) {
      send_json(res, 404, {{"error", e.what()}});
    } catch (const InvalidArgument& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const FormatError& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const json::exception& e) {
      send_json(res, 400, {{"error", e.what()}});
    } catch (const std::exception& e) {
      send_json(res, 500, {{"error", e.what()}});
    }
  };
}

}  // namespace

HttpService::HttpService(TriageService& service) : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  auto& svc = impl_->service;
  srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});

  srv.Post("/v1/sessions", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto id = svc.create_session(SessionRequest::from_json(parse_body(req)));
             send_json(res, 201, {{"session_id", id}});
           }));

  srv.Get(R"(/v1/sessions/([^/]+)/queue)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const auto page = svc.queue(req.matches[1], query_size(req, "cursor", 0), query_size(req, "limit", 20));
            json items = json::array();
            for (const auto& item : page.items) items.push_back(to_json(item));
            send_json(res, 200, {{"items", items},
                                 {"next_cursor", page.next_cursor ? json(*page.next_cursor) : json(nullptr)}});
          }));

  srv.Put(R"(/v1/sessions/([^/]+)/threshold)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const auto body = parse_body(req);
            if (!body.is_object() || !body.contains("delta") || !body["delta"].is_number())
              throw InvalidArgument("body must carry a numeric delta");
            send_json(res, 200, to_json(svc.set_threshold(req.matches[1], body["delta"].get<double>())));
          }));

  srv.Post(R"(/v1/sessions/([^/]+)/decisions)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto body = parse_body(req);
             if (!body.is_object() || !body.contains("module_id") || !body["module_id"].is_number_unsigned())
               throw InvalidArgument("body must carry a non-negative integer module_id");
             const auto verdict = parse_decision(body.value("verdict", ""));
             if (!verdict)
               throw InvalidArgument("verdict must be confirmed_anomalous, confirmed_normal or skipped");
             svc.record_decision(req.matches[1], body["module_id"].get<std::uint32_t>(), *verdict);
             send_json(res, 200, {{"ok", true}});
           }));

  srv.Get(R"(/v1/sessions/([^/]+)/report)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            send_json(res, 200, svc.report(req.matches[1]));
          }));

  srv.Get(R"(/v1/images/(\d+)/preview)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            std::uint64_t id = 0;
            try {
              id = std::stoull(req.matches[1]);
            } catch (const std::logic_error&) {
              throw NotFound("no image " + std::string(req.matches[1]));
            }
            res.status = 200;
            res.set_content(svc.image_preview(id), "image/png");
          }));

  srv.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) {
    res.set_header("Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS");
    res.set_header("Access-Control-Allow-Headers", "Content-Type");
    res.status = 204;
  });
}

HttpService::~HttpService() { stop(); }

int HttpService::bind(const std::string& host, int port) {
  if (port == 0) {
    const int p = impl_->server.bind_to_any_port(host);
    if (p < 0) throw Error("cannot bind " + host);
    return p;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpService::listen() { impl_->server.listen_after_bind(); }

void HttpService::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace ircl
