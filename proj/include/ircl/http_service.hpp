#pragma once

#include <memory>
#include <string>

#include "ircl/triage.hpp"

namespace ircl {

/// HTTP/JSON front end of a TriageService:
///   POST /v1/sessions                 {source_store, predictions, delta, k, labels?}
///   GET  /v1/sessions/{id}/queue      ?cursor&limit
///   PUT  /v1/sessions/{id}/threshold  {delta}
///   POST /v1/sessions/{id}/decisions  {module_id, verdict}
///   GET  /v1/sessions/{id}/report
///   GET  /v1/images/{id}/preview      -> image/png
/// Bad input maps to 400, unknown entities to 404.
class HttpService {
 public:
  explicit HttpService(TriageService& service);
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Binds `host:port`; port 0 picks a free port. Returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace ircl
