#pragma once

// Session service: JSON request routing over engine sessions, plus an HTTP
// front end. Requests to one session run one at a time in arrival order;
// requests to different sessions run in parallel.

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include <json.hpp>

#include "flowseg/engine.hpp"
#include "flowseg/model.hpp"

namespace flowseg::service {

struct Reply {
  int status = 200;
  nlohmann::json body;
};

class Service {
 public:
  explicit Service(std::shared_ptr<const ModelParams> params);
  ~Service();

  /// Routes one request. Never throws; failures become {code, message} bodies.
  Reply handle(std::string_view method, std::string_view path, std::string_view body);

  std::size_t session_count() const;

  /// Test hook, run inside a session's exclusive section.
  std::function<void()> in_exclusive_section;

 private:
  struct Slot;
  std::shared_ptr<Slot> find(const std::string& id) const;
  Reply create(const nlohmann::json& body);
  Reply with_session(const std::string& id, const std::function<Reply(Slot&, std::uint64_t ticket)>& fn);

  std::shared_ptr<const ModelParams> params_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Slot>> sessions_;
};

class HttpServer {
 public:
  explicit HttpServer(Service& service);
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds `port`, or any free port when 0. Returns the bound port, -1 on failure.
  int bind(const std::string& host, int port);
  /// Serves until stop(); returns false when the listener failed.
  bool run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace flowseg::service
