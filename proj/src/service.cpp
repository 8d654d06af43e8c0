#include "flowseg/service.hpp"

#include <chrono>
#include <condition_variable>
#include <ctime>
#include <filesystem>
#include <vector>

#include <httplib.h>

#include "flowseg/errors.hpp"
#include "flowseg/wire.hpp"

namespace flowseg::service {

using nlohmann::json;

namespace {

struct HttpError {
  int status;
  std::string code, message;
};

Reply error_reply(int status, std::string code, std::string message) {
  return {status, {{"code", std::move(code)}, {"message", std::move(message)}}};
}

std::string utc_now() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::vector<std::string> split_path(std::string_view path) {
  std::vector<std::string> parts;
  std::size_t i = 0;
  while (i < path.size()) {
    while (i < path.size() && path[i] == '/') ++i;
    std::size_t j = i;
    while (j < path.size() && path[j] != '/') ++j;
    if (j > i) parts.emplace_back(path.substr(i, j - i));
    i = j;
  }
  return parts;
}

json parse_body(std::string_view body) {
  if (body.empty()) return json::object();
  try {
    return json::parse(body);
  } catch (const json::parse_error& e) {
    throw HttpError{422, "malformed_json", e.what()};
  }
}

std::size_t frame_field(const json& j) {
  if (!j.is_object() || !j.contains("frame") || !j.at("frame").is_number_integer() ||
      j.at("frame").get<long long>() < 0) {
    throw HttpError{422, "invalid_request", "'frame' must be a non-negative integer"};
  }
  return j.at("frame").get<std::size_t>();
}

const json& prompt_field(const json& j) {
  if (!j.contains("prompt")) throw HttpError{422, "invalid_request", "missing 'prompt'"};
  return j.at("prompt");
}

json flow_summary(const Flow& f) {
  return {{"mode", to_string(f.mode)},
          {"task_class", to_string(f.task_class)},
          {"n_frames", f.size()},
          {"height", f.height()},
          {"width", f.width()}};
}

json image_json(const Image& im) {
  std::vector<std::uint8_t> px(im.pixels.size());
  for (std::size_t i = 0; i < px.size(); ++i) px[i] = static_cast<std::uint8_t>(std::lround(im.pixels[i] * 255.0f));
  return {{"height", im.height}, {"width", im.width}, {"pixels", wire::base64_encode(px)}};
}

}  // namespace

struct Service::Slot {
  explicit Slot(engine::Session s, std::string created) : session(std::move(s)), created_at(std::move(created)) {}
  engine::Session session;
  std::string created_at;
  std::mutex m;
  std::condition_variable cv;
  std::uint64_t next_ticket = 0, serving = 0;
};

Service::Service(std::shared_ptr<const ModelParams> params) : params_(std::move(params)) {}
Service::~Service() = default;

std::size_t Service::session_count() const {
  std::lock_guard lock(mu_);
  return sessions_.size();
}

std::shared_ptr<Service::Slot> Service::find(const std::string& id) const {
  std::lock_guard lock(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) throw HttpError{404, "session_not_found", "no session '" + id + "'"};
  return it->second;
}

Reply Service::with_session(const std::string& id, const std::function<Reply(Slot&, std::uint64_t)>& fn) {
  const auto slot = find(id);
  std::unique_lock lock(slot->m);
  const std::uint64_t ticket = slot->next_ticket++;
  slot->cv.wait(lock, [&] { return slot->serving == ticket; });
  lock.unlock();
  struct Release {
    Slot& s;
    ~Release() {
      {
        std::lock_guard g(s.m);
        ++s.serving;
      }
      s.cv.notify_all();
    }
  } release{*slot};
  if (in_exclusive_section) in_exclusive_section();
  return fn(*slot, ticket);
}

Reply Service::create(const json& body) {
  Flow flow;
  if (body.contains("flow_path")) {
    if (!body.at("flow_path").is_string()) throw HttpError{422, "invalid_request", "'flow_path' must be a string"};
    const std::filesystem::path path = body.at("flow_path").get<std::string>();
    if (!std::filesystem::is_regular_file(path)) throw HttpError{404, "flow_not_found", "no flow at " + path.string()};
    flow = load_flow(path);
  } else if (body.contains("flow_data")) {
    if (!body.at("flow_data").is_string()) throw HttpError{422, "invalid_request", "'flow_data' must be a string"};
    flow = decode_flow(wire::base64_decode(body.at("flow_data").get<std::string>()));
  } else {
    throw HttpError{422, "invalid_request", "provide 'flow_path' or 'flow_data'"};
  }

  engine::SessionConfig cfg = engine::default_session_config(flow.mode);
  cfg.bank = wire::bank_config_from_json(body.value("bank", json()), cfg.bank);
  if (body.contains("forward_only")) cfg.forward_only = body.at("forward_only").get<bool>();
  if (body.contains("similarity_order")) cfg.similarity_order = body.at("similarity_order").get<bool>();
  if (body.contains("memory_use")) {
    const auto use = body.at("memory_use").get<std::string>();
    if (use == "none") cfg.memory_use = engine::MemoryUse::none;
    else if (use == "uniform") cfg.memory_use = engine::MemoryUse::uniform;
    else if (use == "similarity") cfg.memory_use = engine::MemoryUse::similarity;
    else throw ConfigError("unknown memory_use '" + use + "'");
  }

  auto slot = std::make_shared<Slot>(engine::start_session(std::move(flow), params_, cfg), utc_now());
  const std::string id = slot->session.id();
  json out{{"id", id},
           {"created_at", slot->created_at},
           {"flow", flow_summary(slot->session.flow())},
           {"bank", wire::bank_config_json(cfg.bank)}};
  {
    std::lock_guard lock(mu_);
    sessions_.emplace(id, std::move(slot));
  }
  return {201, out};
}

Reply Service::handle(std::string_view method, std::string_view path, std::string_view body) {
  try {
    const auto parts = split_path(path);
    const bool get = method == "GET", post = method == "POST";

    if (parts.size() == 1 && parts[0] == "healthz") {
      if (!get) return error_reply(405, "method_not_allowed", "use GET");
      const auto& c = params_->config();
      return {200,
              {{"status", "ok"},
               {"sessions", session_count()},
               {"model", {{"dim", c.dim}, {"patch", c.patch}, {"step", params_->step}}}}};
    }
    if (parts.empty() || parts[0] != "sessions") return error_reply(404, "route_not_found", std::string(path));
    if (parts.size() == 1) {
      if (!post) return error_reply(405, "method_not_allowed", "use POST");
      return create(parse_body(body));
    }
    const std::string& id = parts[1];
    const std::string what = parts.size() > 2 ? parts[2] : "";

    if (parts.size() == 3 && what == "prompts") {
      if (!post) return error_reply(405, "method_not_allowed", "use POST");
      const json req = parse_body(body);
      return with_session(id, [&](Slot& s, std::uint64_t ticket) {
        const std::size_t frame = frame_field(req);
        const Prompt p = wire::prompt_from_json(prompt_field(req), s.session.flow(), frame);
        const auto pred = engine::add_prompt(s.session, frame, p);
        json out = wire::prediction_json(pred, frame);
        out["prompt_index"] = s.session.prompt_log().size() - 1;
        out["ticket"] = ticket;
        return Reply{200, out};
      });
    }
    if (parts.size() == 3 && what == "propagate") {
      if (!post) return error_reply(405, "method_not_allowed", "use POST");
      return with_session(id, [&](Slot& s, std::uint64_t) {
        if (s.session.prompt_log().empty()) throw HttpError{409, "not_prompted", "add a prompt first"};
        return Reply{200, wire::propagation_json(engine::propagate(s.session))};
      });
    }
    if (parts.size() == 3 && what == "refine") {
      if (!post) return error_reply(405, "method_not_allowed", "use POST");
      const json req = parse_body(body);
      return with_session(id, [&](Slot& s, std::uint64_t ticket) {
        if (!s.session.propagated()) throw HttpError{409, "not_propagated", "propagate before refining"};
        const std::size_t frame = frame_field(req);
        const Prompt p = wire::prompt_from_json(prompt_field(req), s.session.flow(), frame);
        json out = wire::propagation_json(engine::refine_from(s.session, frame, p));
        out["ticket"] = ticket;
        return Reply{200, out};
      });
    }
    if (parts.size() == 4 && what == "masks") {
      if (!get) return error_reply(405, "method_not_allowed", "use GET");
      std::size_t frame = 0;
      try {
        std::size_t used = 0;
        frame = std::stoul(parts[3], &used);
        if (used != parts[3].size()) throw std::invalid_argument("frame");
      } catch (const std::exception&) {
        return error_reply(404, "frame_not_found", "bad frame '" + parts[3] + "'");
      }
      return with_session(id, [&](Slot& s, std::uint64_t) {
        if (frame >= s.session.flow().size())
          throw HttpError{404, "frame_not_found", "frame " + std::to_string(frame) + " out of range"};
        const auto& pred = s.session.predictions()[frame];
        json out{{"frame", frame},
                 {"image", image_json(s.session.flow().frames[frame].image)},
                 {"prediction", pred ? wire::prediction_json(*pred, frame) : json(nullptr)}};
        return Reply{200, out};
      });
    }
    if (parts.size() == 3 && what == "bank") {
      if (!get) return error_reply(405, "method_not_allowed", "use GET");
      return with_session(id, [&](Slot& s, std::uint64_t) {
        json out = wire::snapshot_json(membank::snapshot(s.session.bank()));
        out["config"] = wire::bank_config_json(s.session.bank().config());
        return Reply{200, out};
      });
    }
    return error_reply(404, "route_not_found", std::string(path));
  } catch (const HttpError& e) {
    return error_reply(e.status, e.code, e.message);
  } catch (const ConfigError& e) {
    return error_reply(422, "invalid_config", e.what());
  } catch (const ArgumentError& e) {
    return error_reply(422, "invalid_argument", e.what());
  } catch (const ShapeError& e) {
    return error_reply(422, "invalid_shape", e.what());
  } catch (const FormatError& e) {
    return error_reply(422, "invalid_format", e.what());
  } catch (const UsageError& e) {
    return error_reply(409, "conflict", e.what());
  } catch (const json::exception& e) {
    return error_reply(422, "invalid_request", e.what());
  } catch (const std::exception& e) {
    return error_reply(500, "internal", e.what());
  }
}

struct HttpServer::Impl {
  Service& service;
  httplib::Server server;
  bool bound = false;
  explicit Impl(Service& s) : service(s) {
    auto route = [this](const httplib::Request& req, httplib::Response& res) {
      const Reply r = service.handle(req.method, req.path, req.body);
      res.status = r.status;
      res.set_content(r.body.dump(), "application/json");
    };
    server.Get(".*", route);
    server.Post(".*", route);
  }
};

HttpServer::HttpServer(Service& service) : impl_(std::make_unique<Impl>(service)) {}
HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  int bound = -1;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (impl_->server.bind_to_port(host, port)) {
    bound = port;
  }
  impl_->bound = bound > 0;
  return bound;
}

bool HttpServer::run() { return impl_->bound && impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace flowseg::service
