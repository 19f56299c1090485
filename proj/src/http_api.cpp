#include "mmchat/http_api.hpp"

#include <httplib.h>

#include "mmchat/error.hpp"

namespace mmchat::chat {
namespace {

void send_json(httplib::Response& res, const nlohmann::json& body, int status = 200) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

// Runs a handler, mapping library exceptions to HTTP statuses.
template <typename Fn>
httplib::Server::Handler guarded(Fn fn) {
  return [fn](const httplib::Request& req, httplib::Response& res) {
    try {
      fn(req, res);
    } catch (const nlohmann::json::exception& e) {
      send_json(res, {{"error", std::string("bad request body: ") + e.what()}}, 400);
    } catch (const ValidationError& e) {
      send_json(res, {{"error", e.what()}}, 400);
    } catch (const NotFoundError& e) {
      send_json(res, {{"error", e.what()}}, 404);
    } catch (const StateError& e) {
      send_json(res, {{"error", e.what()}}, 409);
    } catch (const std::exception& e) {
      send_json(res, {{"error", e.what()}}, 500);
    }
  };
}

nlohmann::json body_of(const httplib::Request& req) {
  auto j = nlohmann::json::parse(req.body);
  if (!j.is_object()) throw ValidationError("request body must be a JSON object");
  return j;
}

}  // namespace

nlohmann::json transcript_json(const SessionState& s) {
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : s.turns) {
    nlohmann::json jt{{"speaker", corpus::to_string(t.speaker)}, {"text", t.text}};
    if (t.image_id) jt["image_id"] = *t.image_id;
    if (t.eval) jt["eval"] = to_json(*t.eval);
    turns.push_back(std::move(jt));
  }
  nlohmann::json j{{"session_id", s.session_id}, {"turns", std::move(turns)}, {"closed", s.closed()}};
  if (s.session_eval) j["session_eval"] = to_json(*s.session_eval);
  return j;
}

struct HttpServer::Impl {
  ChatService& service;
  httplib::Server server;
  explicit Impl(ChatService& s) : service(s) {}
};

HttpServer::HttpServer(ChatService& service, std::optional<std::filesystem::path> static_dir)
    : impl_(std::make_unique<Impl>(service)) {
  auto& srv = impl_->server;
  ChatService& svc = service;

  srv.Get("/api/health", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            send_json(res, {{"status", "ok"}, {"model_tags", svc.model_tags()}});
          }));
  srv.Post("/api/sessions", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto body = body_of(req);
             send_json(res, {{"session_id", svc.create_session(body.at("model_tag").get<std::string>())}}, 201);
           }));
  srv.Get(R"(/api/sessions/([^/]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            send_json(res, transcript_json(svc.session(req.matches[1])));
          }));
  srv.Post(R"(/api/sessions/([^/]+)/message)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto body = body_of(req);
             const auto r = svc.handle_message(req.matches[1], body.at("text").get<std::string>());
             nlohmann::json out{{"response", r.response}};
             if (r.image_id) {
               out["image_id"] = *r.image_id;
               out["score"] = *r.score;
             }
             send_json(res, out);
           }));
  srv.Post(R"(/api/sessions/([^/]+)/turn-eval)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto body = body_of(req);
             const auto& turn = body.at("turn");
             if (!turn.is_number_integer() || turn.get<long>() < 0) {
               throw ValidationError("turn must be a non-negative integer");
             }
             svc.record_turn_eval(req.matches[1], turn.get<std::size_t>(), turn_eval_from_json(body));
             send_json(res, {{"status", "stored"}});
           }));
  srv.Post(R"(/api/sessions/([^/]+)/close)", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
             const auto state = svc.close_session(req.matches[1], session_eval_from_json(body_of(req)));
             send_json(res, transcript_json(state));
           }));
  srv.Get(R"(/api/images/([^/]+))", guarded([&svc](const httplib::Request& req, httplib::Response& res) {
            const auto png = svc.image_png(req.matches[1]);
            res.set_content(std::string(png.begin(), png.end()), "image/png");
          }));
  srv.Get("/api/results/summary", guarded([&svc](const httplib::Request&, httplib::Response& res) {
            send_json(res, to_json(svc.summary()));
          }));
  if (static_dir && !srv.set_mount_point("/", static_dir->string())) {
    throw NotFoundError("static directory " + static_dir->string() + " does not exist");
  }
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw Error("cannot bind " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) throw Error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() {
  if (impl_ && impl_->server.is_running()) impl_->server.stop();
}

}  // namespace mmchat::chat
