#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>

#include "mmchat/chat_service.hpp"

namespace mmchat::chat {

// JSON-over-HTTP front end for a ChatService.
//
//   POST /api/sessions                  {model_tag}            -> 201 {session_id}
//   GET  /api/sessions/{id}                                    -> transcript (no model tag, no scores)
//   POST /api/sessions/{id}/message     {text}                 -> {response, image_id?, score?}
//   POST /api/sessions/{id}/turn-eval   {turn, fluency, coherence, image_groundedness?}
//   POST /api/sessions/{id}/close       {engagingness, humanness}
//   GET  /api/images/{id}                                      -> image/png
//   GET  /api/results/summary                                  -> per-model means
//   GET  /api/health
//
// Errors are {"error": message} with 400 (validation), 404 (unknown id),
// 409 (closed or busy session) or 500.
class HttpServer {
 public:
  explicit HttpServer(ChatService& service, std::optional<std::filesystem::path> static_dir = {});
  ~HttpServer();
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  // Binds (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

// Public view of a session for the web client.
nlohmann::json transcript_json(const SessionState& s);

}  // namespace mmchat::chat
