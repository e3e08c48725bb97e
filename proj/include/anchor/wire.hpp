#pragma once

#include <atomic>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "anchor/backend.hpp"

namespace anchor::wire {

constexpr int kVersion = 1;

/// 17 significant digits; round-trips every finite double.
std::string format_decimal(double value);
double parse_decimal(std::string_view text);

struct Endpoint {
  std::string host = "127.0.0.1";
  int port = 0;

  static Endpoint parse(std::string_view text);  // "host:port"
};

/// Serializes a score request line (without trailing newline).
std::string encode_score_request(const ScoreRequest& request);
/// Serializes a successful score response.
std::string encode_score_response(const ScoreResult& result);
std::string encode_error(std::string_view code, std::string_view message);

/// Answers one request line. Never throws; failures become error responses.
std::string handle_request(const Backend& backend, std::string_view line);

/// Serves newline-delimited requests from `in_fd`, answering on `out_fd`,
/// until end of input.
void serve_stream(const Backend& backend, int in_fd, int out_fd);

/// TCP server running on background threads; one thread per connection.
class Server {
 public:
  Server(const Backend& backend, const Endpoint& endpoint);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Actual bound port (useful when binding port 0).
  int port() const { return port_; }
  void stop();

 private:
  void accept_loop();

  const Backend& backend_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread acceptor_;
  std::mutex mutex_;
  std::vector<int> connections_;
  std::vector<std::thread> workers_;
};

/// Starts serving `backend` on `endpoint`. Throws EnvironmentError when the
/// address cannot be bound.
std::unique_ptr<Server> serve(const Backend& backend, const Endpoint& endpoint);

/// Line-buffered duplex channel over file descriptors (socket or pipe pair).
class LineChannel {
 public:
  LineChannel(int read_fd, int write_fd, bool owns);
  ~LineChannel();
  LineChannel(const LineChannel&) = delete;
  LineChannel& operator=(const LineChannel&) = delete;

  static std::unique_ptr<LineChannel> connect(const Endpoint& endpoint);

  void write_line(std::string_view line);
  /// Returns false at end of stream.
  bool read_line(std::string& line);

 private:
  int read_fd_;
  int write_fd_;
  bool owns_;
  std::string buffer_;
};

/// Backend that forwards score() calls to a logit server.
class RemoteBackend final : public Backend {
 public:
  explicit RemoteBackend(std::unique_ptr<LineChannel> channel);
  static std::unique_ptr<RemoteBackend> connect(const Endpoint& endpoint);

  const VocabSpec& vocab() const override { return vocab_; }
  int max_positions() const override { return max_positions_; }
  ScoreResult score(const ScoreRequest& request) const override;

  /// Sends a raw line and returns the raw response line.
  std::string roundtrip(std::string_view line) const;

 private:
  std::unique_ptr<LineChannel> channel_;
  mutable std::mutex mutex_;
  VocabSpec vocab_;
  int max_positions_ = 0;
};

/// Parses a response line into a ScoreResult; throws TransportError (with
/// the protocol code) on error responses or malformed lines. `truncated`
/// selects (id, value) storage for top-k responses.
ScoreResult decode_score_response(const std::string& line, bool truncated);

}  // namespace anchor::wire
