#include "anchor/wire.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <set>

#include <json.hpp>

namespace anchor::wire {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

std::string format_decimal(double value) {
  char buf[40];
  const int n = std::snprintf(buf, sizeof buf, "%.17g", value);
  return std::string(buf, static_cast<std::size_t>(n));
}

double parse_decimal(std::string_view text) {
  double value = 0.0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw ArgumentError("invalid decimal '" + std::string(text) + "'");
  }
  return value;
}

Endpoint Endpoint::parse(std::string_view text) {
  const auto colon = text.rfind(':');
  if (colon == std::string_view::npos) throw ArgumentError("endpoint must be host:port");
  Endpoint e;
  e.host = std::string(text.substr(0, colon));
  const auto port = text.substr(colon + 1);
  const auto [ptr, ec] = std::from_chars(port.data(), port.data() + port.size(), e.port);
  if (ec != std::errc() || ptr != port.data() + port.size() || e.port < 0 || e.port > 65535) {
    throw ArgumentError("invalid port '" + std::string(port) + "'");
  }
  if (e.host.empty()) e.host = "127.0.0.1";
  return e;
}

// --- encoding ---

std::string encode_score_request(const ScoreRequest& request) {
  ordered_json j;
  j["v"] = kVersion;
  j["op"] = "score";
  j["tokens"] = std::vector<TokenId>(request.tokens.begin(), request.tokens.end());
  j["mask_positions"] = std::vector<TokenId>(request.mask_positions.begin(), request.mask_positions.end());
  j["want_attention"] = request.want_attention;
  j["top_k"] = request.top_k ? json(*request.top_k) : json(nullptr);
  return j.dump();
}

std::string encode_score_response(const ScoreResult& result) {
  ordered_json j;
  j["v"] = kVersion;
  j["ok"] = true;
  ordered_json logits = ordered_json::array();
  const Scores& s = result.logits;
  for (std::size_t i = 0; i < s.size(); ++i) {
    logits.push_back({std::to_string(s.id_at(i)), format_decimal(s.values[static_cast<Eigen::Index>(i)])});
  }
  j["logits"] = std::move(logits);
  if (result.attention) {
    ordered_json att = ordered_json::array();
    for (double a : *result.attention) att.push_back(format_decimal(a));
    j["attention"] = std::move(att);
  } else {
    j["attention"] = nullptr;
  }
  return j.dump();
}

std::string encode_error(std::string_view code, std::string_view message) {
  ordered_json j;
  j["v"] = kVersion;
  j["ok"] = false;
  j["code"] = code;
  j["message"] = message;
  return j.dump();
}

// --- server side ---

namespace {

struct ProtocolError {
  std::string code;
  std::string message;
};

std::vector<TokenId> int_array(const json& j, const char* field) {
  if (!j.is_array()) throw ProtocolError{"bad_request", std::string(field) + " must be an array"};
  std::vector<TokenId> out;
  for (const auto& v : j) {
    if (!v.is_number_integer()) throw ProtocolError{"bad_request", std::string(field) + " must hold integers"};
    const auto x = v.get<std::int64_t>();
    if (x < INT32_MIN || x > INT32_MAX) throw ProtocolError{"bad_request", std::string(field) + " value out of range"};
    out.push_back(static_cast<TokenId>(x));
  }
  return out;
}

void check_fields(const json& request, const std::set<std::string>& allowed) {
  for (const auto& [key, _] : request.items()) {
    if (!allowed.count(key)) throw ProtocolError{"bad_request", "unknown field '" + key + "'"};
  }
}

std::string handle_meta(const Backend& backend, const json& request) {
  check_fields(request, {"v", "op"});
  const VocabSpec& vocab = backend.vocab();
  ordered_json j;
  j["v"] = kVersion;
  j["ok"] = true;
  j["vocab_size"] = vocab.size;
  j["mask_id"] = vocab.mask_id;
  j["stop_ids"] = vocab.stop_ids;
  j["max_positions"] = backend.max_positions();
  return j.dump();
}

std::string handle_score(const Backend& backend, const json& request) {
  check_fields(request, {"v", "op", "tokens", "mask_positions", "want_attention", "top_k"});
  if (!request.contains("tokens")) throw ProtocolError{"bad_request", "missing field 'tokens'"};
  const Tokens tokens = int_array(request["tokens"], "tokens");
  const Tokens mask = request.contains("mask_positions") ? int_array(request["mask_positions"], "mask_positions") : Tokens{};
  bool want_attention = false;
  if (request.contains("want_attention")) {
    if (!request["want_attention"].is_boolean()) throw ProtocolError{"bad_request", "want_attention must be a boolean"};
    want_attention = request["want_attention"].get<bool>();
  }
  std::optional<int> k;
  if (request.contains("top_k") && !request["top_k"].is_null()) {
    if (!request["top_k"].is_number_integer()) throw ProtocolError{"bad_request", "top_k must be an integer or null"};
    const auto v = request["top_k"].get<std::int64_t>();
    if (v < 1 || v > backend.vocab().size) throw ProtocolError{"bad_top_k", "top_k must lie in [1, vocab size]"};
    k = static_cast<int>(v);
  }

  if (tokens.empty()) throw ProtocolError{"empty_context", "tokens must be non-empty"};
  for (TokenId t : tokens) {
    if (t < 0 || t >= backend.vocab().size) throw ProtocolError{"bad_token", "token id " + std::to_string(t) + " out of range"};
  }
  for (TokenId p : mask) {
    if (p < 0 || static_cast<std::size_t>(p) >= tokens.size()) {
      throw ProtocolError{"bad_mask_index", "mask index " + std::to_string(p) + " out of range"};
    }
  }
  if (static_cast<int>(tokens.size()) > backend.max_positions()) {
    throw ProtocolError{"capacity", "context exceeds max_positions"};
  }
  const ScoreResult result = backend.score({.tokens = tokens, .mask_positions = mask, .want_attention = want_attention, .top_k = k});
  return encode_score_response(result);
}

bool write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == ENOTSOCK) n = ::write(fd, data.data(), data.size());
    if (n < 0) {
      if (errno == EINTR) continue;
      return false;
    }
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

}  // namespace

std::string handle_request(const Backend& backend, std::string_view line) {
  try {
    json request;
    try {
      request = json::parse(line);
    } catch (const json::exception& e) {
      return encode_error("bad_json", e.what());
    }
    if (!request.is_object()) return encode_error("bad_request", "request must be a JSON object");
    if (!request.contains("v") || request["v"] != kVersion) return encode_error("bad_version", "expected \"v\":1");
    if (!request.contains("op") || !request["op"].is_string()) return encode_error("bad_request", "missing op");
    const auto op = request["op"].get<std::string>();
    if (op == "score") return handle_score(backend, request);
    if (op == "meta") return handle_meta(backend, request);
    return encode_error("unknown_op", "unknown op '" + op + "'");
  } catch (const ProtocolError& e) {
    return encode_error(e.code, e.message);
  } catch (const CapacityError& e) {
    return encode_error("capacity", e.what());
  } catch (const std::exception& e) {
    return encode_error("internal", e.what());
  }
}

void serve_stream(const Backend& backend, int in_fd, int out_fd) {
  LineChannel channel(in_fd, out_fd, false);
  std::string line;
  while (channel.read_line(line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    try {
      channel.write_line(handle_request(backend, line));
    } catch (const TransportError&) {
      return;
    }
  }
}

Server::Server(const Backend& backend, const Endpoint& endpoint) : backend_(backend) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  hints.ai_flags = AI_PASSIVE;
  addrinfo* info = nullptr;
  const std::string port = std::to_string(endpoint.port);
  if (::getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &info) != 0 || !info) {
    throw EnvironmentError("cannot resolve " + endpoint.host);
  }
  listen_fd_ = ::socket(info->ai_family, info->ai_socktype, info->ai_protocol);
  const int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  const bool ok = listen_fd_ >= 0 && ::bind(listen_fd_, info->ai_addr, info->ai_addrlen) == 0 &&
                  ::listen(listen_fd_, 64) == 0;
  ::freeaddrinfo(info);
  if (!ok) {
    const std::string reason = std::strerror(errno);
    if (listen_fd_ >= 0) ::close(listen_fd_);
    throw EnvironmentError("cannot bind " + endpoint.host + ":" + port + ": " + reason);
  }
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
  acceptor_ = std::thread([this] { accept_loop(); });
}

Server::~Server() { stop(); }

void Server::accept_loop() {
  while (!stopping_) {
    pollfd p{listen_fd_, POLLIN, 0};
    if (::poll(&p, 1, 50) <= 0) continue;
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) continue;
    const int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
    std::lock_guard lock(mutex_);
    if (stopping_) {
      ::close(fd);
      break;
    }
    connections_.push_back(fd);
    workers_.emplace_back([this, fd] { serve_stream(backend_, fd, fd); });
  }
}

void Server::stop() {
  if (stopping_.exchange(true)) return;
  if (acceptor_.joinable()) acceptor_.join();
  std::vector<std::thread> workers;
  {
    std::lock_guard lock(mutex_);
    for (int fd : connections_) ::shutdown(fd, SHUT_RDWR);
    workers.swap(workers_);
  }
  for (auto& t : workers) t.join();
  for (int fd : connections_) ::close(fd);
  connections_.clear();
  ::close(listen_fd_);
}

std::unique_ptr<Server> serve(const Backend& backend, const Endpoint& endpoint) {
  return std::make_unique<Server>(backend, endpoint);
}

// --- client side ---

LineChannel::LineChannel(int read_fd, int write_fd, bool owns) : read_fd_(read_fd), write_fd_(write_fd), owns_(owns) {}

LineChannel::~LineChannel() {
  if (!owns_) return;
  ::close(read_fd_);
  if (write_fd_ != read_fd_) ::close(write_fd_);
}

std::unique_ptr<LineChannel> LineChannel::connect(const Endpoint& endpoint) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* info = nullptr;
  const std::string port = std::to_string(endpoint.port);
  if (::getaddrinfo(endpoint.host.c_str(), port.c_str(), &hints, &info) != 0 || !info) {
    throw TransportError("cannot resolve " + endpoint.host);
  }
  int fd = -1;
  for (addrinfo* a = info; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(info);
  if (fd < 0) throw TransportError("cannot connect to " + endpoint.host + ":" + port);
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return std::make_unique<LineChannel>(fd, fd, true);
}

void LineChannel::write_line(std::string_view line) {
  std::string data(line);
  data.push_back('\n');
  if (!write_all(write_fd_, data)) throw TransportError(std::string("write failed: ") + std::strerror(errno));
}

bool LineChannel::read_line(std::string& line) {
  for (;;) {
    const auto nl = buffer_.find('\n');
    if (nl != std::string::npos) {
      line.assign(buffer_, 0, nl);
      buffer_.erase(0, nl + 1);
      return true;
    }
    char chunk[4096];
    const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      if (buffer_.empty()) return false;
      line = std::move(buffer_);
      buffer_.clear();
      return true;
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

RemoteBackend::RemoteBackend(std::unique_ptr<LineChannel> channel) : channel_(std::move(channel)) {
  const std::string raw = roundtrip(R"({"v":1,"op":"meta"})");
  try {
    const json j = json::parse(raw);
    if (!j.value("ok", false)) throw TransportError("meta request rejected", raw, j.value("code", ""));
    vocab_.size = j.at("vocab_size").get<int>();
    vocab_.mask_id = j.at("mask_id").get<TokenId>();
    vocab_.stop_ids = j.at("stop_ids").get<std::vector<TokenId>>();
    max_positions_ = j.at("max_positions").get<int>();
    vocab_.validate();
  } catch (const json::exception& e) {
    throw TransportError(std::string("malformed meta response: ") + e.what(), raw);
  } catch (const ArgumentError& e) {
    throw TransportError(std::string("invalid meta response: ") + e.what(), raw);
  }
}

std::unique_ptr<RemoteBackend> RemoteBackend::connect(const Endpoint& endpoint) {
  return std::make_unique<RemoteBackend>(LineChannel::connect(endpoint));
}

std::string RemoteBackend::roundtrip(std::string_view line) const {
  std::lock_guard lock(mutex_);
  channel_->write_line(line);
  std::string response;
  if (!channel_->read_line(response)) throw TransportError("connection closed by server");
  return response;
}

ScoreResult RemoteBackend::score(const ScoreRequest& request) const {
  return decode_score_response(roundtrip(encode_score_request(request)), request.top_k.has_value());
}

ScoreResult decode_score_response(const std::string& line, bool truncated) {
  json j;
  try {
    j = json::parse(line);
  } catch (const json::exception& e) {
    throw TransportError(std::string("unparsable response: ") + e.what(), line);
  }
  try {
    if (j.at("v") != kVersion) throw TransportError("unsupported protocol version", line);
    if (!j.at("ok").get<bool>()) {
      const auto code = j.value("code", std::string("unknown"));
      throw TransportError("server error " + code + ": " + j.value("message", std::string()), line, code);
    }
    ScoreResult result;
    const auto& pairs = j.at("logits");
    const auto n = static_cast<Eigen::Index>(pairs.size());
    result.logits.values.resize(n);
    std::vector<TokenId> ids;
    ids.reserve(pairs.size());
    bool sequential = true;
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& pair = pairs.at(static_cast<std::size_t>(i));
      if (!pair.is_array() || pair.size() != 2) throw TransportError("logit entries must be [id, value] pairs", line);
      const auto id_text = pair[0].get<std::string>();
      TokenId id = 0;
      const auto [ptr, ec] = std::from_chars(id_text.data(), id_text.data() + id_text.size(), id);
      if (ec != std::errc() || ptr != id_text.data() + id_text.size()) throw TransportError("bad token id in response", line);
      sequential = sequential && id == i;
      ids.push_back(id);
      result.logits.values[i] = parse_decimal(pair[1].get<std::string>());
    }
    if (truncated) {
      result.logits.ids = std::move(ids);
    } else if (!sequential) {
      throw TransportError("dense logits must be listed in id order", line);
    }
    if (!j.at("attention").is_null()) {
      const auto& att = j["attention"];
      Logits a(static_cast<Eigen::Index>(att.size()));
      for (std::size_t i = 0; i < att.size(); ++i) a[static_cast<Eigen::Index>(i)] = parse_decimal(att[i].get<std::string>());
      result.attention = std::move(a);
    }
    return result;
  } catch (const json::exception& e) {
    throw TransportError(std::string("malformed response: ") + e.what(), line);
  } catch (const ArgumentError& e) {
    throw TransportError(std::string("malformed response: ") + e.what(), line);
  }
}

}  // namespace anchor::wire
