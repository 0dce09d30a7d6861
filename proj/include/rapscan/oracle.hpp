#pragma once

// Black-box model access over a newline-delimited JSON protocol.
//
// On connect the server sends one handshake line:
//   {"protocol":"rap-oracle","version":1,"d":16,"tasks":["SC"],"trigger_mode":"embedding"}
// Each request is one JSON object per line:
//   {"id":"r1","task":"SC","ids":[...],
//    "trigger":{"token_id":2,"embedding":[...],"positions":[7]}}
// and is answered in order with {"id":"r1","outputs":[[...], ...]} or
// {"id":...,"error":"..."}. {"cmd":"echo","id":..,"payload":..} returns
// {"id":..,"echo":payload}; {"cmd":"shutdown"} ends the session. Frames are
// UTF-8 and at most 1 MiB. There is no request type for gradients.

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "rapscan/errors.hpp"
#include "rapscan/rap.hpp"
#include "rapscan/textmodel.hpp"

namespace rapscan::oracle {

using json = nlohmann::json;

inline constexpr const char* kProtocolName = "rap-oracle";
inline constexpr int kProtocolVersion = 1;
inline constexpr std::size_t kMaxFrameBytes = 1u << 20;
inline constexpr double kRowSumTolerance = 1e-6;

// ---- framing ---------------------------------------------------------------

// Reads newline-terminated frames from a file descriptor. Oversized frames
// are consumed and reported as such rather than buffered.
class LineReader {
 public:
  explicit LineReader(int fd) : fd_(fd) {}

  enum class Status { Line, Oversized, Eof, Timeout };

  // timeout_ms < 0 waits forever.
  Status next(std::string& line, int timeout_ms = -1) {
    bool oversized = false;
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    for (;;) {
      const auto nl = buf_.find('\n');
      if (nl != std::string::npos) {
        if (oversized || nl > kMaxFrameBytes) {
          buf_.erase(0, nl + 1);
          return Status::Oversized;
        }
        line.assign(buf_, 0, nl);
        buf_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return Status::Line;
      }
      if (buf_.size() > kMaxFrameBytes) {
        oversized = true;
        buf_.clear();
      }
      if (timeout_ms >= 0) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                              deadline - std::chrono::steady_clock::now())
                              .count();
        if (left <= 0) return Status::Timeout;
        pollfd p{fd_, POLLIN, 0};
        const int rc = ::poll(&p, 1, static_cast<int>(left));
        if (rc == 0) return Status::Timeout;
        if (rc < 0 && errno != EINTR) return Status::Eof;
        if (rc < 0) continue;
      }
      char chunk[65536];
      const ssize_t n = ::read(fd_, chunk, sizeof(chunk));
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return Status::Eof;
      buf_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int fd_;
  std::string buf_;
};

inline bool write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    const ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n < 0 && errno == ENOTSOCK) {
      const ssize_t m = ::write(fd, data.data(), data.size());
      if (m < 0 && errno == EINTR) continue;
      if (m <= 0) return false;
      data.remove_prefix(static_cast<std::size_t>(m));
      continue;
    }
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

inline bool write_frame(int fd, const json& j) { return write_all(fd, j.dump() + "\n"); }

// ---- server ----------------------------------------------------------------

inline json handshake_frame(int d, const std::vector<Task>& tasks,
                            std::string_view trigger_mode = "embedding") {
  json t = json::array();
  for (Task task : tasks) t.push_back(to_string(task));
  return json{{"protocol", kProtocolName},
              {"version", kProtocolVersion},
              {"d", d},
              {"tasks", t},
              {"trigger_mode", trigger_mode}};
}

inline json outputs_to_json(const TaskOutput& out) { return json(out.rows); }

// Stateless request handler over one in-process model.
class OracleServer {
 public:
  OracleServer(const TinyTextModel& model, std::vector<Task> tasks)
      : model_(model), tasks_(std::move(tasks)) {}

  json handshake() const { return handshake_frame(model_.dims.embed, tasks_); }

  // Returns the response frame. Sets `shutdown` on a shutdown command.
  json handle(std::string_view line, bool& shutdown) const {
    shutdown = false;
    json req;
    try {
      req = json::parse(line);
    } catch (const json::exception& e) {
      return error_frame(nullptr, std::string("malformed frame: ") + e.what());
    }
    if (!req.is_object()) return error_frame(nullptr, "frame is not a JSON object");
    const json id = req.contains("id") ? req.at("id") : json(nullptr);
    try {
      if (req.contains("cmd")) {
        const auto cmd = req.at("cmd").get<std::string>();
        if (cmd == "shutdown") {
          shutdown = true;
          return json{{"id", id}, {"ok", true}};
        }
        if (cmd == "echo") return json{{"id", id}, {"echo", req.value("payload", json(nullptr))}};
        return error_frame(id, "unknown cmd '" + cmd + "'");
      }
      TokenSequence x;
      x.task = task_from_string(req.at("task").get<std::string>());
      if (std::find(tasks_.begin(), tasks_.end(), x.task) == tasks_.end())
        return error_frame(id, "task not served");
      x.ids = req.at("ids").get<std::vector<TokenId>>();
      std::optional<TriggerInjection> trig;
      if (req.contains("trigger") && !req.at("trigger").is_null()) {
        const json& t = req.at("trigger");
        TriggerInjection inj;
        inj.token_id = t.at("token_id").get<TokenId>();
        inj.embedding = t.at("embedding").get<std::vector<double>>();
        inj.positions = t.at("positions").get<std::vector<int>>();
        trig = std::move(inj);
      }
      const TaskOutput out = forward(model_, x, trig ? &*trig : nullptr);
      return json{{"id", id}, {"outputs", outputs_to_json(out)}};
    } catch (const json::exception& e) {
      return error_frame(id, std::string("bad request: ") + e.what());
    } catch (const Error& e) {
      return error_frame(id, e.what());
    }
  }

  static json error_frame(const json& id, const std::string& message) {
    return json{{"id", id}, {"error", message}};
  }

 private:
  const TinyTextModel& model_;
  std::vector<Task> tasks_;
};

// Serves one session on (in_fd, out_fd). Returns true when the peer asked
// for shutdown, false on end of input.
inline bool serve_session(const OracleServer& server, int in_fd, int out_fd) {
  if (!write_frame(out_fd, server.handshake())) return false;
  LineReader reader(in_fd);
  std::string line;
  for (;;) {
    const auto st = reader.next(line);
    if (st == LineReader::Status::Eof) return false;
    json resp;
    bool shutdown = false;
    if (st == LineReader::Status::Oversized) {
      resp = OracleServer::error_frame(nullptr, "frame exceeds 1 MiB");
    } else {
      if (line.empty()) continue;
      resp = server.handle(line, shutdown);
    }
    if (!write_frame(out_fd, resp)) return false;
    if (shutdown) return true;
  }
}

inline void serve_stdio(const OracleServer& server) {
  ::signal(SIGPIPE, SIG_IGN);
  serve_session(server, STDIN_FILENO, STDOUT_FILENO);
}

// Listens on 127.0.0.1:port (0 = ephemeral), one connection at a time,
// until a client sends shutdown. `on_listening` receives the bound port.
inline void serve_tcp(const OracleServer& server, int port,
                      const std::function<void(int)>& on_listening = {}) {
  ::signal(SIGPIPE, SIG_IGN);
  const int lfd = ::socket(AF_INET, SOCK_STREAM, 0);
  if (lfd < 0) throw TransportError("socket() failed");
  const int one = 1;
  ::setsockopt(lfd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(lfd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(lfd, 4) != 0) {
    ::close(lfd);
    throw TransportError("cannot listen on port " + std::to_string(port));
  }
  socklen_t len = sizeof(addr);
  ::getsockname(lfd, reinterpret_cast<sockaddr*>(&addr), &len);
  if (on_listening) on_listening(ntohs(addr.sin_port));
  for (;;) {
    const int cfd = ::accept(lfd, nullptr, nullptr);
    if (cfd < 0) {
      if (errno == EINTR) continue;
      break;
    }
    ::setsockopt(cfd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
    const bool stop = serve_session(server, cfd, cfd);
    ::close(cfd);
    if (stop) break;
  }
  ::close(lfd);
}

// ---- client ----------------------------------------------------------------

struct Endpoint {
  enum class Kind { Tcp, Exec } kind = Kind::Tcp;
  std::string host = "127.0.0.1";
  int port = 0;
  std::string command;  // Exec: run through /bin/sh -c, speaking on stdio

  // "tcp:<host>:<port>", "tcp:<port>" or "exec:<shell command>".
  static Endpoint parse(const std::string& s) {
    Endpoint e;
    if (s.rfind("exec:", 0) == 0) {
      e.kind = Kind::Exec;
      e.command = s.substr(5);
      if (e.command.empty()) throw ConfigError("empty exec endpoint");
      return e;
    }
    if (s.rfind("tcp:", 0) == 0) {
      std::string rest = s.substr(4);
      const auto colon = rest.rfind(':');
      try {
        if (colon == std::string::npos) {
          e.port = std::stoi(rest);
        } else {
          e.host = rest.substr(0, colon);
          e.port = std::stoi(rest.substr(colon + 1));
        }
      } catch (const std::exception&) {
        throw ConfigError("bad tcp endpoint '" + s + "'");
      }
      if (e.port <= 0 || e.port > 65535) throw ConfigError("bad tcp port in '" + s + "'");
      return e;
    }
    throw ConfigError("endpoint must start with tcp: or exec: ('" + s + "')");
  }
};

// One live connection to an oracle: a socket or a child process's stdio.
class FrameChannel {
 public:
  FrameChannel() = default;
  FrameChannel(const FrameChannel&) = delete;
  FrameChannel& operator=(const FrameChannel&) = delete;
  ~FrameChannel() { close(); }

  bool is_open() const { return in_fd_ >= 0; }

  // Connects and returns the raw handshake line.
  std::string open(const Endpoint& ep, std::chrono::milliseconds timeout) {
    close();
    ::signal(SIGPIPE, SIG_IGN);
    if (ep.kind == Endpoint::Kind::Tcp) {
      addrinfo hints{};
      hints.ai_family = AF_INET;
      hints.ai_socktype = SOCK_STREAM;
      addrinfo* res = nullptr;
      if (::getaddrinfo(ep.host.c_str(), std::to_string(ep.port).c_str(), &hints, &res) != 0 ||
          res == nullptr)
        throw TransportError("cannot resolve " + ep.host);
      const int fd = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
      const int rc = fd < 0 ? -1 : ::connect(fd, res->ai_addr, res->ai_addrlen);
      ::freeaddrinfo(res);
      if (rc != 0) {
        if (fd >= 0) ::close(fd);
        throw TransportError("cannot connect to " + ep.host + ":" + std::to_string(ep.port));
      }
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
      in_fd_ = out_fd_ = fd;
    } else {
      int to_child[2], from_child[2];
      if (::pipe(to_child) != 0) throw TransportError("pipe() failed");
      if (::pipe(from_child) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw TransportError("pipe() failed");
      }
      const pid_t pid = ::fork();
      if (pid < 0) throw TransportError("fork() failed");
      if (pid == 0) {
        ::dup2(to_child[0], STDIN_FILENO);
        ::dup2(from_child[1], STDOUT_FILENO);
        ::close(to_child[0]);
        ::close(to_child[1]);
        ::close(from_child[0]);
        ::close(from_child[1]);
        ::execl("/bin/sh", "sh", "-c", ep.command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
      }
      ::close(to_child[0]);
      ::close(from_child[1]);
      ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
      ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
      child_ = pid;
      out_fd_ = to_child[1];
      in_fd_ = from_child[0];
    }
    reader_ = std::make_unique<LineReader>(in_fd_);
    auto line = recv(timeout);
    if (!line) throw TransportError("no handshake from oracle");
    return *line;
  }

  bool send(std::string_view line) {
    return is_open() && write_all(out_fd_, std::string(line) + "\n");
  }

  // Next frame, or nothing on timeout, end of stream or an oversized frame.
  std::optional<std::string> recv(std::chrono::milliseconds timeout) {
    if (!is_open()) return std::nullopt;
    std::string line;
    if (reader_->next(line, static_cast<int>(timeout.count())) != LineReader::Status::Line)
      return std::nullopt;
    return line;
  }

  void close() {
    if (in_fd_ >= 0) ::close(in_fd_);
    if (out_fd_ >= 0 && out_fd_ != in_fd_) ::close(out_fd_);
    in_fd_ = out_fd_ = -1;
    reader_.reset();
    if (child_ > 0) {
      int status = 0;
      for (int i = 0; i < 50 && ::waitpid(child_, &status, WNOHANG) == 0; ++i) ::usleep(10000);
      if (::waitpid(child_, &status, WNOHANG) == 0) {
        ::kill(child_, SIGKILL);
        ::waitpid(child_, &status, 0);
      }
      child_ = -1;
    }
  }

 private:
  int in_fd_ = -1;
  int out_fd_ = -1;
  pid_t child_ = -1;
  std::unique_ptr<LineReader> reader_;
};

struct Handshake {
  int d = 0;
  std::vector<Task> tasks;
  std::string trigger_mode = "embedding";
};

// Throws VersionError unless the line announces this protocol and version.
inline Handshake parse_handshake(const std::string& line) {
  json hs;
  try {
    hs = json::parse(line);
  } catch (const json::exception&) {
    throw TransportError("unparseable handshake");
  }
  if (!hs.is_object()) throw TransportError("handshake is not a JSON object");
  if (hs.value("protocol", std::string()) != kProtocolName ||
      hs.value("version", -1) != kProtocolVersion)
    throw VersionError("oracle speaks " + hs.value("protocol", std::string("?")) + " v" +
                       std::to_string(hs.value("version", -1)) + ", expected " + kProtocolName +
                       " v" + std::to_string(kProtocolVersion));
  Handshake h;
  try {
    h.d = hs.at("d").get<int>();
    for (const auto& t : hs.at("tasks")) h.tasks.push_back(task_from_string(t.get<std::string>()));
  } catch (const std::exception& e) {
    throw TransportError(std::string("bad handshake: ") + e.what());
  }
  h.trigger_mode = hs.value("trigger_mode", std::string("embedding"));
  return h;
}

struct ClientOptions {
  std::chrono::milliseconds timeout{30000};
  int max_retries = 2;
};

inline json request_frame(const std::string& id, const TokenSequence& x,
                          const TriggerInjection* trigger) {
  json req{{"id", id}, {"task", to_string(x.task)}, {"ids", x.ids}};
  if (trigger) {
    for (double v : trigger->embedding)
      if (!std::isfinite(v)) throw ContractViolation("non-finite trigger embedding");
    req["trigger"] = json{{"token_id", trigger->token_id},
                          {"embedding", trigger->embedding},
                          {"positions", trigger->positions}};
  }
  return req;
}

// Shape and normalization of one response against its request.
inline void validate_outputs(const TaskOutput& out, const TokenSequence& x, const std::string& id) {
  const std::size_t len = x.ids.size();
  bool shape_ok = false;
  switch (x.task) {
    case Task::SC: shape_ok = out.rows.size() == 1; break;
    case Task::NER: shape_ok = out.rows.size() == len; break;
    case Task::QA:
      shape_ok = out.rows.size() == 2 && out.rows[0].size() == len && out.rows[1].size() == len;
      break;
  }
  if (!shape_ok) throw TransportError("response " + id + " has the wrong shape", id);
  for (const auto& row : out.rows) {
    double s = 0.0;
    for (double v : row) {
      if (!std::isfinite(v) || v < 0.0)
        throw NormalizationError("response " + id + " has invalid probabilities", id);
      s += v;
    }
    if (row.empty() || std::abs(s - 1.0) > kRowSumTolerance)
      throw NormalizationError("response " + id + " has a row not summing to 1", id);
  }
}

// ModelOracle over the wire. Forward-only by construction.
class WireOracle final : public ModelOracle {
 public:
  explicit WireOracle(Endpoint endpoint, ClientOptions opts = {})
      : endpoint_(std::move(endpoint)), opts_(opts) {
    with_retries("connect", [] { return json(nullptr); });
  }

  ~WireOracle() override {
    if (channel_.is_open()) {
      channel_.send(json{{"cmd", "shutdown"}}.dump());
      channel_.recv(std::chrono::milliseconds(2000));
    }
  }

  int embedding_dim() const override { return handshake_.d; }
  const Handshake& handshake() const { return handshake_; }
  long requests_sent() const { return requests_; }

  TaskOutput query(const TokenSequence& x, const TriggerInjection* trigger) override {
    const std::string id = "r" + std::to_string(++counter_);
    const json req = request_frame(id, x, trigger);
    const json resp = with_retries(id, [&] { return round_trip(req, id); });
    if (resp.contains("error"))
      throw TransportError("oracle error for " + id + ": " + resp.at("error").dump(), id);
    TaskOutput out;
    out.task = x.task;
    try {
      out.rows = resp.at("outputs").get<std::vector<std::vector<double>>>();
    } catch (const json::exception&) {
      throw TransportError("response " + id + " has no well-formed outputs", id);
    }
    validate_outputs(out, x, id);
    return out;
  }

  // Server self-test: the payload should come back unchanged.
  json echo(const json& payload) {
    const std::string id = "e" + std::to_string(++counter_);
    const json req{{"cmd", "echo"}, {"id", id}, {"payload", payload}};
    const json resp = with_retries(id, [&] { return round_trip(req, id); });
    return resp.value("echo", json(nullptr));
  }

 private:
  template <typename Fn>
  json with_retries(const std::string& id, Fn&& fn) {
    std::string last;
    for (int attempt = 0; attempt <= opts_.max_retries; ++attempt) {
      try {
        if (!channel_.is_open()) handshake_ = parse_handshake(channel_.open(endpoint_, opts_.timeout));
        return fn();
      } catch (const VersionError&) {
        channel_.close();
        throw;
      } catch (const TransportError& e) {
        last = e.what();
        channel_.close();
      }
    }
    throw TransportError("transport failure for " + id + ": " + last, id);
  }

  json round_trip(const json& req, const std::string& id) {
    ++requests_;
    if (!channel_.send(req.dump())) throw TransportError("write failed", id);
    const auto line = channel_.recv(opts_.timeout);
    if (!line) throw TransportError("no response for " + id + " (timeout or connection lost)", id);
    json resp;
    try {
      resp = json::parse(*line);
    } catch (const json::exception&) {
      throw TransportError("unparseable response", id);
    }
    if (!resp.is_object() || !resp.contains("id") || resp.at("id") != json(id))
      throw TransportError("response id does not match " + id, id);
    return resp;
  }

  Endpoint endpoint_;
  ClientOptions opts_;
  FrameChannel channel_;
  Handshake handshake_;
  long counter_ = 0;
  long requests_ = 0;
};

}  // namespace rapscan::oracle
