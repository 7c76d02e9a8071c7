// SPDX-License-Identifier: Apache-2.0
#pragma once

/*
 * Remote denoiser client speaking newline-delimited JSON.
 *
 * Request  {"version":1,"id":7,"K":8,"t":0.5,"tokens":[3,-1,0,-1]}      MASK is -1 on the wire
 * Response {"id":7,"predictions":[{"position":1,"probs":[...]},{"position":3,"probs":[...]}]}
 * Error    {"id":7,"error":"NO_MASKED_POSITIONS","message":"..."}       id is null if unparseable
 *
 * One request line yields exactly one response line; responses arrive in request order.
 *
 * Endpoints: "tcp://host:port" or "stdio:<shell command>" (the command is spawned and spoken to
 * over its stdin/stdout).
 */

#include <arpa/inet.h>
#include <netdb.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "core.hpp"
#include "denoiser.hpp"
#include "errors.hpp"

namespace mdm {

inline constexpr int kProtocolVersion = 1;

namespace protocol {

inline nlohmann::json encode_request(std::uint64_t id, const SeqState& state, double t) {
  std::vector<int> tokens;
  tokens.reserve(state.length());
  for (Token tok : state.tokens()) tokens.push_back(tok == state.vocab().mask() ? -1 : tok);
  return {{"version", kProtocolVersion}, {"id", id}, {"K", state.vocab().size()}, {"t", t}, {"tokens", tokens}};
}

// Validates a response against the request it answers and converts it to a distribution.
inline PredictiveDistribution decode_response(const nlohmann::json& msg, std::uint64_t expected_id,
                                              const SeqState& state) {
  if (!msg.is_object()) throw RemoteError("BAD_RESPONSE", "response is not a JSON object");
  if (msg.contains("error")) {
    const std::string code = msg["error"].is_string() ? msg["error"].get<std::string>() : "REMOTE_ERROR";
    throw RemoteError(code, msg.value("message", std::string("remote denoiser reported an error")));
  }
  if (!msg.contains("id") || !msg["id"].is_number_unsigned() || msg["id"].get<std::uint64_t>() != expected_id)
    throw RemoteError("OUT_OF_ORDER", "response id does not match request id " + std::to_string(expected_id));
  if (!msg.contains("predictions") || !msg["predictions"].is_array())
    throw RemoteError("BAD_RESPONSE", "response has no predictions array");

  const std::size_t k = state.vocab().size();
  auto positions = state.masked_positions();
  const auto& preds = msg["predictions"];
  if (preds.size() != positions.size())
    throw RemoteError("BAD_RESPONSE", "response positions do not match the masked positions");
  std::vector<double> probs(positions.size() * k);
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const auto& p = preds[i];
    if (!p.contains("position") || p["position"].get<std::size_t>() != positions[i])
      throw RemoteError("BAD_RESPONSE", "response positions do not match the masked positions");
    const auto& row = p.at("probs");
    if (!row.is_array() || row.size() != k) throw RemoteError("BAD_RESPONSE", "probability vector has the wrong length");
    double sum = 0.0;
    for (std::size_t a = 0; a < k; ++a) {
      const double v = row[a].get<double>();
      if (!(v >= 0.0) || !std::isfinite(v)) throw RemoteError("BAD_RESPONSE", "negative or non-finite probability");
      probs[i * k + a] = v;
      sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) throw RemoteError("BAD_RESPONSE", "probability vector does not sum to 1");
    if (std::abs(sum - 1.0) > kProbTolerance)
      for (std::size_t a = 0; a < k; ++a) probs[i * k + a] /= sum;
  }
  return PredictiveDistribution(k, std::move(positions), std::move(probs));
}

}  // namespace protocol

// ============================================================================
// Transports
// ============================================================================

class LineTransport {
 public:
  virtual ~LineTransport() = default;
  virtual void send_line(std::string_view line) = 0;
  virtual std::string receive_line() = 0;
};

namespace detail {

// Buffered line I/O over a pair of file descriptors.
class FdLineIo {
 public:
  FdLineIo(int read_fd, int write_fd) : read_fd_(read_fd), write_fd_(write_fd) {}

  void send(std::string_view line) {
    std::string buf(line);
    buf.push_back('\n');
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = ::write(write_fd_, buf.data() + off, buf.size() - off);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw RemoteError("TRANSPORT", std::string("write failed: ") + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string receive() {
    for (;;) {
      const auto nl = pending_.find('\n');
      if (nl != std::string::npos) {
        std::string line = pending_.substr(0, nl);
        pending_.erase(0, nl + 1);
        return line;
      }
      char chunk[4096];
      const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw RemoteError("TRANSPORT", std::string("read failed: ") + std::strerror(errno));
      }
      if (n == 0) throw RemoteError("TRANSPORT", "connection closed by the remote denoiser");
      pending_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int read_fd_;
  int write_fd_;
  std::string pending_;
};

}  // namespace detail

class TcpTransport final : public LineTransport {
 public:
  TcpTransport(const std::string& host, const std::string& port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
      throw RemoteError("TRANSPORT", "cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
    std::string last_error = "no addresses";
    for (addrinfo* ai = res; ai; ai = ai->ai_next) {
      fd_ = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd_ < 0) continue;
      if (::connect(fd_, ai->ai_addr, ai->ai_addrlen) == 0) break;
      last_error = std::strerror(errno);
      ::close(fd_);
      fd_ = -1;
    }
    ::freeaddrinfo(res);
    if (fd_ < 0) throw RemoteError("TRANSPORT", "cannot connect to " + host + ":" + port + ": " + last_error);
    io_ = std::make_unique<detail::FdLineIo>(fd_, fd_);
  }

  ~TcpTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }

  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  void send_line(std::string_view line) override { io_->send(line); }
  std::string receive_line() override { return io_->receive(); }

 private:
  int fd_ = -1;
  std::unique_ptr<detail::FdLineIo> io_;
};

class StdioTransport final : public LineTransport {
 public:
  explicit StdioTransport(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0)
      throw RemoteError("TRANSPORT", std::string("pipe failed: ") + std::strerror(errno));
    pid_ = ::fork();
    if (pid_ < 0) throw RemoteError("TRANSPORT", std::string("fork failed: ") + std::strerror(errno));
    if (pid_ == 0) {
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    ::signal(SIGPIPE, SIG_IGN);
    io_ = std::make_unique<detail::FdLineIo>(read_fd_, write_fd_);
  }

  ~StdioTransport() override {
    if (write_fd_ >= 0) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
    }
  }

  StdioTransport(const StdioTransport&) = delete;
  StdioTransport& operator=(const StdioTransport&) = delete;

  void send_line(std::string_view line) override { io_->send(line); }
  std::string receive_line() override { return io_->receive(); }

 private:
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::unique_ptr<detail::FdLineIo> io_;
};

inline std::unique_ptr<LineTransport> open_transport(const std::string& endpoint) {
  constexpr std::string_view tcp = "tcp://";
  constexpr std::string_view stdio = "stdio:";
  if (endpoint.starts_with(tcp)) {
    const std::string rest = endpoint.substr(tcp.size());
    const auto colon = rest.rfind(':');
    if (colon == std::string::npos) throw DomainError("tcp endpoint needs host:port");
    return std::make_unique<TcpTransport>(rest.substr(0, colon), rest.substr(colon + 1));
  }
  if (endpoint.starts_with(stdio)) return std::make_unique<StdioTransport>(endpoint.substr(stdio.size()));
  throw DomainError("unknown endpoint '" + endpoint + "' (expected tcp://host:port or stdio:<command>)");
}

// ============================================================================
// RemoteClient
// ============================================================================

class RemoteClient final : public Denoiser {
 public:
  // grid_steps converts a state's time index to t when the state carries no raw time.
  RemoteClient(std::unique_ptr<LineTransport> transport, std::size_t vocab_size, std::size_t grid_steps = 0)
      : transport_(std::move(transport)), k_(vocab_size), grid_steps_(grid_steps) {
    if (!transport_) throw DomainError("RemoteClient needs a transport");
  }

  RemoteClient(const std::string& endpoint, std::size_t vocab_size, std::size_t grid_steps = 0)
      : RemoteClient(open_transport(endpoint), vocab_size, grid_steps) {}

  std::size_t vocab_size() const override { return k_; }
  std::string name() const override { return "remote"; }

  PredictiveDistribution predict(const SeqState& state) const override {
    if (state.vocab().size() != k_) throw DomainError("state vocabulary does not match the remote denoiser");
    if (state.fully_unmasked()) throw PreconditionError("predict requires at least one masked position");
    double t = 1.0;
    if (state.raw_time()) {
      t = *state.raw_time();
    } else if (grid_steps_ > 0) {
      t = static_cast<double>(state.time_index()) / static_cast<double>(grid_steps_);
    }
    std::lock_guard lock(mu_);
    const std::uint64_t id = next_id_++;
    transport_->send_line(protocol::encode_request(id, state, t).dump());
    const std::string line = transport_->receive_line();
    nlohmann::json msg;
    try {
      msg = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw RemoteError("BAD_RESPONSE", std::string("unparseable response: ") + e.what());
    }
    try {
      return protocol::decode_response(msg, id, state);
    } catch (const nlohmann::json::exception& e) {
      throw RemoteError("BAD_RESPONSE", e.what());
    }
  }

 private:
  std::unique_ptr<LineTransport> transport_;
  std::size_t k_;
  std::size_t grid_steps_;
  mutable std::mutex mu_;
  mutable std::uint64_t next_id_ = 1;
};

}  // namespace mdm
