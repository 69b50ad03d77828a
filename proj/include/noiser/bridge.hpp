#pragma once

// Model bridge: newline-delimited JSON over a byte stream (TCP or a child
// process's stdio). Arrays travel as base64 little-endian float32 with an
// explicit shape.
//
//   -> {"op":"info"}
//   <- {"ok":true,"payload":{"vocab_size":V,"d_model":D,"name":..,"max_context":N}}
//   -> {"op":"tokenize","payload":{"text":..}}          <- {"ids":[..]}
//   -> {"op":"detokenize","payload":{"ids":[..]}}       <- {"text":..}
//   -> {"op":"embed","payload":{"ids":[..]}}            <- {"embeddings":ARRAY[T,D]}
//   -> {"op":"forward","payload":{"embeddings":ARRAY[T,D]}}
//   -> {"op":"forward","payload":{"ids":[..],"overrides":[{"position":i,"delta":ARRAY[D]}]}}
//                                                       <- {"probs":ARRAY[V]}
//   errors: {"ok":false,"error":"message"}
//
// ARRAY = {"shape":[..],"data":"<base64>"}

#include <arpa/inet.h>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "noiser/base64.hpp"
#include "noiser/model.hpp"

namespace noiser {

using json = nlohmann::json;

// ---------------------------------------------------------------------------
// Array encoding

inline json encode_array(std::span<const double> values, std::vector<std::size_t> shape) {
  return {{"shape", shape}, {"data", base64::encode_f32(values)}};
}

inline std::vector<double> decode_array(const json& arr, const std::vector<std::size_t>& expected_shape) {
  const auto shape = arr.at("shape").get<std::vector<std::size_t>>();
  require(shape == expected_shape, "array shape does not match the declared dimensions");
  auto values = base64::decode_f32(arr.at("data").get<std::string>());
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  require(values.size() == n, "array byte length does not match its shape");
  return values;
}

inline std::vector<double> decode_array_any(const json& arr, std::vector<std::size_t>& shape) {
  shape = arr.at("shape").get<std::vector<std::size_t>>();
  auto values = base64::decode_f32(arr.at("data").get<std::string>());
  std::size_t n = 1;
  for (auto s : shape) n *= s;
  require(values.size() == n, "array byte length does not match its shape");
  return values;
}

// ---------------------------------------------------------------------------
// Transport

class LineChannel {
 public:
  virtual ~LineChannel() = default;
  virtual void write_line(const std::string& line) = 0;
  /// Next line without the terminator; nullopt at end of stream.
  virtual std::optional<std::string> read_line() = 0;
};

class FdChannel : public LineChannel {
 public:
  FdChannel(int read_fd, int write_fd, bool is_socket)
      : read_fd_(read_fd), write_fd_(write_fd), is_socket_(is_socket) {}

  ~FdChannel() override { close_fds(); }

  FdChannel(const FdChannel&) = delete;
  FdChannel& operator=(const FdChannel&) = delete;

  void write_line(const std::string& line) override {
    std::string buf = line + "\n";
    std::size_t off = 0;
    while (off < buf.size()) {
      const ssize_t n = is_socket_ ? ::send(write_fd_, buf.data() + off, buf.size() - off, MSG_NOSIGNAL)
                                   : ::write(write_fd_, buf.data() + off, buf.size() - off);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(std::string("bridge write failed: ") + std::strerror(errno));
      off += static_cast<std::size_t>(n);
    }
  }

  std::optional<std::string> read_line() override {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      char chunk[65536];
      const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw Error(std::string("bridge read failed: ") + std::strerror(errno));
      if (n == 0) {
        if (buffer_.empty()) return std::nullopt;
        std::string line = std::move(buffer_);
        buffer_.clear();
        return line;
      }
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 protected:
  void close_fds() {
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
    read_fd_ = write_fd_ = -1;
  }

 private:
  int read_fd_;
  int write_fd_;
  bool is_socket_;
  std::string buffer_;
};

inline std::unique_ptr<LineChannel> connect_tcp(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port_str = std::to_string(port);
  if (::getaddrinfo(host.c_str(), port_str.c_str(), &hints, &res) != 0 || res == nullptr) {
    throw Error("bridge connection failed: cannot resolve " + host);
  }
  int fd = -1;
  for (auto* ai = res; ai != nullptr; ai = ai->ai_next) {
    fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, ai->ai_addr, ai->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd < 0) throw Error("bridge connection failed: " + host + ":" + port_str);
  return std::make_unique<FdChannel>(fd, fd, true);
}

/// Child process speaking the protocol on its stdin/stdout.
class ProcessChannel final : public FdChannel {
 public:
  static std::unique_ptr<ProcessChannel> spawn(const std::string& command) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) throw Error("bridge spawn failed: pipe");
    ::signal(SIGPIPE, SIG_IGN);
    const pid_t pid = ::fork();
    if (pid < 0) throw Error("bridge spawn failed: fork");
    if (pid == 0) {
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
    return std::unique_ptr<ProcessChannel>(new ProcessChannel(from_child[0], to_child[1], pid));
  }

  ~ProcessChannel() override {
    close_fds();
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }

 private:
  ProcessChannel(int rfd, int wfd, pid_t pid) : FdChannel(rfd, wfd, false), pid_(pid) {}
  pid_t pid_;
};

/// "host:port" connects over TCP; "stdio:<command>" spawns a child process.
inline std::unique_ptr<LineChannel> open_bridge(const std::string& address) {
  if (address.rfind("stdio:", 0) == 0) return ProcessChannel::spawn(address.substr(6));
  const auto colon = address.rfind(':');
  require(colon != std::string::npos && colon + 1 < address.size(),
          "bridge address must be host:port or stdio:<command>");
  int port = 0;
  try {
    port = std::stoi(address.substr(colon + 1));
  } catch (const std::exception&) {
    throw Error("invalid bridge port in " + address);
  }
  return connect_tcp(address.substr(0, colon), port);
}

// ---------------------------------------------------------------------------
// Client

class RemoteModel final : public LanguageModel {
 public:
  explicit RemoteModel(std::unique_ptr<LineChannel> channel) : channel_(std::move(channel)) {
    const auto p = call({{"op", "info"}});
    info_.vocab_size = p.at("vocab_size").get<std::size_t>();
    info_.d_model = p.at("d_model").get<std::size_t>();
    info_.name = p.value("name", std::string("bridge"));
    info_.max_context = p.value("max_context", std::size_t{0});
    info_.validate();
  }

  explicit RemoteModel(const std::string& address) : RemoteModel(open_bridge(address)) {}

  bool is_serial() const override { return true; }
  ModelInfo info() const override { return info_; }

  TokenSequence tokenize(std::string_view text) const override {
    const auto p = call({{"op", "tokenize"}, {"payload", {{"text", text}}}});
    return TokenSequence(p.at("ids").get<std::vector<TokenId>>(), info_.vocab_size);
  }

  std::string detokenize(std::span<const TokenId> ids) const override {
    const auto p = call({{"op", "detokenize"},
                         {"payload", {{"ids", std::vector<TokenId>(ids.begin(), ids.end())}}}});
    return p.at("text").get<std::string>();
  }

  EmbeddingSequence embed(const TokenSequence& tokens) const override {
    const auto p = call({{"op", "embed"}, {"payload", {{"ids", tokens.vec()}}}});
    auto values = decode_array(p.at("embeddings"), {tokens.size(), info_.d_model});
    return EmbeddingSequence(tokens.size(), info_.d_model, std::move(values));
  }

  ProbDist forward_from_embeddings(const EmbeddingSequence& e) const override {
    require(e.width() == info_.d_model, "embedding width does not match d_model");
    const auto p = call({{"op", "forward"},
                         {"payload", {{"embeddings", encode_array(e.flat(), {e.rows(), e.width()})}}}});
    auto probs = decode_array(p.at("probs"), {info_.vocab_size});
    // float32 transport: renormalize in double precision.
    return ProbDist::normalized(std::move(probs));
  }

 private:
  json call(const json& request) const {
    std::lock_guard lock(mu_);
    channel_->write_line(request.dump());
    const auto line = channel_->read_line();
    if (!line) throw Error("bridge closed the connection");
    const auto response = json::parse(*line);
    if (!response.value("ok", false)) {
      throw Error("bridge error: " + response.value("error", std::string("unknown")));
    }
    return response.value("payload", json::object());
  }

  mutable std::mutex mu_;
  std::unique_ptr<LineChannel> channel_;
  ModelInfo info_;
};

// ---------------------------------------------------------------------------
// Server side: serves any LanguageModel over the same protocol.

inline json handle_bridge_request(const LanguageModel& model, const json& request) {
  try {
    const auto op = request.at("op").get<std::string>();
    const json payload = request.value("payload", json::object());
    const auto info = model.info();
    json out;
    if (op == "info") {
      out = {{"vocab_size", info.vocab_size}, {"d_model", info.d_model},
             {"name", info.name}, {"max_context", info.max_context}};
    } else if (op == "tokenize") {
      out = {{"ids", model.tokenize(payload.at("text").get<std::string>()).vec()}};
    } else if (op == "detokenize") {
      const auto ids = payload.at("ids").get<std::vector<TokenId>>();
      out = {{"text", model.detokenize(std::span<const TokenId>(ids))}};
    } else if (op == "embed") {
      const TokenSequence tokens(payload.at("ids").get<std::vector<TokenId>>(), info.vocab_size);
      const auto e = model.embed(tokens);
      out = {{"embeddings", encode_array(e.flat(), {e.rows(), e.width()})}};
    } else if (op == "forward") {
      std::optional<EmbeddingSequence> e;
      if (payload.contains("embeddings")) {
        std::vector<std::size_t> shape;
        auto values = decode_array_any(payload.at("embeddings"), shape);
        require(shape.size() == 2 && shape[1] == info.d_model, "embedding shape must be [T, d_model]");
        e.emplace(shape[0], shape[1], std::move(values));
      } else {
        const TokenSequence tokens(payload.at("ids").get<std::vector<TokenId>>(), info.vocab_size);
        e.emplace(model.embed(tokens));
        for (const auto& ov : payload.value("overrides", json::array())) {
          const auto pos = ov.at("position").get<std::size_t>();
          require(pos < e->rows(), "override position out of range");
          const auto delta = decode_array(ov.at("delta"), {info.d_model});
          auto row = e->row(pos);
          for (std::size_t j = 0; j < row.size(); ++j) row[j] += delta[j];
        }
      }
      const auto dist = model.forward_from_embeddings(*e);
      out = {{"probs", encode_array(dist.probs(), {dist.size()})}};
    } else {
      throw Error("unknown op: " + op);
    }
    return {{"ok", true}, {"payload", std::move(out)}};
  } catch (const std::exception& e) {
    return {{"ok", false}, {"error", e.what()}};
  }
}

/// Answers requests until the channel reaches end of stream.
inline void serve_bridge(const LanguageModel& model, LineChannel& channel) {
  while (auto line = channel.read_line()) {
    if (line->empty()) continue;
    json response;
    try {
      response = handle_bridge_request(model, json::parse(*line));
    } catch (const std::exception& e) {
      response = {{"ok", false}, {"error", std::string("malformed request: ") + e.what()}};
    }
    channel.write_line(response.dump());
  }
}

/// Loopback TCP listener serving one connection at a time on a background
/// thread. Port 0 picks a free port.
class BridgeTcpServer {
 public:
  BridgeTcpServer(const LanguageModel& model, int port = 0) : model_(model) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    require(listen_fd_ >= 0, "socket() failed");
    int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 ||
        ::listen(listen_fd_, 4) != 0) {
      ::close(listen_fd_);
      throw Error("cannot listen on port " + std::to_string(port));
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    thread_ = std::jthread([this] { loop(); });
  }

  ~BridgeTcpServer() {
    stopping_ = true;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
  }

  int port() const noexcept { return port_; }

 private:
  void loop() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (stopping_) return;
        continue;
      }
      FdChannel channel(fd, fd, true);
      try {
        serve_bridge(model_, channel);
      } catch (const std::exception&) {
        // Client went away mid-request; wait for the next one.
      }
    }
  }

  const LanguageModel& model_;
  int listen_fd_ = -1;
  int port_ = 0;
  std::atomic<bool> stopping_{false};
  std::jthread thread_;
};

}  // namespace noiser
