#pragma once

#include "dobcbf/policy.hpp"

#include "json.hpp"

#include <poll.h>
#include <signal.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

namespace dobcbf {

/// Policy-bridge failures. `reason` tells the three protocol faults apart
/// from transport problems.
struct BridgeError : Error {
    enum class Reason { timeout, parse, dimension, transport };
    BridgeError(Reason r, const std::string& what) : Error("bridge", what), reason(r) {}
    Reason reason;
};

inline const char* to_string(BridgeError::Reason r) {
    switch (r) {
        case BridgeError::Reason::timeout: return "timeout";
        case BridgeError::Reason::parse: return "parse";
        case BridgeError::Reason::dimension: return "dimension";
        case BridgeError::Reason::transport: return "transport";
    }
    return "unknown";
}

/// Child process speaking newline-delimited JSON on stdin/stdout.
class ProcessBridge {
public:
    ProcessBridge(std::vector<std::string> argv, int timeout_ms = 100)
        : timeout_ms_(timeout_ms) {
        if (argv.empty()) throw ConfigError("bridge: empty command");
        ::signal(SIGPIPE, SIG_IGN);
        int to_child[2], from_child[2];
        if (::pipe(to_child) != 0 || ::pipe(from_child) != 0) {
            throw BridgeError(BridgeError::Reason::transport, "bridge: pipe failed");
        }
        std::vector<char*> cargv;
        for (auto& a : argv) cargv.push_back(a.data());
        cargv.push_back(nullptr);
        pid_ = ::fork();
        if (pid_ < 0) throw BridgeError(BridgeError::Reason::transport, "bridge: fork failed");
        if (pid_ == 0) {
            ::dup2(to_child[0], STDIN_FILENO);
            ::dup2(from_child[1], STDOUT_FILENO);
            ::close(to_child[0]);
            ::close(to_child[1]);
            ::close(from_child[0]);
            ::close(from_child[1]);
            ::execvp(cargv[0], cargv.data());
            ::_exit(127);
        }
        ::close(to_child[0]);
        ::close(from_child[1]);
        write_fd_ = to_child[1];
        read_fd_ = from_child[0];
    }

    ProcessBridge(const ProcessBridge&) = delete;
    ProcessBridge& operator=(const ProcessBridge&) = delete;

    ~ProcessBridge() {
        if (write_fd_ >= 0) ::close(write_fd_);
        if (read_fd_ >= 0) ::close(read_fd_);
        if (pid_ > 0) {
            int status = 0;
            if (::waitpid(pid_, &status, WNOHANG) == 0) {
                ::kill(pid_, SIGTERM);
                ::waitpid(pid_, &status, 0);
            }
        }
    }

    /// One request/response exchange. Returns the parsed reply.
    nlohmann::json exchange(const nlohmann::json& request) {
        if (broken_) {
            throw BridgeError(BridgeError::Reason::transport, "bridge: stream out of sync after " + broken_why_);
        }
        const std::string line = request.dump() + "\n";
        std::size_t off = 0;
        while (off < line.size()) {
            const ssize_t w = ::write(write_fd_, line.data() + off, line.size() - off);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw BridgeError(BridgeError::Reason::transport,
                                  std::string("bridge: write failed: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(w);
        }
        std::string reply;
        try {
            reply = read_line();
        } catch (const BridgeError& e) {
            broken_ = true;
            broken_why_ = to_string(e.reason);
            throw;
        }
        ++exchanges_;
        try {
            return nlohmann::json::parse(reply);
        } catch (const nlohmann::json::parse_error& e) {
            throw BridgeError(BridgeError::Reason::parse,
                              std::string("bridge: malformed reply: ") + e.what());
        }
    }

    long exchanges() const { return exchanges_; }
    int timeout_ms() const { return timeout_ms_; }

private:
    std::string read_line() {
        using clock = std::chrono::steady_clock;
        const auto deadline = clock::now() + std::chrono::milliseconds(timeout_ms_);
        while (true) {
            const auto nl = buffer_.find('\n');
            if (nl != std::string::npos) {
                std::string line = buffer_.substr(0, nl);
                buffer_.erase(0, nl + 1);
                return line;
            }
            const auto left = std::chrono::ceil<std::chrono::milliseconds>(deadline - clock::now());
            if (left.count() <= 0) {
                throw BridgeError(BridgeError::Reason::timeout,
                                  "bridge: no reply within " + std::to_string(timeout_ms_) + " ms");
            }
            pollfd pfd{read_fd_, POLLIN, 0};
            const int r = ::poll(&pfd, 1, static_cast<int>(left.count()));
            if (r < 0) {
                if (errno == EINTR) continue;
                throw BridgeError(BridgeError::Reason::transport, "bridge: poll failed");
            }
            if (r == 0) continue;
            char chunk[4096];
            const ssize_t n = ::read(read_fd_, chunk, sizeof chunk);
            if (n < 0) {
                if (errno == EINTR) continue;
                throw BridgeError(BridgeError::Reason::transport, "bridge: read failed");
            }
            if (n == 0) throw BridgeError(BridgeError::Reason::transport, "bridge: peer closed the stream");
            buffer_.append(chunk, static_cast<std::size_t>(n));
        }
    }

    pid_t pid_ = -1;
    int write_fd_ = -1;
    int read_fd_ = -1;
    int timeout_ms_;
    long exchanges_ = 0;
    std::string buffer_;
    bool broken_ = false;
    std::string broken_why_;
};

/// Build the wire request {t, x, last_reward, done}.
inline nlohmann::json bridge_request(double t, const StateVector& x, double last_reward, bool done) {
    return {{"t", t},
            {"x", std::vector<double>(x.data(), x.data() + x.size())},
            {"last_reward", last_reward},
            {"done", done}};
}

/// Extract u from a reply {u: [...]}, checking the dimension.
inline ControlVector parse_bridge_reply(const nlohmann::json& reply, Eigen::Index m) {
    if (!reply.is_object() || !reply.contains("u") || !reply["u"].is_array()) {
        throw BridgeError(BridgeError::Reason::parse, "bridge: reply lacks array field \"u\"");
    }
    const auto& arr = reply["u"];
    if (static_cast<Eigen::Index>(arr.size()) != m) {
        throw BridgeError(BridgeError::Reason::dimension,
                          "bridge: expected u of dimension " + std::to_string(m) + ", got " +
                              std::to_string(arr.size()));
    }
    ControlVector u(m);
    for (Eigen::Index i = 0; i < m; ++i) {
        if (!arr[static_cast<std::size_t>(i)].is_number()) {
            throw BridgeError(BridgeError::Reason::parse, "bridge: non-numeric entry in \"u\"");
        }
        u[i] = arr[static_cast<std::size_t>(i)].get<double>();
    }
    return u;
}

/// Delegates every action to an external process. The process is shared by
/// consecutive episodes; a final request with done = true closes each one and
/// its reply is read and discarded.
class ExternalPolicy final : public Policy {
public:
    ExternalPolicy(std::shared_ptr<ProcessBridge> bridge, Eigen::Index m)
        : bridge_(std::move(bridge)), m_(m) {}

    ControlVector act(const StateVector& x, double t, double last_reward) override {
        return parse_bridge_reply(bridge_->exchange(bridge_request(t, x, last_reward, false)), m_);
    }

    void finish(const StateVector& x, double t, double last_reward) override {
        bridge_->exchange(bridge_request(t, x, last_reward, true));
    }

    std::string kind() const override { return "external"; }

private:
    std::shared_ptr<ProcessBridge> bridge_;
    Eigen::Index m_;
};

}  // namespace dobcbf
