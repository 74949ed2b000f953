#pragma once

#include "lockbox/kernel.hpp"
#include "lockbox/plan.hpp"
#include "lockbox/unique_fd.hpp"

#include <chrono>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace lockbox {

struct FeatureReport {
    int landlock_abi = 0;
    bool fs_rules = false;
    bool tcp_port_rules = false;
    bool ipc_scoping = false;
    bool seccomp_notify = false;
    bool fd_transfer = false;
    bool ptrace = false;

    // "name: supported|unsupported" lines.
    std::vector<std::string> lines() const;
};

FeatureReport check_kernel();

struct StdioSpec {
    enum class Mode : std::uint8_t { Inherit, Null, Pipe, Fd };
    Mode mode = Mode::Inherit;
    int fd = -1; // for Mode::Fd; not owned

    static StdioSpec inherit() { return {}; }
    static StdioSpec null() { return {Mode::Null, -1}; }
    static StdioSpec pipe() { return {Mode::Pipe, -1}; }
    static StdioSpec from_fd(int fd) { return {Mode::Fd, fd}; }
};

struct ExitStatus {
    bool signaled = false;
    int code = 0;   // exit code when !signaled
    int signal = 0; // terminating signal when signaled

    // Shell convention: the exit code, or 128 + signal.
    int shell_code() const noexcept { return signaled ? 128 + signal : code; }
    bool success() const noexcept { return !signaled && code == 0; }
};

struct LaunchRequest {
    std::vector<std::string> argv;
    // KEY=VALUE entries passed verbatim; nothing else is inherited.
    std::vector<std::string> env;
    StdioSpec stdio[3];
    std::chrono::milliseconds handshake_timeout{5000};
    // Called with the listener after the child installed its filter and
    // before it is released to exec. Must start consuming notifications.
    std::function<void(UniqueFd listener, pid_t pid)> on_listener;
    StepLog *step_log = nullptr;
    // Overrides the detected Landlock ABI (tests).
    std::optional<int> landlock_abi;
};

class SandboxHandle {
public:
    SandboxHandle() = default;
    SandboxHandle(SandboxHandle &&) noexcept;
    SandboxHandle &operator=(SandboxHandle &&) noexcept;
    ~SandboxHandle();

    pid_t pid() const noexcept { return pid_; }
    pid_t pgid() const noexcept { return pid_; }
    int pidfd() const noexcept { return pidfd_.get(); }
    std::chrono::steady_clock::time_point started_at() const noexcept { return started_at_; }

    // Parent ends of Mode::Pipe streams.
    UniqueFd &stdin_pipe() noexcept { return pipes_[0]; }
    UniqueFd &stdout_pipe() noexcept { return pipes_[1]; }
    UniqueFd &stderr_pipe() noexcept { return pipes_[2]; }

    // Blocks until the root child exits, kills the rest of its process
    // group and reaps the root. Safe to call from several threads.
    ExitStatus wait();
    std::optional<ExitStatus> try_wait();
    void kill_group(int sig) const noexcept;

private:
    friend SandboxHandle launch(const EnforcementPlan &plan, const LaunchRequest &request);

    ExitStatus reap();

    pid_t pid_ = -1;
    UniqueFd pidfd_;
    UniqueFd pipes_[3];
    std::chrono::steady_clock::time_point started_at_{};
    std::unique_ptr<std::mutex> mutex_ = std::make_unique<std::mutex>();
    std::optional<ExitStatus> status_;
};

// Forks and confines a child per the plan, then execs request.argv.
SandboxHandle launch(const EnforcementPlan &plan, const LaunchRequest &request);

// Resolves argv[0] against PATH from `env` (falling back to /usr/bin:/bin).
std::string resolve_executable(const std::string &name, const std::vector<std::string> &env);

// Irreversibly applies the static layers of `plan` to the calling process.
void confine_self(const EnforcementPlan &plan);

} // namespace lockbox
