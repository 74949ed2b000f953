#pragma once

#include "lockbox/cow.hpp"
#include "lockbox/hook.hpp"
#include "lockbox/launcher.hpp"
#include "lockbox/net.hpp"
#include "lockbox/plan.hpp"
#include "lockbox/resources.hpp"

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace lockbox {

// PATH plus nothing else.
std::vector<std::string> default_env();

struct RunOptions {
    std::vector<std::string> env = default_env();
    StdioSpec stdio[3];
    // Written to stdin when stdio[0] is a pipe (run() only).
    std::string input;
    std::optional<std::string> audit_path;
    HookCallback policy_fn;
    // Makes every exec hold fail as if tracing were blocked.
    bool disable_tracing = false;
    std::optional<std::chrono::milliseconds> timeout;
    // Report the effects and discard them regardless of the on-exit action.
    bool dry_run = false;
    unsigned workers = 2;
    StepLog *step_log = nullptr;
    std::optional<int> landlock_abi;
    // Per-stream cap on captured output; the run is killed beyond it.
    std::size_t capture_limit = 64u << 20;
    std::function<void(const std::string &)> log;
};

struct NetStats {
    std::uint64_t connects = 0;
    std::uint64_t denied = 0;
    std::uint64_t proxied = 0;
    std::uint64_t on_behalf = 0;
    std::uint64_t continued = 0;
};

struct RunResult {
    ExitStatus status;
    bool timed_out = false;
    bool capture_overflow = false;
    std::string stdout_data;
    std::string stderr_data;
    std::vector<AuditRecord> audits;
    std::optional<EffectSummary> effects;
    std::optional<std::string> effects_error;
    SupervisorCounters supervisor;
    NetStats net;
    ProxyCounters proxy;
    std::uint64_t resource_kills = 0;
    std::uint64_t peak_memory = 0;
    std::uint64_t throttle_stops = 0;
    std::uint64_t exec_holds = 0;
    std::uint64_t freeze_failures = 0;
    std::uint64_t tasks_created = 0;

    std::string to_json() const;
};

struct SandboxState;

// A launched sandbox. wait() tears everything down and reports.
class RunningSandbox {
public:
    explicit RunningSandbox(std::unique_ptr<SandboxState> state);
    ~RunningSandbox();
    RunningSandbox(const RunningSandbox &) = delete;
    RunningSandbox &operator=(const RunningSandbox &) = delete;

    pid_t pid() const;
    SandboxHandle &handle();
    // Null unless the runtime hook is enabled.
    RuntimeContext *context();
    Workspace *workspace();

    void kill(int sig);
    RunResult wait(std::optional<std::chrono::milliseconds> timeout = std::nullopt);

private:
    std::unique_ptr<SandboxState> state_;
};

class Sandbox {
public:
    explicit Sandbox(const SandboxSpec &spec);
    Sandbox(const SandboxSpec &spec, const Resolver &resolver);
    explicit Sandbox(EnforcementPlan plan);

    const EnforcementPlan &plan() const noexcept { return *plan_; }

    std::unique_ptr<RunningSandbox> start(const std::vector<std::string> &argv,
                                          RunOptions options = {}) const;
    // start + stdin feed + output capture + wait.
    RunResult run(const std::vector<std::string> &argv, RunOptions options = {}) const;

private:
    std::shared_ptr<const EnforcementPlan> plan_;
};

// Reads `fd` until EOF, at most `limit` bytes; sets *overflow past that.
std::string drain_fd(int fd, std::size_t limit, bool *overflow);

} // namespace lockbox
