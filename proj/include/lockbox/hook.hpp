#pragma once

#include "lockbox/event.hpp"
#include "lockbox/live_policy.hpp"
#include "lockbox/net.hpp"
#include "lockbox/plan.hpp"
#include "lockbox/resources.hpp"
#include "lockbox/supervisor.hpp"

#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <stdexcept>
#include <thread>
#include <vector>

namespace lockbox {

// Handle given to hook callbacks. Every mutation narrows the live policy;
// anything that would widen it throws PolicyError.
class RuntimeContext {
public:
    RuntimeContext(LivePolicyCell *live, ResourceGovernor *governor = nullptr)
        : live_(live), governor_(governor)
    {
    }

    // Narrows network access to the given rules. Each rule must already be
    // permitted by the current pins.
    void restrict_network(const std::vector<EndpointRule> &endpoints);
    void deny_path(const std::string &path);
    // Fields left unset keep their current value.
    void tighten_resources(const ResourceLimits &limits);

    std::shared_ptr<const LivePolicy> snapshot() const { return live_->load(); }

private:
    LivePolicyCell *live_;
    ResourceGovernor *governor_;
};

// Pure parts of tightening, exposed for tests.
PinnedAllowlist narrow_pins(const PinnedAllowlist &current, const std::vector<EndpointRule> &rules);
ResourceLimits narrow_limits(const ResourceLimits &current, const ResourceLimits &next);

using HookCallback = std::function<CallbackValue(const Event &, RuntimeContext &)>;

// EventGate running callbacks one at a time on a dedicated thread, in the
// order the notifications were handed over.
class CallbackGate final : public EventGate {
public:
    CallbackGate(HookCallback callback, RuntimeHookConfig config, RuntimeContext *ctx,
                 AuditLog *audit);
    ~CallbackGate() override;
    CallbackGate(const CallbackGate &) = delete;
    CallbackGate &operator=(const CallbackGate &) = delete;

    bool subscribed(EventCategory category) const override;
    HookVerdict deliver(const Event &event) override;

    std::uint64_t delivered() const;
    std::uint64_t timeouts() const;
    std::uint64_t errors() const;

private:
    struct Job {
        Event event;
        std::optional<HookVerdict> result;
        bool abandoned = false;
    };

    void run();
    HookVerdict invoke(const Event &event);

    HookCallback callback_;
    RuntimeHookConfig config_;
    RuntimeContext *ctx_;
    AuditLog *audit_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::shared_ptr<Job>> queue_;
    bool stopping_ = false;
    std::uint64_t delivered_ = 0, timeouts_ = 0, errors_ = 0;
    std::thread thread_;
};

// Tracing is unavailable; the caller must deny.
class FreezeUnavailable : public std::runtime_error {
public:
    explicit FreezeUnavailable(const std::string &what) : std::runtime_error(what) {}
};

// Tasks stopped for the duration of a held exec. Released (resumed) on
// destruction, on the thread that created it.
class FreezeScope {
public:
    FreezeScope() = default;
    FreezeScope(const FreezeScope &) = delete;
    FreezeScope &operator=(const FreezeScope &) = delete;
    virtual ~FreezeScope() = default;

    virtual const std::set<pid_t> &frozen() const = 0;
    // Blocks until the held task finished its exec (or gave up on it).
    virtual void await_exec(pid_t tid, int nr, std::chrono::milliseconds timeout) = 0;
};

class Freezer {
public:
    virtual ~Freezer() = default;
    // Stops every task of process group `pgid` other than `tid`. Throws
    // FreezeUnavailable.
    virtual std::unique_ptr<FreezeScope> freeze(pid_t tid, pid_t pgid) = 0;
};

std::unique_ptr<Freezer> make_ptrace_freezer();
// Always throws FreezeUnavailable.
std::unique_ptr<Freezer> make_disabled_freezer();

// Tasks created inside the sandbox, recorded from fork-class notifications.
class ProcessIndex {
public:
    struct Entry {
        pid_t parent = 0;
        CloneKind kind = CloneKind::Process;
        bool shares_vm = false;
    };

    void record(pid_t parent, CloneKind kind, bool shares_vm);
    std::uint64_t creations() const;
    std::uint64_t threads() const;

private:
    mutable std::mutex mutex_;
    std::vector<Entry> entries_;
};

struct HookRuntime {
    const EnforcementPlan *plan = nullptr;
    LivePolicyCell *live = nullptr;
    EventGate *gate = nullptr;
    AuditLog *audit = nullptr;
    Freezer *freezer = nullptr;
    ProcessIndex index;
    pid_t pgid = 0;
    std::chrono::milliseconds exec_settle{2000};
    std::atomic<std::uint64_t> exec_holds{0};
    std::atomic<std::uint64_t> freeze_failures{0};
};

// Reads the argv array of an exec notification.
std::vector<std::string> read_argv(NotifyContext &ctx, std::uint64_t addr);

Verdict hook_exec(HookRuntime &rt, NotifyContext &ctx);
// Registers a fork-class notification; unreadable clone3 arguments -> EPERM.
Verdict track_creation(HookRuntime &rt, NotifyContext &ctx);
// open/openat/creat outside any workspace.
Verdict hook_open(HookRuntime &rt, NotifyContext &ctx);
// Open of an already resolved absolute path, shared with the workspace.
Verdict hook_open_path(HookRuntime &rt, NotifyContext &ctx, const std::string &abs, int flags,
                       mode_t mode);
// File event and live denial for a path (nullopt: proceed).
std::optional<Verdict> hook_file_gate(HookRuntime &rt, NotifyContext &ctx, const std::string &abs);

void install_hook_handlers(HandlerTable &table, std::shared_ptr<HookRuntime> runtime);

} // namespace lockbox
