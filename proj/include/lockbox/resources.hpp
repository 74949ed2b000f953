#pragma once

#include "lockbox/plan.hpp"
#include "lockbox/supervisor.hpp"

#include <sys/types.h>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

namespace lockbox {

enum class CloneKind : std::uint8_t { Thread, Process };

// Kind of task a fork-class notification creates. nullopt when clone3
// arguments cannot be read.
std::optional<CloneKind> classify_clone(NotifyContext &ctx);

// Requested address-space delta of a memory notification. brk needs the
// caller's current break, supplied by `current_brk`.
std::int64_t memory_delta(const Notification &n, std::uint64_t current_brk);

class ResourceLedger {
public:
    explicit ResourceLedger(ResourceLimits limits) : limits_(limits) {}

    // Admits a new task; processes beyond the limit get EAGAIN.
    Verdict admit(CloneKind kind);
    void process_exited();
    // Replaces the process count with an observed value.
    void resync_processes(std::uint64_t live);
    std::uint64_t live_processes() const;

    // Applies a requested delta. Returns false, leaving the total unchanged,
    // when the result would exceed the limit.
    bool account(std::int64_t delta);
    void resync_memory(std::uint64_t total);
    std::uint64_t mapped_bytes() const;
    std::uint64_t peak_mapped_bytes() const;

    void record_termination();
    std::uint64_t terminations() const;

    const ResourceLimits &limits() const noexcept { return limits_; }
    void tighten(const ResourceLimits &limits);

private:
    mutable std::mutex mutex_;
    ResourceLimits limits_;
    std::uint64_t live_ = 1;
    std::uint64_t mapped_ = 0;
    std::uint64_t peak_ = 0;
    std::uint64_t terminations_ = 0;
};

// Live accounting for one sandbox: ledger plus /proc observation of its
// process group.
class ResourceGovernor {
public:
    ResourceGovernor(ResourceLimits limits, pid_t pgid) : ledger_(limits), pgid_(pgid) {}

    Verdict gate_clone(NotifyContext &ctx);
    Verdict account_memory(NotifyContext &ctx);

    // Processes in the group that have not exited, plus admitted clones
    // still in flight.
    std::uint64_t observe_processes();
    std::uint64_t observe_memory();

    ResourceLedger &ledger() noexcept { return ledger_; }
    void set_pgid(pid_t pgid) { pgid_ = pgid; }

private:
    std::mutex mutex_;
    ResourceLedger ledger_;
    pid_t pgid_;
    // tid -> syscall number of an admitted clone not yet returned.
    std::map<pid_t, std::pair<pid_t, int>> in_flight_;
};

void install_resource_handlers(HandlerTable &table, const EnforcementPlan &plan,
                               std::shared_ptr<ResourceGovernor> governor);

// SIGSTOP/SIGCONT duty cycle over a process group.
class CpuThrottle {
public:
    static constexpr std::chrono::milliseconds kDefaultPeriod{100};

    CpuThrottle(pid_t pgid, double duty, std::chrono::milliseconds period = kDefaultPeriod);
    ~CpuThrottle();
    CpuThrottle(const CpuThrottle &) = delete;
    CpuThrottle &operator=(const CpuThrottle &) = delete;

    // Duty 1.0 installs nothing.
    bool active() const noexcept { return thread_.joinable(); }
    std::uint64_t stops_sent() const noexcept { return stops_; }
    void stop();

private:
    void run();

    pid_t pgid_;
    double duty_;
    std::chrono::milliseconds period_;
    std::mutex mutex_;
    std::condition_variable cv_;
    bool stopping_ = false;
    std::atomic<std::uint64_t> stops_{0};
    std::thread thread_;
};

// Sets RLIMIT_NOFILE of the calling process (soft and hard).
void apply_fd_limit(std::uint64_t limit);

} // namespace lockbox
