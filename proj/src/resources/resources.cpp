#include "lockbox/resources.hpp"
#include "lockbox/proc.hpp"

#include <sched.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <fstream>
#include <sstream>

namespace lockbox {

namespace {

constexpr std::uint64_t kPage = 4096;

std::uint64_t page_up(std::uint64_t v)
{
    return (v + kPage - 1) & ~(kPage - 1);
}

// Syscall number the task is currently blocked in, -1 when running or gone.
int current_syscall(pid_t tid)
{
    std::ifstream in("/proc/" + std::to_string(tid) + "/syscall");
    std::string first;
    if (!(in >> first)) return -1;
    if (first.empty() || !std::isdigit(static_cast<unsigned char>(first[0]))) return -1;
    return std::stoi(first);
}

std::uint64_t heap_end(pid_t pid)
{
    std::ifstream maps("/proc/" + std::to_string(pid) + "/maps");
    std::string line;
    while (std::getline(maps, line)) {
        if (line.size() > 6 && line.compare(line.size() - 6, 6, "[heap]") == 0) {
            auto dash = line.find('-');
            auto space = line.find(' ');
            return std::stoull(line.substr(dash + 1, space - dash - 1), nullptr, 16);
        }
    }
    std::ifstream stat("/proc/" + std::to_string(pid) + "/stat");
    std::getline(stat, line);
    auto close = line.rfind(')');
    if (close == std::string::npos) return 0;
    std::istringstream rest(line.substr(close + 2));
    std::string field;
    // start_brk is field 47; the stream starts at field 3.
    for (int i = 3; i <= 47 && rest >> field; i++) {
        if (i == 47) return std::stoull(field);
    }
    return 0;
}

} // namespace

std::optional<CloneKind> classify_clone(NotifyContext &ctx)
{
    switch (ctx.notification().nr) {
        case SYS_fork:
        case SYS_vfork: return CloneKind::Process;
        case SYS_clone:
            return (ctx.arg(0) & CLONE_THREAD) ? CloneKind::Thread : CloneKind::Process;
        case SYS_clone3: {
            if (ctx.arg(1) < sizeof(std::uint64_t)) return std::nullopt;
            try {
                auto flags = ctx.read_struct<std::uint64_t>(ctx.arg(0));
                return (flags & CLONE_THREAD) ? CloneKind::Thread : CloneKind::Process;
            } catch (const MemoryFault &) {
                return std::nullopt;
            }
        }
        default: return std::nullopt;
    }
}

std::int64_t memory_delta(const Notification &n, std::uint64_t current_brk)
{
    auto arg = [&](int i) { return static_cast<std::int64_t>(n.args[i]); };
    switch (n.nr) {
        case SYS_mmap:
        case SYS_shmget: return static_cast<std::int64_t>(page_up(n.args[1]));
        case SYS_munmap: return -static_cast<std::int64_t>(page_up(n.args[1]));
        case SYS_mremap:
            return static_cast<std::int64_t>(page_up(n.args[2])) -
                   static_cast<std::int64_t>(page_up(n.args[1]));
        case SYS_brk:
            if (arg(0) == 0 || current_brk == 0) return 0;
            return static_cast<std::int64_t>(page_up(n.args[0])) -
                   static_cast<std::int64_t>(page_up(current_brk));
        default: return 0;
    }
}

// ---- ResourceLedger ----------------------------------------------------------

Verdict ResourceLedger::admit(CloneKind kind)
{
    std::lock_guard lock(mutex_);
    if (kind == CloneKind::Thread) return Verdict::allow();
    if (limits_.max_processes && live_ >= *limits_.max_processes) return Verdict::deny(EAGAIN);
    live_++;
    return Verdict::allow();
}

void ResourceLedger::process_exited()
{
    std::lock_guard lock(mutex_);
    if (live_ > 0) live_--;
}

void ResourceLedger::resync_processes(std::uint64_t live)
{
    std::lock_guard lock(mutex_);
    live_ = live;
}

std::uint64_t ResourceLedger::live_processes() const
{
    std::lock_guard lock(mutex_);
    return live_;
}

bool ResourceLedger::account(std::int64_t delta)
{
    std::lock_guard lock(mutex_);
    if (delta < 0) {
        auto dec = static_cast<std::uint64_t>(-delta);
        mapped_ = dec > mapped_ ? 0 : mapped_ - dec;
        return true;
    }
    std::uint64_t next = mapped_ + static_cast<std::uint64_t>(delta);
    if (limits_.max_memory && next > *limits_.max_memory) return false;
    mapped_ = next;
    peak_ = std::max(peak_, mapped_);
    return true;
}

void ResourceLedger::resync_memory(std::uint64_t total)
{
    std::lock_guard lock(mutex_);
    mapped_ = total;
    peak_ = std::max(peak_, mapped_);
}

std::uint64_t ResourceLedger::mapped_bytes() const
{
    std::lock_guard lock(mutex_);
    return mapped_;
}

std::uint64_t ResourceLedger::peak_mapped_bytes() const
{
    std::lock_guard lock(mutex_);
    return peak_;
}

void ResourceLedger::record_termination()
{
    std::lock_guard lock(mutex_);
    terminations_++;
}

std::uint64_t ResourceLedger::terminations() const
{
    std::lock_guard lock(mutex_);
    return terminations_;
}

void ResourceLedger::tighten(const ResourceLimits &limits)
{
    std::lock_guard lock(mutex_);
    limits_ = limits;
}

// ---- ResourceGovernor ----------------------------------------------------------

std::uint64_t ResourceGovernor::observe_processes()
{
    std::uint64_t live = 0;
    for (pid_t pid : processes_in_group(pgid_)) {
        auto st = read_proc_stat(pid);
        if (st && st->state != 'Z' && st->state != 'X') live++;
    }
    for (auto it = in_flight_.begin(); it != in_flight_.end();) {
        if (current_syscall(it->first) != it->second.second) {
            it = in_flight_.erase(it);
        } else {
            ++it;
        }
    }
    return live + in_flight_.size();
}

std::uint64_t ResourceGovernor::observe_memory()
{
    std::uint64_t total = 0;
    for (pid_t pid : processes_in_group(pgid_)) total += vm_size(pid);
    return total;
}

Verdict ResourceGovernor::gate_clone(NotifyContext &ctx)
{
    auto kind = classify_clone(ctx);
    if (!kind) return Verdict::deny(EPERM);
    std::lock_guard lock(mutex_);
    in_flight_.erase(ctx.pid());
    if (*kind == CloneKind::Process) ledger_.resync_processes(observe_processes());
    Verdict v = ledger_.admit(*kind);
    if (!v.is_deny() && *kind == CloneKind::Process) {
        ctx.check_valid();
        in_flight_[ctx.pid()] = {ctx.pid(), ctx.notification().nr};
    }
    return v;
}

Verdict ResourceGovernor::account_memory(NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    std::lock_guard lock(mutex_);
    ledger_.resync_memory(observe_memory());
    std::uint64_t brk = n.nr == SYS_brk ? heap_end(n.pid) : 0;
    std::int64_t delta = memory_delta(n, brk);
    // The observed total already reflects releases; only growth is projected.
    if (delta <= 0) return Verdict::allow();
    if (!ledger_.account(delta)) {
        ledger_.record_termination();
        ::kill(-pgid_, SIGKILL);
        return Verdict::deny(ENOMEM);
    }
    return Verdict::allow();
}

void install_resource_handlers(HandlerTable &table, const EnforcementPlan &plan,
                               std::shared_ptr<ResourceGovernor> governor)
{
    for (const auto &[nr, id] : plan.supervisor_handlers) {
        if (id == HandlerId::ProcessGate) {
            table.set(nr, [governor](NotifyContext &ctx) { return governor->gate_clone(ctx); });
        } else if (id == HandlerId::MemoryAccount) {
            table.set(nr, [governor](NotifyContext &ctx) { return governor->account_memory(ctx); });
        }
    }
}

// ---- CpuThrottle ---------------------------------------------------------------

CpuThrottle::CpuThrottle(pid_t pgid, double duty, std::chrono::milliseconds period)
    : pgid_(pgid), duty_(duty), period_(period)
{
    if (duty_ < 1.0) thread_ = std::thread([this] { run(); });
}

CpuThrottle::~CpuThrottle()
{
    stop();
}

void CpuThrottle::stop()
{
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
}

void CpuThrottle::run()
{
    auto on = std::chrono::duration_cast<std::chrono::microseconds>(period_ * duty_);
    auto off = std::chrono::duration_cast<std::chrono::microseconds>(period_) - on;
    std::unique_lock lock(mutex_);
    for (;;) {
        if (cv_.wait_for(lock, on, [&] { return stopping_; })) break;
        if (::kill(-pgid_, SIGSTOP) < 0) break;
        stops_++;
        bool done = cv_.wait_for(lock, off, [&] { return stopping_; });
        if (::kill(-pgid_, SIGCONT) < 0 || done) break;
    }
    ::kill(-pgid_, SIGCONT);
}

void apply_fd_limit(std::uint64_t limit)
{
    rlimit rl{};
    ::getrlimit(RLIMIT_NOFILE, &rl);
    rlim_t value = static_cast<rlim_t>(limit);
    if (rl.rlim_max != RLIM_INFINITY && value > rl.rlim_max) value = rl.rlim_max;
    rl.rlim_cur = value;
    rl.rlim_max = value;
    ::setrlimit(RLIMIT_NOFILE, &rl);
}

} // namespace lockbox
