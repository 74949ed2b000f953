#include "lockbox/error.hpp"
#include "lockbox/hook.hpp"
#include "lockbox/proc.hpp"

#include <fcntl.h>
#include <sched.h>
#include <sys/ptrace.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <climits>
#include <fstream>

namespace lockbox {

// ---- tightening ------------------------------------------------------------

PinnedAllowlist narrow_pins(const PinnedAllowlist &current, const std::vector<EndpointRule> &rules)
{
    PinnedAllowlist out;
    auto keep = [&](const PinnedEntry &entry) {
        std::vector<std::string> names;
        if (entry.ip) names = current.hostnames_for(*entry.ip);
        if (names.empty()) {
            out.add(entry);
        } else {
            for (const auto &name : names) out.add(entry, name);
        }
    };
    for (const auto &rule : rules) {
        if (rule.port_only || !rule.destination) {
            PinnedEntry entry{rule.protocol, std::nullopt, rule.port};
            if (rule.protocol == Protocol::Icmp) entry.port.reset();
            if (!current.entries().count(entry)) {
                throw PolicyError("restrict_network would widen access: " +
                                  std::string(to_string(rule.protocol)) + " port " +
                                  (rule.port ? std::to_string(*rule.port) : std::string("*")));
            }
            keep(entry);
            continue;
        }
        auto addresses = current.addresses_for(*rule.destination);
        if (addresses.empty()) {
            throw PolicyError("restrict_network: " + *rule.destination + " is not pinned");
        }
        for (const auto &ip : addresses) {
            Destination dest{rule.protocol, ip, rule.port.value_or(0)};
            if (!current.contains(dest)) {
                throw PolicyError("restrict_network would widen access: " + dest.to_string());
            }
            PinnedEntry entry{rule.protocol, ip, rule.port};
            if (rule.protocol == Protocol::Icmp) entry.port.reset();
            keep(entry);
        }
    }
    return out;
}

ResourceLimits narrow_limits(const ResourceLimits &current, const ResourceLimits &next)
{
    ResourceLimits out = current;
    auto narrow = [](auto &slot, const auto &value, const char *name) {
        if (!value) return;
        if (slot && *value > *slot) {
            throw PolicyError(std::string("tighten_resources would raise ") + name);
        }
        slot = value;
    };
    narrow(out.max_processes, next.max_processes, "max_processes");
    narrow(out.max_memory, next.max_memory, "max_memory");
    narrow(out.max_cpu, next.max_cpu, "max_cpu");
    narrow(out.max_fds, next.max_fds, "max_fds");
    return out;
}

void RuntimeContext::restrict_network(const std::vector<EndpointRule> &endpoints)
{
    std::lock_guard lock(live_->update_mutex());
    auto current = live_->load();
    auto next = std::make_shared<LivePolicy>(*current);
    next->pins = narrow_pins(current->pins, endpoints);
    live_->store(std::move(next));
}

void RuntimeContext::deny_path(const std::string &path)
{
    if (path.empty() || path[0] != '/') throw PolicyError("deny_path needs an absolute path");
    std::lock_guard lock(live_->update_mutex());
    auto current = live_->load();
    auto next = std::make_shared<LivePolicy>(*current);
    next->scope = current->scope.with_denied(path);
    next->paths_tightened = true;
    live_->store(std::move(next));
}

void RuntimeContext::tighten_resources(const ResourceLimits &limits)
{
    std::lock_guard lock(live_->update_mutex());
    auto current = live_->load();
    auto next = std::make_shared<LivePolicy>(*current);
    next->limits = narrow_limits(current->limits, limits);
    if (governor_) governor_->ledger().tighten(next->limits);
    live_->store(std::move(next));
}

// ---- CallbackGate ------------------------------------------------------------

CallbackGate::CallbackGate(HookCallback callback, RuntimeHookConfig config, RuntimeContext *ctx,
                           AuditLog *audit)
    : callback_(std::move(callback)), config_(std::move(config)), ctx_(ctx), audit_(audit)
{
    thread_ = std::thread([this] { run(); });
}

CallbackGate::~CallbackGate()
{
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    if (thread_.joinable()) thread_.join();
}

bool CallbackGate::subscribed(EventCategory category) const
{
    return config_.enabled && callback_ && config_.categories.count(category) > 0;
}

HookVerdict CallbackGate::deliver(const Event &event)
{
    auto job = std::make_shared<Job>();
    job->event = event;
    std::unique_lock lock(mutex_);
    if (stopping_) return HookVerdict::deny();
    queue_.push_back(job);
    cv_.notify_all();
    auto done = [&] { return job->result.has_value() || stopping_; };
    if (config_.hold_timeout) {
        if (!cv_.wait_for(lock, *config_.hold_timeout, done)) {
            job->abandoned = true;
            timeouts_++;
            lock.unlock();
            if (audit_) {
                audit_->append(AuditRecord{now_ms(), event.pid, "hook-error", "", "", "",
                                           "timeout", event.argv.value_or(std::vector<std::string>{})});
            }
            return HookVerdict::deny();
        }
    } else {
        cv_.wait(lock, done);
    }
    return job->result.value_or(HookVerdict::deny());
}

void CallbackGate::run()
{
    std::unique_lock lock(mutex_);
    for (;;) {
        cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (stopping_) break;
        auto job = queue_.front();
        queue_.pop_front();
        if (job->abandoned) continue;
        lock.unlock();
        HookVerdict verdict = invoke(job->event);
        lock.lock();
        job->result = verdict;
        delivered_++;
        cv_.notify_all();
    }
    for (auto &job : queue_) job->result = HookVerdict::deny();
    queue_.clear();
    cv_.notify_all();
}

HookVerdict CallbackGate::invoke(const Event &event)
{
    HookVerdict verdict;
    std::string failure;
    try {
        verdict = map_callback_value(callback_(event, *ctx_));
    } catch (const std::exception &e) {
        failure = e.what();
    } catch (...) {
        failure = "unknown exception";
    }
    auto record = [&](std::string kind, std::string decision) {
        if (!audit_) return;
        AuditRecord r;
        r.ts_ms = now_ms();
        r.pid = event.pid;
        r.kind = std::move(kind);
        r.method = event.syscall;
        if (event.net_dest) r.host = event.net_dest->to_string();
        r.decision = std::move(decision);
        if (event.argv) r.argv = *event.argv;
        audit_->append(std::move(r));
    };
    if (!failure.empty()) {
        std::lock_guard lock(mutex_);
        errors_++;
    }
    if (!failure.empty()) {
        record("hook-error", "deny: " + failure);
        return HookVerdict::deny();
    }
    if (verdict.kind == HookVerdict::Kind::Audit) record(to_string(event.category), "audit");
    return verdict;
}

std::uint64_t CallbackGate::delivered() const
{
    std::lock_guard lock(mutex_);
    return delivered_;
}

std::uint64_t CallbackGate::timeouts() const
{
    std::lock_guard lock(mutex_);
    return timeouts_;
}

std::uint64_t CallbackGate::errors() const
{
    std::lock_guard lock(mutex_);
    return errors_;
}

// ---- freezing ------------------------------------------------------------

namespace {

char task_state(pid_t tid)
{
    pid_t tgid = tgid_of(tid);
    if (tgid == 0) return 'X';
    auto st = read_task_stat(tgid, tid);
    return st ? st->state : 'X';
}

int current_syscall(pid_t tid)
{
    std::ifstream in("/proc/" + std::to_string(tid) + "/syscall");
    std::string first;
    if (!(in >> first)) return -2;
    if (first.empty() || !std::isdigit(static_cast<unsigned char>(first[0]))) return -1;
    return std::stoi(first);
}

int yama_scope()
{
    std::ifstream in("/proc/sys/kernel/yama/ptrace_scope");
    int scope = 0;
    if (in >> scope) return scope;
    return 0;
}

// The tracer is a dedicated thread: ptrace requests must come from the
// attaching thread, and its exit detaches every tracee that never reached a
// stop, clearing the pending interrupt.
class PtraceScope final : public FreezeScope {
public:
    PtraceScope(pid_t tid, pid_t pgid) : tid_(tid), pgid_(pgid)
    {
        thread_ = std::thread([this] { tracer(); });
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return phase_ != Phase::Attaching; });
        if (phase_ == Phase::Failed) {
            lock.unlock();
            thread_.join();
            throw FreezeUnavailable(failure_);
        }
    }

    ~PtraceScope() override
    {
        {
            std::lock_guard lock(mutex_);
            release_ = true;
        }
        cv_.notify_all();
        if (thread_.joinable()) thread_.join();
    }

    const std::set<pid_t> &frozen() const override { return frozen_; }

    void await_exec(pid_t tid, int nr, std::chrono::milliseconds timeout) override
    {
        {
            std::lock_guard lock(mutex_);
            exec_nr_ = nr;
            exec_timeout_ = timeout;
            awaiting_ = true;
            (void)tid;
        }
        cv_.notify_all();
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return !awaiting_; });
    }

private:
    enum class Phase { Attaching, Frozen, Failed };

    void tracer()
    {
        std::string failure;
        // The held task is traced only for its exec event.
        if (ptrace(PTRACE_SEIZE, tid_, nullptr,
                   reinterpret_cast<void *>(static_cast<long>(PTRACE_O_TRACEEXEC))) < 0) {
            failure = std::string("cannot trace the exec'ing task: ") + std::strerror(errno);
        } else {
            traced_exec_ = true;
        }
        for (int round = 0; failure.empty() && round < 16; round++) {
            bool added = false;
            for (pid_t pid : processes_in_group(pgid_)) {
                for (pid_t t : threads_of(pid)) {
                    if (t == tid_ || frozen_.count(t)) continue;
                    if (ptrace(PTRACE_SEIZE, t, nullptr, nullptr) < 0) {
                        if (errno == ESRCH) continue;
                        failure = "cannot trace task " + std::to_string(t) + ": " +
                                  std::strerror(errno);
                        break;
                    }
                    ptrace(PTRACE_INTERRUPT, t, nullptr, nullptr);
                    frozen_.insert(t);
                    added = true;
                }
                if (!failure.empty()) break;
            }
            if (!added) break;
        }
        if (!failure.empty()) {
            std::lock_guard lock(mutex_);
            failure_ = failure;
            phase_ = Phase::Failed;
            cv_.notify_all();
            return;
        }
        // Tasks blocked in the kernel cannot run user code; their pending
        // interrupt stops them before they return.
        auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(200);
        std::set<pid_t> waiting = frozen_;
        while (!waiting.empty() && std::chrono::steady_clock::now() < deadline) {
            for (auto it = waiting.begin(); it != waiting.end();) {
                char s = task_state(*it);
                if (s == 't' || s == 'T' || s == 'X' || s == 'Z' || s == 'D') {
                    it = waiting.erase(it);
                } else {
                    ++it;
                }
            }
            if (!waiting.empty()) std::this_thread::sleep_for(std::chrono::microseconds(50));
        }
        {
            std::lock_guard lock(mutex_);
            phase_ = Phase::Frozen;
        }
        cv_.notify_all();

        std::unique_lock lock(mutex_);
        cv_.wait(lock, [&] { return release_ || awaiting_; });
        if (awaiting_) {
            int nr = exec_nr_;
            auto timeout = exec_timeout_;
            lock.unlock();
            wait_exec(nr, timeout);
            lock.lock();
            awaiting_ = false;
            cv_.notify_all();
            cv_.wait(lock, [&] { return release_; });
        }
        lock.unlock();
        for (pid_t t : frozen_) {
            if (task_state(t) == 't') ptrace(PTRACE_DETACH, t, nullptr, nullptr);
        }
        if (traced_exec_) {
            pid_t tgid = tgid_of(tid_);
            for (pid_t t : {tid_, tgid}) {
                if (t > 0 && task_state(t) == 't') ptrace(PTRACE_DETACH, t, nullptr, nullptr);
            }
        }
    }

    // Holds the freeze until the exec either replaced the image or failed.
    void wait_exec(int nr, std::chrono::milliseconds timeout)
    {
        pid_t tgid = tgid_of(tid_);
        auto deadline = std::chrono::steady_clock::now() + timeout;
        while (std::chrono::steady_clock::now() < deadline) {
            // Exec kills the other threads; their zombies stay until the
            // tracer reaps them, and the exec waits for that.
            for (pid_t t : frozen_) {
                siginfo_t gone{};
                waitid(P_PID, static_cast<id_t>(t), &gone, WEXITED | WNOHANG | __WALL);
            }
            for (pid_t t : {tid_, tgid}) {
                if (t <= 0) continue;
                siginfo_t info{};
                if (waitid(P_PID, static_cast<id_t>(t), &info, WSTOPPED | WNOHANG | __WALL) == 0 &&
                    info.si_pid == t && (info.si_status >> 8) == PTRACE_EVENT_EXEC) {
                    return;
                }
                if (info.si_pid == t && info.si_status == (SIGTRAP | (PTRACE_EVENT_EXEC << 8))) {
                    return;
                }
            }
            int sc = current_syscall(tid_);
            if (sc == -2) {
                // The held thread is gone: a non-leader exec took over the leader.
                if (tgid <= 0 || task_state(tgid) == 'X') return;
            } else if (sc >= 0 && sc != nr) {
                return;
            }
            std::this_thread::sleep_for(std::chrono::microseconds(20));
        }
    }

    pid_t tid_;
    pid_t pgid_;
    std::set<pid_t> frozen_;
    bool traced_exec_ = false;
    std::mutex mutex_;
    std::condition_variable cv_;
    Phase phase_ = Phase::Attaching;
    std::string failure_;
    bool release_ = false;
    bool awaiting_ = false;
    int exec_nr_ = 0;
    std::chrono::milliseconds exec_timeout_{0};
    std::thread thread_;
};

class EmptyScope final : public FreezeScope {
public:
    const std::set<pid_t> &frozen() const override { return empty_; }
    void await_exec(pid_t, int, std::chrono::milliseconds) override {}

private:
    std::set<pid_t> empty_;
};

class PtraceFreezer final : public Freezer {
public:
    std::unique_ptr<FreezeScope> freeze(pid_t tid, pid_t pgid) override
    {
        if (yama_scope() >= 3) throw FreezeUnavailable("ptrace disabled by Yama");
        bool alone = true;
        for (pid_t pid : processes_in_group(pgid)) {
            for (pid_t t : threads_of(pid)) {
                if (t != tid) alone = false;
            }
        }
        if (alone) return std::make_unique<EmptyScope>();
        return std::make_unique<PtraceScope>(tid, pgid);
    }
};

class DisabledFreezer final : public Freezer {
public:
    std::unique_ptr<FreezeScope> freeze(pid_t, pid_t) override
    {
        throw FreezeUnavailable("tracing disabled");
    }
};

} // namespace

std::unique_ptr<Freezer> make_ptrace_freezer()
{
    return std::make_unique<PtraceFreezer>();
}

std::unique_ptr<Freezer> make_disabled_freezer()
{
    return std::make_unique<DisabledFreezer>();
}

// ---- ProcessIndex ----------------------------------------------------------

void ProcessIndex::record(pid_t parent, CloneKind kind, bool shares_vm)
{
    std::lock_guard lock(mutex_);
    entries_.push_back(Entry{parent, kind, shares_vm});
}

std::uint64_t ProcessIndex::creations() const
{
    std::lock_guard lock(mutex_);
    return entries_.size();
}

std::uint64_t ProcessIndex::threads() const
{
    std::lock_guard lock(mutex_);
    return static_cast<std::uint64_t>(
        std::count_if(entries_.begin(), entries_.end(),
                      [](const Entry &e) { return e.kind == CloneKind::Thread; }));
}

// ---- handlers --------------------------------------------------------------

std::vector<std::string> read_argv(NotifyContext &ctx, std::uint64_t addr)
{
    constexpr std::size_t kMaxArgs = 1 << 16;
    constexpr std::size_t kMaxTotal = 2 << 20;
    std::vector<std::string> argv;
    if (addr == 0) return argv;
    std::size_t total = 0;
    for (std::size_t i = 0; i < kMaxArgs; i++) {
        auto ptr = ctx.read_struct<std::uint64_t>(addr + i * sizeof(std::uint64_t));
        if (ptr == 0) break;
        argv.push_back(ctx.read_string(ptr, 128 * 1024));
        total += argv.back().size() + 1;
        if (total > kMaxTotal) throw std::length_error("argv too large");
    }
    return argv;
}

Verdict hook_exec(HookRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    if (!rt.gate || !rt.gate->subscribed(EventCategory::Exec)) return Verdict::allow();
    rt.exec_holds++;
    std::shared_ptr<FreezeScope> scope;
    try {
        if (!rt.freezer) throw FreezeUnavailable("no freezer");
        scope = rt.freezer->freeze(ctx.pid(), rt.pgid);
    } catch (const FreezeUnavailable &e) {
        rt.freeze_failures++;
        if (rt.audit) {
            rt.audit->append(AuditRecord{now_ms(), ctx.pid(), "hook-error", std::string(n.name()),
                                         "", "", std::string("deny: ") + e.what(), {}});
        }
        return Verdict::deny(EPERM);
    }
    ctx.check_valid();
    Event event;
    event.syscall = std::string(n.name());
    event.category = EventCategory::Exec;
    event.pid = ctx.pid();
    event.ppid = read_ppid(ctx.pid());
    event.argv = read_argv(ctx, ctx.arg(n.nr == SYS_execveat ? 2 : 1));
    HookVerdict verdict = rt.gate->deliver(event);
    if (!verdict.permits()) return verdict.to_verdict();
    if (!scope->frozen().empty()) {
        pid_t tid = ctx.pid();
        int nr = n.nr;
        auto settle = rt.exec_settle;
        ctx.defer([scope, tid, nr, settle] { scope->await_exec(tid, nr, settle); });
    }
    return Verdict::allow();
}

Verdict track_creation(HookRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    auto kind = classify_clone(ctx);
    if (!kind) return Verdict::deny(EPERM);
    bool shares_vm = false;
    if (n.nr == SYS_vfork) {
        shares_vm = true;
    } else if (n.nr == SYS_clone) {
        shares_vm = (ctx.arg(0) & CLONE_VM) != 0;
    } else if (n.nr == SYS_clone3) {
        shares_vm = (ctx.read_struct<std::uint64_t>(ctx.arg(0)) & CLONE_VM) != 0;
    }
    rt.index.record(ctx.pid(), *kind, shares_vm);
    return Verdict::allow();
}

std::optional<Verdict> hook_file_gate(HookRuntime &rt, NotifyContext &ctx, const std::string &abs)
{
    if (rt.live && rt.live->load()->scope.denied(abs)) return Verdict::deny(EACCES);
    if (rt.gate && rt.gate->subscribed(EventCategory::File)) {
        Event event;
        event.syscall = std::string(ctx.notification().name());
        event.category = EventCategory::File;
        event.pid = ctx.pid();
        event.ppid = read_ppid(ctx.pid());
        HookVerdict verdict = rt.gate->deliver(event);
        if (!verdict.permits()) return verdict.to_verdict();
    }
    return std::nullopt;
}

namespace {

std::uint64_t granted(const EnforcementPlan &plan, const std::string &path)
{
    std::uint64_t bits = 0;
    for (const auto &grant : plan.static_fs) {
        if (path_has_prefix(path, grant.path)) bits |= grant.access;
    }
    return bits;
}

std::optional<std::string> fd_real_path(int fd)
{
    char buf[PATH_MAX];
    std::string link = "/proc/self/fd/" + std::to_string(fd);
    ssize_t len = ::readlink(link.c_str(), buf, sizeof(buf));
    if (len <= 0) return std::nullopt;
    return std::string(buf, static_cast<std::size_t>(len));
}

std::string parent_of(const std::string &path)
{
    auto slash = path.rfind('/');
    if (slash == 0 || slash == std::string::npos) return "/";
    return path.substr(0, slash);
}

} // namespace

Verdict hook_open_path(HookRuntime &rt, NotifyContext &ctx, const std::string &abs, int flags,
                       mode_t mode)
{
    if (auto v = hook_file_gate(rt, ctx, abs)) return *v;
    auto live = rt.live ? rt.live->load() : nullptr;
    if (!live || !live->paths_tightened) return Verdict::allow();
    // These resolve relative to the caller; the kernel checks them.
    if (path_has_prefix(abs, "/proc") || path_has_prefix(abs, "/dev")) return Verdict::allow();

    bool writes = (flags & O_ACCMODE) != O_RDONLY || (flags & (O_TRUNC | O_CREAT));
    if (flags & O_CREAT) {
        char real_parent[PATH_MAX];
        if (::realpath(parent_of(abs).c_str(), real_parent) &&
            live->scope.denied(std::string(real_parent) + abs.substr(abs.rfind('/')))) {
            return Verdict::deny(EACCES);
        }
        mode = mode & ~proc_umask(ctx.pid()) & 07777;
    }
    UniqueFd fd(::open(abs.c_str(), flags | O_CLOEXEC | O_NOCTTY, mode));
    if (!fd) return Verdict::deny(errno);
    auto real = fd_real_path(fd.get());
    if (!real || live->scope.denied(*real)) return Verdict::deny(EACCES);
    if (rt.plan) {
        struct stat st{};
        ::fstat(fd.get(), &st);
        std::uint64_t need = 0;
        if ((flags & O_ACCMODE) != O_WRONLY) {
            need |= S_ISDIR(st.st_mode) ? fs_access::ReadDir : fs_access::ReadFile;
        }
        if (writes && (flags & O_ACCMODE) != O_RDONLY) need |= fs_access::WriteFile;
        if (flags & O_TRUNC) need |= fs_access::Truncate;
        if ((granted(*rt.plan, *real) & need) != need) return Verdict::deny(EACCES);
    }
    ctx.check_valid();
    return Verdict::emulate_fd(std::move(fd), std::nullopt, (flags & O_CLOEXEC) != 0);
}

Verdict hook_open(HookRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    int dirfd = AT_FDCWD;
    std::uint64_t addr;
    int flags;
    mode_t mode;
    if (n.nr == SYS_openat) {
        dirfd = static_cast<int>(static_cast<std::int32_t>(ctx.arg(0)));
        addr = ctx.arg(1);
        flags = static_cast<int>(ctx.arg(2));
        mode = static_cast<mode_t>(ctx.arg(3));
    } else if (n.nr == SYS_creat) {
        addr = ctx.arg(0);
        flags = O_CREAT | O_WRONLY | O_TRUNC;
        mode = static_cast<mode_t>(ctx.arg(1));
    } else {
        addr = ctx.arg(0);
        flags = static_cast<int>(ctx.arg(1));
        mode = static_cast<mode_t>(ctx.arg(2));
    }
    std::string raw = ctx.read_string(addr);
    if (raw.empty()) return Verdict::deny(ENOENT);
    auto abs = resolve_at(ctx.pid(), dirfd, raw);
    if (!abs) return Verdict::allow();
    return hook_open_path(rt, ctx, *abs, flags, mode);
}

void install_hook_handlers(HandlerTable &table, std::shared_ptr<HookRuntime> runtime)
{
    for (const auto &[nr, id] : runtime->plan->supervisor_handlers) {
        auto rt = runtime;
        switch (id) {
            case HandlerId::HookExec:
                table.set(nr, [rt](NotifyContext &ctx) { return hook_exec(*rt, ctx); });
                break;
            case HandlerId::FileOpen:
                table.set(nr, [rt](NotifyContext &ctx) { return hook_open(*rt, ctx); });
                break;
            case HandlerId::ProcessGate: {
                const Handler *existing = table.find(nr);
                Handler next = existing ? *existing : Handler{};
                table.set(nr, [rt, next](NotifyContext &ctx) {
                    Verdict v = track_creation(*rt, ctx);
                    if (v.is_deny() || !next) return v;
                    return next(ctx);
                });
                break;
            }
            default: break;
        }
    }
}

} // namespace lockbox
