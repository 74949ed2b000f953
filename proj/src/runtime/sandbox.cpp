#include "lockbox/error.hpp"
#include "lockbox/runtime.hpp"

#include "json.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <thread>

namespace lockbox {

std::vector<std::string> default_env()
{
    return {"PATH=/usr/local/bin:/usr/bin:/bin"};
}

std::string drain_fd(int fd, std::size_t limit, bool *overflow)
{
    std::string out;
    char buf[65536];
    for (;;) {
        ssize_t n = ::read(fd, buf, sizeof(buf));
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        std::size_t room = limit > out.size() ? limit - out.size() : 0;
        if (static_cast<std::size_t>(n) > room) {
            out.append(buf, room);
            if (overflow) *overflow = true;
            break;
        }
        out.append(buf, static_cast<std::size_t>(n));
    }
    return out;
}

std::string RunResult::to_json() const
{
    nlohmann::json j;
    j["exit_code"] = status.signaled ? nullptr : nlohmann::json(status.code);
    j["signal"] = status.signaled ? nlohmann::json(status.signal) : nullptr;
    j["timed_out"] = timed_out;
    auto audit_list = nlohmann::json::array();
    for (const auto &a : audits) audit_list.push_back(nlohmann::json::parse(a.to_json()));
    j["audits"] = audit_list;
    j["effects"] = effects ? nlohmann::json::parse(effects->to_json()) : nlohmann::json(nullptr);
    if (effects_error) j["effects_error"] = *effects_error;
    j["supervisor"] = {{"received", supervisor.received},
                       {"replied", supervisor.replied},
                       {"stale_dropped", supervisor.stale_dropped},
                       {"unknown_denied", supervisor.unknown_denied},
                       {"handler_errors", supervisor.handler_errors}};
    j["net"] = {{"connects", net.connects},
                {"denied", net.denied},
                {"proxied", net.proxied},
                {"on_behalf", net.on_behalf}};
    j["proxy"] = {{"accepted", proxy.accepted},
                  {"parsed", proxy.parsed},
                  {"forwarded", proxy.forwarded},
                  {"rejected", proxy.rejected},
                  {"upstream_connections", proxy.upstream_connections}};
    j["resource_kills"] = resource_kills;
    j["peak_memory"] = peak_memory;
    return j.dump();
}

// Everything one running sandbox owns. Members referenced by handlers are
// declared before the supervisor so that they outlive it.
struct SandboxState {
    std::shared_ptr<const EnforcementPlan> plan;
    RunOptions options;
    std::unique_ptr<LivePolicyCell> live;
    std::unique_ptr<AuditLog> audit;
    std::unique_ptr<HttpProxy> proxy;
    std::shared_ptr<ResourceGovernor> governor;
    std::shared_ptr<NetRuntime> net;
    std::shared_ptr<CowRuntime> cow;
    std::unique_ptr<RuntimeContext> context;
    std::unique_ptr<CallbackGate> gate;
    std::unique_ptr<Freezer> freezer;
    std::shared_ptr<HookRuntime> hook;
    std::unique_ptr<Supervisor> supervisor;
    std::unique_ptr<CpuThrottle> throttle;
    SandboxHandle handle;
    bool finished = false;

    ~SandboxState()
    {
        if (!finished) {
            handle.kill_group(SIGKILL);
            if (handle.pid() > 0) handle.wait();
        }
        if (supervisor) {
            supervisor->stop();
            supervisor->join();
        }
        if (proxy) proxy->stop();
    }
};

RunningSandbox::RunningSandbox(std::unique_ptr<SandboxState> state) : state_(std::move(state)) {}

RunningSandbox::~RunningSandbox() = default;

pid_t RunningSandbox::pid() const
{
    return state_->handle.pid();
}

SandboxHandle &RunningSandbox::handle()
{
    return state_->handle;
}

RuntimeContext *RunningSandbox::context()
{
    return state_->context.get();
}

Workspace *RunningSandbox::workspace()
{
    return state_->cow ? state_->cow->workspace.get() : nullptr;
}

void RunningSandbox::kill(int sig)
{
    state_->handle.kill_group(sig);
}

RunResult RunningSandbox::wait(std::optional<std::chrono::milliseconds> timeout)
{
    SandboxState &s = *state_;
    RunResult result;
    if (!timeout) timeout = s.options.timeout;
    if (timeout && s.handle.pidfd() >= 0) {
        pollfd pfd{s.handle.pidfd(), POLLIN, 0};
        auto deadline = std::chrono::steady_clock::now() + *timeout;
        for (;;) {
            auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
                deadline - std::chrono::steady_clock::now());
            if (left.count() <= 0) {
                result.timed_out = true;
                s.handle.kill_group(SIGKILL);
                break;
            }
            int rc = ::poll(&pfd, 1, static_cast<int>(left.count()));
            if (rc > 0) break;
            if (rc < 0 && errno != EINTR) break;
        }
    }
    result.status = s.handle.wait();
    s.finished = true;
    if (s.throttle) {
        s.throttle->stop();
        result.throttle_stops = s.throttle->stops_sent();
    }
    if (s.supervisor) {
        s.supervisor->stop();
        s.supervisor->join();
        result.supervisor = s.supervisor->counters();
    }
    if (s.proxy) {
        s.proxy->stop();
        result.proxy = s.proxy->counters();
    }
    if (s.net) {
        result.net.connects = s.net->counters.connects;
        result.net.denied = s.net->counters.denied;
        result.net.proxied = s.net->counters.proxied;
        result.net.on_behalf = s.net->counters.on_behalf;
        result.net.continued = s.net->counters.continued;
    }
    if (s.governor) {
        result.resource_kills = s.governor->ledger().terminations();
        result.peak_memory = s.governor->ledger().peak_mapped_bytes();
    }
    if (s.hook) {
        result.exec_holds = s.hook->exec_holds;
        result.freeze_failures = s.hook->freeze_failures;
        result.tasks_created = s.hook->index.creations();
    }
    if (s.cow) {
        auto &ws = *s.cow->workspace;
        EffectAction action = s.plan->spec.spec.fs.on_exit;
        try {
            if (s.options.dry_run) {
                result.effects = ws.finalize(EffectAction::Abort, true);
            } else {
                result.effects = ws.finalize(action);
            }
        } catch (const CommitConflictError &e) {
            result.effects_error = e.what();
            result.effects = ws.summary();
        }
    }
    result.audits = s.audit->records();
    return result;
}

Sandbox::Sandbox(const SandboxSpec &spec)
    : plan_(std::make_shared<const EnforcementPlan>(build_plan(spec)))
{
}

Sandbox::Sandbox(const SandboxSpec &spec, const Resolver &resolver)
    : plan_(std::make_shared<const EnforcementPlan>(build_plan(spec, resolver)))
{
}

Sandbox::Sandbox(EnforcementPlan plan)
    : plan_(std::make_shared<const EnforcementPlan>(std::move(plan)))
{
}

std::unique_ptr<RunningSandbox> Sandbox::start(const std::vector<std::string> &argv,
                                               RunOptions options) const
{
    auto state = std::make_unique<SandboxState>();
    SandboxState &s = *state;
    s.plan = plan_;
    s.options = std::move(options);
    const EnforcementPlan &plan = *plan_;
    const SandboxSpec &spec = plan.spec.spec;

    s.live = std::make_unique<LivePolicyCell>(
        LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    s.audit = s.options.audit_path ? std::make_unique<AuditLog>(*s.options.audit_path)
                                   : std::make_unique<AuditLog>();

    HandlerTable table;
    if (plan.routes(HandlerId::ProcessGate) || plan.routes(HandlerId::MemoryAccount)) {
        s.governor = std::make_shared<ResourceGovernor>(spec.resources, 0);
        install_resource_handlers(table, plan, s.governor);
        if (!spec.resources.max_processes) {
            for (const auto &[nr, id] : plan.supervisor_handlers) {
                if (id == HandlerId::ProcessGate) table.handlers.erase(nr);
            }
        }
    }
    if (!spec.net.http.empty()) {
        s.proxy = std::make_unique<HttpProxy>(spec.net.http, s.live.get(), s.audit.get());
        s.proxy->start();
    }
    if (spec.runtime.enabled) {
        s.context = std::make_unique<RuntimeContext>(s.live.get(), s.governor.get());
        if (s.options.policy_fn) {
            s.gate = std::make_unique<CallbackGate>(s.options.policy_fn, spec.runtime,
                                                    s.context.get(), s.audit.get());
        }
        s.freezer = s.options.disable_tracing ? make_disabled_freezer() : make_ptrace_freezer();
        s.hook = std::make_shared<HookRuntime>();
        s.hook->plan = &plan;
        s.hook->live = s.live.get();
        s.hook->gate = s.gate.get();
        s.hook->audit = s.audit.get();
        s.hook->freezer = s.freezer.get();
    }
    if (plan.routes(HandlerId::NetConnect)) {
        s.net = std::make_shared<NetRuntime>();
        s.net->plan = &plan;
        s.net->live = s.live.get();
        s.net->proxy = s.proxy.get();
        s.net->gate = s.gate.get();
        install_net_handlers(table, s.net);
    }
    if (spec.fs.workspace) {
        const auto &wc = *spec.fs.workspace;
        s.cow = std::make_shared<CowRuntime>();
        s.cow->workspace =
            std::make_shared<Workspace>(wc.root, wc.storage, wc.quota_bytes, wc.bypass_unmodified_reads);
        s.cow->live = s.live.get();
        if (s.hook) {
            auto hook = s.hook;
            s.cow->file_gate = [hook](NotifyContext &ctx, const std::string &abs) {
                return hook_file_gate(*hook, ctx, abs);
            };
            s.cow->outside_open = [hook](NotifyContext &ctx, const std::string &abs, int flags,
                                         mode_t mode) {
                return hook_open_path(*hook, ctx, abs, flags, mode);
            };
        }
        install_cow_handlers(table, plan, s.cow);
    }
    if (s.hook) install_hook_handlers(table, s.hook);

    LaunchRequest request;
    request.argv = argv;
    request.env = s.options.env;
    for (int i = 0; i < 3; i++) request.stdio[i] = s.options.stdio[i];
    request.step_log = s.options.step_log;
    request.landlock_abi = s.options.landlock_abi;
    if (plan.has_supervisor_handlers()) {
        request.on_listener = [&s, &table](UniqueFd listener, pid_t pid) {
            if (s.governor) s.governor->set_pgid(pid);
            if (s.hook) s.hook->pgid = pid;
            auto source = std::make_unique<SeccompNotifySource>(std::move(listener));
            s.supervisor = std::make_unique<Supervisor>(std::move(source), std::move(table),
                                                        s.options.workers);
            if (s.options.log) s.supervisor->set_logger(s.options.log);
            s.supervisor->start();
        };
    }
    s.handle = launch(plan, request);
    if (spec.resources.max_cpu && *spec.resources.max_cpu < 1.0) {
        s.throttle = std::make_unique<CpuThrottle>(s.handle.pgid(), *spec.resources.max_cpu);
    }
    return std::make_unique<RunningSandbox>(std::move(state));
}

RunResult Sandbox::run(const std::vector<std::string> &argv, RunOptions options) const
{
    std::string input = options.input;
    std::size_t limit = options.capture_limit;
    auto running = start(argv, std::move(options));
    SandboxHandle &h = running->handle();

    std::thread feeder;
    if (h.stdin_pipe()) {
        feeder = std::thread([&h, input] {
            std::size_t off = 0;
            while (off < input.size()) {
                ssize_t n = ::write(h.stdin_pipe().get(), input.data() + off, input.size() - off);
                if (n < 0 && errno == EINTR) continue;
                if (n <= 0) break;
                off += static_cast<std::size_t>(n);
            }
            h.stdin_pipe().reset();
        });
    }
    std::atomic<bool> overflow{false};
    auto reader = [&](UniqueFd &fd, std::string &out) {
        bool over = false;
        out = drain_fd(fd.get(), limit, &over);
        if (over) {
            overflow = true;
            running->kill(SIGKILL);
        }
    };
    std::string out_data, err_data;
    std::thread out_reader, err_reader;
    if (h.stdout_pipe()) out_reader = std::thread(reader, std::ref(h.stdout_pipe()), std::ref(out_data));
    if (h.stderr_pipe()) err_reader = std::thread(reader, std::ref(h.stderr_pipe()), std::ref(err_data));
    // wait() kills the rest of the group once the root exits, which closes
    // pipes still held by stray descendants.
    RunResult result = running->wait();
    if (out_reader.joinable()) out_reader.join();
    if (err_reader.joinable()) err_reader.join();
    if (feeder.joinable()) feeder.join();
    result.stdout_data = std::move(out_data);
    result.stderr_data = std::move(err_data);
    result.capture_overflow = overflow.load();
    return result;
}

} // namespace lockbox
