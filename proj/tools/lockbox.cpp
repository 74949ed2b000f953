#include "lockbox/composition.hpp"
#include "lockbox/error.hpp"
#include "lockbox/launcher.hpp"
#include "lockbox/policy_file.hpp"
#include "lockbox/runtime.hpp"

#include "CLI11.hpp"

#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <cerrno>
#include <cstdlib>
#include <iostream>

using namespace lockbox;

namespace {

// Harness exit codes; child codes below 120 pass through.
constexpr int kExitUsage = 2;
constexpr int kExitInternal = 120;
constexpr int kExitPolicy = 121;
constexpr int kExitConflict = 122;
constexpr int kExitTimeout = 124;
constexpr int kExitFloor = 125;
constexpr int kExitNoExec = 126;
constexpr int kExitNotFound = 127;

std::atomic<pid_t> g_child{0};

void forward_signal(int sig)
{
    pid_t pid = g_child.load();
    if (pid > 0) ::kill(-pid, sig);
}

void install_forwarding()
{
    struct sigaction sa{};
    sa.sa_handler = forward_signal;
    sigemptyset(&sa.sa_mask);
    sigaction(SIGINT, &sa, nullptr);
    sigaction(SIGTERM, &sa, nullptr);
}

std::vector<std::string> host_env()
{
    std::vector<std::string> env;
    for (const char *name : {"PATH", "HOME", "LANG", "TERM", "USER", "TMPDIR"}) {
        if (const char *v = std::getenv(name)) env.push_back(std::string(name) + "=" + v);
    }
    if (env.empty() || env.front().rfind("PATH=", 0) != 0) {
        bool has_path = false;
        for (auto &e : env) has_path |= e.rfind("PATH=", 0) == 0;
        if (!has_path) env.push_back(default_env().front());
    }
    return env;
}

struct RunFlags {
    std::string policy;
    std::vector<std::string> ro, rw, deny, net, http;
    std::optional<std::uint64_t> max_processes;
    std::string max_memory;
    std::optional<double> max_cpu;
    std::optional<std::uint64_t> max_fds;
    std::string cow;
    std::string cow_storage;
    std::string on_exit;
    bool dry_run = false;
    std::string cwd;
    std::string audit;
    double timeout = 0;
    std::vector<std::string> argv;
};

SandboxSpec build_spec(const RunFlags &f)
{
    SandboxSpec spec = f.policy.empty() ? SandboxSpec{} : load_policy_file(f.policy);
    for (const auto &p : f.ro) spec.fs.rules.push_back({p, PathAccess::Read});
    for (const auto &p : f.rw) spec.fs.rules.push_back({p, PathAccess::Write});
    for (const auto &p : f.deny) spec.fs.rules.push_back({p, PathAccess::Deny});
    for (const auto &n : f.net) spec.net.endpoints.push_back(parse_net_flag(n));
    for (const auto &h : f.http) spec.net.http.push_back(parse_http_flag(h));
    if (f.max_processes) spec.resources.max_processes = *f.max_processes;
    if (!f.max_memory.empty()) spec.resources.max_memory = parse_size(f.max_memory);
    if (f.max_cpu) spec.resources.max_cpu = *f.max_cpu;
    if (f.max_fds) spec.resources.max_fds = *f.max_fds;
    if (!f.cow.empty()) {
        WorkspaceConfig ws = spec.fs.workspace.value_or(WorkspaceConfig{});
        ws.root = f.cow;
        if (!f.cow_storage.empty()) ws.storage = f.cow_storage;
        spec.fs.workspace = ws;
    }
    if (!f.on_exit.empty()) {
        if (f.on_exit == "commit") {
            spec.fs.on_exit = EffectAction::Commit;
        } else if (f.on_exit == "abort") {
            spec.fs.on_exit = EffectAction::Abort;
        } else {
            spec.fs.on_exit = EffectAction::Keep;
        }
    }
    if (!f.cwd.empty()) spec.cwd = f.cwd;
    return spec;
}

int child_code(const ExitStatus &status)
{
    return status.shell_code();
}

int harness_error(const std::exception &e)
{
    std::cerr << "lockbox: " << e.what() << "\n";
    if (auto *exec = dynamic_cast<const ExecError *>(&e)) {
        return exec->error_number() == ENOENT ? kExitNotFound : kExitNoExec;
    }
    if (auto *err = dynamic_cast<const Error *>(&e)) {
        switch (err->kind()) {
            case ErrorKind::KernelFloor: return kExitFloor;
            case ErrorKind::Validation:
            case ErrorKind::Policy:
            case ErrorKind::Resolution:
            case ErrorKind::Unsupported: return kExitPolicy;
            case ErrorKind::CommitConflict: return kExitConflict;
            default: return kExitInternal;
        }
    }
    return kExitInternal;
}

int cmd_run(const RunFlags &f)
{
    SandboxSpec spec = build_spec(f);
    Sandbox sandbox(spec);
    RunOptions options;
    options.env = host_env();
    options.dry_run = f.dry_run;
    if (!f.audit.empty()) options.audit_path = f.audit;
    if (f.timeout > 0) {
        options.timeout = std::chrono::milliseconds(static_cast<std::int64_t>(f.timeout * 1000));
    }
    install_forwarding();
    auto running = sandbox.start(f.argv, options);
    g_child = running->pid();
    RunResult result = running->wait();
    g_child = 0;
    if (result.effects && (f.dry_run || spec.fs.on_exit != EffectAction::Abort)) {
        std::cerr << result.effects->to_json() << "\n";
    }
    if (result.effects_error) {
        std::cerr << "lockbox: commit failed: " << *result.effects_error << "\n";
        return kExitConflict;
    }
    if (result.timed_out) {
        std::cerr << "lockbox: timed out\n";
        return kExitTimeout;
    }
    return child_code(result.status);
}

int cmd_check()
{
    FeatureReport report = check_kernel();
    for (const auto &line : report.lines()) std::cout << line << "\n";
    return report.landlock_abi >= 6 && report.seccomp_notify ? 0 : kExitFloor;
}

int cmd_pipeline(const std::string &path, const std::string &audit)
{
    auto docs = load_pipeline_file(path);
    std::vector<Stage> stages;
    for (auto &d : docs) stages.push_back(Stage{d.spec, d.cmd, {}});
    PipelineOptions options;
    options.env = host_env();
    options.stdin_spec = StdioSpec::from_fd(0);
    options.stdout_spec = StdioSpec::from_fd(1);
    PipelineResult result = run_pipeline(stages, options);
    int code = 0;
    for (std::size_t i = 0; i < result.stages.size(); i++) {
        const auto &s = result.stages[i];
        std::cerr << "stage " << i << ": " << s.status.shell_code() << "\n";
        if (!s.status.success()) code = s.status.shell_code();
    }
    if (!audit.empty()) {
        AuditLog log(audit);
        for (auto &s : result.stages) {
            for (auto &a : s.audits) log.append(a);
        }
    }
    return code;
}

// Index of the first command word after `run` and its options.
std::size_t split_command(const std::vector<std::string> &args)
{
    std::size_t i = 1;
    while (i < args.size()) {
        const std::string &a = args[i];
        if (a == "--" || a.empty() || a[0] != '-') return i;
        bool flag = a == "--dry-run" || a == "-h" || a == "--help";
        bool attached = a.size() > 2 && a[1] != '-';
        i += flag || attached || a.find('=') != std::string::npos ? 1 : 2;
    }
    return args.size();
}

} // namespace

int main(int argc, char **argv)
{
    CLI::App app{"lockbox: unprivileged process sandbox", "lockbox"};
    app.require_subcommand(1);

    RunFlags f;
    auto *run = app.add_subcommand("run", "Run a command in a sandbox");
    run->footer("Usage: lockbox run [OPTIONS] [--] COMMAND [ARGS...]");
    run->add_option("--policy", f.policy, "JSON policy file (flags extend it)");
    run->add_option("--ro", f.ro, "Readable path")->expected(1)->take_all();
    run->add_option("--rw", f.rw, "Writable path")->expected(1)->take_all();
    run->add_option("--deny", f.deny, "Denied path")->expected(1)->take_all();
    run->add_option("--net", f.net, "tcp:PORT or PROTO:HOST:PORT")->expected(1)->take_all();
    run->add_option("--http", f.http, "\"METHOD HOST PATHGLOB\"")->expected(1)->take_all();
    run->add_option("-P,--max-procs", f.max_processes, "Process limit");
    run->add_option("-m,--max-memory", f.max_memory, "Address-space limit (K/M/G)");
    run->add_option("--max-cpu", f.max_cpu, "CPU fraction (0,1]");
    run->add_option("--max-fds", f.max_fds, "Descriptor limit");
    run->add_option("--cow", f.cow, "Capture writes under DIR");
    run->add_option("--cow-storage", f.cow_storage, "Upper-layer storage directory");
    run->add_option("--on-exit", f.on_exit, "commit|abort|keep")
        ->check(CLI::IsMember({"commit", "abort", "keep"}));
    run->add_flag("--dry-run", f.dry_run, "Print the effect summary and discard it");
    run->add_option("--cwd", f.cwd, "Working directory");
    run->add_option("--audit", f.audit, "Audit log file (JSON lines)");
    run->add_option("--timeout", f.timeout, "Kill after SECONDS");

    app.add_subcommand("check", "Report kernel features");

    std::string pipeline_file, pipeline_audit;
    auto *pipeline = app.add_subcommand("pipeline", "Run a stage-list policy file");
    pipeline->add_option("file", pipeline_file, "Pipeline file")->required();
    pipeline->add_option("--audit", pipeline_audit, "Audit log file");

    std::vector<std::string> args(argv + 1, argv + argc);
    if (!args.empty() && args.front() == "run") {
        std::size_t split = split_command(args);
        f.argv.assign(args.begin() + static_cast<std::ptrdiff_t>(split), args.end());
        if (split < args.size() && args[split] == "--") f.argv.erase(f.argv.begin());
        args.resize(split);
    }
    std::reverse(args.begin(), args.end());

    try {
        app.parse(args);
    } catch (const CLI::ParseError &e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : kExitUsage;
    }

    try {
        if (*run) {
            if (f.argv.empty()) {
                std::cerr << "lockbox: run requires a command\n";
                return kExitUsage;
            }
            return cmd_run(f);
        }
        if (app.got_subcommand("check")) return cmd_check();
        if (*pipeline) return cmd_pipeline(pipeline_file, pipeline_audit);
    } catch (const ValidationError &e) {
        std::cerr << "lockbox: " << e.what() << "\n";
        return kExitPolicy;
    } catch (const std::exception &e) {
        return harness_error(e);
    }
    return kExitUsage;
}
