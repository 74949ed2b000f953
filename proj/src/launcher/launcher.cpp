#include "lockbox/launcher.hpp"
#include "lockbox/error.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/prctl.h>
#include <sys/stat.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <mutex>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lockbox {

namespace {

bool file_contains(const char *path, const std::string &needle)
{
    std::ifstream in(path);
    if (!in) return false;
    std::stringstream buf;
    buf << in.rdbuf();
    return buf.str().find(needle) != std::string::npos;
}

UniqueFd high_fd(int fd)
{
    // Keeps pipe ends clear of 0..2 so dup2 onto stdio never clobbers them.
    if (fd >= 3) return UniqueFd(fd);
    int moved = fcntl(fd, F_DUPFD_CLOEXEC, 3);
    int saved = errno;
    ::close(fd);
    if (moved < 0) throw_errno("F_DUPFD_CLOEXEC", saved);
    return UniqueFd(moved);
}

std::pair<UniqueFd, UniqueFd> make_pipe()
{
    int fds[2];
    if (pipe2(fds, O_CLOEXEC) < 0) throw_errno("pipe2");
    UniqueFd r = high_fd(fds[0]);
    UniqueFd w = high_fd(fds[1]);
    return {std::move(r), std::move(w)};
}

// Reads exactly `len` bytes unless EOF comes first; returns bytes read.
ssize_t read_full(int fd, void *buf, std::size_t len)
{
    std::size_t got = 0;
    while (got < len) {
        ssize_t n = ::read(fd, static_cast<char *>(buf) + got, len - got);
        if (n < 0 && errno == EINTR) continue;
        if (n < 0) return -1;
        if (n == 0) break;
        got += static_cast<std::size_t>(n);
    }
    return static_cast<ssize_t>(got);
}

const char *failure_step_name(int step)
{
    if (step < 0) return "stdio";
    return to_string(static_cast<Step>(step));
}

} // namespace

std::vector<std::string> FeatureReport::lines() const
{
    auto yn = [](bool b) { return b ? "supported" : "unsupported"; };
    std::vector<std::string> out;
    out.push_back("landlock-abi: " + std::to_string(landlock_abi));
    out.push_back(std::string("landlock-fs: ") + yn(fs_rules));
    out.push_back(std::string("landlock-tcp: ") + yn(tcp_port_rules));
    out.push_back(std::string("landlock-ipc-scope: ") + yn(ipc_scoping));
    out.push_back(std::string("seccomp-user-notify: ") + yn(seccomp_notify));
    out.push_back(std::string("pidfd-getfd: ") + yn(fd_transfer));
    out.push_back(std::string("ptrace: ") + yn(ptrace));
    return out;
}

FeatureReport check_kernel()
{
    FeatureReport report;
    report.landlock_abi = landlock_abi();
    report.fs_rules = report.landlock_abi >= 1;
    report.tcp_port_rules = report.landlock_abi >= 4;
    report.ipc_scoping = report.landlock_abi >= 6;
    report.seccomp_notify = file_contains("/proc/sys/kernel/seccomp/actions_avail", "user_notif");

    int self = sys_pidfd_open(getpid(), 0);
    if (self >= 0) {
        int dup = sys_pidfd_getfd(self, self);
        if (dup >= 0) {
            report.fd_transfer = true;
            ::close(dup);
        }
        ::close(self);
    }

    std::ifstream yama("/proc/sys/kernel/yama/ptrace_scope");
    int scope = 0;
    if (yama >> scope) {
        report.ptrace = scope <= 1;
    } else {
        report.ptrace = true;
    }
    return report;
}

std::string resolve_executable(const std::string &name, const std::vector<std::string> &env)
{
    if (name.find('/') != std::string::npos) return name;
    std::string path_var = "/usr/bin:/bin";
    for (const auto &entry : env) {
        if (entry.rfind("PATH=", 0) == 0) {
            path_var = entry.substr(5);
            break;
        }
    }
    std::stringstream dirs(path_var);
    std::string dir;
    while (std::getline(dirs, dir, ':')) {
        if (dir.empty()) continue;
        std::string candidate = dir + "/" + name;
        struct stat st {};
        if (::stat(candidate.c_str(), &st) == 0 && S_ISREG(st.st_mode) &&
            ::access(candidate.c_str(), X_OK) == 0) {
            return candidate;
        }
    }
    return name;
}

SandboxHandle::SandboxHandle(SandboxHandle &&other) noexcept
{
    *this = std::move(other);
}

SandboxHandle &SandboxHandle::operator=(SandboxHandle &&other) noexcept
{
    if (this != &other) {
        pid_ = std::exchange(other.pid_, -1);
        pidfd_ = std::move(other.pidfd_);
        for (int i = 0; i < 3; i++) pipes_[i] = std::move(other.pipes_[i]);
        started_at_ = other.started_at_;
        mutex_ = std::move(other.mutex_);
        status_ = std::move(other.status_);
    }
    return *this;
}

SandboxHandle::~SandboxHandle()
{
    if (pid_ > 0 && mutex_ && !status_) {
        kill_group(SIGKILL);
        reap();
    }
}

void SandboxHandle::kill_group(int sig) const noexcept
{
    if (pid_ > 0 && !status_) {
        ::kill(-pid_, sig);
    }
}

ExitStatus SandboxHandle::reap()
{
    siginfo_t info{};
    for (;;) {
        int rc = waitid(P_PID, static_cast<id_t>(pid_), &info, WEXITED | __WALL);
        if (rc == 0) break;
        if (errno == EINTR) continue;
        status_ = ExitStatus{true, 0, SIGKILL};
        return *status_;
    }
    ExitStatus status;
    if (info.si_code == CLD_EXITED) {
        status.code = info.si_status;
    } else {
        status.signaled = true;
        status.signal = info.si_status;
    }
    status_ = status;
    return status;
}

ExitStatus SandboxHandle::wait()
{
    std::lock_guard lock(*mutex_);
    if (status_) return *status_;
    if (pidfd_) {
        pollfd pfd{pidfd_.get(), POLLIN, 0};
        while (::poll(&pfd, 1, -1) < 0 && errno == EINTR) {
        }
    }
    kill_group(SIGKILL);
    return reap();
}

std::optional<ExitStatus> SandboxHandle::try_wait()
{
    std::lock_guard lock(*mutex_);
    if (status_) return status_;
    pollfd pfd{pidfd_.get(), POLLIN, 0};
    if (::poll(&pfd, 1, 0) <= 0) return std::nullopt;
    kill_group(SIGKILL);
    return reap();
}

SandboxHandle launch(const EnforcementPlan &plan, const LaunchRequest &request)
{
    // Writes into pipes whose sandboxed reader exited must fail with EPIPE
    // instead of killing the harness. Children reset dispositions before exec.
    static std::once_flag sigpipe_once;
    std::call_once(sigpipe_once, [] {
        struct sigaction old {};
        if (::sigaction(SIGPIPE, nullptr, &old) == 0 && old.sa_handler == SIG_DFL) {
            ::signal(SIGPIPE, SIG_IGN);
        }
    });
    int abi = request.landlock_abi ? *request.landlock_abi : landlock_abi();
    if (abi < kRequiredLandlockAbi) {
        throw Error(ErrorKind::KernelFloor,
                    "Landlock ABI " + std::to_string(abi) + " below required floor " +
                        std::to_string(kRequiredLandlockAbi));
    }
    if (request.argv.empty()) throw ValidationError("empty command");
    const bool want_listener = plan.has_supervisor_handlers();
    if (want_listener && !request.on_listener) {
        throw Error(ErrorKind::Launch, "plan needs a supervisor but none was attached");
    }

    UniqueFd ruleset = build_landlock_ruleset(plan, abi);
    std::vector<sock_filter> filter = build_seccomp_filter(plan.syscall_filter);
    sock_fprog prog{static_cast<unsigned short>(filter.size()), filter.data()};

    auto [sync_r, sync_w] = make_pipe();
    auto [ready_r, ready_w] = make_pipe();
    auto [err_r, err_w] = make_pipe();

    UniqueFd child_ends[3];
    UniqueFd parent_ends[3];
    ChildPlan cp;
    for (int i = 0; i < 3; i++) {
        const StdioSpec &spec = request.stdio[i];
        switch (spec.mode) {
            case StdioSpec::Mode::Inherit: break;
            case StdioSpec::Mode::Null: {
                int fd = ::open("/dev/null", O_RDWR | O_CLOEXEC);
                if (fd < 0) throw_errno("open /dev/null");
                child_ends[i] = high_fd(fd);
                cp.stdio[i] = child_ends[i].get();
                break;
            }
            case StdioSpec::Mode::Pipe: {
                auto [r, w] = make_pipe();
                if (i == 0) {
                    child_ends[i] = std::move(r);
                    parent_ends[i] = std::move(w);
                } else {
                    child_ends[i] = std::move(w);
                    parent_ends[i] = std::move(r);
                }
                cp.stdio[i] = child_ends[i].get();
                break;
            }
            case StdioSpec::Mode::Fd:
                if (spec.fd < 3 && spec.fd != i) {
                    int fd = fcntl(spec.fd, F_DUPFD_CLOEXEC, 3);
                    if (fd < 0) throw_errno("dup stdio");
                    child_ends[i] = UniqueFd(fd);
                    cp.stdio[i] = fd;
                } else {
                    cp.stdio[i] = spec.fd;
                }
                break;
        }
    }

    std::string path = resolve_executable(request.argv[0], request.env);
    std::vector<char *> argv;
    for (const auto &arg : request.argv) argv.push_back(const_cast<char *>(arg.c_str()));
    argv.push_back(nullptr);
    std::vector<char *> envp;
    for (const auto &entry : request.env) envp.push_back(const_cast<char *>(entry.c_str()));
    envp.push_back(nullptr);

    const auto &spec = plan.spec.spec;
    cp.cwd = spec.cwd ? spec.cwd->c_str() : nullptr;
    cp.ruleset_fd = ruleset.get();
    cp.filter = &prog;
    cp.want_listener = want_listener;
    cp.sync_fd = sync_w.get();
    cp.ready_fd = ready_r.get();
    cp.err_fd = err_w.get();
    if (spec.resources.max_fds) {
        cp.set_nofile = true;
        cp.nofile = static_cast<rlim_t>(*spec.resources.max_fds);
    }
    cp.path = path.c_str();
    cp.argv = argv.data();
    cp.envp = envp.data();

    StepLog *log = request.step_log;
    SandboxHandle handle;
    handle.started_at_ = std::chrono::steady_clock::now();
    pid_t pid = fork();
    if (pid < 0) throw_errno("fork");
    if (pid == 0) {
        RealChildKernel kernel;
        run_child_steps(kernel, cp, log);
        _exit(127);
    }
    handle.pid_ = pid;
    handle.pidfd_ = UniqueFd(sys_pidfd_open(pid, 0));
    for (int i = 0; i < 3; i++) {
        child_ends[i].reset();
        handle.pipes_[i] = std::move(parent_ends[i]);
    }
    sync_w.reset();
    ready_r.reset();
    err_w.reset();
    ruleset.reset();

    auto abort_child = [&]() {
        handle.kill_group(SIGKILL);
        ::kill(pid, SIGKILL);
        handle.reap();
    };
    auto child_failure = [&]() -> std::optional<ChildFailure> {
        ChildFailure failure{};
        if (read_full(err_r.get(), &failure, sizeof(failure)) == sizeof(failure)) return failure;
        return std::nullopt;
    };

    pollfd pfd{sync_r.get(), POLLIN, 0};
    int prc;
    do {
        prc = ::poll(&pfd, 1, static_cast<int>(request.handshake_timeout.count()));
    } while (prc < 0 && errno == EINTR);
    if (prc == 0) {
        abort_child();
        throw Error(ErrorKind::HandshakeTimeout, "sandbox handshake timed out");
    }
    std::int32_t listener_no = -1;
    if (read_full(sync_r.get(), &listener_no, sizeof(listener_no)) != sizeof(listener_no)) {
        auto failure = child_failure();
        abort_child();
        if (failure) {
            throw Error(ErrorKind::Launch, std::string("sandbox setup failed at ") +
                                               failure_step_name(failure->step) + ": " +
                                               std::strerror(failure->error));
        }
        throw Error(ErrorKind::Launch, "sandbox child exited during setup");
    }

    if (want_listener) {
        UniqueFd listener(handle.pidfd_ ? sys_pidfd_getfd(handle.pidfd_.get(), listener_no) : -1);
        if (!listener) {
            int saved = errno;
            abort_child();
            throw_errno("pidfd_getfd listener", saved);
        }
        if (log) log->record(Step::ParentReceivedListener);
        try {
            request.on_listener(std::move(listener), pid);
        } catch (...) {
            abort_child();
            throw;
        }
        if (log) log->record(Step::SupervisorStarted);
    }

    char ready = 1;
    if (log) log->record(Step::ReadySignaled);
    if (::write(ready_w.get(), &ready, 1) != 1) {
        auto failure = child_failure();
        abort_child();
        throw Error(ErrorKind::Launch, std::string("sandbox child vanished before ready") +
                                           (failure ? std::string(": ") + std::strerror(failure->error)
                                                    : std::string()));
    }
    ready_w.reset();

    if (auto failure = child_failure()) {
        abort_child();
        if (failure->step == static_cast<int>(Step::Exec)) {
            throw ExecError("cannot execute '" + path + "': " + std::strerror(failure->error),
                            failure->error);
        }
        throw Error(ErrorKind::Launch, std::string("sandbox setup failed at ") +
                                           failure_step_name(failure->step) + ": " +
                                           std::strerror(failure->error));
    }
    return handle;
}

void confine_self(const EnforcementPlan &plan)
{
    if (plan.has_supervisor_handlers()) {
        throw Error(ErrorKind::Policy,
                    "plan needs a supervisor; self-confinement can only apply static layers");
    }
    if (plan.spec.spec.resources.max_cpu) {
        throw Error(ErrorKind::Policy, "CPU throttling needs a separate parent process");
    }
    int abi = landlock_abi();
    if (abi < kRequiredLandlockAbi) {
        throw Error(ErrorKind::KernelFloor,
                    "Landlock ABI " + std::to_string(abi) + " below required floor " +
                        std::to_string(kRequiredLandlockAbi));
    }
    UniqueFd ruleset = build_landlock_ruleset(plan, abi);
    std::vector<sock_filter> filter = build_seccomp_filter(plan.syscall_filter);
    sock_fprog prog{static_cast<unsigned short>(filter.size()), filter.data()};

    if (prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) < 0) throw_errno("PR_SET_NO_NEW_PRIVS");
    if (int rc = landlock_restrict(ruleset.get()); rc < 0) throw_errno("landlock_restrict_self", -rc);
    if (int rc = install_seccomp_filter(prog, false); rc < 0) throw_errno("seccomp", -rc);
    if (auto limit = plan.spec.spec.resources.max_fds) {
        rlimit rl{static_cast<rlim_t>(*limit), static_cast<rlim_t>(*limit)};
        if (setrlimit(RLIMIT_NOFILE, &rl) < 0) throw_errno("setrlimit");
    }
}

} // namespace lockbox
