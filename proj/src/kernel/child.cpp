#include "lockbox/error.hpp"
#include "lockbox/kernel.hpp"

#include <fcntl.h>
#include <signal.h>
#include <sys/mman.h>
#include <sys/prctl.h>
#include <sys/resource.h>
#include <unistd.h>

#include <cerrno>
#include <climits>

namespace lockbox {

const char *to_string(Step step)
{
    switch (step) {
        case Step::ProcessGroup: return "process-group";
        case Step::Chdir: return "chdir";
        case Step::NoNewPrivs: return "no-new-privs";
        case Step::Landlock: return "landlock";
        case Step::SyscallFilter: return "syscall-filter";
        case Step::SendListener: return "send-listener";
        case Step::ParentReceivedListener: return "parent-received-listener";
        case Step::SupervisorStarted: return "supervisor-started";
        case Step::ReadySignaled: return "ready-signaled";
        case Step::ReadyReceived: return "ready-received";
        case Step::FdLimit: return "fd-limit";
        case Step::CloseFds: return "close-fds";
        case Step::Exec: return "exec";
    }
    return "?";
}

StepLog::StepLog()
{
    void *mem = mmap(nullptr, sizeof(Shared), PROT_READ | PROT_WRITE, MAP_SHARED | MAP_ANONYMOUS,
                     -1, 0);
    if (mem == MAP_FAILED) throw_errno("mmap step log");
    shared_ = new (mem) Shared{};
}

StepLog::~StepLog()
{
    munmap(shared_, sizeof(Shared));
}

void StepLog::record(Step step) noexcept
{
    std::uint32_t index = shared_->count.fetch_add(1, std::memory_order_acq_rel);
    if (index < std::size(shared_->entries)) {
        shared_->entries[index] = step;
    }
}

std::vector<Step> StepLog::steps() const
{
    std::uint32_t n = shared_->count.load(std::memory_order_acquire);
    if (n > std::size(shared_->entries)) n = std::size(shared_->entries);
    return std::vector<Step>(shared_->entries, shared_->entries + n);
}

void StepLog::clear() noexcept
{
    shared_->count.store(0, std::memory_order_release);
}

int run_child_steps(ChildKernel &kernel, const ChildPlan &plan, StepLog *log) noexcept
{
    auto fail = [&](int step, int rc) {
        kernel.report_failure(plan.err_fd, ChildFailure{step, rc < 0 ? -rc : rc});
        return -1;
    };
    auto done = [&](Step step) {
        if (log) log->record(step);
    };
    int rc;

    if ((rc = kernel.setup_stdio(plan.stdio)) < 0) return fail(-1, rc);

    if ((rc = kernel.set_process_group()) < 0) return fail(int(Step::ProcessGroup), rc);
    done(Step::ProcessGroup);

    if (plan.cwd) {
        if ((rc = kernel.change_dir(plan.cwd)) < 0) return fail(int(Step::Chdir), rc);
        done(Step::Chdir);
    }

    if ((rc = kernel.set_no_new_privs()) < 0) return fail(int(Step::NoNewPrivs), rc);
    done(Step::NoNewPrivs);

    if (plan.ruleset_fd >= 0) {
        if ((rc = kernel.landlock_restrict(plan.ruleset_fd)) < 0) return fail(int(Step::Landlock), rc);
        done(Step::Landlock);
    }

    int listener = -1;
    if (plan.filter) {
        if ((rc = kernel.install_filter(plan.filter, plan.want_listener)) < 0) {
            return fail(int(Step::SyscallFilter), rc);
        }
        if (plan.want_listener) listener = rc;
        done(Step::SyscallFilter);
    }

    if ((rc = kernel.send_listener(plan.sync_fd, listener)) < 0) {
        return fail(int(Step::SendListener), rc);
    }
    done(Step::SendListener);

    if ((rc = kernel.wait_ready(plan.ready_fd)) < 0) return fail(int(Step::ReadyReceived), rc);
    done(Step::ReadyReceived);

    if (plan.set_nofile) {
        if ((rc = kernel.set_fd_limit(plan.nofile)) < 0) return fail(int(Step::FdLimit), rc);
        done(Step::FdLimit);
    }

    if ((rc = kernel.reset_signals()) < 0) return fail(int(Step::CloseFds), rc);
    if ((rc = kernel.close_fds(plan.err_fd)) < 0) return fail(int(Step::CloseFds), rc);
    done(Step::CloseFds);

    done(Step::Exec);
    if ((rc = kernel.exec(plan.path, plan.argv, plan.envp)) < 0) return fail(int(Step::Exec), rc);
    return 0;
}

int RealChildKernel::setup_stdio(const int stdio[3])
{
    for (int i = 0; i < 3; i++) {
        if (stdio[i] < 0) continue;
        if (stdio[i] == i) {
            int flags = fcntl(i, F_GETFD);
            if (flags < 0 || fcntl(i, F_SETFD, flags & ~FD_CLOEXEC) < 0) return -errno;
        } else if (dup2(stdio[i], i) < 0) {
            return -errno;
        }
    }
    return 0;
}

int RealChildKernel::set_process_group()
{
    return setpgid(0, 0) < 0 ? -errno : 0;
}

int RealChildKernel::change_dir(const char *path)
{
    return chdir(path) < 0 ? -errno : 0;
}

int RealChildKernel::set_no_new_privs()
{
    return prctl(PR_SET_NO_NEW_PRIVS, 1, 0, 0, 0) < 0 ? -errno : 0;
}

int RealChildKernel::landlock_restrict(int ruleset_fd)
{
    return lockbox::landlock_restrict(ruleset_fd);
}

int RealChildKernel::install_filter(const sock_fprog *prog, bool listener)
{
    return install_seccomp_filter(*prog, listener);
}

int RealChildKernel::send_listener(int sync_fd, int listener)
{
    std::int32_t value = listener;
    ssize_t n;
    do {
        n = write(sync_fd, &value, sizeof(value));
    } while (n < 0 && errno == EINTR);
    if (n != sizeof(value)) return n < 0 ? -errno : -EPIPE;
    return 0;
}

int RealChildKernel::wait_ready(int ready_fd)
{
    char byte;
    ssize_t n;
    do {
        n = read(ready_fd, &byte, 1);
    } while (n < 0 && errno == EINTR);
    if (n != 1) return n < 0 ? -errno : -EPIPE;
    return 0;
}

int RealChildKernel::set_fd_limit(rlim_t limit)
{
    rlimit rl{limit, limit};
    rlimit current{};
    if (getrlimit(RLIMIT_NOFILE, &current) == 0 && current.rlim_max < limit) {
        rl.rlim_cur = rl.rlim_max = current.rlim_max;
    }
    return setrlimit(RLIMIT_NOFILE, &rl) < 0 ? -errno : 0;
}

int RealChildKernel::close_fds(int keep)
{
    if (keep < 3) return sys_close_range(3, UINT_MAX, 0) < 0 ? -errno : 0;
    if (keep > 3 && sys_close_range(3, static_cast<unsigned>(keep - 1), 0) < 0) return -errno;
    if (sys_close_range(static_cast<unsigned>(keep + 1), UINT_MAX, 0) < 0) return -errno;
    return 0;
}

int RealChildKernel::reset_signals()
{
    struct sigaction dfl {};
    dfl.sa_handler = SIG_DFL;
    for (int sig = 1; sig < NSIG; sig++) {
        if (sig == SIGKILL || sig == SIGSTOP) continue;
        sigaction(sig, &dfl, nullptr);
    }
    sigset_t empty;
    sigemptyset(&empty);
    return sigprocmask(SIG_SETMASK, &empty, nullptr) < 0 ? -errno : 0;
}

int RealChildKernel::exec(const char *path, char *const *argv, char *const *envp)
{
    execve(path, argv, envp);
    return -errno;
}

void RealChildKernel::report_failure(int err_fd, const ChildFailure &failure)
{
    if (err_fd < 0) return;
    ssize_t n;
    do {
        n = write(err_fd, &failure, sizeof(failure));
    } while (n < 0 && errno == EINTR);
}

} // namespace lockbox
