#pragma once

#include "lockbox/plan.hpp"
#include "lockbox/unique_fd.hpp"

#include <linux/filter.h>
#include <sys/resource.h>
#include <sys/types.h>

#include <atomic>
#include <cstdint>
#include <vector>

namespace lockbox {

// ---- Landlock -------------------------------------------------------------

// Highest Landlock ABI the running kernel supports, 0 when unavailable.
int landlock_abi();

inline constexpr int kRequiredLandlockAbi = 6;

// Filesystem rights the given ABI can handle.
std::uint64_t landlock_handled_fs(int abi);

// Builds a ruleset fd from the plan's static layer. Paths that do not exist
// are skipped; they are reported through `skipped` when non-null.
UniqueFd build_landlock_ruleset(const EnforcementPlan &plan, int abi,
                                std::vector<std::string> *skipped = nullptr);

// landlock_restrict_self on the calling thread.
int landlock_restrict(int ruleset_fd);

// ---- seccomp --------------------------------------------------------------

std::vector<sock_filter> build_seccomp_filter(const SyscallFilterSpec &spec);

inline constexpr unsigned kSeccompFlagNewListener = 1u << 3;
inline constexpr unsigned kSeccompFlagWaitKillableRecv = 1u << 5;

// Installs a filter on the calling thread; returns the listener fd when
// `listener` is set, 0 otherwise, -errno on failure.
int install_seccomp_filter(const sock_fprog &prog, bool listener);

// ---- child side of the launch protocol -----------------------------------

enum class Step : std::uint8_t {
    ProcessGroup,
    Chdir,
    NoNewPrivs,
    Landlock,
    SyscallFilter,
    SendListener,
    ParentReceivedListener,
    SupervisorStarted,
    ReadySignaled,
    ReadyReceived,
    FdLimit,
    CloseFds,
    Exec,
};

const char *to_string(Step step);

// Append-only step log in a shared anonymous mapping, so the parent and the
// forked child record into one monotonic sequence.
class StepLog {
public:
    StepLog();
    ~StepLog();
    StepLog(const StepLog &) = delete;
    StepLog &operator=(const StepLog &) = delete;

    // Async-signal-safe.
    void record(Step step) noexcept;
    std::vector<Step> steps() const;
    void clear() noexcept;

private:
    struct Shared {
        std::atomic<std::uint32_t> count;
        Step entries[128];
    };
    Shared *shared_;
};

// Everything the child needs, prepared before fork.
struct ChildPlan {
    int stdio[3] = {-1, -1, -1}; // -1 inherits
    const char *cwd = nullptr;
    int ruleset_fd = -1;
    const sock_fprog *filter = nullptr;
    bool want_listener = false;
    int sync_fd = -1;  // child -> parent: listener fd number
    int ready_fd = -1; // parent -> child: one ready byte
    int err_fd = -1;   // child -> parent: failure record, CLOEXEC
    bool set_nofile = false;
    rlim_t nofile = 0;
    const char *path = nullptr;
    char *const *argv = nullptr;
    char *const *envp = nullptr;
};

struct ChildFailure {
    std::int32_t step;
    std::int32_t error;
};

// Narrow kernel boundary for the child steps. The real implementation issues
// raw syscalls and must stay async-signal-safe.
class ChildKernel {
public:
    virtual ~ChildKernel() = default;

    virtual int setup_stdio(const int stdio[3]) = 0;
    virtual int set_process_group() = 0;
    virtual int change_dir(const char *path) = 0;
    virtual int set_no_new_privs() = 0;
    virtual int landlock_restrict(int ruleset_fd) = 0;
    virtual int install_filter(const sock_fprog *prog, bool listener) = 0;
    virtual int send_listener(int sync_fd, int listener) = 0;
    virtual int wait_ready(int ready_fd) = 0;
    virtual int set_fd_limit(rlim_t limit) = 0;
    virtual int close_fds(int keep) = 0;
    virtual int reset_signals() = 0;
    virtual int exec(const char *path, char *const *argv, char *const *envp) = 0;
    virtual void report_failure(int err_fd, const ChildFailure &failure) = 0;
};

// Runs the ordered child steps. Returns 0 when exec "returned" success (fake
// kernels only) and -1 after reporting a failure.
int run_child_steps(ChildKernel &kernel, const ChildPlan &plan, StepLog *log) noexcept;

class RealChildKernel final : public ChildKernel {
public:
    int setup_stdio(const int stdio[3]) override;
    int set_process_group() override;
    int change_dir(const char *path) override;
    int set_no_new_privs() override;
    int landlock_restrict(int ruleset_fd) override;
    int install_filter(const sock_fprog *prog, bool listener) override;
    int send_listener(int sync_fd, int listener) override;
    int wait_ready(int ready_fd) override;
    int set_fd_limit(rlim_t limit) override;
    int close_fds(int keep) override;
    int reset_signals() override;
    int exec(const char *path, char *const *argv, char *const *envp) override;
    void report_failure(int err_fd, const ChildFailure &failure) override;
};

// ---- small syscall wrappers ----------------------------------------------

int sys_pidfd_open(pid_t pid, unsigned flags);
int sys_pidfd_getfd(int pidfd, int target_fd);
int sys_close_range(unsigned first, unsigned last, unsigned flags);

} // namespace lockbox
