#pragma once

#include <sys/types.h>

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

namespace lockbox {

// Small readers over /proc/<pid>.

// Close-on-exec flag of descriptor `fd` in task `pid`.
bool fd_cloexec(pid_t pid, int fd);
std::optional<std::string> proc_cwd(pid_t pid);
std::optional<std::string> proc_fd_path(pid_t pid, int fd);

// Lexically absolute form of `path` as seen by `pid` relative to `dirfd`
// (AT_FDCWD for the working directory). nullopt when the base is unknown.
std::optional<std::string> resolve_at(pid_t pid, int dirfd, const std::string &path);

struct ProcStat {
    pid_t pid = 0;
    char state = '?';
    pid_t ppid = 0;
    pid_t pgid = 0;
};

std::optional<ProcStat> read_proc_stat(pid_t pid);
std::optional<ProcStat> read_task_stat(pid_t pid, pid_t tid);

// Process ids (not threads) whose process group is `pgid`.
std::vector<pid_t> processes_in_group(pid_t pgid);
// Thread ids of process `pid`.
std::vector<pid_t> threads_of(pid_t pid);
// Thread-group id of task `tid`, 0 when gone.
pid_t tgid_of(pid_t tid);
// File-creation mask of `pid` (022 when unknown).
mode_t proc_umask(pid_t pid);
// VmSize of `pid` in bytes, 0 when gone.
std::uint64_t vm_size(pid_t pid);

} // namespace lockbox
