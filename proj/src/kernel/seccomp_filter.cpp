#include "lockbox/kernel.hpp"

#include <linux/audit.h>
#include <linux/seccomp.h>
#include <sys/prctl.h>
#include <sys/socket.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>
#include <cstddef>

namespace lockbox {

namespace {

constexpr std::uint32_t kX32SyscallBit = 0x40000000;

sock_filter stmt(std::uint16_t code, std::uint32_t k)
{
    return sock_filter{code, 0, 0, k};
}

sock_filter jump(std::uint16_t code, std::uint32_t k, std::uint8_t jt, std::uint8_t jf)
{
    return sock_filter{code, jt, jf, k};
}

std::uint32_t ret_errno(int err)
{
    return SECCOMP_RET_ERRNO | (static_cast<std::uint32_t>(err) & SECCOMP_RET_DATA);
}

} // namespace

std::vector<sock_filter> build_seccomp_filter(const SyscallFilterSpec &spec)
{
    std::vector<sock_filter> prog;
    prog.push_back(stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, arch)));
    prog.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, AUDIT_ARCH_X86_64, 1, 0));
    prog.push_back(stmt(BPF_RET | BPF_K, SECCOMP_RET_KILL_PROCESS));
    prog.push_back(stmt(BPF_LD | BPF_W | BPF_ABS, offsetof(seccomp_data, nr)));
    prog.push_back(jump(BPF_JMP | BPF_JGE | BPF_K, kX32SyscallBit, 0, 1));
    prog.push_back(stmt(BPF_RET | BPF_K, ret_errno(EPERM)));

    // socket(): refuse packet sockets and, unless datagram rules exist,
    // non-stream inet sockets (Landlock only governs TCP).
    std::vector<sock_filter> socket_block;
    const std::uint32_t args0 = offsetof(seccomp_data, args[0]);
    const std::uint32_t args1 = offsetof(seccomp_data, args[1]);
    socket_block.push_back(stmt(BPF_LD | BPF_W | BPF_ABS, args0));
    socket_block.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, AF_PACKET, 0, 1));
    socket_block.push_back(stmt(BPF_RET | BPF_K, ret_errno(EACCES)));
    if (spec.allow_inet_datagram) {
        socket_block.push_back(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
    } else {
        socket_block.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, AF_INET, 2, 0));
        socket_block.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, AF_INET6, 1, 0));
        socket_block.push_back(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
        socket_block.push_back(stmt(BPF_LD | BPF_W | BPF_ABS, args1));
        socket_block.push_back(stmt(BPF_ALU | BPF_AND | BPF_K, 0xf));
        socket_block.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, SOCK_STREAM, 0, 1));
        socket_block.push_back(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
        socket_block.push_back(stmt(BPF_RET | BPF_K, ret_errno(EACCES)));
    }
    prog.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, SYS_socket, 0,
                        static_cast<std::uint8_t>(socket_block.size())));
    prog.insert(prog.end(), socket_block.begin(), socket_block.end());

    for (const auto &[nr, err] : spec.deny) {
        if (spec.notify.count(nr)) continue;
        prog.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, static_cast<std::uint32_t>(nr), 0, 1));
        prog.push_back(stmt(BPF_RET | BPF_K, ret_errno(err)));
    }
    for (int nr : spec.notify) {
        prog.push_back(jump(BPF_JMP | BPF_JEQ | BPF_K, static_cast<std::uint32_t>(nr), 0, 1));
        prog.push_back(stmt(BPF_RET | BPF_K, SECCOMP_RET_USER_NOTIF));
    }
    prog.push_back(stmt(BPF_RET | BPF_K, SECCOMP_RET_ALLOW));
    return prog;
}

int install_seccomp_filter(const sock_fprog &prog, bool listener)
{
    unsigned flags = listener ? (kSeccompFlagNewListener | kSeccompFlagWaitKillableRecv) : 0;
    long rc = syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, flags, &prog);
    if (rc < 0 && listener && errno == EINVAL) {
        // Kernels before 5.19 lack WAIT_KILLABLE_RECV.
        rc = syscall(SYS_seccomp, SECCOMP_SET_MODE_FILTER, kSeccompFlagNewListener, &prog);
    }
    if (rc < 0) return -errno;
    return static_cast<int>(rc);
}

int sys_pidfd_open(pid_t pid, unsigned flags)
{
    long rc = syscall(SYS_pidfd_open, pid, flags);
    return rc < 0 ? -1 : static_cast<int>(rc);
}

int sys_pidfd_getfd(int pidfd, int target_fd)
{
    long rc = syscall(SYS_pidfd_getfd, pidfd, target_fd, 0);
    return rc < 0 ? -1 : static_cast<int>(rc);
}

int sys_close_range(unsigned first, unsigned last, unsigned flags)
{
    long rc = syscall(SYS_close_range, first, last, flags);
    return rc < 0 ? -1 : 0;
}

} // namespace lockbox
