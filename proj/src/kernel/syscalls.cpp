#include "lockbox/syscalls.hpp"

#include <algorithm>
#include <array>

namespace lockbox {

namespace {

// x86_64 syscall numbers, generated from asm/unistd_64.h.
constexpr std::array kSyscalls = {
    SyscallInfo{0, "read"},
    SyscallInfo{1, "write"},
    SyscallInfo{2, "open"},
    SyscallInfo{3, "close"},
    SyscallInfo{4, "stat"},
    SyscallInfo{5, "fstat"},
    SyscallInfo{6, "lstat"},
    SyscallInfo{7, "poll"},
    SyscallInfo{8, "lseek"},
    SyscallInfo{9, "mmap"},
    SyscallInfo{10, "mprotect"},
    SyscallInfo{11, "munmap"},
    SyscallInfo{12, "brk"},
    SyscallInfo{13, "rt_sigaction"},
    SyscallInfo{14, "rt_sigprocmask"},
    SyscallInfo{15, "rt_sigreturn"},
    SyscallInfo{16, "ioctl"},
    SyscallInfo{17, "pread64"},
    SyscallInfo{18, "pwrite64"},
    SyscallInfo{19, "readv"},
    SyscallInfo{20, "writev"},
    SyscallInfo{21, "access"},
    SyscallInfo{22, "pipe"},
    SyscallInfo{23, "select"},
    SyscallInfo{24, "sched_yield"},
    SyscallInfo{25, "mremap"},
    SyscallInfo{26, "msync"},
    SyscallInfo{27, "mincore"},
    SyscallInfo{28, "madvise"},
    SyscallInfo{29, "shmget"},
    SyscallInfo{30, "shmat"},
    SyscallInfo{31, "shmctl"},
    SyscallInfo{32, "dup"},
    SyscallInfo{33, "dup2"},
    SyscallInfo{34, "pause"},
    SyscallInfo{35, "nanosleep"},
    SyscallInfo{36, "getitimer"},
    SyscallInfo{37, "alarm"},
    SyscallInfo{38, "setitimer"},
    SyscallInfo{39, "getpid"},
    SyscallInfo{40, "sendfile"},
    SyscallInfo{41, "socket"},
    SyscallInfo{42, "connect"},
    SyscallInfo{43, "accept"},
    SyscallInfo{44, "sendto"},
    SyscallInfo{45, "recvfrom"},
    SyscallInfo{46, "sendmsg"},
    SyscallInfo{47, "recvmsg"},
    SyscallInfo{48, "shutdown"},
    SyscallInfo{49, "bind"},
    SyscallInfo{50, "listen"},
    SyscallInfo{51, "getsockname"},
    SyscallInfo{52, "getpeername"},
    SyscallInfo{53, "socketpair"},
    SyscallInfo{54, "setsockopt"},
    SyscallInfo{55, "getsockopt"},
    SyscallInfo{56, "clone"},
    SyscallInfo{57, "fork"},
    SyscallInfo{58, "vfork"},
    SyscallInfo{59, "execve"},
    SyscallInfo{60, "exit"},
    SyscallInfo{61, "wait4"},
    SyscallInfo{62, "kill"},
    SyscallInfo{63, "uname"},
    SyscallInfo{64, "semget"},
    SyscallInfo{65, "semop"},
    SyscallInfo{66, "semctl"},
    SyscallInfo{67, "shmdt"},
    SyscallInfo{68, "msgget"},
    SyscallInfo{69, "msgsnd"},
    SyscallInfo{70, "msgrcv"},
    SyscallInfo{71, "msgctl"},
    SyscallInfo{72, "fcntl"},
    SyscallInfo{73, "flock"},
    SyscallInfo{74, "fsync"},
    SyscallInfo{75, "fdatasync"},
    SyscallInfo{76, "truncate"},
    SyscallInfo{77, "ftruncate"},
    SyscallInfo{78, "getdents"},
    SyscallInfo{79, "getcwd"},
    SyscallInfo{80, "chdir"},
    SyscallInfo{81, "fchdir"},
    SyscallInfo{82, "rename"},
    SyscallInfo{83, "mkdir"},
    SyscallInfo{84, "rmdir"},
    SyscallInfo{85, "creat"},
    SyscallInfo{86, "link"},
    SyscallInfo{87, "unlink"},
    SyscallInfo{88, "symlink"},
    SyscallInfo{89, "readlink"},
    SyscallInfo{90, "chmod"},
    SyscallInfo{91, "fchmod"},
    SyscallInfo{92, "chown"},
    SyscallInfo{93, "fchown"},
    SyscallInfo{94, "lchown"},
    SyscallInfo{95, "umask"},
    SyscallInfo{96, "gettimeofday"},
    SyscallInfo{97, "getrlimit"},
    SyscallInfo{98, "getrusage"},
    SyscallInfo{99, "sysinfo"},
    SyscallInfo{100, "times"},
    SyscallInfo{101, "ptrace"},
    SyscallInfo{102, "getuid"},
    SyscallInfo{103, "syslog"},
    SyscallInfo{104, "getgid"},
    SyscallInfo{105, "setuid"},
    SyscallInfo{106, "setgid"},
    SyscallInfo{107, "geteuid"},
    SyscallInfo{108, "getegid"},
    SyscallInfo{109, "setpgid"},
    SyscallInfo{110, "getppid"},
    SyscallInfo{111, "getpgrp"},
    SyscallInfo{112, "setsid"},
    SyscallInfo{113, "setreuid"},
    SyscallInfo{114, "setregid"},
    SyscallInfo{115, "getgroups"},
    SyscallInfo{116, "setgroups"},
    SyscallInfo{117, "setresuid"},
    SyscallInfo{118, "getresuid"},
    SyscallInfo{119, "setresgid"},
    SyscallInfo{120, "getresgid"},
    SyscallInfo{121, "getpgid"},
    SyscallInfo{122, "setfsuid"},
    SyscallInfo{123, "setfsgid"},
    SyscallInfo{124, "getsid"},
    SyscallInfo{125, "capget"},
    SyscallInfo{126, "capset"},
    SyscallInfo{127, "rt_sigpending"},
    SyscallInfo{128, "rt_sigtimedwait"},
    SyscallInfo{129, "rt_sigqueueinfo"},
    SyscallInfo{130, "rt_sigsuspend"},
    SyscallInfo{131, "sigaltstack"},
    SyscallInfo{132, "utime"},
    SyscallInfo{133, "mknod"},
    SyscallInfo{134, "uselib"},
    SyscallInfo{135, "personality"},
    SyscallInfo{136, "ustat"},
    SyscallInfo{137, "statfs"},
    SyscallInfo{138, "fstatfs"},
    SyscallInfo{139, "sysfs"},
    SyscallInfo{140, "getpriority"},
    SyscallInfo{141, "setpriority"},
    SyscallInfo{142, "sched_setparam"},
    SyscallInfo{143, "sched_getparam"},
    SyscallInfo{144, "sched_setscheduler"},
    SyscallInfo{145, "sched_getscheduler"},
    SyscallInfo{146, "sched_get_priority_max"},
    SyscallInfo{147, "sched_get_priority_min"},
    SyscallInfo{148, "sched_rr_get_interval"},
    SyscallInfo{149, "mlock"},
    SyscallInfo{150, "munlock"},
    SyscallInfo{151, "mlockall"},
    SyscallInfo{152, "munlockall"},
    SyscallInfo{153, "vhangup"},
    SyscallInfo{154, "modify_ldt"},
    SyscallInfo{155, "pivot_root"},
    SyscallInfo{156, "_sysctl"},
    SyscallInfo{157, "prctl"},
    SyscallInfo{158, "arch_prctl"},
    SyscallInfo{159, "adjtimex"},
    SyscallInfo{160, "setrlimit"},
    SyscallInfo{161, "chroot"},
    SyscallInfo{162, "sync"},
    SyscallInfo{163, "acct"},
    SyscallInfo{164, "settimeofday"},
    SyscallInfo{165, "mount"},
    SyscallInfo{166, "umount2"},
    SyscallInfo{167, "swapon"},
    SyscallInfo{168, "swapoff"},
    SyscallInfo{169, "reboot"},
    SyscallInfo{170, "sethostname"},
    SyscallInfo{171, "setdomainname"},
    SyscallInfo{172, "iopl"},
    SyscallInfo{173, "ioperm"},
    SyscallInfo{174, "create_module"},
    SyscallInfo{175, "init_module"},
    SyscallInfo{176, "delete_module"},
    SyscallInfo{177, "get_kernel_syms"},
    SyscallInfo{178, "query_module"},
    SyscallInfo{179, "quotactl"},
    SyscallInfo{180, "nfsservctl"},
    SyscallInfo{181, "getpmsg"},
    SyscallInfo{182, "putpmsg"},
    SyscallInfo{183, "afs_syscall"},
    SyscallInfo{184, "tuxcall"},
    SyscallInfo{185, "security"},
    SyscallInfo{186, "gettid"},
    SyscallInfo{187, "readahead"},
    SyscallInfo{188, "setxattr"},
    SyscallInfo{189, "lsetxattr"},
    SyscallInfo{190, "fsetxattr"},
    SyscallInfo{191, "getxattr"},
    SyscallInfo{192, "lgetxattr"},
    SyscallInfo{193, "fgetxattr"},
    SyscallInfo{194, "listxattr"},
    SyscallInfo{195, "llistxattr"},
    SyscallInfo{196, "flistxattr"},
    SyscallInfo{197, "removexattr"},
    SyscallInfo{198, "lremovexattr"},
    SyscallInfo{199, "fremovexattr"},
    SyscallInfo{200, "tkill"},
    SyscallInfo{201, "time"},
    SyscallInfo{202, "futex"},
    SyscallInfo{203, "sched_setaffinity"},
    SyscallInfo{204, "sched_getaffinity"},
    SyscallInfo{205, "set_thread_area"},
    SyscallInfo{206, "io_setup"},
    SyscallInfo{207, "io_destroy"},
    SyscallInfo{208, "io_getevents"},
    SyscallInfo{209, "io_submit"},
    SyscallInfo{210, "io_cancel"},
    SyscallInfo{211, "get_thread_area"},
    SyscallInfo{212, "lookup_dcookie"},
    SyscallInfo{213, "epoll_create"},
    SyscallInfo{214, "epoll_ctl_old"},
    SyscallInfo{215, "epoll_wait_old"},
    SyscallInfo{216, "remap_file_pages"},
    SyscallInfo{217, "getdents64"},
    SyscallInfo{218, "set_tid_address"},
    SyscallInfo{219, "restart_syscall"},
    SyscallInfo{220, "semtimedop"},
    SyscallInfo{221, "fadvise64"},
    SyscallInfo{222, "timer_create"},
    SyscallInfo{223, "timer_settime"},
    SyscallInfo{224, "timer_gettime"},
    SyscallInfo{225, "timer_getoverrun"},
    SyscallInfo{226, "timer_delete"},
    SyscallInfo{227, "clock_settime"},
    SyscallInfo{228, "clock_gettime"},
    SyscallInfo{229, "clock_getres"},
    SyscallInfo{230, "clock_nanosleep"},
    SyscallInfo{231, "exit_group"},
    SyscallInfo{232, "epoll_wait"},
    SyscallInfo{233, "epoll_ctl"},
    SyscallInfo{234, "tgkill"},
    SyscallInfo{235, "utimes"},
    SyscallInfo{236, "vserver"},
    SyscallInfo{237, "mbind"},
    SyscallInfo{238, "set_mempolicy"},
    SyscallInfo{239, "get_mempolicy"},
    SyscallInfo{240, "mq_open"},
    SyscallInfo{241, "mq_unlink"},
    SyscallInfo{242, "mq_timedsend"},
    SyscallInfo{243, "mq_timedreceive"},
    SyscallInfo{244, "mq_notify"},
    SyscallInfo{245, "mq_getsetattr"},
    SyscallInfo{246, "kexec_load"},
    SyscallInfo{247, "waitid"},
    SyscallInfo{248, "add_key"},
    SyscallInfo{249, "request_key"},
    SyscallInfo{250, "keyctl"},
    SyscallInfo{251, "ioprio_set"},
    SyscallInfo{252, "ioprio_get"},
    SyscallInfo{253, "inotify_init"},
    SyscallInfo{254, "inotify_add_watch"},
    SyscallInfo{255, "inotify_rm_watch"},
    SyscallInfo{256, "migrate_pages"},
    SyscallInfo{257, "openat"},
    SyscallInfo{258, "mkdirat"},
    SyscallInfo{259, "mknodat"},
    SyscallInfo{260, "fchownat"},
    SyscallInfo{261, "futimesat"},
    SyscallInfo{262, "newfstatat"},
    SyscallInfo{263, "unlinkat"},
    SyscallInfo{264, "renameat"},
    SyscallInfo{265, "linkat"},
    SyscallInfo{266, "symlinkat"},
    SyscallInfo{267, "readlinkat"},
    SyscallInfo{268, "fchmodat"},
    SyscallInfo{269, "faccessat"},
    SyscallInfo{270, "pselect6"},
    SyscallInfo{271, "ppoll"},
    SyscallInfo{272, "unshare"},
    SyscallInfo{273, "set_robust_list"},
    SyscallInfo{274, "get_robust_list"},
    SyscallInfo{275, "splice"},
    SyscallInfo{276, "tee"},
    SyscallInfo{277, "sync_file_range"},
    SyscallInfo{278, "vmsplice"},
    SyscallInfo{279, "move_pages"},
    SyscallInfo{280, "utimensat"},
    SyscallInfo{281, "epoll_pwait"},
    SyscallInfo{282, "signalfd"},
    SyscallInfo{283, "timerfd_create"},
    SyscallInfo{284, "eventfd"},
    SyscallInfo{285, "fallocate"},
    SyscallInfo{286, "timerfd_settime"},
    SyscallInfo{287, "timerfd_gettime"},
    SyscallInfo{288, "accept4"},
    SyscallInfo{289, "signalfd4"},
    SyscallInfo{290, "eventfd2"},
    SyscallInfo{291, "epoll_create1"},
    SyscallInfo{292, "dup3"},
    SyscallInfo{293, "pipe2"},
    SyscallInfo{294, "inotify_init1"},
    SyscallInfo{295, "preadv"},
    SyscallInfo{296, "pwritev"},
    SyscallInfo{297, "rt_tgsigqueueinfo"},
    SyscallInfo{298, "perf_event_open"},
    SyscallInfo{299, "recvmmsg"},
    SyscallInfo{300, "fanotify_init"},
    SyscallInfo{301, "fanotify_mark"},
    SyscallInfo{302, "prlimit64"},
    SyscallInfo{303, "name_to_handle_at"},
    SyscallInfo{304, "open_by_handle_at"},
    SyscallInfo{305, "clock_adjtime"},
    SyscallInfo{306, "syncfs"},
    SyscallInfo{307, "sendmmsg"},
    SyscallInfo{308, "setns"},
    SyscallInfo{309, "getcpu"},
    SyscallInfo{310, "process_vm_readv"},
    SyscallInfo{311, "process_vm_writev"},
    SyscallInfo{312, "kcmp"},
    SyscallInfo{313, "finit_module"},
    SyscallInfo{314, "sched_setattr"},
    SyscallInfo{315, "sched_getattr"},
    SyscallInfo{316, "renameat2"},
    SyscallInfo{317, "seccomp"},
    SyscallInfo{318, "getrandom"},
    SyscallInfo{319, "memfd_create"},
    SyscallInfo{320, "kexec_file_load"},
    SyscallInfo{321, "bpf"},
    SyscallInfo{322, "execveat"},
    SyscallInfo{323, "userfaultfd"},
    SyscallInfo{324, "membarrier"},
    SyscallInfo{325, "mlock2"},
    SyscallInfo{326, "copy_file_range"},
    SyscallInfo{327, "preadv2"},
    SyscallInfo{328, "pwritev2"},
    SyscallInfo{329, "pkey_mprotect"},
    SyscallInfo{330, "pkey_alloc"},
    SyscallInfo{331, "pkey_free"},
    SyscallInfo{332, "statx"},
    SyscallInfo{333, "io_pgetevents"},
    SyscallInfo{334, "rseq"},
    SyscallInfo{424, "pidfd_send_signal"},
    SyscallInfo{425, "io_uring_setup"},
    SyscallInfo{426, "io_uring_enter"},
    SyscallInfo{427, "io_uring_register"},
    SyscallInfo{428, "open_tree"},
    SyscallInfo{429, "move_mount"},
    SyscallInfo{430, "fsopen"},
    SyscallInfo{431, "fsconfig"},
    SyscallInfo{432, "fsmount"},
    SyscallInfo{433, "fspick"},
    SyscallInfo{434, "pidfd_open"},
    SyscallInfo{435, "clone3"},
    SyscallInfo{436, "close_range"},
    SyscallInfo{437, "openat2"},
    SyscallInfo{438, "pidfd_getfd"},
    SyscallInfo{439, "faccessat2"},
    SyscallInfo{440, "process_madvise"},
    SyscallInfo{441, "epoll_pwait2"},
    SyscallInfo{442, "mount_setattr"},
    SyscallInfo{443, "quotactl_fd"},
    SyscallInfo{444, "landlock_create_ruleset"},
    SyscallInfo{445, "landlock_add_rule"},
    SyscallInfo{446, "landlock_restrict_self"},
    SyscallInfo{447, "memfd_secret"},
    SyscallInfo{448, "process_mrelease"},
};

} // namespace

std::span<const SyscallInfo> known_syscalls()
{
    return kSyscalls;
}

std::string_view syscall_name(int number)
{
    auto it = std::find_if(kSyscalls.begin(), kSyscalls.end(),
                           [&](const SyscallInfo &info) { return info.number == number; });
    return it != kSyscalls.end() ? it->name : std::string_view("unknown");
}

std::optional<int> syscall_number(std::string_view name)
{
    auto it = std::find_if(kSyscalls.begin(), kSyscalls.end(),
                           [&](const SyscallInfo &info) { return info.name == name; });
    if (it == kSyscalls.end()) {
        return std::nullopt;
    }
    return it->number;
}

} // namespace lockbox
