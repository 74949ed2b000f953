#include "lockbox/plan.hpp"

#include <sys/syscall.h>

#include <algorithm>
#include <cerrno>
#include <filesystem>

namespace fs = std::filesystem;

namespace lockbox {

const char *to_string(HandlerId id)
{
    switch (id) {
        case HandlerId::ProcessGate: return "process-gate";
        case HandlerId::MemoryAccount: return "memory-account";
        case HandlerId::NetConnect: return "net-connect";
        case HandlerId::NetSend: return "net-send";
        case HandlerId::NetBind: return "net-bind";
        case HandlerId::CowOpen: return "cow-open";
        case HandlerId::CowMutate: return "cow-mutate";
        case HandlerId::CowDirents: return "cow-dirents";
        case HandlerId::CowStat: return "cow-stat";
        case HandlerId::HookExec: return "hook-exec";
        case HandlerId::FileOpen: return "file-open";
    }
    return "?";
}

const char *to_string(Layer layer)
{
    switch (layer) {
        case Layer::StaticFs: return "static-fs";
        case Layer::StaticTcpPorts: return "static-tcp-ports";
        case Layer::StaticIpc: return "static-ipc";
        case Layer::SyscallFilter: return "syscall-filter";
        case Layer::Supervisor: return "supervisor";
        case Layer::ProcessAttributes: return "process-attributes";
    }
    return "?";
}

const char *to_string(FlowPath path)
{
    switch (path) {
        case FlowPath::Direct: return "direct";
        case FlowPath::HttpProxied: return "http_proxied";
        case FlowPath::OnBehalfRaw: return "on_behalf_raw";
        case FlowPath::Denied: return "denied";
    }
    return "?";
}

const std::map<int, int> &default_deny_set()
{
    static const std::map<int, int> set = [] {
        std::map<int, int> m;
        const int numbers[] = {
            // debugging and cross-process memory access
            SYS_ptrace, SYS_process_vm_readv, SYS_process_vm_writev, SYS_userfaultfd,
            SYS_pidfd_getfd,
            // host administration
            SYS_kexec_load, SYS_kexec_file_load, SYS_reboot, SYS_swapon, SYS_swapoff, SYS_iopl,
            SYS_ioperm, SYS_acct, SYS_syslog, SYS_uselib, SYS_vhangup, SYS_settimeofday,
            SYS_clock_settime, SYS_clock_adjtime, SYS_adjtimex, SYS_quotactl, SYS_quotactl_fd,
            SYS_lookup_dcookie,
            // mounts and namespaces
            SYS_mount, SYS_umount2, SYS_pivot_root, SYS_fsopen, SYS_fsmount, SYS_fsconfig,
            SYS_fspick, SYS_move_mount, SYS_open_tree, SYS_mount_setattr, SYS_setns, SYS_unshare,
            // kernel extension surfaces
            SYS_init_module, SYS_finit_module, SYS_delete_module, SYS_bpf, SYS_perf_event_open,
            SYS_keyctl, SYS_add_key, SYS_request_key, SYS_open_by_handle_at,
            SYS_name_to_handle_at, SYS_io_uring_setup, SYS_io_uring_enter,
            SYS_io_uring_register,
            // leaving the sandbox process group
            SYS_setsid, SYS_setpgid,
            // root-only escape hatches
            SYS_chroot,
        };
        for (int nr : numbers) m[nr] = EPERM;
        return m;
    }();
    return set;
}

bool EnforcementPlan::routes(HandlerId id) const
{
    return std::any_of(supervisor_handlers.begin(), supervisor_handlers.end(),
                       [id](const auto &entry) { return entry.second == id; });
}

namespace {

struct Restriction {
    std::string path;
    std::uint64_t removed;
};

bool is_directory(const std::string &path)
{
    std::error_code ec;
    return fs::is_directory(fs::symlink_status(path, ec));
}

class GrantBuilder {
public:
    void emit(const std::string &path, std::uint64_t access)
    {
        std::error_code ec;
        auto status = fs::status(path, ec);
        if (!ec && !fs::is_directory(status)) access &= fs_access::FileOnly;
        if (access == 0) return;
        grants_[path] |= access;
    }

    // Grants `access` over `dir` except where restrictions below it remove bits.
    // The directory gets the bits no restriction removes; its children are
    // granted individually so that rights stop at the restricted node.
    void expand(const std::string &dir, std::uint64_t access, const std::vector<Restriction> &inner)
    {
        std::uint64_t removed_below = 0;
        for (const auto &r : inner) {
            removed_below |= is_directory(r.path) ? r.removed : r.removed & ~fs_access::ReadDir;
        }
        emit(dir, access & ~removed_below);

        std::error_code ec;
        fs::directory_iterator it(dir, fs::directory_options::skip_permission_denied, ec);
        if (ec) return;
        std::vector<std::string> children;
        for (const auto &entry : it) children.push_back(entry.path().string());
        std::sort(children.begin(), children.end());

        for (const auto &child : children) {
            std::uint64_t child_access = access;
            std::vector<Restriction> child_inner;
            bool touched = false;
            for (const auto &r : inner) {
                if (r.path == child) {
                    child_access &= ~r.removed;
                    touched = true;
                } else if (path_has_prefix(r.path, child)) {
                    child_inner.push_back(r);
                    touched = true;
                }
            }
            if (!touched) {
                std::error_code lec;
                if (fs::is_symlink(fs::symlink_status(child, lec))) continue;
                emit(child, access);
                continue;
            }
            if (child_access == 0) continue;
            if (child_inner.empty() || !is_directory(child)) {
                emit(child, child_access);
            } else {
                expand(child, child_access, child_inner);
            }
        }
    }

    std::vector<FsGrant> finish() const
    {
        std::vector<FsGrant> out;
        for (const auto &[path, access] : grants_) out.push_back(FsGrant{path, access});
        return out;
    }

private:
    std::map<std::string, std::uint64_t> grants_;
};

std::vector<FsGrant> compile_static_fs(const SandboxSpec &spec)
{
    std::vector<Restriction> restrictions;
    std::vector<std::pair<std::string, std::uint64_t>> grants;
    for (const auto &rule : spec.fs.rules) {
        switch (rule.access) {
            case PathAccess::Deny: restrictions.push_back({rule.path, fs_access::All}); break;
            case PathAccess::Read: grants.emplace_back(rule.path, fs_access::Read); break;
            case PathAccess::Write: grants.emplace_back(rule.path, fs_access::All); break;
        }
    }
    if (spec.fs.workspace) {
        restrictions.push_back({spec.fs.workspace->root, fs_access::Write});
        grants.emplace_back(spec.fs.workspace->root, fs_access::Read);
    }

    GrantBuilder builder;
    for (auto [path, access] : grants) {
        std::vector<Restriction> inner;
        for (const auto &r : restrictions) {
            if (path_has_prefix(path, r.path)) {
                access &= ~r.removed;
            } else if (path_has_prefix(r.path, path)) {
                inner.push_back(r);
            }
        }
        if (access == 0) continue;
        if (inner.empty() || !is_directory(path)) {
            builder.emit(path, access);
        } else {
            builder.expand(path, access, inner);
        }
    }
    return builder.finish();
}

bool needs_on_behalf_network(const SandboxSpec &spec)
{
    if (!spec.net.http.empty() || spec.runtime.enabled) return true;
    return std::any_of(spec.net.endpoints.begin(), spec.net.endpoints.end(), [](const auto &rule) {
        return rule.protocol != Protocol::Tcp || !rule.port_only;
    });
}

} // namespace

EnforcementPlan compile(const NormalizedSpec &normalized, const PinnedAllowlist &pins)
{
    const SandboxSpec &spec = normalized.spec;
    EnforcementPlan plan;
    plan.spec = normalized;
    plan.pins = pins;
    plan.static_fs = compile_static_fs(spec);

    auto assign = [&](RuleRef::Domain domain, std::size_t index, Layer layer) {
        plan.assignments.push_back(RuleAssignment{RuleRef{domain, index}, layer});
    };
    auto route = [&](std::initializer_list<int> numbers, HandlerId id) {
        for (int nr : numbers) {
            plan.supervisor_handlers[nr] = id;
            plan.syscall_filter.notify.insert(nr);
        }
    };

    for (std::size_t i = 0; i < spec.fs.rules.size(); i++) {
        assign(RuleRef::Domain::Path, i, Layer::StaticFs);
    }

    plan.tcp_direct = !needs_on_behalf_network(spec);
    for (std::size_t i = 0; i < spec.net.endpoints.size(); i++) {
        const auto &rule = spec.net.endpoints[i];
        if (plan.tcp_direct) {
            plan.static_tcp_ports.insert(*rule.port);
            assign(RuleRef::Domain::Endpoint, i, Layer::StaticTcpPorts);
        } else {
            assign(RuleRef::Domain::Endpoint, i, Layer::Supervisor);
        }
    }
    for (std::size_t i = 0; i < spec.net.http.size(); i++) {
        assign(RuleRef::Domain::Http, i, Layer::Supervisor);
    }
    if (!plan.tcp_direct) {
        route({SYS_connect}, HandlerId::NetConnect);
        route({SYS_sendto, SYS_sendmsg, SYS_sendmmsg}, HandlerId::NetSend);
        route({SYS_bind}, HandlerId::NetBind);
    }
    plan.syscall_filter.allow_inet_datagram =
        std::any_of(spec.net.endpoints.begin(), spec.net.endpoints.end(),
                    [](const auto &rule) { return rule.protocol != Protocol::Tcp; });

    plan.static_ipc = StaticIpc{};
    assign(RuleRef::Domain::Ipc, 0, Layer::StaticIpc);

    plan.syscall_filter.deny = default_deny_set();
    plan.syscall_filter.deny_set_version = kDefaultDenySetVersion;

    const auto &res = spec.resources;
    if (res.max_processes || spec.runtime.enabled) {
        route({SYS_clone, SYS_clone3, SYS_fork, SYS_vfork}, HandlerId::ProcessGate);
    }
    if (res.max_processes) assign(RuleRef::Domain::Limit, 0, Layer::Supervisor);
    if (res.max_memory) {
        route({SYS_mmap, SYS_munmap, SYS_mremap, SYS_brk, SYS_shmget}, HandlerId::MemoryAccount);
        assign(RuleRef::Domain::Limit, 1, Layer::Supervisor);
    }
    if (res.max_cpu) assign(RuleRef::Domain::Limit, 2, Layer::ProcessAttributes);
    if (res.max_fds) assign(RuleRef::Domain::Limit, 3, Layer::ProcessAttributes);

    if (spec.fs.workspace) {
        route({SYS_open, SYS_openat, SYS_creat}, HandlerId::CowOpen);
        route({SYS_unlink, SYS_unlinkat, SYS_rmdir, SYS_mkdir, SYS_mkdirat, SYS_rename,
               SYS_renameat, SYS_renameat2, SYS_symlink, SYS_symlinkat, SYS_link, SYS_linkat,
               SYS_mknod, SYS_mknodat, SYS_truncate, SYS_chmod, SYS_fchmodat, SYS_chown,
               SYS_lchown, SYS_fchownat, SYS_utimensat, SYS_utime, SYS_utimes, SYS_futimesat,
               SYS_fchmod, SYS_fchown},
              HandlerId::CowMutate);
        route({SYS_getdents64, SYS_getdents}, HandlerId::CowDirents);
        route({SYS_stat, SYS_lstat, SYS_newfstatat, SYS_statx, SYS_access, SYS_faccessat,
               SYS_faccessat2, SYS_readlink, SYS_readlinkat},
              HandlerId::CowStat);
        assign(RuleRef::Domain::Workspace, 0, Layer::Supervisor);
    }

    if (spec.runtime.enabled) {
        route({SYS_execve, SYS_execveat}, HandlerId::HookExec);
        if (!spec.fs.workspace) {
            route({SYS_open, SYS_openat, SYS_creat}, HandlerId::FileOpen);
        }
        assign(RuleRef::Domain::Hook, 0, Layer::Supervisor);
    }

    // openat2 is not decoded by the open handlers; libc falls back to openat.
    if (spec.fs.workspace || spec.runtime.enabled) {
        plan.syscall_filter.deny[SYS_openat2] = ENOSYS;
    }

    return plan;
}

EnforcementPlan build_plan(const SandboxSpec &spec, const Resolver &resolver)
{
    NormalizedSpec normalized = validate(spec);
    PinnedAllowlist pins = pin_resolution(normalized, resolver);
    return compile(normalized, pins);
}

EnforcementPlan build_plan(const SandboxSpec &spec)
{
    return build_plan(spec, system_resolver());
}

} // namespace lockbox
