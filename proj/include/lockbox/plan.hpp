#pragma once

#include "lockbox/policy.hpp"

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

namespace lockbox {

// Landlock filesystem access bits (kernel uapi values).
namespace fs_access {
inline constexpr std::uint64_t Execute = 1ull << 0;
inline constexpr std::uint64_t WriteFile = 1ull << 1;
inline constexpr std::uint64_t ReadFile = 1ull << 2;
inline constexpr std::uint64_t ReadDir = 1ull << 3;
inline constexpr std::uint64_t RemoveDir = 1ull << 4;
inline constexpr std::uint64_t RemoveFile = 1ull << 5;
inline constexpr std::uint64_t MakeChar = 1ull << 6;
inline constexpr std::uint64_t MakeDir = 1ull << 7;
inline constexpr std::uint64_t MakeReg = 1ull << 8;
inline constexpr std::uint64_t MakeSock = 1ull << 9;
inline constexpr std::uint64_t MakeFifo = 1ull << 10;
inline constexpr std::uint64_t MakeBlock = 1ull << 11;
inline constexpr std::uint64_t MakeSym = 1ull << 12;
inline constexpr std::uint64_t Refer = 1ull << 13;
inline constexpr std::uint64_t Truncate = 1ull << 14;
inline constexpr std::uint64_t IoctlDev = 1ull << 15;

inline constexpr std::uint64_t Read = Execute | ReadFile | ReadDir;
inline constexpr std::uint64_t Write = WriteFile | RemoveDir | RemoveFile | MakeChar | MakeDir |
                                       MakeReg | MakeSock | MakeFifo | MakeBlock | MakeSym |
                                       Refer | Truncate | IoctlDev;
inline constexpr std::uint64_t All = Read | Write;
// Rights that Landlock accepts on a rule whose target is not a directory.
inline constexpr std::uint64_t FileOnly = Execute | WriteFile | ReadFile | Truncate | IoctlDev;
} // namespace fs_access

struct FsGrant {
    std::string path;
    std::uint64_t access = 0;

    auto operator<=>(const FsGrant &) const = default;
};

struct StaticIpc {
    bool scope_abstract_unix = true;
    bool scope_signal = true;

    bool operator==(const StaticIpc &) const = default;
};

struct SyscallFilterSpec {
    // Syscall number -> errno returned without reaching the kernel.
    std::map<int, int> deny;
    std::set<int> notify;
    // Allow AF_INET/AF_INET6 datagram sockets (needed for UDP/ICMP rules).
    bool allow_inet_datagram = false;
    unsigned deny_set_version = 0;

    bool operator==(const SyscallFilterSpec &) const = default;
};

inline constexpr unsigned kDefaultDenySetVersion = 1;

// Syscalls denied by default: operations with no Landlock equivalent that
// an unprivileged workload has no business issuing. Versioned; see README.
const std::map<int, int> &default_deny_set();

enum class HandlerId : std::uint8_t {
    ProcessGate,
    MemoryAccount,
    NetConnect,
    NetSend,
    NetBind,
    CowOpen,
    CowMutate,
    CowDirents,
    CowStat,
    HookExec,
    FileOpen,
};

const char *to_string(HandlerId id);

enum class Layer : std::uint8_t {
    StaticFs,
    StaticTcpPorts,
    StaticIpc,
    SyscallFilter,
    Supervisor,
    // Launch-time process attributes (RLIMIT_NOFILE, CPU throttle).
    ProcessAttributes,
};

const char *to_string(Layer layer);

struct RuleRef {
    enum class Domain : std::uint8_t { Path, Endpoint, Http, Limit, Workspace, Hook, Ipc };
    Domain domain = Domain::Path;
    std::size_t index = 0;

    auto operator<=>(const RuleRef &) const = default;
};

struct RuleAssignment {
    RuleRef rule;
    Layer layer = Layer::StaticFs;
};

enum class FlowPath : std::uint8_t { Direct, HttpProxied, OnBehalfRaw, Denied };

const char *to_string(FlowPath path);

struct EnforcementPlan {
    NormalizedSpec spec;
    PinnedAllowlist pins;

    std::vector<FsGrant> static_fs;
    // True when TCP is enforced by Landlock port rules alone.
    bool tcp_direct = true;
    std::set<std::uint16_t> static_tcp_ports;
    StaticIpc static_ipc;
    SyscallFilterSpec syscall_filter;
    std::map<int, HandlerId> supervisor_handlers;

    std::vector<RuleAssignment> assignments;

    bool has_supervisor_handlers() const noexcept { return !supervisor_handlers.empty(); }
    bool routes(HandlerId id) const;
};

EnforcementPlan compile(const NormalizedSpec &spec, const PinnedAllowlist &pins);

// Convenience: validate + pin + compile.
EnforcementPlan build_plan(const SandboxSpec &spec, const Resolver &resolver);
EnforcementPlan build_plan(const SandboxSpec &spec);

} // namespace lockbox
