#include "lockbox/error.hpp"
#include "lockbox/kernel.hpp"

#include <fcntl.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <cerrno>

namespace lockbox {

namespace {

constexpr unsigned kCreateRulesetVersion = 1u << 0;
constexpr int kRulePathBeneath = 1;
constexpr int kRuleNetPort = 2;
constexpr std::uint64_t kNetBindTcp = 1u << 0;
constexpr std::uint64_t kNetConnectTcp = 1u << 1;
constexpr std::uint64_t kScopeAbstractUnix = 1u << 0;
constexpr std::uint64_t kScopeSignal = 1u << 1;

struct RulesetAttr {
    std::uint64_t handled_access_fs;
    std::uint64_t handled_access_net;
    std::uint64_t scoped;
};

struct [[gnu::packed]] PathBeneathAttr {
    std::uint64_t allowed_access;
    std::int32_t parent_fd;
};

struct NetPortAttr {
    std::uint64_t allowed_access;
    std::uint64_t port;
};

} // namespace

int landlock_abi()
{
    long abi = syscall(SYS_landlock_create_ruleset, nullptr, 0, kCreateRulesetVersion);
    return abi < 0 ? 0 : static_cast<int>(abi);
}

std::uint64_t landlock_handled_fs(int abi)
{
    if (abi < 1) return 0;
    std::uint64_t bits = (fs_access::MakeSym << 1) - 1;
    if (abi >= 2) bits |= fs_access::Refer;
    if (abi >= 3) bits |= fs_access::Truncate;
    if (abi >= 5) bits |= fs_access::IoctlDev;
    return bits;
}

UniqueFd build_landlock_ruleset(const EnforcementPlan &plan, int abi,
                                std::vector<std::string> *skipped)
{
    RulesetAttr attr{};
    std::size_t attr_size = sizeof(std::uint64_t);
    attr.handled_access_fs = landlock_handled_fs(abi);
    if (abi >= 4) {
        attr.handled_access_net = kNetBindTcp | kNetConnectTcp;
        attr_size = 2 * sizeof(std::uint64_t);
    }
    if (abi >= 6) {
        if (plan.static_ipc.scope_abstract_unix) attr.scoped |= kScopeAbstractUnix;
        if (plan.static_ipc.scope_signal) attr.scoped |= kScopeSignal;
        attr_size = sizeof(RulesetAttr);
    }

    long fd = syscall(SYS_landlock_create_ruleset, &attr, attr_size, 0);
    if (fd < 0) throw_errno("landlock_create_ruleset");
    UniqueFd ruleset(static_cast<int>(fd));

    for (const auto &grant : plan.static_fs) {
        UniqueFd target(::open(grant.path.c_str(), O_PATH | O_CLOEXEC));
        if (!target) {
            if (skipped) skipped->push_back(grant.path);
            continue;
        }
        PathBeneathAttr rule{};
        rule.allowed_access = grant.access & attr.handled_access_fs;
        rule.parent_fd = target.get();
        if (rule.allowed_access == 0) continue;
        if (syscall(SYS_landlock_add_rule, ruleset.get(), kRulePathBeneath, &rule, 0) < 0) {
            if (errno == EINVAL) {
                // A non-directory target only accepts file rights.
                rule.allowed_access &= fs_access::FileOnly;
                if (rule.allowed_access &&
                    syscall(SYS_landlock_add_rule, ruleset.get(), kRulePathBeneath, &rule, 0) == 0) {
                    continue;
                }
            }
            throw_errno("landlock_add_rule " + grant.path);
        }
    }

    if (abi >= 4) {
        for (std::uint16_t port : plan.static_tcp_ports) {
            NetPortAttr rule{kNetBindTcp | kNetConnectTcp, port};
            if (syscall(SYS_landlock_add_rule, ruleset.get(), kRuleNetPort, &rule, 0) < 0) {
                throw_errno("landlock_add_rule port " + std::to_string(port));
            }
        }
    }
    return ruleset;
}

int landlock_restrict(int ruleset_fd)
{
    long rc = syscall(SYS_landlock_restrict_self, ruleset_fd, 0);
    return rc < 0 ? -errno : 0;
}

} // namespace lockbox
