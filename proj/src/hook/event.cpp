#include "lockbox/event.hpp"
#include "lockbox/proc.hpp"

namespace lockbox {

bool Event::argv_contains(std::string_view needle) const
{
    if (!argv) return false;
    for (const auto &arg : *argv) {
        if (arg.find(needle) != std::string::npos) return true;
    }
    return false;
}

Verdict HookVerdict::to_verdict() const
{
    switch (kind) {
        case Kind::Allow:
        case Kind::Audit: return Verdict::allow();
        case Kind::Deny: return Verdict::deny(EPERM);
        case Kind::DenyErrno: return Verdict::deny(error > 0 ? error : EPERM);
    }
    return Verdict::deny(EPERM);
}

std::string HookVerdict::to_string() const
{
    switch (kind) {
        case Kind::Allow: return "allow";
        case Kind::Deny: return "deny";
        case Kind::DenyErrno: return "deny(" + std::to_string(error) + ")";
        case Kind::Audit: return "audit";
    }
    return "deny";
}

HookVerdict map_callback_value(const CallbackValue &value)
{
    if (auto *b = std::get_if<bool>(&value)) return *b ? HookVerdict::deny() : HookVerdict::allow();
    if (auto *n = std::get_if<std::int64_t>(&value)) {
        if (*n == 0) return HookVerdict::allow();
        if (*n > 0 && *n < 4096) return HookVerdict::deny_errno(static_cast<int>(*n));
        return HookVerdict::deny();
    }
    if (auto *s = std::get_if<std::string>(&value)) {
        if (*s == "audit") return HookVerdict::audit();
        return HookVerdict::deny();
    }
    return HookVerdict::deny();
}

pid_t read_ppid(pid_t pid)
{
    auto st = read_proc_stat(pid);
    return st ? st->ppid : 0;
}

} // namespace lockbox
