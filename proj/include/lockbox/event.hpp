#pragma once

#include "lockbox/net_types.hpp"
#include "lockbox/policy.hpp"
#include "lockbox/supervisor.hpp"

#include <sys/types.h>

#include <cerrno>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace lockbox {

// Bumped whenever Event fields or the callback value mapping change.
inline constexpr int kEventSchemaVersion = 1;

// What a runtime-hook callback observes. There is deliberately no path field.
struct Event {
    std::string syscall;
    EventCategory category = EventCategory::Exec;
    pid_t pid = 0;
    pid_t ppid = 0;
    std::optional<Destination> net_dest;
    std::optional<std::vector<std::string>> argv;

    bool argv_contains(std::string_view needle) const;
};

struct HookVerdict {
    enum class Kind : std::uint8_t { Allow, Deny, DenyErrno, Audit };

    Kind kind = Kind::Deny;
    int error = 0;

    static HookVerdict allow() { return {Kind::Allow, 0}; }
    static HookVerdict deny() { return {Kind::Deny, EPERM}; }
    static HookVerdict deny_errno(int err) { return {Kind::DenyErrno, err}; }
    static HookVerdict audit() { return {Kind::Audit, 0}; }

    bool permits() const noexcept { return kind == Kind::Allow || kind == Kind::Audit; }
    // Supervisor verdict for a denial; Allow for permitting verdicts.
    Verdict to_verdict() const;
    std::string to_string() const;

    bool operator==(const HookVerdict &) const = default;
};

// Host callback return values: None, bool, integer or string.
using CallbackValue = std::variant<std::monostate, bool, std::int64_t, std::string>;

// Total mapping: 0/false -> Allow; true/-1 -> Deny(EPERM); positive n ->
// DenyErrno(n); "audit" -> Audit; anything else -> Deny(EPERM).
HookVerdict map_callback_value(const CallbackValue &value);

// Delivers events to the runtime hook. Implemented by the hook module.
class EventGate {
public:
    virtual ~EventGate() = default;
    virtual bool subscribed(EventCategory category) const = 0;
    virtual HookVerdict deliver(const Event &event) = 0;
};

// Parent pid of `pid` from /proc, 0 when unknown.
pid_t read_ppid(pid_t pid);

} // namespace lockbox
