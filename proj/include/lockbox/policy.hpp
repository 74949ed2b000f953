#pragma once

#include "lockbox/net_types.hpp"

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace lockbox {

enum class PathAccess : std::uint8_t { Read, Write, Deny };

struct PathRule {
    std::string path;
    PathAccess access = PathAccess::Read;

    auto operator<=>(const PathRule &) const = default;
};

enum class EffectAction : std::uint8_t { Commit, Abort, Keep };

struct EndpointRule {
    Protocol protocol = Protocol::Tcp;
    std::optional<std::string> destination;
    std::optional<std::uint16_t> port;
    bool port_only = false;
    // Set by validate() on endpoints derived from an HttpRule.
    bool implied = false;

    auto operator<=>(const EndpointRule &) const = default;
};

struct HttpRule {
    std::string method = "*";
    std::string host;
    std::uint16_t port = 80;
    // Glob when it contains '*' or '?', otherwise a path prefix.
    std::string path_pattern = "/";

    auto operator<=>(const HttpRule &) const = default;
};

struct ResourceLimits {
    std::optional<std::uint64_t> max_processes;
    std::optional<std::uint64_t> max_memory;
    std::optional<double> max_cpu;
    std::optional<std::uint64_t> max_fds;

    bool operator==(const ResourceLimits &) const = default;
};

enum class EventCategory : std::uint8_t { Exec, Net, File };

const char *to_string(EventCategory category);

struct RuntimeHookConfig {
    bool enabled = false;
    // Categories whose events reach the callback. Enforcement handlers for
    // the other categories still run so that tightening stays effective.
    std::set<EventCategory> categories{EventCategory::Exec};
    std::optional<std::chrono::milliseconds> hold_timeout;

    bool operator==(const RuntimeHookConfig &) const = default;
};

struct WorkspaceConfig {
    // Directory whose writes are captured (the lower layer).
    std::string root;
    // Where the upper layer and manifest live; a fresh temp dir when absent.
    std::optional<std::string> storage;
    std::optional<std::uint64_t> quota_bytes;
    // Let unmodified reads skip the layer lookup. Disabled for conformance runs.
    bool bypass_unmodified_reads = true;

    bool operator==(const WorkspaceConfig &) const = default;
};

struct FsPolicy {
    std::vector<PathRule> rules;
    EffectAction on_exit = EffectAction::Abort;
    std::optional<WorkspaceConfig> workspace;

    bool operator==(const FsPolicy &) const = default;
};

struct NetPolicy {
    std::vector<EndpointRule> endpoints;
    std::vector<HttpRule> http;
    // HTTPS interception through an injected CA. Not implemented; rejected.
    bool https_interception = false;

    bool operator==(const NetPolicy &) const = default;
};

struct SandboxSpec {
    FsPolicy fs;
    NetPolicy net;
    ResourceLimits resources;
    RuntimeHookConfig runtime;
    std::optional<std::string> cwd;

    bool operator==(const SandboxSpec &) const = default;
};

// A SandboxSpec that went through validate(): absolute canonical paths,
// deny-wins deduplication, HttpRules expanded into implied endpoints.
struct NormalizedSpec {
    SandboxSpec spec;

    bool operator==(const NormalizedSpec &) const = default;
};

NormalizedSpec validate(const SandboxSpec &spec);

// Lexical normalization of an absolute path ("//a/./b/../c" -> "/a/c").
std::string normalize_path(const std::string &path);
// Whether `prefix` equals `path` or is a directory ancestor of it.
bool path_has_prefix(const std::string &path, const std::string &prefix);

// Effective filesystem scope with deny-wins precedence. A workspace root is
// readable but never writable through the static layer.
class PathScope {
public:
    PathScope() = default;
    explicit PathScope(const NormalizedSpec &spec);
    PathScope(std::vector<PathRule> rules, std::vector<std::string> read_only_roots);

    bool readable(const std::string &path) const;
    bool writable(const std::string &path) const;
    bool denied(const std::string &path) const;

    // Returns a copy with `path` added to the deny set.
    PathScope with_denied(const std::string &path) const;

    const std::vector<PathRule> &rules() const noexcept { return rules_; }

private:
    std::vector<PathRule> rules_;
    std::vector<std::string> read_only_roots_;
};

// Resolved (protocol, IP, port) entries fixed at sandbox start. Port-only TCP
// rules are stored as entries without an IP and match any destination.
struct PinnedEntry {
    Protocol protocol = Protocol::Tcp;
    std::optional<IpAddress> ip;
    std::optional<std::uint16_t> port;

    auto operator<=>(const PinnedEntry &) const = default;
};

class PinnedAllowlist {
public:
    PinnedAllowlist() = default;

    void add(PinnedEntry entry, const std::optional<std::string> &hostname = std::nullopt);

    bool contains(const Destination &dest) const;
    bool empty() const noexcept { return entries_.empty(); }
    const std::set<PinnedEntry> &entries() const noexcept { return entries_; }

    // Hostnames whose resolution produced `ip`, in rule order.
    std::vector<std::string> hostnames_for(const IpAddress &ip) const;
    // Addresses pinned for `hostname`.
    std::vector<IpAddress> addresses_for(const std::string &hostname) const;

    // Whether every entry of `other` is also present here.
    bool includes(const PinnedAllowlist &other) const;

    bool operator==(const PinnedAllowlist &) const = default;

private:
    std::set<PinnedEntry> entries_;
    std::map<IpAddress, std::vector<std::string>> hostnames_;
};

using Resolver = std::function<std::vector<IpAddress>(const std::string &host)>;

// getaddrinfo-backed resolver returning every A/AAAA address.
Resolver system_resolver();

PinnedAllowlist pin_resolution(const NormalizedSpec &spec, const Resolver &resolver);
PinnedAllowlist pin_resolution(const NormalizedSpec &spec);

} // namespace lockbox
