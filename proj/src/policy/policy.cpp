#include "lockbox/policy.hpp"
#include "lockbox/error.hpp"

#include <netdb.h>
#include <sys/socket.h>

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <map>

namespace fs = std::filesystem;

namespace lockbox {

const char *to_string(EventCategory category)
{
    switch (category) {
        case EventCategory::Exec: return "exec";
        case EventCategory::Net: return "net";
        case EventCategory::File: return "file";
    }
    return "?";
}

std::string normalize_path(const std::string &path)
{
    std::vector<std::string> parts;
    std::size_t i = 0;
    while (i < path.size()) {
        std::size_t j = path.find('/', i);
        if (j == std::string::npos) j = path.size();
        std::string part = path.substr(i, j - i);
        if (part.empty() || part == ".") {
            // skip
        } else if (part == "..") {
            if (!parts.empty()) parts.pop_back();
        } else {
            parts.push_back(std::move(part));
        }
        i = j + 1;
    }
    std::string out;
    for (const auto &part : parts) {
        out += '/';
        out += part;
    }
    return out.empty() ? "/" : out;
}

bool path_has_prefix(const std::string &path, const std::string &prefix)
{
    if (prefix == "/") return !path.empty() && path[0] == '/';
    if (path.size() < prefix.size()) return false;
    if (path.compare(0, prefix.size(), prefix) != 0) return false;
    return path.size() == prefix.size() || path[prefix.size()] == '/';
}

namespace {

std::string canonical_absolute(const std::string &path, const char *what)
{
    if (path.empty() || path[0] != '/') {
        throw ValidationError(std::string(what) + " must be an absolute path: '" + path + "'");
    }
    std::error_code ec;
    fs::path canon = fs::weakly_canonical(fs::path(normalize_path(path)), ec);
    if (ec) {
        return normalize_path(path);
    }
    return normalize_path(canon.string());
}

std::string lowercase(std::string text)
{
    std::transform(text.begin(), text.end(), text.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return text;
}

void check_hostname(const std::string &host, const char *what)
{
    if (host.empty()) {
        throw ValidationError(std::string(what) + " has an empty hostname");
    }
    if (host.find('*') != std::string::npos || host.find('?') != std::string::npos) {
        throw ValidationError("wildcard hostname '" + host +
                              "' is not supported: allowlisted hosts must resolve to "
                              "concrete destinations");
    }
    for (unsigned char c : host) {
        if (!(std::isalnum(c) || c == '.' || c == '-' || c == ':' || c == '_' || c == '[' ||
              c == ']')) {
            throw ValidationError(std::string(what) + " has an invalid hostname '" + host + "'");
        }
    }
}

std::vector<PathRule> normalize_path_rules(const std::vector<PathRule> &rules)
{
    std::map<std::string, PathAccess> merged;
    for (const auto &rule : rules) {
        std::string path = canonical_absolute(rule.path, "filesystem rule");
        auto [it, inserted] = merged.emplace(path, rule.access);
        if (!inserted) {
            if (rule.access == PathAccess::Deny || it->second == PathAccess::Deny) {
                it->second = PathAccess::Deny;
            } else if (rule.access == PathAccess::Write) {
                it->second = PathAccess::Write;
            }
        }
    }

    std::vector<std::string> denies;
    for (const auto &[path, access] : merged) {
        if (access == PathAccess::Deny) denies.push_back(path);
    }

    std::vector<PathRule> out;
    for (const auto &[path, access] : merged) {
        bool shadowed = std::any_of(denies.begin(), denies.end(), [&](const std::string &deny) {
            return deny != path && path_has_prefix(path, deny);
        });
        if (shadowed) continue;
        out.push_back(PathRule{path, access});
    }
    return out;
}

void normalize_endpoint(EndpointRule &rule)
{
    if (rule.destination) {
        *rule.destination = lowercase(*rule.destination);
        check_hostname(*rule.destination, "endpoint rule");
    }
    switch (rule.protocol) {
        case Protocol::Icmp:
            if (rule.port) throw ValidationError("icmp endpoint rules carry no port");
            if (rule.port_only) throw ValidationError("port-only rules must be tcp");
            if (!rule.destination) throw ValidationError("icmp endpoint rules need a destination");
            break;
        case Protocol::Udp:
            if (rule.port_only) throw ValidationError("port-only rules must be tcp");
            if (!rule.destination) throw ValidationError("udp endpoint rules need a destination");
            if (!rule.port) throw ValidationError("udp endpoint rules need a port");
            break;
        case Protocol::Tcp:
            if (!rule.port) throw ValidationError("tcp endpoint rules need a port");
            if (rule.port_only && rule.destination) {
                throw ValidationError("port-only rules cannot name a destination");
            }
            if (!rule.destination) rule.port_only = true;
            break;
    }
}

HttpRule normalize_http(const HttpRule &input)
{
    HttpRule rule = input;
    std::transform(rule.method.begin(), rule.method.end(), rule.method.begin(),
                   [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    if (rule.method.empty()) rule.method = "*";
    for (unsigned char c : rule.method) {
        if (!(std::isupper(c) || c == '*' || c == '-')) {
            throw ValidationError("invalid HTTP method '" + input.method + "'");
        }
    }
    rule.host = lowercase(rule.host);
    // "host:port" shorthand; bracketed IPv6 literals keep their colons.
    auto colon = rule.host.rfind(':');
    if (colon != std::string::npos && rule.host.find(']') == std::string::npos &&
        rule.host.find(':') == colon) {
        std::string port_text = rule.host.substr(colon + 1);
        rule.host = rule.host.substr(0, colon);
        try {
            unsigned long port = std::stoul(port_text);
            if (port == 0 || port > 65535) throw std::out_of_range("port");
            rule.port = static_cast<std::uint16_t>(port);
        } catch (const std::exception &) {
            throw ValidationError("invalid port in HTTP rule host '" + input.host + "'");
        }
    }
    check_hostname(rule.host, "HTTP rule");
    if (rule.path_pattern.empty()) rule.path_pattern = "/";
    if (rule.path_pattern[0] != '/' && rule.path_pattern != "*") {
        throw ValidationError("HTTP path pattern must start with '/': '" + rule.path_pattern + "'");
    }
    return rule;
}

} // namespace

NormalizedSpec validate(const SandboxSpec &input)
{
    SandboxSpec spec = input;

    spec.fs.rules = normalize_path_rules(input.fs.rules);

    if (spec.fs.workspace) {
        auto &ws = *spec.fs.workspace;
        ws.root = canonical_absolute(ws.root, "workspace root");
        if (ws.root == "/") throw ValidationError("workspace root cannot be '/'");
        if (ws.storage) {
            ws.storage = canonical_absolute(*ws.storage, "workspace storage");
            if (path_has_prefix(*ws.storage, ws.root)) {
                throw ValidationError("workspace storage must live outside the workspace root");
            }
        }
        if (ws.quota_bytes && *ws.quota_bytes == 0) {
            throw ValidationError("workspace quota must be positive");
        }
    }

    if (spec.net.https_interception) {
        throw Error(ErrorKind::Unsupported,
                    "HTTPS interception via an injected CA is not implemented; HTTPS flows are "
                    "governed by endpoint rules");
    }

    std::vector<EndpointRule> endpoints;
    auto add_endpoint = [&](EndpointRule rule) {
        if (std::find(endpoints.begin(), endpoints.end(), rule) == endpoints.end()) {
            endpoints.push_back(std::move(rule));
        }
    };
    for (const auto &input_rule : input.net.endpoints) {
        if (input_rule.implied) continue;
        EndpointRule rule = input_rule;
        normalize_endpoint(rule);
        add_endpoint(std::move(rule));
    }

    std::vector<HttpRule> http;
    for (const auto &input_rule : input.net.http) {
        HttpRule rule = normalize_http(input_rule);
        if (std::find(http.begin(), http.end(), rule) == http.end()) {
            http.push_back(rule);
        }
    }
    for (const auto &rule : http) {
        EndpointRule implied;
        implied.protocol = Protocol::Tcp;
        implied.destination = rule.host;
        implied.port = rule.port;
        implied.implied = true;
        bool explicit_rule = std::any_of(endpoints.begin(), endpoints.end(), [&](const auto &e) {
            return !e.implied && e.protocol == Protocol::Tcp && e.destination == rule.host &&
                   e.port == rule.port;
        });
        if (!explicit_rule) add_endpoint(std::move(implied));
    }
    spec.net.endpoints = std::move(endpoints);
    spec.net.http = std::move(http);

    const auto &res = spec.resources;
    if (res.max_processes && *res.max_processes == 0) {
        throw ValidationError("max_processes must be positive");
    }
    if (res.max_memory && *res.max_memory == 0) {
        throw ValidationError("max_memory must be positive");
    }
    if (res.max_fds && *res.max_fds == 0) {
        throw ValidationError("max_fds must be positive");
    }
    if (res.max_cpu && !(*res.max_cpu > 0.0 && *res.max_cpu <= 1.0)) {
        throw ValidationError("max_cpu must lie in (0, 1]");
    }

    if (spec.runtime.hold_timeout && spec.runtime.hold_timeout->count() <= 0) {
        throw ValidationError("hold timeout must be positive");
    }
    if (!spec.runtime.enabled) {
        spec.runtime.categories = RuntimeHookConfig{}.categories;
        spec.runtime.hold_timeout.reset();
    }

    if (spec.cwd) {
        if (spec.cwd->empty() || (*spec.cwd)[0] != '/') {
            throw ValidationError("cwd must be an absolute path: '" + *spec.cwd + "'");
        }
        spec.cwd = normalize_path(*spec.cwd);
    }

    return NormalizedSpec{std::move(spec)};
}

PathScope::PathScope(const NormalizedSpec &spec) : rules_(spec.spec.fs.rules)
{
    if (spec.spec.fs.workspace) {
        read_only_roots_.push_back(spec.spec.fs.workspace->root);
    }
}

PathScope::PathScope(std::vector<PathRule> rules, std::vector<std::string> read_only_roots)
    : rules_(std::move(rules)), read_only_roots_(std::move(read_only_roots))
{
}

bool PathScope::denied(const std::string &path) const
{
    return std::any_of(rules_.begin(), rules_.end(), [&](const PathRule &rule) {
        return rule.access == PathAccess::Deny && path_has_prefix(path, rule.path);
    });
}

bool PathScope::readable(const std::string &path) const
{
    if (denied(path)) return false;
    bool by_rule = std::any_of(rules_.begin(), rules_.end(), [&](const PathRule &rule) {
        return rule.access != PathAccess::Deny && path_has_prefix(path, rule.path);
    });
    bool by_root = std::any_of(read_only_roots_.begin(), read_only_roots_.end(),
                               [&](const std::string &root) { return path_has_prefix(path, root); });
    return by_rule || by_root;
}

bool PathScope::writable(const std::string &path) const
{
    if (denied(path)) return false;
    bool in_root = std::any_of(read_only_roots_.begin(), read_only_roots_.end(),
                               [&](const std::string &root) { return path_has_prefix(path, root); });
    if (in_root) return false;
    return std::any_of(rules_.begin(), rules_.end(), [&](const PathRule &rule) {
        return rule.access == PathAccess::Write && path_has_prefix(path, rule.path);
    });
}

PathScope PathScope::with_denied(const std::string &path) const
{
    PathScope copy = *this;
    copy.rules_.push_back(PathRule{normalize_path(path), PathAccess::Deny});
    return copy;
}

void PinnedAllowlist::add(PinnedEntry entry, const std::optional<std::string> &hostname)
{
    if (entry.protocol == Protocol::Icmp) entry.port.reset();
    if (hostname && entry.ip) {
        auto &names = hostnames_[*entry.ip];
        if (std::find(names.begin(), names.end(), *hostname) == names.end()) {
            names.push_back(*hostname);
        }
    }
    entries_.insert(std::move(entry));
}

bool PinnedAllowlist::contains(const Destination &dest) const
{
    return std::any_of(entries_.begin(), entries_.end(), [&](const PinnedEntry &entry) {
        if (entry.protocol != dest.protocol) return false;
        if (entry.ip && *entry.ip != dest.ip) return false;
        if (dest.protocol == Protocol::Icmp) return true;
        return entry.port && *entry.port == dest.port;
    });
}

std::vector<std::string> PinnedAllowlist::hostnames_for(const IpAddress &ip) const
{
    auto it = hostnames_.find(ip);
    return it == hostnames_.end() ? std::vector<std::string>{} : it->second;
}

std::vector<IpAddress> PinnedAllowlist::addresses_for(const std::string &hostname) const
{
    std::vector<IpAddress> out;
    for (const auto &[ip, names] : hostnames_) {
        if (std::find(names.begin(), names.end(), hostname) != names.end()) {
            out.push_back(ip);
        }
    }
    if (auto literal = IpAddress::parse(hostname)) {
        if (std::find(out.begin(), out.end(), *literal) == out.end()) out.push_back(*literal);
    }
    return out;
}

bool PinnedAllowlist::includes(const PinnedAllowlist &other) const
{
    return std::all_of(other.entries_.begin(), other.entries_.end(), [&](const PinnedEntry &e) {
        if (entries_.count(e)) return true;
        // A wildcard (port-only) entry here covers a concrete entry there.
        if (e.ip && e.protocol == Protocol::Tcp) {
            return entries_.count(PinnedEntry{Protocol::Tcp, std::nullopt, e.port}) > 0;
        }
        return false;
    });
}

Resolver system_resolver()
{
    return [](const std::string &host) {
        std::vector<IpAddress> out;
        addrinfo hints{};
        hints.ai_family = AF_UNSPEC;
        hints.ai_socktype = SOCK_STREAM;
        addrinfo *result = nullptr;
        if (getaddrinfo(host.c_str(), nullptr, &hints, &result) != 0) {
            return out;
        }
        for (addrinfo *ai = result; ai; ai = ai->ai_next) {
            if (auto decoded = decode_sockaddr(ai->ai_addr, ai->ai_addrlen)) {
                if (std::find(out.begin(), out.end(), decoded->first) == out.end()) {
                    out.push_back(decoded->first);
                }
            }
        }
        freeaddrinfo(result);
        return out;
    };
}

PinnedAllowlist pin_resolution(const NormalizedSpec &spec, const Resolver &resolver)
{
    PinnedAllowlist pins;
    for (const auto &rule : spec.spec.net.endpoints) {
        if (rule.port_only || !rule.destination) {
            pins.add(PinnedEntry{Protocol::Tcp, std::nullopt, rule.port});
            continue;
        }
        if (auto literal = IpAddress::parse(*rule.destination)) {
            pins.add(PinnedEntry{rule.protocol, *literal, rule.port});
            continue;
        }
        std::vector<IpAddress> addresses = resolver(*rule.destination);
        if (addresses.empty()) {
            throw Error(ErrorKind::Resolution,
                        "cannot resolve allowlisted host '" + *rule.destination + "'");
        }
        for (const auto &ip : addresses) {
            pins.add(PinnedEntry{rule.protocol, ip, rule.port}, *rule.destination);
        }
    }
    return pins;
}

PinnedAllowlist pin_resolution(const NormalizedSpec &spec)
{
    return pin_resolution(spec, system_resolver());
}

} // namespace lockbox
