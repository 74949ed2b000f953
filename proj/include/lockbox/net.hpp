#pragma once

#include "lockbox/event.hpp"
#include "lockbox/live_policy.hpp"
#include "lockbox/plan.hpp"
#include "lockbox/supervisor.hpp"
#include "lockbox/unique_fd.hpp"

#include <atomic>
#include <fstream>
#include <map>
#include <memory>
#include <mutex>
#include <set>
#include <string>
#include <thread>
#include <vector>

namespace lockbox {

bool check_endpoint(const Destination &dest, const PinnedAllowlist &pins);

FlowPath classify_flow(const Destination &dest, const EnforcementPlan &plan);
// Same, against a live (possibly tightened) allowlist.
FlowPath classify_flow(const Destination &dest, const EnforcementPlan &plan,
                       const PinnedAllowlist &pins);

inline constexpr std::uint16_t kHttpsPort = 443;

// ---- audit -----------------------------------------------------------------

struct AuditRecord {
    std::int64_t ts_ms = 0;
    pid_t pid = 0;
    std::string kind; // "http", "exec", "net", "file", "hook-error"
    std::string method;
    std::string host;
    std::string path;
    std::string decision;
    std::vector<std::string> argv;

    std::string to_json() const;
};

class AuditLog {
public:
    AuditLog() = default;
    explicit AuditLog(const std::string &path);

    void append(AuditRecord record);
    std::vector<AuditRecord> records() const;

private:
    mutable std::mutex mutex_;
    std::vector<AuditRecord> records_;
    std::ofstream file_;
};

std::int64_t now_ms();

// ---- HTTP matching -----------------------------------------------------------

// Shell-style glob over the whole string: '*' any run, '?' one character.
bool glob_match(std::string_view pattern, std::string_view text);
// Glob when the pattern contains '*' or '?', prefix otherwise. The query
// string of `path` is ignored.
bool http_path_matches(const std::string &pattern, const std::string &path);

struct HttpDecision {
    std::optional<std::size_t> matched_rule;
    enum class Action : std::uint8_t { Forward, Reject } action = Action::Reject;
    int status = 403;
};

HttpDecision decide_http(const std::string &method, const std::string &host, std::uint16_t port,
                         const std::string &path, const std::vector<HttpRule> &rules);

struct HttpRequestHead {
    std::string method;
    std::string target;
    std::string version;
    std::vector<std::pair<std::string, std::string>> headers;
    // Derived from an absolute-form target or the Host header.
    std::optional<std::string> host;
    std::string path;

    std::optional<std::string> header(std::string_view name) const;
};

// Parses "METHOD target HTTP/1.x\r\n headers \r\n\r\n". nullopt on malformed input.
std::optional<HttpRequestHead> parse_request_head(std::string_view head);

// ---- proxy -------------------------------------------------------------------

struct ProxyFlow {
    Destination destination;
    std::vector<std::string> hostnames;
    pid_t pid = 0;
};

struct ProxyCounters {
    std::uint64_t accepted = 0;
    std::uint64_t parsed = 0;
    std::uint64_t forwarded = 0;
    std::uint64_t rejected = 0;
    std::uint64_t upstream_connections = 0;
};

class HttpProxy {
public:
    HttpProxy(std::vector<HttpRule> rules, LivePolicyCell *live, AuditLog *audit);
    ~HttpProxy();
    HttpProxy(const HttpProxy &) = delete;
    HttpProxy &operator=(const HttpProxy &) = delete;

    void start();
    void stop();
    std::uint16_t port() const noexcept { return port_; }

    // Flows are keyed by the local port of the supervisor-side socket.
    void register_flow(std::uint16_t local_port, ProxyFlow flow);
    ProxyCounters counters() const;

private:
    void accept_loop();
    void serve(UniqueFd client);

    std::vector<HttpRule> rules_;
    LivePolicyCell *live_;
    AuditLog *audit_;
    UniqueFd listener_;
    UniqueFd wake_;
    std::uint16_t port_ = 0;
    std::thread acceptor_;
    std::mutex mutex_;
    std::map<std::uint16_t, ProxyFlow> flows_;
    std::set<int> active_;
    std::vector<std::thread> connections_;
    std::atomic<std::uint64_t> accepted_{0}, parsed_{0}, forwarded_{0}, rejected_{0},
        upstream_{0};
    std::atomic<bool> stopping_{false};
};

// ---- supervisor handlers ---------------------------------------------------

struct NetCounters {
    std::atomic<std::uint64_t> connects{0};
    std::atomic<std::uint64_t> denied{0};
    std::atomic<std::uint64_t> proxied{0};
    std::atomic<std::uint64_t> on_behalf{0};
    std::atomic<std::uint64_t> continued{0};
};

struct NetRuntime {
    const EnforcementPlan *plan = nullptr;
    LivePolicyCell *live = nullptr;
    HttpProxy *proxy = nullptr;
    EventGate *gate = nullptr;
    NetCounters counters;

    std::mutex abstract_mutex;
    std::set<std::string> abstract_names;
};

void install_net_handlers(HandlerTable &table, std::shared_ptr<NetRuntime> runtime);

} // namespace lockbox
