#include "lockbox/net.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>

namespace lockbox {

bool check_endpoint(const Destination &dest, const PinnedAllowlist &pins)
{
    return pins.contains(dest);
}

FlowPath classify_flow(const Destination &dest, const EnforcementPlan &plan)
{
    return classify_flow(dest, plan, plan.pins);
}

FlowPath classify_flow(const Destination &dest, const EnforcementPlan &plan,
                       const PinnedAllowlist &pins)
{
    if (plan.tcp_direct) {
        if (dest.protocol == Protocol::Tcp && plan.static_tcp_ports.count(dest.port)) {
            return FlowPath::Direct;
        }
        return FlowPath::Denied;
    }
    if (!check_endpoint(dest, pins)) return FlowPath::Denied;
    if (dest.protocol == Protocol::Tcp && dest.port != kHttpsPort) {
        auto names = pins.hostnames_for(dest.ip);
        for (const auto &rule : plan.spec.spec.net.http) {
            if (rule.port != dest.port) continue;
            bool host_match = std::find(names.begin(), names.end(), rule.host) != names.end();
            if (!host_match) {
                auto literal = IpAddress::parse(rule.host);
                host_match = literal && *literal == dest.ip;
            }
            if (host_match) return FlowPath::HttpProxied;
        }
    }
    return FlowPath::OnBehalfRaw;
}

// ---- audit -----------------------------------------------------------------

std::int64_t now_ms()
{
    using namespace std::chrono;
    return duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count();
}

std::string AuditRecord::to_json() const
{
    nlohmann::json j;
    j["ts"] = ts_ms;
    j["pid"] = pid;
    j["kind"] = kind;
    if (!method.empty()) j["method"] = method;
    if (!host.empty()) j["host"] = host;
    if (!path.empty()) j["path"] = path;
    if (!argv.empty()) j["argv"] = argv;
    j["decision"] = decision;
    return j.dump();
}

AuditLog::AuditLog(const std::string &path) : file_(path, std::ios::app)
{
}

void AuditLog::append(AuditRecord record)
{
    if (record.ts_ms == 0) record.ts_ms = now_ms();
    std::lock_guard lock(mutex_);
    if (file_.is_open()) {
        file_ << record.to_json() << '\n';
        file_.flush();
    }
    records_.push_back(std::move(record));
}

std::vector<AuditRecord> AuditLog::records() const
{
    std::lock_guard lock(mutex_);
    return records_;
}

// ---- HTTP matching -----------------------------------------------------------

bool glob_match(std::string_view pattern, std::string_view text)
{
    std::size_t p = 0, t = 0, star = std::string_view::npos, mark = 0;
    while (t < text.size()) {
        if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
            p++;
            t++;
        } else if (p < pattern.size() && pattern[p] == '*') {
            star = p++;
            mark = t;
        } else if (star != std::string_view::npos) {
            p = star + 1;
            t = ++mark;
        } else {
            return false;
        }
    }
    while (p < pattern.size() && pattern[p] == '*') p++;
    return p == pattern.size();
}

bool http_path_matches(const std::string &pattern, const std::string &path)
{
    std::string bare = path.substr(0, path.find_first_of("?#"));
    if (pattern == "*") return true;
    if (pattern.find_first_of("*?") != std::string::npos) return glob_match(pattern, bare);
    return bare.compare(0, pattern.size(), pattern) == 0;
}

HttpDecision decide_http(const std::string &method, const std::string &host, std::uint16_t port,
                         const std::string &path, const std::vector<HttpRule> &rules)
{
    HttpDecision decision;
    for (std::size_t i = 0; i < rules.size(); i++) {
        const auto &rule = rules[i];
        if (rule.method != "*" && rule.method != method) continue;
        if (rule.host != host || rule.port != port) continue;
        if (!http_path_matches(rule.path_pattern, path)) continue;
        decision.matched_rule = i;
        decision.action = HttpDecision::Action::Forward;
        decision.status = 0;
        return decision;
    }
    return decision;
}

std::optional<std::string> HttpRequestHead::header(std::string_view name) const
{
    for (const auto &[key, value] : headers) {
        if (key.size() == name.size() &&
            std::equal(key.begin(), key.end(), name.begin(), [](char a, char b) {
                return std::tolower(static_cast<unsigned char>(a)) ==
                       std::tolower(static_cast<unsigned char>(b));
            })) {
            return value;
        }
    }
    return std::nullopt;
}

namespace {

std::string trim(std::string_view s)
{
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return std::string(s);
}

std::string strip_port(std::string host)
{
    if (!host.empty() && host.front() == '[') {
        auto close = host.find(']');
        if (close != std::string::npos) return host.substr(1, close - 1);
        return host;
    }
    auto colon = host.find(':');
    if (colon != std::string::npos && host.find(':', colon + 1) == std::string::npos) {
        host.resize(colon);
    }
    return host;
}

std::string lower(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

} // namespace

std::optional<HttpRequestHead> parse_request_head(std::string_view head)
{
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos < head.size()) {
        std::size_t end = head.find('\n', pos);
        if (end == std::string_view::npos) end = head.size();
        std::string_view line = head.substr(pos, end - pos);
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) break;
        lines.push_back(line);
        pos = end + 1;
    }
    if (lines.empty()) return std::nullopt;

    HttpRequestHead req;
    std::string_view first = lines[0];
    auto sp1 = first.find(' ');
    if (sp1 == std::string_view::npos) return std::nullopt;
    auto sp2 = first.find(' ', sp1 + 1);
    if (sp2 == std::string_view::npos) return std::nullopt;
    req.method = std::string(first.substr(0, sp1));
    req.target = std::string(first.substr(sp1 + 1, sp2 - sp1 - 1));
    req.version = std::string(first.substr(sp2 + 1));
    if (req.method.empty() || req.target.empty()) return std::nullopt;
    for (unsigned char c : req.method) {
        if (!std::isupper(c) && c != '-') return std::nullopt;
    }
    if (req.version.rfind("HTTP/1.", 0) != 0 || req.version.size() != 8) return std::nullopt;

    for (std::size_t i = 1; i < lines.size(); i++) {
        auto colon = lines[i].find(':');
        if (colon == std::string_view::npos || colon == 0) return std::nullopt;
        std::string name(lines[i].substr(0, colon));
        if (name.find_first_of(" \t") != std::string::npos) return std::nullopt;
        req.headers.emplace_back(std::move(name), trim(lines[i].substr(colon + 1)));
    }

    const std::string &t = req.target;
    if (lower(t.substr(0, 7)) == "http://") {
        auto slash = t.find('/', 7);
        std::string authority = t.substr(7, slash == std::string::npos ? std::string::npos : slash - 7);
        auto at = authority.rfind('@');
        if (at != std::string::npos) authority = authority.substr(at + 1);
        if (authority.empty()) return std::nullopt;
        req.host = lower(strip_port(authority));
        req.path = slash == std::string::npos ? "/" : t.substr(slash);
    } else if (t[0] == '/' || t == "*") {
        req.path = t;
        if (auto host = req.header("Host")) {
            if (!host->empty()) req.host = lower(strip_port(*host));
        }
    } else if (req.method == "CONNECT") {
        req.host = lower(strip_port(t));
        req.path = "/";
    } else {
        return std::nullopt;
    }
    return req;
}

} // namespace lockbox
