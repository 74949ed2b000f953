#include "lockbox/error.hpp"
#include "lockbox/policy_file.hpp"

#include "json.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace lockbox {

using nlohmann::json;

namespace {

void check_keys(const json &obj, const char *where, std::initializer_list<const char *> allowed)
{
    if (!obj.is_object()) throw ValidationError(std::string(where) + " must be an object");
    std::set<std::string> keys(allowed.begin(), allowed.end());
    for (const auto &[key, value] : obj.items()) {
        if (!keys.count(key)) {
            throw ValidationError("unknown key '" + key + "' in " + where);
        }
    }
}

std::uint64_t size_value(const json &v, const char *what)
{
    if (v.is_number_unsigned()) return v.get<std::uint64_t>();
    if (v.is_number_integer() && v.get<std::int64_t>() >= 0) return v.get<std::uint64_t>();
    if (v.is_string()) return parse_size(v.get<std::string>());
    throw ValidationError(std::string(what) + " must be a size");
}

std::uint16_t port_value(const json &v)
{
    if (!v.is_number_integer()) throw ValidationError("port must be an integer");
    auto port = v.get<std::int64_t>();
    if (port < 1 || port > 65535) throw ValidationError("port out of range");
    return static_cast<std::uint16_t>(port);
}

std::vector<std::string> string_list(const json &v, const char *what)
{
    if (!v.is_array()) throw ValidationError(std::string(what) + " must be a list");
    std::vector<std::string> out;
    for (const auto &item : v) {
        if (!item.is_string()) throw ValidationError(std::string(what) + " entries must be strings");
        out.push_back(item.get<std::string>());
    }
    return out;
}

const char *action_name(EffectAction a)
{
    switch (a) {
        case EffectAction::Commit: return "commit";
        case EffectAction::Abort: return "abort";
        case EffectAction::Keep: return "keep";
    }
    return "abort";
}

EffectAction parse_action(const std::string &text)
{
    if (text == "commit") return EffectAction::Commit;
    if (text == "abort") return EffectAction::Abort;
    if (text == "keep") return EffectAction::Keep;
    throw ValidationError("on_exit must be commit, abort or keep");
}

EventCategory parse_category(const std::string &text)
{
    if (text == "exec") return EventCategory::Exec;
    if (text == "net") return EventCategory::Net;
    if (text == "file") return EventCategory::File;
    throw ValidationError("unknown event category '" + text + "'");
}

SandboxSpec spec_from_value(const json &doc)
{
    check_keys(doc, "policy", {"fs", "net", "resources", "runtime", "cwd"});
    SandboxSpec spec;
    if (doc.contains("fs")) {
        const json &fs = doc["fs"];
        check_keys(fs, "fs", {"read", "write", "deny", "on_exit", "workspace"});
        const std::pair<const char *, PathAccess> kinds[] = {
            {"read", PathAccess::Read}, {"write", PathAccess::Write}, {"deny", PathAccess::Deny}};
        for (const auto &[key, access] : kinds) {
            if (!fs.contains(key)) continue;
            for (auto &path : string_list(fs[key], key)) spec.fs.rules.push_back({path, access});
        }
        if (fs.contains("on_exit")) spec.fs.on_exit = parse_action(fs["on_exit"].get<std::string>());
        if (fs.contains("workspace")) {
            const json &w = fs["workspace"];
            check_keys(w, "workspace", {"root", "storage", "quota", "bypass_unmodified_reads"});
            WorkspaceConfig ws;
            if (!w.contains("root") || !w["root"].is_string()) {
                throw ValidationError("workspace needs a root");
            }
            ws.root = w["root"].get<std::string>();
            if (w.contains("storage")) ws.storage = w["storage"].get<std::string>();
            if (w.contains("quota")) ws.quota_bytes = size_value(w["quota"], "quota");
            if (w.contains("bypass_unmodified_reads")) {
                ws.bypass_unmodified_reads = w["bypass_unmodified_reads"].get<bool>();
            }
            spec.fs.workspace = ws;
        }
    }
    if (doc.contains("net")) {
        const json &net = doc["net"];
        check_keys(net, "net", {"endpoints", "http", "https_interception"});
        if (net.contains("endpoints")) {
            for (const auto &e : net["endpoints"]) {
                check_keys(e, "endpoint", {"protocol", "host", "port"});
                EndpointRule rule;
                if (e.contains("protocol")) {
                    auto proto = parse_protocol(e["protocol"].get<std::string>());
                    if (!proto) throw ValidationError("unknown protocol");
                    rule.protocol = *proto;
                }
                if (e.contains("host")) rule.destination = e["host"].get<std::string>();
                if (e.contains("port")) rule.port = port_value(e["port"]);
                rule.port_only = !rule.destination && rule.protocol == Protocol::Tcp;
                spec.net.endpoints.push_back(rule);
            }
        }
        if (net.contains("http")) {
            for (const auto &h : net["http"]) {
                check_keys(h, "http rule", {"method", "host", "port", "path"});
                HttpRule rule;
                if (h.contains("method")) rule.method = h["method"].get<std::string>();
                if (!h.contains("host")) throw ValidationError("http rule needs a host");
                rule.host = h["host"].get<std::string>();
                if (h.contains("port")) rule.port = port_value(h["port"]);
                if (h.contains("path")) rule.path_pattern = h["path"].get<std::string>();
                spec.net.http.push_back(rule);
            }
        }
        if (net.contains("https_interception")) {
            spec.net.https_interception = net["https_interception"].get<bool>();
        }
    }
    if (doc.contains("resources")) {
        const json &r = doc["resources"];
        check_keys(r, "resources", {"max_processes", "max_memory", "max_cpu", "max_fds"});
        if (r.contains("max_processes")) spec.resources.max_processes = r["max_processes"].get<std::uint64_t>();
        if (r.contains("max_memory")) spec.resources.max_memory = size_value(r["max_memory"], "max_memory");
        if (r.contains("max_cpu")) spec.resources.max_cpu = r["max_cpu"].get<double>();
        if (r.contains("max_fds")) spec.resources.max_fds = r["max_fds"].get<std::uint64_t>();
    }
    if (doc.contains("runtime")) {
        const json &rt = doc["runtime"];
        check_keys(rt, "runtime", {"enabled", "categories", "hold_timeout_ms"});
        if (rt.contains("enabled")) spec.runtime.enabled = rt["enabled"].get<bool>();
        if (rt.contains("categories")) {
            spec.runtime.categories.clear();
            for (auto &c : string_list(rt["categories"], "categories")) {
                spec.runtime.categories.insert(parse_category(c));
            }
        }
        if (rt.contains("hold_timeout_ms")) {
            spec.runtime.hold_timeout = std::chrono::milliseconds(rt["hold_timeout_ms"].get<std::int64_t>());
        }
    }
    if (doc.contains("cwd")) spec.cwd = doc["cwd"].get<std::string>();
    return spec;
}

json parse_document(std::string_view text)
{
    try {
        return json::parse(text);
    } catch (const json::parse_error &e) {
        throw ValidationError(std::string("policy file is not valid JSON: ") + e.what());
    }
}

std::string read_file(const std::string &path)
{
    std::ifstream in(path);
    if (!in) throw ValidationError("cannot read policy file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

SandboxSpec spec_from_json(std::string_view text)
{
    json doc = parse_document(text);
    try {
        return spec_from_value(doc);
    } catch (const json::exception &e) {
        throw ValidationError(std::string("policy file: ") + e.what());
    }
}

std::string spec_to_json(const SandboxSpec &spec)
{
    json doc = json::object();
    json fs = json::object();
    for (const auto &rule : spec.fs.rules) {
        const char *key = rule.access == PathAccess::Read    ? "read"
                          : rule.access == PathAccess::Write ? "write"
                                                             : "deny";
        fs[key].push_back(rule.path);
    }
    fs["on_exit"] = action_name(spec.fs.on_exit);
    if (spec.fs.workspace) {
        const auto &ws = *spec.fs.workspace;
        json w = {{"root", ws.root}, {"bypass_unmodified_reads", ws.bypass_unmodified_reads}};
        if (ws.storage) w["storage"] = *ws.storage;
        if (ws.quota_bytes) w["quota"] = *ws.quota_bytes;
        fs["workspace"] = w;
    }
    doc["fs"] = fs;

    json net = json::object();
    net["endpoints"] = json::array();
    for (const auto &e : spec.net.endpoints) {
        json j = {{"protocol", to_string(e.protocol)}};
        if (e.destination) j["host"] = *e.destination;
        if (e.port) j["port"] = *e.port;
        net["endpoints"].push_back(j);
    }
    net["http"] = json::array();
    for (const auto &h : spec.net.http) {
        net["http"].push_back(
            {{"method", h.method}, {"host", h.host}, {"port", h.port}, {"path", h.path_pattern}});
    }
    if (spec.net.https_interception) net["https_interception"] = true;
    doc["net"] = net;

    json res = json::object();
    if (spec.resources.max_processes) res["max_processes"] = *spec.resources.max_processes;
    if (spec.resources.max_memory) res["max_memory"] = *spec.resources.max_memory;
    if (spec.resources.max_cpu) res["max_cpu"] = *spec.resources.max_cpu;
    if (spec.resources.max_fds) res["max_fds"] = *spec.resources.max_fds;
    doc["resources"] = res;

    json rt = {{"enabled", spec.runtime.enabled}};
    rt["categories"] = json::array();
    for (auto c : spec.runtime.categories) rt["categories"].push_back(to_string(c));
    if (spec.runtime.hold_timeout) rt["hold_timeout_ms"] = spec.runtime.hold_timeout->count();
    doc["runtime"] = rt;
    if (spec.cwd) doc["cwd"] = *spec.cwd;
    return doc.dump(2);
}

SandboxSpec load_policy_file(const std::string &path)
{
    return spec_from_json(read_file(path));
}

std::vector<StageDocument> pipeline_from_json(std::string_view text)
{
    json doc = parse_document(text);
    try {
        check_keys(doc, "pipeline", {"stages"});
        if (!doc.contains("stages") || !doc["stages"].is_array() || doc["stages"].empty()) {
            throw ValidationError("pipeline needs a non-empty stages list");
        }
        std::vector<StageDocument> out;
        for (const auto &s : doc["stages"]) {
            check_keys(s, "stage", {"policy", "cmd"});
            StageDocument stage;
            if (s.contains("policy")) stage.spec = spec_from_value(s["policy"]);
            if (!s.contains("cmd")) throw ValidationError("stage needs a cmd");
            stage.cmd = string_list(s["cmd"], "cmd");
            if (stage.cmd.empty()) throw ValidationError("stage cmd is empty");
            out.push_back(std::move(stage));
        }
        return out;
    } catch (const json::exception &e) {
        throw ValidationError(std::string("pipeline file: ") + e.what());
    }
}

std::vector<StageDocument> load_pipeline_file(const std::string &path)
{
    return pipeline_from_json(read_file(path));
}

std::uint64_t parse_size(std::string_view text)
{
    if (text.empty()) throw ValidationError("empty size");
    std::uint64_t mult = 1;
    char last = text.back();
    switch (last) {
        case 'K': case 'k': mult = 1ull << 10; break;
        case 'M': case 'm': mult = 1ull << 20; break;
        case 'G': case 'g': mult = 1ull << 30; break;
        default: break;
    }
    std::string_view digits = mult == 1 ? text : text.substr(0, text.size() - 1);
    if (digits.empty()) throw ValidationError("invalid size '" + std::string(text) + "'");
    std::uint64_t value = 0;
    for (char c : digits) {
        if (c < '0' || c > '9') throw ValidationError("invalid size '" + std::string(text) + "'");
        std::uint64_t next = value * 10 + static_cast<std::uint64_t>(c - '0');
        if (next / 10 != value) throw ValidationError("size overflows");
        value = next;
    }
    if (value > UINT64_MAX / mult) throw ValidationError("size overflows");
    return value * mult;
}

EndpointRule parse_net_flag(std::string_view text)
{
    auto bad = [&]() {
        return ValidationError("invalid --net value '" + std::string(text) +
                               "' (expected tcp:PORT or PROTO:HOST:PORT)");
    };
    auto first = text.find(':');
    if (first == std::string_view::npos) throw bad();
    auto proto = parse_protocol(text.substr(0, first));
    if (!proto) throw bad();
    std::string_view rest = text.substr(first + 1);
    auto parse_port = [&](std::string_view p) -> std::uint16_t {
        if (p.empty() || p.size() > 5) throw bad();
        unsigned v = 0;
        for (char c : p) {
            if (c < '0' || c > '9') throw bad();
            v = v * 10 + static_cast<unsigned>(c - '0');
        }
        if (v == 0 || v > 65535) throw bad();
        return static_cast<std::uint16_t>(v);
    };
    EndpointRule rule;
    rule.protocol = *proto;
    if (*proto == Protocol::Icmp) {
        if (rest.empty()) throw bad();
        rule.destination = std::string(rest);
        return rule;
    }
    auto last = rest.rfind(':');
    if (last == std::string_view::npos) {
        rule.port = parse_port(rest);
        rule.port_only = true;
        return rule;
    }
    std::string_view host = rest.substr(0, last);
    if (host.size() >= 2 && host.front() == '[' && host.back() == ']') {
        host = host.substr(1, host.size() - 2);
    }
    if (host.empty()) throw bad();
    rule.destination = std::string(host);
    rule.port = parse_port(rest.substr(last + 1));
    return rule;
}

HttpRule parse_http_flag(std::string_view text)
{
    std::istringstream in{std::string(text)};
    std::string method, host, path, extra;
    if (!(in >> method >> host >> path) || (in >> extra)) {
        throw ValidationError("invalid --http value '" + std::string(text) +
                              "' (expected \"METHOD HOST PATHGLOB\")");
    }
    HttpRule rule;
    rule.method = method;
    auto colon = host.rfind(':');
    if (colon != std::string::npos && host.find(':') == colon) {
        EndpointRule ep = parse_net_flag("tcp:" + host);
        rule.port = *ep.port;
        host = *ep.destination;
    }
    rule.host = host;
    rule.path_pattern = path;
    return rule;
}

} // namespace lockbox
