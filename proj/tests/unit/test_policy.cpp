#include "doctest.h"

#include "lockbox/error.hpp"
#include "lockbox/plan.hpp"
#include "lockbox/policy.hpp"
#include "lockbox/policy_file.hpp"

#include "support.hpp"

#include <sys/syscall.h>

#include <random>

using namespace lockbox;

namespace {

Resolver table_resolver(std::map<std::string, std::vector<std::string>> table)
{
    return [table](const std::string &host) {
        std::vector<IpAddress> out;
        auto it = table.find(host);
        if (it == table.end()) return out;
        for (const auto &text : it->second) out.push_back(*IpAddress::parse(text));
        return out;
    };
}

EndpointRule tcp_port(std::uint16_t port)
{
    EndpointRule r;
    r.port = port;
    r.port_only = true;
    return r;
}

EndpointRule tcp_host(const std::string &host, std::uint16_t port)
{
    EndpointRule r;
    r.destination = host;
    r.port = port;
    return r;
}

} // namespace

TEST_SUITE("kernel-free")
{
TEST_CASE("paths are normalized and must be absolute")
{
    CHECK(normalize_path("//a/./b/../c/") == "/a/c");
    CHECK(normalize_path("/") == "/");
    CHECK(path_has_prefix("/usr/lib", "/usr"));
    CHECK(path_has_prefix("/usr", "/usr"));
    CHECK_FALSE(path_has_prefix("/usrx", "/usr"));
    CHECK(path_has_prefix("/anything", "/"));

    SandboxSpec spec;
    spec.fs.rules.push_back({"relative/path", PathAccess::Read});
    CHECK_THROWS_AS(validate(spec), ValidationError);
}

TEST_CASE("deny wins over read and write grants")
{
    SandboxSpec spec;
    spec.fs.rules = {{"/srv", PathAccess::Write}, {"/srv/secret", PathAccess::Deny},
                     {"/srv/secret", PathAccess::Read}};
    PathScope scope(validate(spec));
    CHECK(scope.writable("/srv/app/x"));
    CHECK(scope.readable("/srv"));
    CHECK(scope.denied("/srv/secret/key"));
    CHECK_FALSE(scope.readable("/srv/secret/key"));
    CHECK_FALSE(scope.writable("/srv/secret"));
    CHECK_FALSE(scope.readable("/etc/passwd"));
}

TEST_CASE("workspace root is readable but not statically writable")
{
    TempDir dir;
    SandboxSpec spec;
    spec.fs.workspace = WorkspaceConfig{dir.path(), std::nullopt, std::nullopt, true};
    spec.fs.rules = {{dir.path(), PathAccess::Write}};
    auto plan = build_plan(spec);
    PathScope scope(plan.spec);
    CHECK(scope.readable(dir.path() + "/f"));
    CHECK_FALSE(scope.writable(dir.path() + "/f"));
    for (const auto &g : plan.static_fs) {
        if (path_has_prefix(g.path, dir.path())) CHECK((g.access & fs_access::WriteFile) == 0);
    }
    CHECK(plan.routes(HandlerId::CowOpen));
    CHECK(plan.routes(HandlerId::CowDirents));
    CHECK(plan.syscall_filter.deny.at(SYS_openat2) == ENOSYS);
}

TEST_CASE("validation rejects malformed rules")
{
    auto rejects = [](auto mutate) {
        SandboxSpec spec;
        mutate(spec);
        CHECK_THROWS(validate(spec));
    };
    rejects([](SandboxSpec &s) { s.net.endpoints.push_back(tcp_host("*.example.com", 443)); });
    rejects([](SandboxSpec &s) {
        EndpointRule r = tcp_port(80);
        r.destination = "example.com";
        s.net.endpoints.push_back(r);
    });
    rejects([](SandboxSpec &s) {
        EndpointRule r;
        r.protocol = Protocol::Udp;
        r.port = 53;
        s.net.endpoints.push_back(r);
    });
    rejects([](SandboxSpec &s) { s.resources.max_cpu = 1.5; });
    rejects([](SandboxSpec &s) { s.resources.max_processes = 0; });
    rejects([](SandboxSpec &s) { s.net.https_interception = true; });
    rejects([](SandboxSpec &s) { s.net.http.push_back(HttpRule{"GE T", "example.com", 80, "/"}); });
    rejects([](SandboxSpec &s) { s.net.http.push_back(HttpRule{"GET", "example.com", 80, "x"}); });
    rejects([](SandboxSpec &s) { s.cwd = "tmp"; });
    rejects([](SandboxSpec &s) { s.fs.workspace = WorkspaceConfig{"/", {}, {}, true}; });
}

TEST_CASE("HTTP rules imply pinned endpoints")
{
    SandboxSpec spec;
    spec.net.http.push_back(HttpRule{"GET", "api.test", 8080, "/v1/*"});
    auto normalized = validate(spec);
    REQUIRE(normalized.spec.net.endpoints.size() == 1);
    const auto &e = normalized.spec.net.endpoints[0];
    CHECK(e.implied);
    CHECK(e.destination == "api.test");
    CHECK(e.port == 8080);

    auto pins = pin_resolution(normalized, table_resolver({{"api.test", {"10.1.2.3"}}}));
    CHECK(pins.contains(Destination{Protocol::Tcp, *IpAddress::parse("10.1.2.3"), 8080}));
    CHECK_FALSE(pins.contains(Destination{Protocol::Tcp, *IpAddress::parse("10.1.2.3"), 80}));
    CHECK(pins.hostnames_for(*IpAddress::parse("10.1.2.3")) == std::vector<std::string>{"api.test"});

    // Validation is idempotent.
    CHECK(validate(normalized.spec) == normalized);
}

TEST_CASE("unresolvable hosts fail pinning")
{
    SandboxSpec spec;
    spec.net.endpoints.push_back(tcp_host("nowhere.test", 80));
    CHECK_THROWS_AS(pin_resolution(validate(spec), table_resolver({})), Error);
}

TEST_CASE("DNS pinning freezes resolution at start")
{
    std::map<std::string, std::vector<std::string>> table{{"svc.test", {"10.0.0.1"}}};
    auto resolver = [&table](const std::string &host) {
        std::vector<IpAddress> out;
        for (const auto &t : table[host]) out.push_back(*IpAddress::parse(t));
        return out;
    };
    SandboxSpec spec;
    spec.net.endpoints.push_back(tcp_host("svc.test", 443));
    auto plan = build_plan(spec, resolver);
    table["svc.test"] = {"10.9.9.9"};
    Destination old_ip{Protocol::Tcp, *IpAddress::parse("10.0.0.1"), 443};
    Destination new_ip{Protocol::Tcp, *IpAddress::parse("10.9.9.9"), 443};
    for (int i = 0; i < 100; i++) {
        CHECK(plan.pins.contains(old_ip));
        CHECK_FALSE(plan.pins.contains(new_ip));
    }
}

TEST_CASE("IPv4-mapped addresses fold to IPv4")
{
    auto mapped = IpAddress::parse("::ffff:127.0.0.1");
    auto plain = IpAddress::parse("127.0.0.1");
    REQUIRE(mapped);
    CHECK(*mapped == *plain);
    CHECK(mapped->family() == IpAddress::Family::V4);
    CHECK(IpAddress::parse("::1")->is_loopback());
    CHECK_FALSE(IpAddress::parse("300.1.1.1"));
}

TEST_CASE("port-only TCP rules compile to the static port layer")
{
    SandboxSpec spec;
    spec.net.endpoints = {tcp_port(8080), tcp_port(22)};
    auto plan = build_plan(spec, table_resolver({}));
    CHECK(plan.tcp_direct);
    CHECK(plan.static_tcp_ports == std::set<std::uint16_t>{22, 8080});
    CHECK_FALSE(plan.routes(HandlerId::NetConnect));
    CHECK_FALSE(plan.has_supervisor_handlers());
    for (const auto &a : plan.assignments) {
        if (a.rule.domain == RuleRef::Domain::Endpoint) CHECK(a.layer == Layer::StaticTcpPorts);
    }
}

TEST_CASE("host rules, HTTP rules and the hook route the network through the supervisor")
{
    auto resolver = table_resolver({{"h.test", {"10.0.0.2"}}});
    SandboxSpec host;
    host.net.endpoints = {tcp_port(80), tcp_host("h.test", 443)};
    auto p1 = build_plan(host, resolver);
    CHECK_FALSE(p1.tcp_direct);
    CHECK(p1.routes(HandlerId::NetConnect));
    CHECK(p1.supervisor_handlers.at(SYS_sendmmsg) == HandlerId::NetSend);

    SandboxSpec http;
    http.net.http.push_back(HttpRule{"GET", "h.test", 80, "/"});
    CHECK_FALSE(build_plan(http, resolver).tcp_direct);

    SandboxSpec hook;
    hook.runtime.enabled = true;
    auto p3 = build_plan(hook, resolver);
    CHECK_FALSE(p3.tcp_direct);
    CHECK(p3.supervisor_handlers.at(SYS_execve) == HandlerId::HookExec);
    CHECK(p3.supervisor_handlers.at(SYS_openat) == HandlerId::FileOpen);
    CHECK(p3.supervisor_handlers.at(SYS_clone) == HandlerId::ProcessGate);
    CHECK(p3.syscall_filter.deny.at(SYS_openat2) == ENOSYS);
}

TEST_CASE("every rule is assigned to exactly one layer")
{
    auto resolver = table_resolver({{"h.test", {"10.0.0.2"}}});
    SandboxSpec spec;
    spec.fs.rules = {{"/usr", PathAccess::Read}, {"/tmp", PathAccess::Write}};
    spec.net.endpoints = {tcp_port(80)};
    spec.net.http = {HttpRule{"GET", "h.test", 80, "/"}};
    spec.resources.max_processes = 4;
    spec.resources.max_memory = 64 << 20;
    spec.resources.max_fds = 64;
    auto plan = build_plan(spec, resolver);
    std::map<RuleRef, int> seen;
    for (const auto &a : plan.assignments) seen[a.rule]++;
    for (const auto &[ref, count] : seen) CHECK(count == 1);
    CHECK(seen.count({RuleRef::Domain::Path, 0}));
    CHECK(seen.count({RuleRef::Domain::Path, 1}));
    CHECK(seen.count({RuleRef::Domain::Http, 0}));
    CHECK(seen.count({RuleRef::Domain::Limit, 0}));
    CHECK(seen.count({RuleRef::Domain::Limit, 1}));
    CHECK(seen.count({RuleRef::Domain::Limit, 3}));
    CHECK(plan.routes(HandlerId::MemoryAccount));
    CHECK(plan.routes(HandlerId::ProcessGate));
}

TEST_CASE("default deny set covers group escapes and is applied")
{
    SandboxSpec spec;
    auto plan = build_plan(spec);
    CHECK(plan.syscall_filter.deny.at(SYS_setsid) == EPERM);
    CHECK(plan.syscall_filter.deny.at(SYS_setpgid) == EPERM);
    CHECK(plan.syscall_filter.deny.at(SYS_ptrace) == EPERM);
    CHECK(plan.syscall_filter.deny_set_version == kDefaultDenySetVersion);
    CHECK(plan.syscall_filter.notify.empty());
}

// Landlock semantics: a path's rights are the union of the grants on it and
// its ancestors. The property: no path gets a right the deny-wins scope
// withholds, and untouched subtrees keep what the scope gives them.
TEST_CASE("static grants never exceed the path scope")
{
    TempDir root;
    const std::vector<std::string> dirs = {"a", "a/b", "a/b/c", "a/d", "e", "e/f"};
    const std::vector<std::string> files = {"a/x", "a/b/y", "a/b/c/z", "a/d/w", "e/v", "e/f/u"};
    for (const auto &d : dirs) make_dir(root.path() + "/" + d);
    for (const auto &f : files) write_file(root.path() + "/" + f, "data");
    std::vector<std::string> all;
    for (const auto &d : dirs) all.push_back(d);
    for (const auto &f : files) all.push_back(f);

    std::mt19937 rng(1234);
    for (int trial = 0; trial < 300; trial++) {
        SandboxSpec spec;
        int n = 1 + static_cast<int>(rng() % 5);
        for (int i = 0; i < n; i++) {
            std::string p = root.path();
            if (rng() % 4) p += "/" + all[rng() % all.size()];
            auto access = static_cast<PathAccess>(rng() % 3);
            spec.fs.rules.push_back({p, access});
        }
        auto normalized = validate(spec);
        auto plan = compile(normalized, PinnedAllowlist{});
        PathScope scope(normalized);

        for (const auto &rel : all) {
            std::string p = root.path() + "/" + rel;
            bool is_dir = std::find(dirs.begin(), dirs.end(), rel) != dirs.end();
            std::uint64_t eff = 0;
            for (const auto &g : plan.static_fs) {
                if (path_has_prefix(p, g.path)) eff |= g.access;
            }
            std::uint64_t read_bit = is_dir ? fs_access::ReadDir : fs_access::ReadFile;
            std::uint64_t write_bit = is_dir ? fs_access::MakeReg : fs_access::WriteFile;
            if (!scope.readable(p)) CHECK_MESSAGE((eff & read_bit) == 0, p);
            if (!scope.writable(p)) CHECK_MESSAGE((eff & write_bit) == 0, p);

            bool restricted_below = false;
            for (const auto &r : normalized.spec.fs.rules) {
                if (r.access == PathAccess::Deny && path_has_prefix(r.path, p) && r.path != p) {
                    restricted_below = true;
                }
            }
            if (!restricted_below || !is_dir) {
                if (scope.readable(p)) CHECK_MESSAGE((eff & read_bit) != 0, p);
                if (scope.writable(p)) CHECK_MESSAGE((eff & write_bit) != 0, p);
            }
        }
    }
}

TEST_CASE("policy documents round trip")
{
    SandboxSpec spec;
    spec.fs.rules = {{"/usr", PathAccess::Read}, {"/tmp/out", PathAccess::Write},
                     {"/etc/shadow", PathAccess::Deny}};
    spec.fs.on_exit = EffectAction::Commit;
    spec.fs.workspace = WorkspaceConfig{"/tmp/ws", std::string("/tmp/st"), 1 << 20, false};
    spec.net.endpoints = {tcp_port(80), tcp_host("example.com", 443)};
    spec.net.http = {HttpRule{"GET", "example.com", 80, "/api/*"}};
    spec.resources.max_processes = 4;
    spec.resources.max_memory = 64ull << 20;
    spec.resources.max_cpu = 0.5;
    spec.runtime.enabled = true;
    spec.runtime.categories = {EventCategory::Exec, EventCategory::File};
    spec.runtime.hold_timeout = std::chrono::milliseconds(250);
    spec.cwd = "/tmp";
    auto text = spec_to_json(spec);
    CHECK(spec_from_json(text) == spec);
    CHECK(spec_from_json(spec_to_json(spec_from_json(text))) == spec);
}

TEST_CASE("policy documents reject unknown keys and bad values")
{
    CHECK_THROWS_AS(spec_from_json(R"({"fs":{"raed":[]}})"), ValidationError);
    CHECK_THROWS_AS(spec_from_json(R"({"bogus":1})"), ValidationError);
    CHECK_THROWS_AS(spec_from_json(R"({"resources":{"max_memory":"lots"}})"), ValidationError);
    CHECK_THROWS_AS(spec_from_json("not json"), ValidationError);
    auto spec = spec_from_json(R"({"resources":{"max_memory":"64M"}})");
    CHECK(spec.resources.max_memory == 64ull << 20);

    auto stages = pipeline_from_json(
        R"({"stages":[{"policy":{"fs":{"read":["/usr"]}},"cmd":["cat","f"]},{"cmd":["tr","a-z","A-Z"]}]})");
    REQUIRE(stages.size() == 2);
    CHECK(stages[0].cmd == std::vector<std::string>{"cat", "f"});
    CHECK(stages[1].spec.fs.rules.empty());
    CHECK_THROWS_AS(pipeline_from_json(R"({"stages":[]})"), ValidationError);
}

TEST_CASE("flag parsers")
{
    CHECK(parse_size("64M") == 64ull << 20);
    CHECK(parse_size("1G") == 1ull << 30);
    CHECK(parse_size("4096") == 4096);
    CHECK(parse_size("2k") == 2048);
    CHECK_THROWS(parse_size("M"));
    CHECK_THROWS(parse_size("-1"));

    auto p = parse_net_flag("tcp:8080");
    CHECK(p.port_only);
    CHECK(p.port == 8080);
    auto h = parse_net_flag("tcp:example.com:443");
    CHECK(h.destination == "example.com");
    CHECK_FALSE(h.port_only);
    auto icmp = parse_net_flag("icmp:10.0.0.1");
    CHECK(icmp.protocol == Protocol::Icmp);
    CHECK_FALSE(icmp.port);
    CHECK_THROWS(parse_net_flag("tcp:notaport"));

    auto r = parse_http_flag("POST api.test:8080 /v1/*");
    CHECK(r.method == "POST");
    CHECK(r.host == "api.test");
    CHECK(r.port == 8080);
    CHECK(r.path_pattern == "/v1/*");
    CHECK_THROWS(parse_http_flag("GET onlyhost"));
}
}
