#include "doctest.h"

#include "lockbox/fake_notify.hpp"
#include "lockbox/net.hpp"
#include "lockbox/plan.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/syscall.h>
#include <unistd.h>

#include <random>

using namespace lockbox;

namespace {

Resolver fixed(std::map<std::string, std::string> table)
{
    return [table](const std::string &host) {
        std::vector<IpAddress> out;
        auto it = table.find(host);
        if (it != table.end()) out.push_back(*IpAddress::parse(it->second));
        return out;
    };
}

EndpointRule host_rule(const std::string &host, std::uint16_t port)
{
    EndpointRule r;
    r.destination = host;
    r.port = port;
    return r;
}

Destination tcp(const char *ip, std::uint16_t port)
{
    return Destination{Protocol::Tcp, *IpAddress::parse(ip), port};
}

struct Listener {
    UniqueFd fd;
    std::uint16_t port = 0;

    Listener()
    {
        fd = UniqueFd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        ::bind(fd.get(), reinterpret_cast<sockaddr *>(&sa), sizeof(sa));
        ::listen(fd.get(), 64);
        socklen_t len = sizeof(sa);
        ::getsockname(fd.get(), reinterpret_cast<sockaddr *>(&sa), &len);
        port = ntohs(sa.sin_port);
    }
};

std::vector<std::uint8_t> sockaddr_bytes(std::uint16_t port)
{
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_port = htons(port);
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    auto *p = reinterpret_cast<std::uint8_t *>(&sa);
    return std::vector<std::uint8_t>(p, p + sizeof(sa));
}

} // namespace

TEST_SUITE("kernel-free")
{
TEST_CASE("flow classification")
{
    auto resolver = fixed({{"api.test", "10.0.0.5"}, {"other.test", "10.0.0.6"}});
    SandboxSpec spec;
    spec.net.endpoints = {host_rule("other.test", 5432)};
    EndpointRule any80;
    any80.port = 8081;
    any80.port_only = true;
    spec.net.endpoints.push_back(any80);
    spec.net.http = {HttpRule{"GET", "api.test", 80, "/v1/*"}, HttpRule{"GET", "api.test", 443, "/"}};
    auto plan = build_plan(spec, resolver);
    CHECK(classify_flow(tcp("10.0.0.5", 80), plan) == FlowPath::HttpProxied);
    CHECK(classify_flow(tcp("10.0.0.5", 443), plan) == FlowPath::OnBehalfRaw);
    CHECK(classify_flow(tcp("10.0.0.6", 5432), plan) == FlowPath::OnBehalfRaw);
    CHECK(classify_flow(tcp("10.0.0.6", 80), plan) == FlowPath::Denied);
    CHECK(classify_flow(tcp("192.168.1.1", 8081), plan) == FlowPath::OnBehalfRaw);
    CHECK(classify_flow(Destination{Protocol::Udp, *IpAddress::parse("10.0.0.6"), 5432}, plan) ==
          FlowPath::Denied);

    SandboxSpec direct;
    direct.net.endpoints = {any80};
    auto dplan = build_plan(direct, resolver);
    CHECK(classify_flow(tcp("1.2.3.4", 8081), dplan) == FlowPath::Direct);
    CHECK(classify_flow(tcp("1.2.3.4", 8082), dplan) == FlowPath::Denied);
}

TEST_CASE("glob and prefix path matching")
{
    CHECK(glob_match("/v1/*", "/v1/users/7"));
    CHECK(glob_match("/a?c", "/abc"));
    CHECK_FALSE(glob_match("/a?c", "/abbc"));
    CHECK(glob_match("*", ""));
    CHECK_FALSE(glob_match("/v1/*", "/v2/x"));
    CHECK(http_path_matches("/api", "/api/x?y=1"));
    CHECK(http_path_matches("/api/*.json", "/api/a.json?x=*"));
    CHECK_FALSE(http_path_matches("/api/*.json", "/api/a.xml?q=.json"));
    CHECK_FALSE(http_path_matches("/api", "/other"));

    std::mt19937 rng(3);
    for (int i = 0; i < 2000; i++) {
        std::string text;
        for (int j = 0, n = static_cast<int>(rng() % 8); j < n; j++) text += "ab/"[rng() % 3];
        CHECK(glob_match("*", text));
        CHECK(glob_match(text, text));
        CHECK(glob_match(text + "*", text + "suffix"));
    }
}

TEST_CASE("HTTP decisions")
{
    std::vector<HttpRule> rules = {HttpRule{"GET", "api.test", 80, "/public/*"},
                                   HttpRule{"*", "api.test", 80, "/any"}};
    auto d = decide_http("GET", "api.test", 80, "/public/a", rules);
    CHECK(d.action == HttpDecision::Action::Forward);
    CHECK(d.matched_rule == 0u);
    CHECK(decide_http("POST", "api.test", 80, "/public/a", rules).status == 403);
    CHECK(decide_http("DELETE", "api.test", 80, "/any/thing", rules).matched_rule == 1u);
    CHECK(decide_http("GET", "evil.test", 80, "/public/a", rules).action == HttpDecision::Action::Reject);
    CHECK(decide_http("GET", "api.test", 8080, "/public/a", rules).action ==
          HttpDecision::Action::Reject);
}

TEST_CASE("request heads")
{
    auto head = parse_request_head("GET /a/b?c=1 HTTP/1.1\r\nHost: api.test:8080\r\nX-K: v\r\n\r\n");
    REQUIRE(head);
    CHECK(head->method == "GET");
    CHECK(head->path == "/a/b?c=1");
    CHECK(head->host == "api.test");
    CHECK(head->header("x-k") == "v");

    auto abs = parse_request_head("POST http://api.test/x HTTP/1.0\r\n\r\n");
    REQUIRE(abs);
    CHECK(abs->host == "api.test");
    CHECK(abs->path == "/x");

    CHECK_FALSE(parse_request_head("GARBAGE\r\n\r\n"));
    CHECK_FALSE(parse_request_head("GET / HTTP/2.0\r\n\r\n"));
    CHECK_FALSE(parse_request_head("GET / HTTP/1.1\r\nNoColon\r\n\r\n"));
}

TEST_CASE("sockaddr codec")
{
    sockaddr_storage st{};
    auto ip = *IpAddress::parse("2001:db8::1");
    std::size_t len = encode_sockaddr(ip, 443, &st, sizeof(st));
    auto back = decode_sockaddr(&st, len);
    REQUIRE(back);
    CHECK(back->first == ip);
    CHECK(back->second == 443);
    CHECK_FALSE(decode_sockaddr(&st, 3));
}

TEST_CASE("connect destination is read once and the connection uses that copy")
{
    Listener good, bad;
    auto resolver = fixed({});
    SandboxSpec spec;
    spec.net.endpoints = {host_rule("127.0.0.1", good.port)};
    auto plan = build_plan(spec, resolver);
    LivePolicyCell live(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    auto rt = std::make_shared<NetRuntime>();
    rt->plan = &plan;
    rt->live = &live;
    HandlerTable table;
    install_net_handlers(table, rt);

    FakeNotifySource fake;
    SupervisorStats stats;
    const pid_t pid = 999999;
    for (int iter = 0; iter < 50; iter++) {
        UniqueFd sock(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
        fake.add_fd(pid, 3, sock.get());
        fake.map_memory(pid, 0x1000, sockaddr_bytes(good.port));
        // Rewrite the destination right after the supervisor copied it.
        fake.on_read = [&](pid_t p, std::uint64_t addr) {
            auto b = sockaddr_bytes(bad.port);
            fake.write_memory(p, addr, b.data(), b.size());
        };
        Notification n = fake.make(pid, SYS_connect, {3, 0x1000, sizeof(sockaddr_in)});
        n.id = fake.push(n);
        NotifyContext ctx(fake, n);
        Verdict v = dispatch(table, ctx, stats, {});
        CHECK(v.kind == Verdict::Kind::Emulate);
        CHECK(v.error == 0);
        CHECK(ctx.max_reads_per_address() == 1);
        sockaddr_in peer{};
        socklen_t plen = sizeof(peer);
        REQUIRE(::getpeername(sock.get(), reinterpret_cast<sockaddr *>(&peer), &plen) == 0);
        CHECK(ntohs(peer.sin_port) == good.port);
        UniqueFd accepted(::accept4(good.fd.get(), nullptr, nullptr, SOCK_CLOEXEC));
        CHECK(accepted);
    }

    // The forbidden destination itself is refused.
    UniqueFd sock(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    fake.add_fd(pid, 4, sock.get());
    fake.map_memory(pid, 0x2000, sockaddr_bytes(bad.port));
    fake.on_read = nullptr;
    Notification n = fake.make(pid, SYS_connect, {4, 0x2000, sizeof(sockaddr_in)});
    n.id = fake.push(n);
    NotifyContext ctx(fake, n);
    Verdict v = dispatch(table, ctx, stats, {});
    CHECK(v.is_deny());
    CHECK(v.error == ECONNREFUSED);
    CHECK(rt->counters.denied == 1);
    CHECK(rt->counters.on_behalf == 50);
}

TEST_CASE("datagram sends are checked against the pins")
{
    auto resolver = fixed({});
    SandboxSpec spec;
    EndpointRule dns;
    dns.protocol = Protocol::Udp;
    dns.destination = "127.0.0.1";
    dns.port = 5353;
    spec.net.endpoints = {dns};
    auto plan = build_plan(spec, resolver);
    CHECK(plan.syscall_filter.allow_inet_datagram);
    LivePolicyCell live(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    auto rt = std::make_shared<NetRuntime>();
    rt->plan = &plan;
    rt->live = &live;
    HandlerTable table;
    install_net_handlers(table, rt);

    UniqueFd receiver(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
    sockaddr_in sa{};
    sa.sin_family = AF_INET;
    sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    sa.sin_port = htons(5353);
    bool bound = ::bind(receiver.get(), reinterpret_cast<sockaddr *>(&sa), sizeof(sa)) == 0;

    FakeNotifySource fake;
    SupervisorStats stats;
    const pid_t pid = 999998;
    UniqueFd sock(::socket(AF_INET, SOCK_DGRAM | SOCK_CLOEXEC, 0));
    fake.add_fd(pid, 3, sock.get());
    fake.map_memory(pid, 0x1000, sockaddr_bytes(5353));
    fake.map_memory(pid, 0x2000, sockaddr_bytes(5354));
    fake.map_memory(pid, 0x3000, {'p', 'i', 'n', 'g'});
    auto send = [&](std::uint64_t addr) {
        Notification n = fake.make(pid, SYS_sendto, {3, 0x3000, 4, 0, addr, sizeof(sockaddr_in)});
        n.id = fake.push(n);
        NotifyContext ctx(fake, n);
        return dispatch(table, ctx, stats, {});
    };
    Verdict ok = send(0x1000);
    if (bound) {
        CHECK(ok.kind == Verdict::Kind::Emulate);
        CHECK(ok.value == 4);
        char buf[8];
        CHECK(::recv(receiver.get(), buf, sizeof(buf), MSG_DONTWAIT) == 4);
    }
    Verdict refused = send(0x2000);
    CHECK(refused.is_deny());
    CHECK(refused.error == EACCES);
}
}
