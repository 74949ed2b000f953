#include "doctest.h"

#include "lockbox/error.hpp"
#include "lockbox/fake_notify.hpp"
#include "lockbox/hook.hpp"

#include <sched.h>
#include <sys/syscall.h>

#include <random>
#include <thread>

using namespace lockbox;

namespace {

Resolver table(std::map<std::string, std::vector<std::string>> t)
{
    return [t](const std::string &host) {
        std::vector<IpAddress> out;
        auto it = t.find(host);
        if (it != t.end()) {
            for (const auto &s : it->second) out.push_back(*IpAddress::parse(s));
        }
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

EndpointRule port_rule(std::uint16_t port)
{
    EndpointRule r;
    r.port = port;
    r.port_only = true;
    return r;
}

struct EmptyFreeze final : FreezeScope {
    std::set<pid_t> none;
    const std::set<pid_t> &frozen() const override { return none; }
    void await_exec(pid_t, int, std::chrono::milliseconds) override {}
};

// Records whether child memory was touched before the freeze.
struct RecordingFreezer final : Freezer {
    FakeNotifySource *fake = nullptr;
    int calls = 0;
    std::uint64_t reads_at_freeze = ~0ull;
    std::unique_ptr<FreezeScope> freeze(pid_t, pid_t) override
    {
        calls++;
        reads_at_freeze = fake->read_count();
        return std::make_unique<EmptyFreeze>();
    }
};

// Lays out an argv array at `base` in the fake child.
void map_argv(FakeNotifySource &fake, pid_t pid, std::uint64_t base,
              const std::vector<std::string> &argv)
{
    std::vector<std::uint8_t> ptrs((argv.size() + 1) * 8, 0);
    std::uint64_t str = base + 0x1000;
    std::vector<std::uint8_t> strings;
    for (std::size_t i = 0; i < argv.size(); i++) {
        std::uint64_t p = str + strings.size();
        std::memcpy(ptrs.data() + i * 8, &p, 8);
        strings.insert(strings.end(), argv[i].begin(), argv[i].end());
        strings.push_back(0);
    }
    // String reads run to the end of the page, so map whole pages.
    strings.resize((strings.size() + 4095) / 4096 * 4096, 0);
    fake.map_memory(pid, base, ptrs);
    fake.map_memory(pid, str, strings);
}

} // namespace

template <class E>
concept HasPath = requires(E e) { e.path; };
static_assert(!HasPath<Event>, "events carry no path");

TEST_SUITE("kernel-free")
{
TEST_CASE("restricting the network only narrows the pins")
{
    SandboxSpec spec;
    spec.net.endpoints = {host_rule("a.test", 443), host_rule("b.test", 80), port_rule(8080)};
    auto plan = build_plan(spec, table({{"a.test", {"10.0.0.1", "10.0.0.2"}}, {"b.test", {"10.0.0.3"}}}));
    const auto &pins = plan.pins;

    auto narrowed = narrow_pins(pins, {host_rule("a.test", 443)});
    CHECK(pins.includes(narrowed));
    CHECK(narrowed.contains(Destination{Protocol::Tcp, *IpAddress::parse("10.0.0.2"), 443}));
    CHECK_FALSE(narrowed.contains(Destination{Protocol::Tcp, *IpAddress::parse("10.0.0.3"), 80}));
    CHECK(narrowed.hostnames_for(*IpAddress::parse("10.0.0.1")) == std::vector<std::string>{"a.test"});

    CHECK(narrow_pins(pins, {}).empty());
    CHECK(narrow_pins(pins, {host_rule("10.0.0.3", 80)}).contains(
        Destination{Protocol::Tcp, *IpAddress::parse("10.0.0.3"), 80}));
    CHECK_THROWS_AS(narrow_pins(pins, {host_rule("c.test", 443)}), PolicyError);
    CHECK_THROWS_AS(narrow_pins(pins, {port_rule(9090)}), PolicyError);
    CHECK_THROWS_AS(narrow_pins(pins, {host_rule("10.0.0.9", 443)}), PolicyError);
    CHECK(narrow_pins(pins, {port_rule(8080)}).contains(
        Destination{Protocol::Tcp, *IpAddress::parse("8.8.8.8"), 8080}));
    // Idempotent.
    CHECK(narrow_pins(narrowed, {host_rule("a.test", 443)}) == narrowed);
}

TEST_CASE("tightening sequences are monotone")
{
    SandboxSpec spec;
    spec.net.endpoints = {host_rule("a.test", 1), host_rule("a.test", 2), host_rule("b.test", 3),
                          port_rule(4)};
    spec.fs.rules = {{"/usr", PathAccess::Read}, {"/tmp", PathAccess::Write}};
    spec.resources.max_processes = 16;
    spec.resources.max_memory = 1ull << 30;
    auto plan = build_plan(spec, table({{"a.test", {"10.0.0.1"}}, {"b.test", {"10.0.0.2"}}}));
    const std::vector<EndpointRule> candidates = {host_rule("a.test", 1), host_rule("a.test", 2),
                                                  host_rule("b.test", 3), port_rule(4),
                                                  host_rule("c.test", 5), port_rule(6)};
    const std::vector<std::string> paths = {"/usr/bin", "/usr/lib/x", "/tmp/a", "/tmp", "/etc"};

    std::mt19937 rng(11);
    for (int trial = 0; trial < 200; trial++) {
        LivePolicyCell cell(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
        RuntimeContext ctx(&cell);
        for (int step = 0; step < 12; step++) {
            auto before = cell.load();
            try {
                switch (rng() % 3) {
                    case 0: {
                        std::vector<EndpointRule> rules;
                        for (const auto &c : candidates) {
                            if (rng() % 2) rules.push_back(c);
                        }
                        ctx.restrict_network(rules);
                        break;
                    }
                    case 1: ctx.deny_path(paths[rng() % paths.size()]); break;
                    default: {
                        ResourceLimits l;
                        if (rng() % 2) l.max_processes = 1 + rng() % 32;
                        if (rng() % 2) l.max_memory = (1 + rng() % 2048) << 20;
                        ctx.tighten_resources(l);
                    }
                }
            } catch (const PolicyError &) {
                CHECK(cell.load() == before);
            }
            auto after = cell.load();
            CHECK(before->pins.includes(after->pins));
            for (const auto &p : paths) {
                if (after->scope.readable(p)) CHECK(before->scope.readable(p));
                if (after->scope.writable(p)) CHECK(before->scope.writable(p));
            }
            if (after->limits.max_processes) {
                REQUIRE(before->limits.max_processes);
                CHECK(*after->limits.max_processes <= *before->limits.max_processes);
            }
            if (after->limits.max_memory) CHECK(*after->limits.max_memory <= *before->limits.max_memory);
        }
    }
}

TEST_CASE("resource tightening rejects widening")
{
    ResourceLimits cur;
    cur.max_processes = 4;
    ResourceLimits wider;
    wider.max_processes = 8;
    CHECK_THROWS_AS(narrow_limits(cur, wider), PolicyError);
    ResourceLimits add;
    add.max_memory = 1 << 20;
    auto n = narrow_limits(cur, add);
    CHECK(n.max_processes == 4u);
    CHECK(n.max_memory == 1u << 20);
    CHECK(narrow_limits(cur, ResourceLimits{}) == cur);
}

TEST_CASE("deny_path requires an absolute path and marks the scope")
{
    SandboxSpec spec;
    spec.fs.rules = {{"/etc", PathAccess::Read}};
    auto plan = build_plan(spec);
    LivePolicyCell cell(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    RuntimeContext ctx(&cell);
    CHECK_THROWS_AS(ctx.deny_path("etc/shadow"), PolicyError);
    ctx.deny_path("/etc/shadow");
    CHECK(cell.load()->paths_tightened);
    CHECK(cell.load()->scope.denied("/etc/shadow"));
    CHECK(cell.load()->scope.readable("/etc/passwd"));
}

TEST_CASE("callback gate serializes, audits and fails closed")
{
    SandboxSpec spec;
    auto plan = build_plan(spec);
    LivePolicyCell cell(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    RuntimeContext ctx(&cell);
    AuditLog audit;
    std::atomic<int> in_flight{0}, max_in_flight{0};
    RuntimeHookConfig config;
    config.enabled = true;
    config.categories = {EventCategory::Exec, EventCategory::File};
    CallbackGate gate(
        [&](const Event &e, RuntimeContext &) -> CallbackValue {
            int now = ++in_flight;
            max_in_flight = std::max(max_in_flight.load(), now);
            std::this_thread::sleep_for(std::chrono::microseconds(200));
            in_flight--;
            if (e.argv_contains("curl")) return std::string("audit");
            if (e.argv_contains("boom")) throw std::runtime_error("callback failed");
            if (e.argv_contains("errno")) return std::int64_t{13};
            return std::int64_t{0};
        },
        config, &ctx, &audit);
    CHECK(gate.subscribed(EventCategory::Exec));
    CHECK_FALSE(gate.subscribed(EventCategory::Net));

    auto exec_event = [](std::vector<std::string> argv) {
        Event e;
        e.syscall = "execve";
        e.argv = std::move(argv);
        return e;
    };
    std::vector<std::thread> threads;
    std::atomic<int> allowed{0};
    for (int i = 0; i < 8; i++) {
        threads.emplace_back([&] {
            for (int j = 0; j < 20; j++) {
                if (gate.deliver(exec_event({"/bin/ls"})).permits()) allowed++;
            }
        });
    }
    for (auto &t : threads) t.join();
    CHECK(allowed == 160);
    CHECK(max_in_flight == 1);

    CHECK(gate.deliver(exec_event({"/usr/bin/curl", "http://x"})) == HookVerdict::audit());
    CHECK(gate.deliver(exec_event({"errno"})) == HookVerdict::deny_errno(13));
    CHECK(gate.deliver(exec_event({"boom"})) == HookVerdict::deny());
    CHECK(gate.errors() == 1);
    auto records = audit.records();
    bool flagged = false, errored = false;
    for (const auto &r : records) {
        if (r.decision == "audit" && r.kind == "exec" && r.argv.size() == 2) flagged = true;
        if (r.kind == "hook-error") errored = true;
    }
    CHECK(flagged);
    CHECK(errored);
}

TEST_CASE("hold timeout denies")
{
    SandboxSpec spec;
    auto plan = build_plan(spec);
    LivePolicyCell cell(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    RuntimeContext ctx(&cell);
    AuditLog audit;
    RuntimeHookConfig config;
    config.enabled = true;
    config.hold_timeout = std::chrono::milliseconds(50);
    CallbackGate gate(
        [](const Event &, RuntimeContext &) -> CallbackValue {
            std::this_thread::sleep_for(std::chrono::milliseconds(300));
            return std::int64_t{0};
        },
        config, &ctx, &audit);
    Event e;
    e.argv = std::vector<std::string>{"x"};
    CHECK(gate.deliver(e) == HookVerdict::deny());
    CHECK(gate.timeouts() == 1);
}

TEST_CASE("exec holds freeze before any argv read")
{
    FakeNotifySource fake;
    SandboxSpec spec;
    spec.runtime.enabled = true;
    auto plan = build_plan(spec);
    LivePolicyCell cell(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    RuntimeContext rctx(&cell);
    AuditLog audit;
    std::vector<std::vector<std::string>> seen;
    CallbackGate gate(
        [&](const Event &e, RuntimeContext &) -> CallbackValue {
            seen.push_back(*e.argv);
            return std::int64_t{0};
        },
        spec.runtime, &rctx, &audit);
    RecordingFreezer freezer;
    freezer.fake = &fake;
    HookRuntime rt;
    rt.plan = &plan;
    rt.live = &cell;
    rt.gate = &gate;
    rt.audit = &audit;
    rt.freezer = &freezer;

    const pid_t pid = 777777;
    map_argv(fake, pid, 0x10000, {"/bin/echo", "hello", "world"});
    Notification n = fake.make(pid, SYS_execve, {0x20000, 0x10000, 0});
    n.id = fake.push(n);
    NotifyContext ctx(fake, n);
    Verdict v = hook_exec(rt, ctx);
    CHECK(v.kind == Verdict::Kind::Allow);
    CHECK(freezer.calls == 1);
    CHECK(freezer.reads_at_freeze == 0);
    REQUIRE(seen.size() == 1);
    CHECK(seen[0] == std::vector<std::string>{"/bin/echo", "hello", "world"});
    CHECK(rt.exec_holds == 1);
}

TEST_CASE("exec is denied when tasks cannot be frozen")
{
    FakeNotifySource fake;
    SandboxSpec spec;
    spec.runtime.enabled = true;
    auto plan = build_plan(spec);
    LivePolicyCell cell(LivePolicy{plan.pins, PathScope(plan.spec), spec.resources, false});
    RuntimeContext rctx(&cell);
    AuditLog audit;
    int calls = 0;
    CallbackGate gate(
        [&](const Event &, RuntimeContext &) -> CallbackValue {
            calls++;
            return std::int64_t{0};
        },
        spec.runtime, &rctx, &audit);
    auto freezer = make_disabled_freezer();
    HookRuntime rt;
    rt.plan = &plan;
    rt.live = &cell;
    rt.gate = &gate;
    rt.audit = &audit;
    rt.freezer = freezer.get();
    map_argv(fake, 5, 0x10000, {"/bin/true"});
    Notification n = fake.make(5, SYS_execve, {0x20000, 0x10000, 0});
    n.id = fake.push(n);
    NotifyContext ctx(fake, n);
    Verdict v = hook_exec(rt, ctx);
    CHECK(v.is_deny());
    CHECK(v.error == EPERM);
    CHECK(calls == 0);
    CHECK(fake.read_count() == 0);
    CHECK(rt.freeze_failures == 1);
    auto records = audit.records();
    REQUIRE_FALSE(records.empty());
    CHECK(records.back().kind == "hook-error");
}

TEST_CASE("creation tracking fails closed on unreadable clone3 arguments")
{
    FakeNotifySource fake;
    HookRuntime rt;
    auto call = [&](int nr, std::array<std::uint64_t, 6> args) {
        Notification n = fake.make(9, nr, args);
        n.id = fake.push(n);
        NotifyContext ctx(fake, n);
        return track_creation(rt, ctx);
    };
    CHECK(call(SYS_fork, {}).kind == Verdict::Kind::Allow);
    CHECK(call(SYS_clone, {CLONE_VM | CLONE_THREAD | CLONE_SIGHAND}).kind == Verdict::Kind::Allow);
    CHECK(call(SYS_vfork, {}).kind == Verdict::Kind::Allow);
    Verdict bad = call(SYS_clone3, {0xbad000, 88});
    CHECK(bad.is_deny());
    CHECK(bad.error == EPERM);
    CHECK(rt.index.creations() == 3);
    CHECK(rt.index.threads() == 1);
}

TEST_CASE("argv reads are bounded")
{
    FakeNotifySource fake;
    std::vector<std::string> argv(100, "arg");
    map_argv(fake, 3, 0x10000, argv);
    Notification n = fake.make(3, SYS_execve, {0, 0x10000, 0});
    n.id = fake.push(n);
    NotifyContext ctx(fake, n);
    CHECK(read_argv(ctx, 0x10000) == argv);
    CHECK(read_argv(ctx, 0).empty());
    CHECK_THROWS_AS(read_argv(ctx, 0xdead0000), MemoryFault);
}
}
