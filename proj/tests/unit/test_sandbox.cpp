#include "doctest.h"

#include "lockbox/composition.hpp"
#include "lockbox/error.hpp"
#include "lockbox/kernel.hpp"
#include "lockbox/runtime.hpp"

#include "support.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <signal.h>
#include <sys/socket.h>
#include <unistd.h>

#include <thread>

using namespace lockbox;

namespace {

std::string probe()
{
    return self_dir() + "/lockbox_probe";
}

SandboxSpec base_spec()
{
    SandboxSpec spec;
    for (const char *p : {"/usr", "/lib", "/lib64", "/bin"}) {
        if (std::filesystem::exists(p)) spec.fs.rules.push_back({p, PathAccess::Read});
    }
    spec.fs.rules.push_back({self_dir(), PathAccess::Read});
    return spec;
}

RunOptions captured()
{
    RunOptions o;
    o.stdio[0] = StdioSpec::null();
    o.stdio[1] = StdioSpec::pipe();
    o.stdio[2] = StdioSpec::pipe();
    o.timeout = std::chrono::seconds(20);
    return o;
}

RunResult run_probe(const SandboxSpec &spec, std::vector<std::string> args, RunOptions o = captured())
{
    args.insert(args.begin(), probe());
    return Sandbox(spec).run(args, std::move(o));
}

std::string first_line(const std::string &s)
{
    return s.substr(0, s.find('\n'));
}

struct Server {
    UniqueFd fd;
    std::uint16_t port = 0;
    std::thread thread;
    std::atomic<int> accepted{0};
    std::atomic<bool> stop{false};

    Server()
    {
        fd = UniqueFd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
        sockaddr_in sa{};
        sa.sin_family = AF_INET;
        sa.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
        ::bind(fd.get(), reinterpret_cast<sockaddr *>(&sa), sizeof(sa));
        ::listen(fd.get(), 128);
        socklen_t len = sizeof(sa);
        ::getsockname(fd.get(), reinterpret_cast<sockaddr *>(&sa), &len);
        port = ntohs(sa.sin_port);
        thread = std::thread([this] {
            while (!stop) {
                int c = ::accept4(fd.get(), nullptr, nullptr, SOCK_CLOEXEC);
                if (c < 0) break;
                accepted++;
                ::close(c);
            }
        });
    }
    ~Server()
    {
        stop = true;
        ::shutdown(fd.get(), SHUT_RDWR);
        thread.join();
    }
};

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

} // namespace

TEST_SUITE("kernel")
{
TEST_CASE("kernel reports the required features")
{
    FeatureReport r = check_kernel();
    CHECK(r.landlock_abi >= kRequiredLandlockAbi);
    CHECK(r.seccomp_notify);
    CHECK(r.lines().size() >= 6);
}

TEST_CASE("launch below the Landlock floor is refused")
{
    RunOptions o = captured();
    o.landlock_abi = 5;
    try {
        Sandbox(base_spec()).run({"/bin/true"}, o);
        FAIL("expected a kernel floor error");
    } catch (const Error &e) {
        CHECK(e.kind() == ErrorKind::KernelFloor);
    }
}

TEST_CASE("exit status and output")
{
    auto r = Sandbox(base_spec()).run({"/bin/sh", "-c", "echo out; echo err >&2; exit 3"}, captured());
    CHECK(r.status.code == 3);
    CHECK(r.stdout_data == "out\n");
    CHECK(r.stderr_data == "err\n");

    RunOptions in = captured();
    in.stdio[0] = StdioSpec::pipe();
    in.input = "through stdin";
    auto cat = Sandbox(base_spec()).run({"/bin/cat"}, in);
    CHECK(cat.stdout_data == "through stdin");
}

TEST_CASE("missing executables raise an exec error")
{
    try {
        Sandbox(base_spec()).run({"/nonexistent/bin"}, captured());
        FAIL("expected ExecError");
    } catch (const ExecError &e) {
        CHECK(e.error_number() == ENOENT);
    }
}

TEST_CASE("launch steps are ordered")
{
    StepLog log;
    RunOptions o = captured();
    o.step_log = &log;
    SandboxSpec spec = base_spec();
    spec.resources.max_processes = 8;
    Sandbox(spec).run({"/bin/true"}, o);
    auto steps = log.steps();
    auto pos = [&](Step s) { return std::find(steps.begin(), steps.end(), s) - steps.begin(); };
    CHECK(pos(Step::Landlock) < pos(Step::SyscallFilter));
    CHECK(pos(Step::SyscallFilter) < pos(Step::SendListener));
    CHECK(pos(Step::SupervisorStarted) < pos(Step::ReadySignaled));
    CHECK(pos(Step::ReadyReceived) < pos(Step::Exec));
}

TEST_CASE("filesystem scope")
{
    TempDir dir;
    write_file(dir / "inside", "x");
    TempDir other;
    write_file(other / "outside", "y");
    SandboxSpec spec = base_spec();
    spec.fs.rules.push_back({dir.path(), PathAccess::Write});
    spec.fs.rules.push_back({dir / "secret", PathAccess::Deny});
    write_file(dir / "secret", "s");

    CHECK(first_line(run_probe(spec, {"read", dir / "inside"}).stdout_data) == "OK");
    CHECK(first_line(run_probe(spec, {"read", other / "outside"}).stdout_data) == "EACCES");
    CHECK(first_line(run_probe(spec, {"read", dir / "secret"}).stdout_data) == "EACCES");
    CHECK(first_line(run_probe(spec, {"write", dir / "inside"}).stdout_data) == "OK");
    CHECK(read_file(dir / "inside") == "probe\n");
    CHECK(first_line(run_probe(spec, {"write", dir / "secret"}).stdout_data) == "EACCES");
    // A denied child removes creation rights from its ancestors.
    CHECK(first_line(run_probe(spec, {"write", dir / "new"}).stdout_data) == "EACCES");
    TempDir open_dir;
    spec.fs.rules.push_back({open_dir.path(), PathAccess::Write});
    CHECK(first_line(run_probe(spec, {"write", open_dir / "new"}).stdout_data) == "OK");
    CHECK(read_file(open_dir / "new") == "probe\n");
    CHECK(first_line(run_probe(spec, {"write", other / "new"}).stdout_data) == "EACCES");
    CHECK_FALSE(std::filesystem::exists(other / "new"));
}

TEST_CASE("default denials")
{
    auto r = Sandbox(base_spec()).run({"/usr/bin/python3", "-c",
                                       "import os\ntry:\n os.setsid()\nexcept OSError as e:\n print(e.errno)"},
                                      captured());
    CHECK(first_line(r.stdout_data) == std::to_string(EPERM));
}

TEST_CASE("direct TCP port rules")
{
    Server allowed, blocked;
    SandboxSpec spec = base_spec();
    spec.net.endpoints = {port_rule(allowed.port)};
    CHECK(first_line(run_probe(spec, {"connect", "127.0.0.1", std::to_string(allowed.port)}).stdout_data) ==
          "OK");
    auto r = run_probe(spec, {"connect", "127.0.0.1", std::to_string(blocked.port)});
    CHECK(first_line(r.stdout_data) == "EACCES");
    CHECK(r.supervisor.received == 0);
}

TEST_CASE("host rules go through the supervisor")
{
    Server allowed, blocked;
    SandboxSpec spec = base_spec();
    spec.net.endpoints = {host_rule("127.0.0.1", allowed.port)};
    auto ok = run_probe(spec, {"connect", "127.0.0.1", std::to_string(allowed.port)});
    CHECK(first_line(ok.stdout_data) == "OK");
    CHECK(ok.net.on_behalf >= 1);
    auto refused = run_probe(spec, {"connect", "127.0.0.1", std::to_string(blocked.port)});
    CHECK(first_line(refused.stdout_data) == "ECONNREFUSED");
    CHECK(refused.net.denied >= 1);
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    CHECK(blocked.accepted == 0);
}

TEST_CASE("process limit")
{
    SandboxSpec spec = base_spec();
    spec.resources.max_processes = 4;
    auto r = run_probe(spec, {"fork", "6"});
    CHECK(r.status.code == 4);
    CHECK(r.stdout_data.find("fork 3: OK") != std::string::npos);
    CHECK(r.stdout_data.find("fork 4: EAGAIN") != std::string::npos);
}

TEST_CASE("memory limit")
{
    SandboxSpec spec = base_spec();
    spec.resources.max_memory = 64ull << 20;
    auto small = run_probe(spec, {"alloc", "8"});
    CHECK(small.status.success());
    auto big = run_probe(spec, {"alloc", "200"});
    CHECK(big.status.signaled);
    CHECK(big.status.signal == SIGKILL);
    CHECK(big.resource_kills >= 1);
}

TEST_CASE("descriptor limit")
{
    SandboxSpec spec = base_spec();
    spec.resources.max_fds = 32;
    auto r = Sandbox(spec).run({"/bin/sh", "-c", "ulimit -n"}, captured());
    CHECK(first_line(r.stdout_data) == "32");
}

TEST_CASE("timeouts kill the group")
{
    RunOptions o = captured();
    o.timeout = std::chrono::milliseconds(300);
    auto start = std::chrono::steady_clock::now();
    auto r = Sandbox(base_spec()).run({"/bin/sh", "-c", "sleep 30 & sleep 30"}, o);
    CHECK(r.timed_out);
    CHECK(std::chrono::steady_clock::now() - start < std::chrono::seconds(10));
}

TEST_CASE("workspace commit and abort")
{
    TempDir dir;
    make_dir(dir / "ws");
    write_file(dir / "ws/existing", "old");
    SandboxSpec spec = base_spec();
    spec.fs.workspace = WorkspaceConfig{dir / "ws", std::nullopt, std::nullopt, true};

    spec.fs.on_exit = EffectAction::Abort;
    auto aborted = Sandbox(spec).run(
        {"/bin/sh", "-c", "cd " + dir / "ws" + " && echo new > created && rm existing && ls"}, captured());
    CHECK(aborted.status.success());
    CHECK(aborted.stdout_data == "created\n");
    REQUIRE(aborted.effects);
    CHECK(aborted.effects->created == std::vector<std::string>{"created"});
    CHECK(aborted.effects->deleted == std::vector<std::string>{"existing"});
    CHECK(read_file(dir / "ws/existing") == "old");
    CHECK_FALSE(std::filesystem::exists(dir / "ws/created"));

    spec.fs.on_exit = EffectAction::Commit;
    auto committed = Sandbox(spec).run({"/bin/sh", "-c", "echo v2 > " + dir / "ws/existing"}, captured());
    CHECK(committed.status.success());
    CHECK(read_file(dir / "ws/existing") == "v2\n");

    RunOptions dry = captured();
    dry.dry_run = true;
    auto dried = Sandbox(spec).run({"/bin/sh", "-c", "echo v3 > " + dir / "ws/existing"}, dry);
    REQUIRE(dried.effects);
    CHECK(dried.effects->modified == std::vector<std::string>{"existing"});
    CHECK(read_file(dir / "ws/existing") == "v2\n");
}

TEST_CASE("runtime hook audits, revokes the network and tightens paths")
{
    Server server;
    TempDir dir;
    write_file(dir / "shadow", "secret");
    std::filesystem::create_symlink("/bin/true", dir / "curl");
    SandboxSpec spec = base_spec();
    spec.fs.rules.push_back({dir.path(), PathAccess::Read});
    spec.net.endpoints = {host_rule("127.0.0.1", server.port)};
    spec.runtime.enabled = true;

    std::string shadow = dir / "shadow";
    RunOptions o = captured();
    o.policy_fn = [shadow](const Event &e, RuntimeContext &ctx) -> CallbackValue {
        if (e.syscall == "execve") {
            if (e.argv_contains("curl")) return std::string("audit");
            if (e.argv_contains("tighten")) {
                ctx.restrict_network({});
                ctx.deny_path(shadow);
            }
        }
        return std::int64_t{0};
    };
    std::string p = probe();
    std::string script = dir / "curl" + "; " + p + " connect 127.0.0.1 " + std::to_string(server.port) +
                         "; " + p + " read " + shadow + "; " + p + " exec " + p + " print-argv tighten; " + p +
                         " connect 127.0.0.1 " + std::to_string(server.port) + "; " + p + " read " + shadow;
    auto r = Sandbox(spec).run({"/bin/sh", "-c", script}, o);
    CHECK(r.stdout_data == "OK\nOK\n" + p + " print-argv tighten\nECONNREFUSED\nEACCES\n");
    bool audited = false;
    for (const auto &a : r.audits) {
        if (a.decision == "audit" && !a.argv.empty() && a.argv[0].find("curl") != std::string::npos) {
            audited = true;
        }
    }
    CHECK(audited);
    CHECK(r.exec_holds >= 5);
}

TEST_CASE("exec without tracing is denied")
{
    SandboxSpec spec = base_spec();
    spec.runtime.enabled = true;
    RunOptions o = captured();
    o.disable_tracing = true;
    o.policy_fn = [](const Event &, RuntimeContext &) -> CallbackValue { return std::int64_t{0}; };
    try {
        Sandbox(spec).run({"/bin/true"}, o);
        FAIL("expected the exec to be denied");
    } catch (const ExecError &e) {
        CHECK(e.error_number() == EPERM);
    }
}

TEST_CASE("exec argv racer observes the exec'd argv")
{
    SandboxSpec spec = base_spec();
    spec.runtime.enabled = true;
    for (int i = 0; i < 10; i++) {
        std::vector<std::vector<std::string>> seen;
        std::mutex m;
        RunOptions o = captured();
        o.policy_fn = [&](const Event &e, RuntimeContext &) -> CallbackValue {
            std::lock_guard lock(m);
            if (e.argv) seen.push_back(*e.argv);
            return std::int64_t{0};
        };
        auto r = run_probe(spec, {"exec-race", probe()}, o);
        REQUIRE(seen.size() == 2);
        std::string observed;
        for (std::size_t k = 0; k < seen[1].size(); k++) observed += (k ? " " : "") + seen[1][k];
        CHECK(first_line(r.stdout_data) == observed);
    }
}

TEST_CASE("pipeline stages keep their own confinement")
{
    TempDir data;
    write_file(data / "secret.csv", "name,value\nalpha,1\n");
    SandboxSpec trusted = base_spec();
    trusted.fs.rules.push_back({data.path(), PathAccess::Read});
    SandboxSpec restricted = base_spec();
    PipelineOptions o;
    o.stderr_spec = StdioSpec::null();
    o.timeout = std::chrono::seconds(20);
    auto r = run_pipeline({Stage{trusted, {"/bin/cat", data / "secret.csv"}, {}},
                           Stage{restricted, {"/usr/bin/tr", "a-z", "A-Z"}, {}}},
                          o);
    CHECK(r.success());
    CHECK(r.stdout_data == "NAME,VALUE\nALPHA,1\n");

    auto probe_run = run_pipeline({Stage{trusted, {"/bin/cat", data / "secret.csv"}, {}},
                                   Stage{restricted, {probe(), "read", data / "secret.csv"}, {}}},
                                  o);
    CHECK(first_line(probe_run.stdout_data) == "EACCES");

    auto three = run_pipeline({Stage{restricted, {"/bin/echo", "abc"}, {}},
                               Stage{restricted, {"/bin/sh", "-c", "cat; exit 5"}, {}},
                               Stage{restricted, {"/bin/cat"}, {}}},
                              o);
    REQUIRE(three.stages.size() == 3);
    CHECK(three.stages[0].status.code == 0);
    CHECK(three.stages[1].status.code == 5);
    CHECK(three.stages[2].status.code == 0);
    CHECK(three.stdout_data == "abc\n");
    CHECK_FALSE(three.success());
}

TEST_CASE("COW fork runs init once and captures per-worker output")
{
    int init_runs = 0;
    static int shared_value;
    shared_value = 0;
    ForkPlan plan;
    plan.init = [&] {
        init_runs++;
        shared_value = 41;
    };
    plan.workers = 8;
    plan.worker = [](std::size_t index, const std::string &) {
        shared_value += static_cast<int>(index);
        std::printf("%zu:%d\n", index, shared_value);
        std::fflush(stdout);
        return index == 5 ? 3 : 0;
    };
    SandboxSpec spec = base_spec();
    auto r = run_cow_fork(plan, spec);
    CHECK(init_runs == 0); // ran in the template process, not here
    REQUIRE(r.workers.size() == 8);
    for (std::size_t i = 0; i < 8; i++) {
        CHECK(r.workers[i].output == std::to_string(i) + ":" + std::to_string(41 + i) + "\n");
    }
    CHECK(r.workers[5].status.code == 3);
    CHECK(r.forks_per_second > 0);

    ForkPlan reduce = plan;
    reduce.workers = 4;
    reduce.worker = [](std::size_t index, const std::string &) {
        std::printf("w%zu\n", index);
        return 0;
    };
    reduce.reducer = Stage{base_spec(), {"/usr/bin/sort", "-r"}, {}};
    auto rr = run_cow_fork(reduce, spec);
    CHECK(rr.reduced_output == "w3\nw2\nw1\nw0\n");

    SandboxSpec supervised = base_spec();
    supervised.resources.max_processes = 2;
    CHECK_THROWS_AS(run_cow_fork(plan, supervised), PolicyError);
}
}
