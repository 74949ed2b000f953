#include "doctest.h"

#include "lockbox/kernel.hpp"
#include "lockbox/launcher.hpp"

#include <cerrno>
#include <string>
#include <vector>

using namespace lockbox;

namespace {

class FakeChildKernel final : public ChildKernel {
public:
    std::vector<std::string> calls;
    std::string fail_at;
    int fail_errno = EPERM;
    ChildFailure reported{-1, 0};

    int step(const char *name)
    {
        calls.push_back(name);
        return fail_at == name ? -fail_errno : 0;
    }

    int setup_stdio(const int[3]) override { return step("stdio"); }
    int set_process_group() override { return step("pgrp"); }
    int change_dir(const char *) override { return step("chdir"); }
    int set_no_new_privs() override { return step("nnp"); }
    int landlock_restrict(int) override { return step("landlock"); }
    int install_filter(const sock_fprog *, bool listener) override
    {
        int rc = step("filter");
        return rc < 0 ? rc : (listener ? 7 : 0);
    }
    int send_listener(int, int) override { return step("send"); }
    int wait_ready(int) override { return step("ready"); }
    int set_fd_limit(rlim_t) override { return step("nofile"); }
    int close_fds(int) override { return step("close"); }
    int reset_signals() override { return step("signals"); }
    int exec(const char *, char *const *, char *const *) override { return step("exec"); }
    void report_failure(int, const ChildFailure &f) override { reported = f; }
};

ChildPlan full_plan()
{
    static sock_fprog prog{};
    ChildPlan p;
    p.cwd = "/";
    p.ruleset_fd = 5;
    p.filter = &prog;
    p.want_listener = true;
    p.sync_fd = 8;
    p.ready_fd = 9;
    p.err_fd = 10;
    p.set_nofile = true;
    p.nofile = 64;
    p.path = "/bin/true";
    return p;
}

} // namespace

TEST_SUITE("kernel-free")
{
TEST_CASE("child steps run in the fixed order")
{
    FakeChildKernel k;
    StepLog log;
    CHECK(run_child_steps(k, full_plan(), &log) == 0);
    // Landlock before the filter; the listener handshake before exec.
    auto pos = [&](const char *s) {
        return std::find(k.calls.begin(), k.calls.end(), s) - k.calls.begin();
    };
    CHECK(pos("pgrp") < pos("nnp"));
    CHECK(pos("nnp") < pos("landlock"));
    CHECK(pos("landlock") < pos("filter"));
    CHECK(pos("filter") < pos("send"));
    CHECK(pos("send") < pos("ready"));
    CHECK(pos("ready") < pos("exec"));
    CHECK(pos("nofile") < pos("exec"));
    CHECK(k.calls.back() == "exec");
    auto steps = log.steps();
    REQUIRE_FALSE(steps.empty());
    CHECK(steps.back() == Step::Exec);
}

TEST_CASE("a failing step is reported and nothing after it runs")
{
    for (const char *failing : {"pgrp", "nnp", "landlock", "filter", "send", "ready", "exec"}) {
        FakeChildKernel k;
        k.fail_at = failing;
        k.fail_errno = EACCES;
        CHECK(run_child_steps(k, full_plan(), nullptr) == -1);
        CHECK(k.calls.back() == failing);
        CHECK(k.reported.error == EACCES);
        CHECK(k.reported.step >= 0);
    }
}

TEST_CASE("landlock and the filter are skipped when absent")
{
    FakeChildKernel k;
    ChildPlan p = full_plan();
    p.ruleset_fd = -1;
    p.filter = nullptr;
    p.want_listener = false;
    CHECK(run_child_steps(k, p, nullptr) == 0);
    CHECK(std::find(k.calls.begin(), k.calls.end(), "landlock") == k.calls.end());
    CHECK(std::find(k.calls.begin(), k.calls.end(), "filter") == k.calls.end());
    // The sync message still goes out, carrying no descriptor.
    CHECK(std::find(k.calls.begin(), k.calls.end(), "send") != k.calls.end());
}

TEST_CASE("executables resolve against PATH")
{
    CHECK(resolve_executable("/bin/sh", {}) == "/bin/sh");
    auto sh = resolve_executable("sh", {"PATH=/nonexistent:/bin"});
    CHECK(sh == "/bin/sh");
}
}
