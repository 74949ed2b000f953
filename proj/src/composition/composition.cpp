#include "lockbox/composition.hpp"
#include "lockbox/error.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstdio>
#include <cstring>
#include <map>
#include <thread>

namespace lockbox {

namespace {

std::pair<UniqueFd, UniqueFd> cloexec_pipe()
{
    int fds[2];
    if (::pipe2(fds, O_CLOEXEC) < 0) throw_errno("pipe2");
    return {UniqueFd(fds[0]), UniqueFd(fds[1])};
}

StageResult stage_result(RunResult &&r)
{
    StageResult s;
    s.status = r.status;
    s.audits = std::move(r.audits);
    s.effects = std::move(r.effects);
    s.supervisor = r.supervisor;
    s.net = r.net;
    return s;
}

bool write_all(int fd, const void *data, std::size_t len)
{
    const char *p = static_cast<const char *>(data);
    while (len > 0) {
        ssize_t n = ::write(fd, p, len);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return false;
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

bool read_all(int fd, void *out, std::size_t len)
{
    char *p = static_cast<char *>(out);
    while (len > 0) {
        ssize_t n = ::read(fd, p, len);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) return false;
        p += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

ExitStatus decode_status(int status)
{
    ExitStatus s;
    if (WIFSIGNALED(status)) {
        s.signaled = true;
        s.signal = WTERMSIG(status);
    } else {
        s.code = WEXITSTATUS(status);
    }
    return s;
}

} // namespace

bool PipelineResult::success() const
{
    for (const auto &s : stages) {
        if (!s.status.success()) return false;
    }
    return !stages.empty();
}

PipelineResult run_pipeline(const std::vector<Stage> &stages, const PipelineOptions &options)
{
    if (stages.empty()) throw ValidationError("pipeline needs at least one stage");
    // Plans first: a validation error launches nothing.
    std::vector<Sandbox> sandboxes;
    sandboxes.reserve(stages.size());
    for (const auto &stage : stages) sandboxes.emplace_back(stage.spec);

    std::vector<std::unique_ptr<RunningSandbox>> running;
    UniqueFd upstream;
    for (std::size_t i = 0; i < stages.size(); i++) {
        RunOptions ro;
        ro.env = options.env;
        ro.policy_fn = stages[i].policy_fn;
        ro.stdio[2] = options.stderr_spec;
        if (i == 0) {
            ro.stdio[0] = options.input ? StdioSpec::pipe() : options.stdin_spec;
        } else {
            ro.stdio[0] = StdioSpec::from_fd(upstream.get());
        }
        UniqueFd next_read, write_end;
        if (i + 1 < stages.size()) {
            auto [r, w] = cloexec_pipe();
            next_read = std::move(r);
            write_end = std::move(w);
            ro.stdio[1] = StdioSpec::from_fd(write_end.get());
        } else {
            ro.stdio[1] = options.stdout_spec ? *options.stdout_spec : StdioSpec::pipe();
        }
        try {
            running.push_back(sandboxes[i].start(stages[i].cmd, std::move(ro)));
        } catch (...) {
            for (auto &r : running) r->kill(SIGKILL);
            running.clear();
            throw;
        }
        upstream = std::move(next_read);
    }
    upstream.reset();

    std::thread feeder;
    if (options.input) {
        SandboxHandle &first = running.front()->handle();
        std::string input = *options.input;
        feeder = std::thread([&first, input] {
            write_all(first.stdin_pipe().get(), input.data(), input.size());
            first.stdin_pipe().reset();
        });
    }

    PipelineResult result;
    std::thread watchdog;
    std::mutex done_mutex;
    std::condition_variable done_cv;
    bool done = false;
    if (options.timeout) {
        watchdog = std::thread([&] {
            std::unique_lock lock(done_mutex);
            if (!done_cv.wait_for(lock, *options.timeout, [&] { return done; })) {
                for (auto &r : running) r->kill(SIGKILL);
            }
        });
    }
    SandboxHandle &last = running.back()->handle();
    if (last.stdout_pipe()) {
        result.stdout_data = drain_fd(last.stdout_pipe().get(), options.capture_limit,
                                      &result.capture_overflow);
        if (result.capture_overflow) running.back()->kill(SIGKILL);
        last.stdout_pipe().reset();
    }
    for (auto &r : running) result.stages.push_back(stage_result(r->wait()));
    {
        std::lock_guard lock(done_mutex);
        done = true;
    }
    done_cv.notify_all();
    if (watchdog.joinable()) watchdog.join();
    if (feeder.joinable()) feeder.join();
    return result;
}

// ---- COW fork ----------------------------------------------------------------

namespace {

struct RecordHeader {
    std::uint64_t index;
    std::int32_t signaled;
    std::int32_t code;
    std::int32_t overflow;
    std::uint64_t length;
};

constexpr std::uint64_t kInitDone = ~0ull;
constexpr std::uint64_t kFailure = ~0ull - 1;

struct Active {
    std::size_t index;
    pid_t pid;
    UniqueFd out;
    std::string data;
    bool overflow = false;
};

[[noreturn]] void run_template(const ForkPlan &plan, const EnforcementPlan &enforcement, int report)
{
    auto fail = [&](const std::string &message) {
        RecordHeader h{kFailure, 0, 0, 0, message.size()};
        write_all(report, &h, sizeof(h));
        write_all(report, message.data(), message.size());
        _exit(1);
    };
    try {
        if (plan.init) plan.init();
        confine_self(enforcement);
    } catch (const std::exception &e) {
        fail(e.what());
    }
    RecordHeader ready{kInitDone, 0, 0, 0, 0};
    write_all(report, &ready, sizeof(ready));

    std::size_t next = 0;
    std::size_t parallelism = std::max<std::size_t>(1, plan.parallelism);
    std::vector<Active> active;
    auto spawn = [&](std::size_t index) {
        int out[2];
        int in[2] = {-1, -1};
        if (::pipe2(out, O_CLOEXEC) < 0) fail("pipe2 failed");
        const std::string empty;
        const std::string &input = index < plan.inputs.size() ? plan.inputs[index] : empty;
        bool stdin_mode = plan.input_mode == ForkPlan::InputMode::Stdin;
        if (stdin_mode && ::pipe2(in, O_CLOEXEC) < 0) fail("pipe2 failed");
        pid_t pid = ::fork();
        if (pid < 0) fail(std::string("fork failed: ") + std::strerror(errno));
        if (pid == 0) {
            ::dup2(out[1], 1);
            if (stdin_mode) ::dup2(in[0], 0);
            int rc = 1;
            try {
                std::string arg = stdin_mode ? std::string() : input;
                rc = plan.worker ? plan.worker(index, arg) : 0;
            } catch (...) {
                rc = 1;
            }
            std::fflush(stdout);
            _exit(rc);
        }
        ::close(out[1]);
        if (stdin_mode) {
            ::close(in[0]);
            // Inputs larger than the pipe buffer would block here; the
            // writer runs in a short-lived child instead.
            if (input.size() <= 65536) {
                write_all(in[1], input.data(), input.size());
            } else if (::fork() == 0) {
                write_all(in[1], input.data(), input.size());
                _exit(0);
            }
            ::close(in[1]);
        }
        active.push_back(Active{index, pid, UniqueFd(out[0]), {}, false});
    };
    auto finish = [&](Active &a) {
        int status = 0;
        while (::waitpid(a.pid, &status, 0) < 0 && errno == EINTR) {
        }
        ExitStatus s = decode_status(status);
        RecordHeader h{a.index, s.signaled ? 1 : 0, s.signaled ? s.signal : s.code,
                       a.overflow ? 1 : 0, a.data.size()};
        write_all(report, &h, sizeof(h));
        write_all(report, a.data.data(), a.data.size());
    };

    while (next < plan.workers || !active.empty()) {
        while (next < plan.workers && active.size() < parallelism) spawn(next++);
        std::vector<pollfd> fds;
        for (auto &a : active) fds.push_back(pollfd{a.out.get(), POLLIN, 0});
        if (::poll(fds.data(), fds.size(), -1) < 0 && errno != EINTR) fail("poll failed");
        for (std::size_t i = 0; i < fds.size(); i++) {
            if (!(fds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
            Active &a = active[i];
            char buf[65536];
            ssize_t n = ::read(a.out.get(), buf, sizeof(buf));
            if (n > 0) {
                std::size_t room = plan.output_cap > a.data.size() ? plan.output_cap - a.data.size() : 0;
                if (static_cast<std::size_t>(n) > room) {
                    a.data.append(buf, room);
                    a.overflow = true;
                    ::kill(a.pid, SIGKILL);
                    a.out.reset();
                } else {
                    a.data.append(buf, static_cast<std::size_t>(n));
                }
            } else if (n == 0 || (n < 0 && errno != EINTR)) {
                a.out.reset();
            }
        }
        for (auto it = active.begin(); it != active.end();) {
            if (!it->out) {
                finish(*it);
                it = active.erase(it);
            } else {
                ++it;
            }
        }
    }
    _exit(0);
}

} // namespace

ForkResult run_cow_fork(const ForkPlan &plan, const SandboxSpec &spec)
{
    if (plan.workers == 0) throw ValidationError("worker count must be at least 1");
    EnforcementPlan enforcement = build_plan(spec);
    if (enforcement.has_supervisor_handlers()) {
        throw PolicyError("forked workers support static policies only");
    }
    if (spec.resources.max_cpu) throw PolicyError("forked workers cannot be CPU throttled");

    auto [report_r, report_w] = cloexec_pipe();
    std::fflush(nullptr);
    pid_t tmpl = ::fork();
    if (tmpl < 0) throw_errno("fork");
    if (tmpl == 0) {
        report_r.reset();
        run_template(plan, enforcement, report_w.get());
    }
    report_w.reset();

    ForkResult result;
    result.workers.resize(plan.workers);
    std::vector<bool> seen(plan.workers, false);
    std::optional<std::string> failure;
    auto started = std::chrono::steady_clock::now();
    auto last = started;
    for (;;) {
        RecordHeader h{};
        if (!read_all(report_r.get(), &h, sizeof(h))) break;
        std::string data(h.length, '\0');
        if (h.length && !read_all(report_r.get(), data.data(), h.length)) break;
        if (h.index == kInitDone) {
            started = std::chrono::steady_clock::now();
            continue;
        }
        if (h.index == kFailure) {
            failure = data;
            break;
        }
        if (h.index >= plan.workers) continue;
        WorkerResult &w = result.workers[h.index];
        w.status.signaled = h.signaled != 0;
        if (w.status.signaled) {
            w.status.signal = h.code;
        } else {
            w.status.code = h.code;
        }
        w.overflow = h.overflow != 0;
        w.output = std::move(data);
        seen[h.index] = true;
        last = std::chrono::steady_clock::now();
    }
    int status = 0;
    while (::waitpid(tmpl, &status, 0) < 0 && errno == EINTR) {
    }
    if (failure) throw Error(ErrorKind::Launch, "fork template failed: " + *failure);
    for (std::size_t i = 0; i < plan.workers; i++) {
        if (!seen[i]) result.workers[i].status = ExitStatus{true, 0, SIGKILL};
    }
    result.elapsed = std::chrono::duration_cast<std::chrono::nanoseconds>(last - started);
    double seconds = std::chrono::duration<double>(result.elapsed).count();
    if (seconds > 0) result.forks_per_second = static_cast<double>(plan.workers) / seconds;

    if (plan.reducer) {
        std::string merged;
        for (const auto &w : result.workers) merged += w.output;
        Sandbox reducer(plan.reducer->spec);
        RunOptions ro;
        ro.policy_fn = plan.reducer->policy_fn;
        ro.input = std::move(merged);
        ro.stdio[0] = StdioSpec::pipe();
        ro.stdio[1] = StdioSpec::pipe();
        RunResult r = reducer.run(plan.reducer->cmd, std::move(ro));
        result.reduced_output = r.stdout_data;
        result.reducer = stage_result(std::move(r));
    }
    return result;
}

} // namespace lockbox
