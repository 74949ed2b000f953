#include "lockbox/supervisor.hpp"
#include "lockbox/error.hpp"
#include "lockbox/kernel.hpp"
#include "lockbox/syscalls.hpp"

#include <fcntl.h>
#include <linux/seccomp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/ioctl.h>
#include <sys/uio.h>
#include <unistd.h>

#include <cerrno>

namespace lockbox {

std::string_view Notification::name() const
{
    return syscall_name(nr);
}

Verdict Verdict::emulate_fd(UniqueFd fd, std::optional<int> target, bool cloexec,
                            std::int64_t value)
{
    Verdict v = emulate(value);
    v.inject = InjectFd{std::make_shared<UniqueFd>(std::move(fd)), target, cloexec};
    return v;
}

std::string Verdict::to_string() const
{
    switch (kind) {
        case Kind::Allow: return "allow";
        case Kind::Deny: return "deny(" + std::to_string(error) + ")";
        case Kind::Emulate:
            if (error) return "emulate(-" + std::to_string(error) + ")";
            return "emulate(" + std::to_string(value) + ")";
    }
    return "?";
}

// ---- SeccompNotifySource ---------------------------------------------------

SeccompNotifySource::SeccompNotifySource(UniqueFd listener)
    : listener_(std::move(listener)), wake_(eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK))
{
    if (!wake_) throw_errno("eventfd");
}

SeccompNotifySource::~SeccompNotifySource() = default;

std::optional<Notification> SeccompNotifySource::receive()
{
    for (;;) {
        pollfd fds[2] = {{listener_.get(), POLLIN, 0}, {wake_.get(), POLLIN, 0}};
        int rc = ::poll(fds, 2, -1);
        if (rc < 0) {
            if (errno == EINTR) continue;
            return std::nullopt;
        }
        if (fds[1].revents) return std::nullopt;
        if (fds[0].revents & POLLIN) {
            seccomp_notif req{};
            if (ioctl(listener_.get(), SECCOMP_IOCTL_NOTIF_RECV, &req) < 0) {
                if (errno == EINTR || errno == ENOENT) continue;
                return std::nullopt;
            }
            Notification n;
            n.id = req.id;
            n.pid = static_cast<pid_t>(req.pid);
            n.nr = req.data.nr;
            n.arch = req.data.arch;
            n.ip = req.data.instruction_pointer;
            for (int i = 0; i < 6; i++) n.args[i] = req.data.args[i];
            return n;
        }
        if (fds[0].revents & (POLLHUP | POLLERR | POLLNVAL)) return std::nullopt;
    }
}

bool SeccompNotifySource::send(const Notification &n, const Verdict &verdict)
{
    if (verdict.inject && verdict.error == 0) {
        seccomp_notif_addfd addfd{};
        addfd.id = n.id;
        addfd.srcfd = static_cast<__u32>(verdict.inject->fd->get());
        addfd.newfd_flags = verdict.inject->cloexec ? O_CLOEXEC : 0;
        if (verdict.inject->target) {
            addfd.flags = SECCOMP_ADDFD_FLAG_SETFD;
            addfd.newfd = static_cast<__u32>(*verdict.inject->target);
        } else {
            addfd.flags = SECCOMP_ADDFD_FLAG_SEND;
        }
        int rc = ioctl(listener_.get(), SECCOMP_IOCTL_NOTIF_ADDFD, &addfd);
        if (rc < 0) {
            if (errno == ENOENT) return false;
            Verdict failed = Verdict::deny(errno == EMFILE ? EMFILE : EIO);
            return send(n, failed);
        }
        if (!verdict.inject->target) return true;
    }

    seccomp_notif_resp resp{};
    resp.id = n.id;
    switch (verdict.kind) {
        case Verdict::Kind::Allow: resp.flags = SECCOMP_USER_NOTIF_FLAG_CONTINUE; break;
        case Verdict::Kind::Deny: resp.error = -verdict.error; break;
        case Verdict::Kind::Emulate:
            if (verdict.error) {
                resp.error = -verdict.error;
            } else {
                resp.val = verdict.value;
            }
            break;
    }
    for (;;) {
        if (ioctl(listener_.get(), SECCOMP_IOCTL_NOTIF_SEND, &resp) == 0) return true;
        if (errno == EINTR) continue;
        return false;
    }
}

bool SeccompNotifySource::id_valid(std::uint64_t id)
{
    return ioctl(listener_.get(), SECCOMP_IOCTL_NOTIF_ID_VALID, &id) == 0;
}

bool SeccompNotifySource::read_memory(pid_t pid, std::uint64_t addr, void *out, std::size_t len)
{
    if (len == 0) return true;
    iovec local{out, len};
    iovec remote{reinterpret_cast<void *>(addr), len};
    ssize_t n = process_vm_readv(pid, &local, 1, &remote, 1, 0);
    if (n == static_cast<ssize_t>(len)) return true;
    if (n >= 0 || errno == EFAULT) return false;
    std::string path = "/proc/" + std::to_string(pid) + "/mem";
    UniqueFd mem(::open(path.c_str(), O_RDONLY | O_CLOEXEC));
    if (!mem) return false;
    return ::pread(mem.get(), out, len, static_cast<off_t>(addr)) == static_cast<ssize_t>(len);
}

bool SeccompNotifySource::write_memory(pid_t pid, std::uint64_t addr, const void *data,
                                       std::size_t len)
{
    if (len == 0) return true;
    iovec local{const_cast<void *>(data), len};
    iovec remote{reinterpret_cast<void *>(addr), len};
    ssize_t n = process_vm_writev(pid, &local, 1, &remote, 1, 0);
    if (n == static_cast<ssize_t>(len)) return true;
    if (n >= 0 || errno == EFAULT) return false;
    std::string path = "/proc/" + std::to_string(pid) + "/mem";
    UniqueFd mem(::open(path.c_str(), O_WRONLY | O_CLOEXEC));
    if (!mem) return false;
    return ::pwrite(mem.get(), data, len, static_cast<off_t>(addr)) == static_cast<ssize_t>(len);
}

UniqueFd SeccompNotifySource::get_fd(pid_t pid, int fd)
{
    constexpr unsigned kPidfdThread = O_EXCL;
    UniqueFd pidfd(sys_pidfd_open(pid, 0));
    if (!pidfd) {
        pidfd.reset(sys_pidfd_open(pid, kPidfdThread));
    }
    if (!pidfd) return UniqueFd();
    return UniqueFd(sys_pidfd_getfd(pidfd.get(), fd));
}

void SeccompNotifySource::shutdown()
{
    std::uint64_t one = 1;
    [[maybe_unused]] ssize_t n = ::write(wake_.get(), &one, sizeof(one));
}

// ---- stats and context -----------------------------------------------------

void SupervisorStats::on_received(int nr)
{
    received_++;
    std::lock_guard lock(mutex_);
    per_syscall_[nr]++;
}

void SupervisorStats::on_reads(std::uint64_t max_reads)
{
    std::uint64_t cur = max_reads_.load();
    while (max_reads > cur && !max_reads_.compare_exchange_weak(cur, max_reads)) {
    }
}

SupervisorCounters SupervisorStats::snapshot() const
{
    SupervisorCounters c;
    c.received = received_.load();
    c.replied = replied_.load();
    c.stale_dropped = stale_.load();
    c.unknown_denied = unknown_.load();
    c.handler_errors = errors_.load();
    c.max_reads_per_address = max_reads_.load();
    std::lock_guard lock(mutex_);
    c.per_syscall = per_syscall_;
    return c;
}

void NotifyContext::check_valid()
{
    if (!source_.id_valid(n_.id)) throw StaleNotification();
}

std::vector<std::uint8_t> NotifyContext::read(std::uint64_t addr, std::size_t len)
{
    check_valid();
    std::vector<std::uint8_t> out(len);
    reads_[addr]++;
    bool ok = source_.read_memory(n_.pid, addr, out.data(), len);
    check_valid();
    if (!ok) throw MemoryFault();
    return out;
}

std::string NotifyContext::read_string(std::uint64_t addr, std::size_t max)
{
    constexpr std::uint64_t kPage = 4096;
    std::string out;
    check_valid();
    std::uint64_t cur = addr;
    while (out.size() <= max) {
        std::size_t chunk = static_cast<std::size_t>(kPage - (cur % kPage));
        chunk = std::min<std::size_t>(chunk, max + 1 - out.size());
        std::vector<char> buf(chunk);
        reads_[cur]++;
        if (!source_.read_memory(n_.pid, cur, buf.data(), chunk)) {
            check_valid();
            throw MemoryFault();
        }
        auto nul = std::find(buf.begin(), buf.end(), '\0');
        out.append(buf.begin(), nul);
        if (nul != buf.end()) {
            check_valid();
            return out;
        }
        cur += chunk;
    }
    check_valid();
    throw MemoryFault();
}

void NotifyContext::write(std::uint64_t addr, const void *data, std::size_t len)
{
    check_valid();
    if (!source_.write_memory(n_.pid, addr, data, len)) throw MemoryFault();
}

UniqueFd NotifyContext::get_fd(int fd)
{
    UniqueFd dup = source_.get_fd(n_.pid, fd);
    check_valid();
    return dup;
}

std::uint64_t NotifyContext::max_reads_per_address() const
{
    std::uint64_t max = 0;
    for (const auto &[addr, count] : reads_) max = std::max(max, count);
    return max;
}

void NotifyContext::run_deferred()
{
    auto actions = std::move(deferred_);
    deferred_.clear();
    for (auto &action : actions) {
        try {
            action();
        } catch (...) {
        }
    }
}

Verdict dispatch(const HandlerTable &table, NotifyContext &ctx, SupervisorStats &stats,
                 const std::function<void(const std::string &)> &log)
{
    const Handler *handler = table.find(ctx.notification().nr);
    if (!handler) {
        stats.on_unknown();
        return Verdict::deny(EPERM);
    }
    try {
        return (*handler)(ctx);
    } catch (const StaleNotification &) {
        throw;
    } catch (const MemoryFault &) {
        return Verdict::deny(EFAULT);
    } catch (const std::exception &e) {
        stats.on_handler_error();
        if (log) {
            log(std::string("handler for ") + std::string(ctx.notification().name()) +
                " failed: " + e.what());
        }
        return Verdict::deny(EPERM);
    } catch (...) {
        stats.on_handler_error();
        return Verdict::deny(EPERM);
    }
}

// ---- Supervisor ------------------------------------------------------------

Supervisor::Supervisor(std::unique_ptr<NotifySource> source, HandlerTable table, unsigned workers)
    : source_(std::move(source)), table_(std::move(table))
{
    if (workers == 0) workers = 1;
    for (unsigned i = 0; i < workers; i++) queues_.push_back(std::make_unique<Queue>());
}

Supervisor::~Supervisor()
{
    if (started_ && !joined_) {
        stop();
        join();
    }
}

void Supervisor::start()
{
    if (started_) return;
    started_ = true;
    for (auto &queue : queues_) {
        workers_.emplace_back([this, q = queue.get()] { worker_loop(*q); });
    }
    receiver_ = std::thread([this] { receive_loop(); });
}

void Supervisor::join()
{
    if (!started_ || joined_) return;
    joined_ = true;
    if (receiver_.joinable()) receiver_.join();
    for (auto &worker : workers_) {
        if (worker.joinable()) worker.join();
    }
}

void Supervisor::stop()
{
    source_->shutdown();
}

void Supervisor::receive_loop()
{
    while (auto n = source_->receive()) {
        stats_.on_received(n->nr);
        Queue &q = *queues_[static_cast<std::size_t>(n->pid) % queues_.size()];
        {
            std::lock_guard lock(q.mutex);
            q.items.push_back(*n);
        }
        q.cv.notify_one();
    }
    for (auto &queue : queues_) {
        {
            std::lock_guard lock(queue->mutex);
            queue->closed = true;
        }
        queue->cv.notify_all();
    }
}

void Supervisor::worker_loop(Queue &queue)
{
    for (;;) {
        Notification n;
        {
            std::unique_lock lock(queue.mutex);
            queue.cv.wait(lock, [&] { return queue.closed || !queue.items.empty(); });
            if (queue.items.empty()) return;
            n = queue.items.front();
            queue.items.pop_front();
        }
        handle(n);
    }
}

void Supervisor::handle(const Notification &n)
{
    NotifyContext ctx(*source_, n);
    Verdict verdict;
    try {
        verdict = dispatch(table_, ctx, stats_, log_);
    } catch (const StaleNotification &) {
        stats_.on_reads(ctx.max_reads_per_address());
        stats_.on_stale();
        ctx.run_deferred();
        return;
    }
    stats_.on_reads(ctx.max_reads_per_address());
    if (source_->send(n, verdict)) {
        stats_.on_replied();
    } else {
        stats_.on_stale();
    }
    ctx.run_deferred();
}

} // namespace lockbox
