#pragma once

#include "lockbox/unique_fd.hpp"

#include <sys/types.h>

#include <array>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstring>
#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace lockbox {

struct Notification {
    std::uint64_t id = 0;
    pid_t pid = 0;
    int nr = -1;
    std::uint32_t arch = 0;
    std::uint64_t ip = 0;
    std::array<std::uint64_t, 6> args{};

    std::string_view name() const;
};

// Descriptor injected into the child with the reply.
struct InjectFd {
    std::shared_ptr<UniqueFd> fd;
    // Replace this descriptor number in the child; otherwise the kernel picks
    // the lowest free number and returns it as the syscall result.
    std::optional<int> target;
    bool cloexec = false;
};

struct Verdict {
    enum class Kind : std::uint8_t { Allow, Deny, Emulate };

    Kind kind = Kind::Deny;
    int error = 0;           // positive errno for Deny, or for a failed Emulate
    std::int64_t value = 0;  // Emulate return value
    std::optional<InjectFd> inject;

    static Verdict allow() { return Verdict{Kind::Allow, 0, 0, std::nullopt}; }
    static Verdict deny(int err) { return Verdict{Kind::Deny, err, 0, std::nullopt}; }
    static Verdict emulate(std::int64_t value) { return Verdict{Kind::Emulate, 0, value, std::nullopt}; }
    static Verdict emulate_error(int err) { return Verdict{Kind::Emulate, err, 0, std::nullopt}; }
    static Verdict emulate_fd(UniqueFd fd, std::optional<int> target, bool cloexec,
                              std::int64_t value = 0);

    bool is_deny() const noexcept { return kind == Kind::Deny; }
    std::string to_string() const;
};

// The notification died (the task exited or was replaced by exec).
class StaleNotification : public std::runtime_error {
public:
    StaleNotification() : std::runtime_error("stale notification") {}
};

// Child memory could not be read.
class MemoryFault : public std::runtime_error {
public:
    MemoryFault() : std::runtime_error("child memory unreadable") {}
};

// Where notifications come from. Implemented over a seccomp listener and by
// an in-memory fake for handler tests.
class NotifySource {
public:
    virtual ~NotifySource() = default;

    // Blocks for the next notification; nullopt once the channel closed.
    virtual std::optional<Notification> receive() = 0;
    // Returns false when the notification went stale before the reply.
    virtual bool send(const Notification &n, const Verdict &verdict) = 0;
    virtual bool id_valid(std::uint64_t id) = 0;
    virtual bool read_memory(pid_t pid, std::uint64_t addr, void *out, std::size_t len) = 0;
    virtual bool write_memory(pid_t pid, std::uint64_t addr, const void *data, std::size_t len) = 0;
    // Duplicates descriptor `fd` of task `pid` into the supervisor.
    virtual UniqueFd get_fd(pid_t pid, int fd) = 0;
    // Makes receive() return nullopt.
    virtual void shutdown() = 0;
};

class SeccompNotifySource final : public NotifySource {
public:
    explicit SeccompNotifySource(UniqueFd listener);
    ~SeccompNotifySource() override;

    std::optional<Notification> receive() override;
    bool send(const Notification &n, const Verdict &verdict) override;
    bool id_valid(std::uint64_t id) override;
    bool read_memory(pid_t pid, std::uint64_t addr, void *out, std::size_t len) override;
    bool write_memory(pid_t pid, std::uint64_t addr, const void *data, std::size_t len) override;
    UniqueFd get_fd(pid_t pid, int fd) override;
    void shutdown() override;

private:
    UniqueFd listener_;
    UniqueFd wake_;
};

struct SupervisorCounters {
    std::uint64_t received = 0;
    std::uint64_t replied = 0;
    std::uint64_t stale_dropped = 0;
    std::uint64_t unknown_denied = 0;
    std::uint64_t handler_errors = 0;
    // Largest number of reads of one child address within one notification.
    std::uint64_t max_reads_per_address = 0;
    std::map<int, std::uint64_t> per_syscall;
};

class SupervisorStats {
public:
    void on_received(int nr);
    void on_replied() { replied_++; }
    void on_stale() { stale_++; }
    void on_unknown() { unknown_++; }
    void on_handler_error() { errors_++; }
    void on_reads(std::uint64_t max_reads);
    SupervisorCounters snapshot() const;

private:
    std::atomic<std::uint64_t> received_{0}, replied_{0}, stale_{0}, unknown_{0}, errors_{0},
        max_reads_{0};
    mutable std::mutex mutex_;
    std::map<int, std::uint64_t> per_syscall_;
};

// Per-notification view handed to handlers. Every memory read is bracketed
// by cookie validity checks and counted per address.
class NotifyContext {
public:
    NotifyContext(NotifySource &source, const Notification &n) : source_(source), n_(n) {}

    const Notification &notification() const noexcept { return n_; }
    NotifySource &source() noexcept { return source_; }
    pid_t pid() const noexcept { return n_.pid; }
    std::uint64_t arg(int i) const noexcept { return n_.args[i]; }

    // Throws StaleNotification when the cookie is no longer valid.
    void check_valid();

    // Reads `len` bytes at `addr`; throws MemoryFault or StaleNotification.
    std::vector<std::uint8_t> read(std::uint64_t addr, std::size_t len);
    template <typename T>
    T read_struct(std::uint64_t addr)
    {
        auto bytes = read(addr, sizeof(T));
        T value;
        std::memcpy(&value, bytes.data(), sizeof(T));
        return value;
    }
    // NUL-terminated string of at most `max` bytes (excluding the NUL).
    std::string read_string(std::uint64_t addr, std::size_t max = 4096);

    void write(std::uint64_t addr, const void *data, std::size_t len);

    // Duplicate of the child's descriptor, or an invalid fd.
    UniqueFd get_fd(int fd);

    std::uint64_t max_reads_per_address() const;

    // Runs after the reply was sent, on the thread that ran the handler.
    void defer(std::function<void()> action) { deferred_.push_back(std::move(action)); }
    void run_deferred();

private:
    NotifySource &source_;
    Notification n_;
    std::map<std::uint64_t, std::uint64_t> reads_;
    std::vector<std::function<void()>> deferred_;
};

using Handler = std::function<Verdict(NotifyContext &)>;

struct HandlerTable {
    std::map<int, Handler> handlers;

    void set(int nr, Handler handler) { handlers[nr] = std::move(handler); }
    const Handler *find(int nr) const
    {
        auto it = handlers.find(nr);
        return it == handlers.end() ? nullptr : &it->second;
    }
};

// Dispatches one notification to its handler and maps failures to Deny.
Verdict dispatch(const HandlerTable &table, NotifyContext &ctx, SupervisorStats &stats,
                 const std::function<void(const std::string &)> &log);

class Supervisor {
public:
    Supervisor(std::unique_ptr<NotifySource> source, HandlerTable table, unsigned workers = 4);
    ~Supervisor();
    Supervisor(const Supervisor &) = delete;
    Supervisor &operator=(const Supervisor &) = delete;

    void set_logger(std::function<void(const std::string &)> log) { log_ = std::move(log); }

    void start();
    // Waits until the channel closed and every received notification was
    // answered or dropped.
    void join();
    // Closes the channel from our side.
    void stop();

    SupervisorCounters counters() const { return stats_.snapshot(); }
    NotifySource &source() noexcept { return *source_; }

private:
    struct Queue {
        std::mutex mutex;
        std::condition_variable cv;
        std::deque<Notification> items;
        bool closed = false;
    };

    void receive_loop();
    void worker_loop(Queue &queue);
    void handle(const Notification &n);

    std::unique_ptr<NotifySource> source_;
    HandlerTable table_;
    std::vector<std::unique_ptr<Queue>> queues_;
    std::thread receiver_;
    std::vector<std::thread> workers_;
    SupervisorStats stats_;
    std::function<void(const std::string &)> log_;
    bool started_ = false;
    bool joined_ = false;
};

} // namespace lockbox
