#pragma once

#include "lockbox/supervisor.hpp"

#include <chrono>
#include <set>

namespace lockbox {

// In-memory notification source: tests push notifications, lay out child
// memory and descriptors, and inspect the replies.
class FakeNotifySource final : public NotifySource {
public:
    struct Reply {
        Notification notification;
        Verdict verdict;
    };

    std::uint64_t push(Notification n);
    Notification make(pid_t pid, int nr, std::array<std::uint64_t, 6> args = {});
    void close();

    void map_memory(pid_t pid, std::uint64_t addr, std::vector<std::uint8_t> bytes);
    std::vector<std::uint8_t> memory(pid_t pid, std::uint64_t addr, std::size_t len) const;
    // Registers a host descriptor that get_fd(pid, fd) duplicates.
    void add_fd(pid_t pid, int fd, int host_fd);
    void invalidate(std::uint64_t id);

    // Called after every successful read_memory; lets tests mutate memory
    // behind the supervisor's back.
    std::function<void(pid_t pid, std::uint64_t addr)> on_read;

    std::vector<Reply> replies() const;
    std::optional<Verdict> reply_for(std::uint64_t id) const;
    bool wait_replies(std::size_t count, std::chrono::milliseconds timeout) const;
    std::uint64_t read_count() const;

    std::optional<Notification> receive() override;
    bool send(const Notification &n, const Verdict &verdict) override;
    bool id_valid(std::uint64_t id) override;
    bool read_memory(pid_t pid, std::uint64_t addr, void *out, std::size_t len) override;
    bool write_memory(pid_t pid, std::uint64_t addr, const void *data, std::size_t len) override;
    UniqueFd get_fd(pid_t pid, int fd) override;
    void shutdown() override { close(); }

private:
    bool locate(pid_t pid, std::uint64_t addr, std::size_t len, std::uint8_t **out);

    mutable std::mutex mutex_;
    mutable std::condition_variable cv_;
    std::deque<Notification> pending_;
    bool closed_ = false;
    std::uint64_t next_id_ = 1;
    std::set<std::uint64_t> live_;
    std::map<pid_t, std::map<std::uint64_t, std::vector<std::uint8_t>>> memory_;
    std::map<std::pair<pid_t, int>, int> fds_;
    std::vector<Reply> replies_;
    std::uint64_t reads_ = 0;
};

} // namespace lockbox
