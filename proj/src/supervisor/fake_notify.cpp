#include "lockbox/fake_notify.hpp"

#include <fcntl.h>
#include <unistd.h>

namespace lockbox {

Notification FakeNotifySource::make(pid_t pid, int nr, std::array<std::uint64_t, 6> args)
{
    Notification n;
    n.pid = pid;
    n.nr = nr;
    n.args = args;
    return n;
}

std::uint64_t FakeNotifySource::push(Notification n)
{
    std::lock_guard lock(mutex_);
    if (n.id == 0) n.id = next_id_++;
    live_.insert(n.id);
    pending_.push_back(n);
    cv_.notify_all();
    return n.id;
}

void FakeNotifySource::close()
{
    std::lock_guard lock(mutex_);
    closed_ = true;
    cv_.notify_all();
}

void FakeNotifySource::map_memory(pid_t pid, std::uint64_t addr, std::vector<std::uint8_t> bytes)
{
    std::lock_guard lock(mutex_);
    memory_[pid][addr] = std::move(bytes);
}

std::vector<std::uint8_t> FakeNotifySource::memory(pid_t pid, std::uint64_t addr,
                                                   std::size_t len) const
{
    std::lock_guard lock(mutex_);
    auto &self = const_cast<FakeNotifySource &>(*this);
    std::uint8_t *ptr = nullptr;
    if (!self.locate(pid, addr, len, &ptr)) return {};
    return std::vector<std::uint8_t>(ptr, ptr + len);
}

void FakeNotifySource::add_fd(pid_t pid, int fd, int host_fd)
{
    std::lock_guard lock(mutex_);
    fds_[{pid, fd}] = host_fd;
}

void FakeNotifySource::invalidate(std::uint64_t id)
{
    std::lock_guard lock(mutex_);
    live_.erase(id);
}

std::vector<FakeNotifySource::Reply> FakeNotifySource::replies() const
{
    std::lock_guard lock(mutex_);
    return replies_;
}

std::optional<Verdict> FakeNotifySource::reply_for(std::uint64_t id) const
{
    std::lock_guard lock(mutex_);
    for (const auto &reply : replies_) {
        if (reply.notification.id == id) return reply.verdict;
    }
    return std::nullopt;
}

bool FakeNotifySource::wait_replies(std::size_t count, std::chrono::milliseconds timeout) const
{
    std::unique_lock lock(mutex_);
    return cv_.wait_for(lock, timeout, [&] { return replies_.size() >= count; });
}

std::uint64_t FakeNotifySource::read_count() const
{
    std::lock_guard lock(mutex_);
    return reads_;
}

std::optional<Notification> FakeNotifySource::receive()
{
    std::unique_lock lock(mutex_);
    cv_.wait(lock, [&] { return closed_ || !pending_.empty(); });
    if (pending_.empty()) return std::nullopt;
    Notification n = pending_.front();
    pending_.pop_front();
    return n;
}

bool FakeNotifySource::send(const Notification &n, const Verdict &verdict)
{
    std::lock_guard lock(mutex_);
    if (!live_.count(n.id)) return false;
    live_.erase(n.id);
    replies_.push_back(Reply{n, verdict});
    cv_.notify_all();
    return true;
}

bool FakeNotifySource::id_valid(std::uint64_t id)
{
    std::lock_guard lock(mutex_);
    return live_.count(id) > 0;
}

bool FakeNotifySource::locate(pid_t pid, std::uint64_t addr, std::size_t len, std::uint8_t **out)
{
    auto pit = memory_.find(pid);
    if (pit == memory_.end()) return false;
    auto &regions = pit->second;
    auto it = regions.upper_bound(addr);
    if (it == regions.begin()) return false;
    --it;
    std::uint64_t base = it->first;
    if (addr + len > base + it->second.size()) return false;
    *out = it->second.data() + (addr - base);
    return true;
}

bool FakeNotifySource::read_memory(pid_t pid, std::uint64_t addr, void *out, std::size_t len)
{
    {
        std::lock_guard lock(mutex_);
        std::uint8_t *ptr = nullptr;
        if (!locate(pid, addr, len, &ptr)) return false;
        std::memcpy(out, ptr, len);
        reads_++;
    }
    if (on_read) on_read(pid, addr);
    return true;
}

bool FakeNotifySource::write_memory(pid_t pid, std::uint64_t addr, const void *data,
                                    std::size_t len)
{
    std::lock_guard lock(mutex_);
    std::uint8_t *ptr = nullptr;
    if (!locate(pid, addr, len, &ptr)) return false;
    std::memcpy(ptr, data, len);
    return true;
}

UniqueFd FakeNotifySource::get_fd(pid_t pid, int fd)
{
    std::lock_guard lock(mutex_);
    auto it = fds_.find({pid, fd});
    if (it == fds_.end()) return UniqueFd();
    return UniqueFd(fcntl(it->second, F_DUPFD_CLOEXEC, 0));
}

} // namespace lockbox
