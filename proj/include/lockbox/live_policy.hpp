#pragma once

#include "lockbox/policy.hpp"

#include <memory>
#include <mutex>

namespace lockbox {

// The runtime-tightenable part of a sandbox's policy.
struct LivePolicy {
    PinnedAllowlist pins;
    PathScope scope;
    ResourceLimits limits;
    // Set once deny_path narrowed the scope below the static rules.
    bool paths_tightened = false;
};

// Snapshot cell: readers take a shared_ptr copy, writers swap the pointer.
class LivePolicyCell {
public:
    explicit LivePolicyCell(LivePolicy initial)
        : current_(std::make_shared<const LivePolicy>(std::move(initial)))
    {
    }

    std::shared_ptr<const LivePolicy> load() const
    {
        std::lock_guard lock(mutex_);
        return current_;
    }

    void store(std::shared_ptr<const LivePolicy> next)
    {
        std::lock_guard lock(mutex_);
        current_ = std::move(next);
    }

    // Serializes read-modify-write updates.
    std::mutex &update_mutex() { return update_mutex_; }

private:
    mutable std::mutex mutex_;
    std::mutex update_mutex_;
    std::shared_ptr<const LivePolicy> current_;
};

} // namespace lockbox
