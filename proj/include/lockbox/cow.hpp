#pragma once

#include "lockbox/live_policy.hpp"
#include "lockbox/plan.hpp"
#include "lockbox/policy.hpp"
#include "lockbox/supervisor.hpp"
#include "lockbox/unique_fd.hpp"

#include <sys/stat.h>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <tuple>
#include <string>
#include <vector>

namespace lockbox {

struct DirEntry {
    std::string name;
    unsigned char type = 0; // DT_* value
    std::uint64_t ino = 0;

    bool operator==(const DirEntry &) const = default;
};

// Union of two listings: upper wins on name collisions, whited-out lower
// names disappear, an opaque upper directory hides the lower listing. The
// result is sorted by name. "." and ".." are not expected in the inputs.
std::vector<DirEntry> merge_dirents(const std::vector<DirEntry> &lower,
                                    const std::vector<DirEntry> &upper,
                                    const std::set<std::string> &whiteouts, bool opaque);

struct LayerSet {
    std::string lower_root;
    std::string upper_root;
    // Workspace-relative paths ("a/b", "" is the root).
    std::set<std::string> whiteouts;
    std::set<std::string> opaque_dirs;
};

struct Resolved {
    enum class Kind : std::uint8_t { Upper, Lower, NotFound, Escape };

    Kind kind = Kind::NotFound;
    int error = 0;             // ENOTDIR / ELOOP while walking
    std::string rel;           // final workspace-relative path
    std::string real;          // host path of the visible entry
    mode_t mode = 0;           // lstat mode of the visible entry
    bool in_upper = false;
    bool in_lower = false;
    bool lower_dir_visible = false; // lower children show through
    bool pure_lower = true;         // resolution never consulted upper or masks
    std::string escaped;            // absolute target when kind == Escape

    bool exists() const noexcept { return kind == Kind::Upper || kind == Kind::Lower; }
    bool is_dir() const noexcept { return exists() && S_ISDIR(mode); }
};

struct EffectSummary {
    std::vector<std::string> created;
    std::vector<std::string> modified;
    std::vector<std::string> deleted;
    std::uint64_t bytes_written = 0;
    // Upper layer location when the effects were kept.
    std::optional<std::string> kept_at;

    bool empty() const noexcept { return created.empty() && modified.empty() && deleted.empty(); }
    std::string to_json() const;
    bool operator==(const EffectSummary &) const = default;
};

struct OpenOutcome {
    int error = 0;
    UniqueFd fd;
    // The kernel may perform the open itself: nothing in the upper layer or
    // the masks can affect it.
    bool passthrough = false;
};

// Seccomp-backed copy-on-write workspace over a lower directory. All
// operations take workspace-relative paths and return 0 or a positive errno.
class Workspace {
public:
    // Creates or reopens storage (upper directory plus manifest). Without a
    // storage directory a fresh one is created under the temp directory.
    Workspace(std::string lower_root, std::optional<std::string> storage,
              std::optional<std::uint64_t> quota_bytes = std::nullopt,
              bool bypass_unmodified_reads = true);
    ~Workspace();
    Workspace(const Workspace &) = delete;
    Workspace &operator=(const Workspace &) = delete;

    const std::string &lower_root() const noexcept { return lower_; }
    const std::string &upper_root() const noexcept { return upper_; }
    const std::string &storage() const noexcept { return storage_; }
    bool bypass_unmodified_reads() const noexcept { return bypass_; }
    LayerSet layers() const;

    // Workspace-relative path for an absolute host path under the lower or
    // upper root.
    std::optional<std::string> relative(const std::string &abs) const;

    Resolved resolve(const std::string &rel, bool follow_last = true) const;

    OpenOutcome open(const std::string &rel, int flags, mode_t mode);
    int mkdir(const std::string &rel, mode_t mode);
    int remove(const std::string &rel, bool directory);
    int rename(const std::string &from, const std::string &to, unsigned flags = 0);
    int symlink(const std::string &target, const std::string &rel);
    // Copies `rel` into the upper layer and returns its upper path there.
    int copy_up(const std::string &rel, bool follow, std::string *upper_path);
    std::vector<DirEntry> list(const std::string &rel, int *error) const;
    // Whether a directory listing could differ from the lower directory's.
    bool dir_touched(const std::string &rel) const;

    std::uint64_t upper_bytes() const;
    EffectSummary summary() const;
    // COMMIT applies the effects to the lower tree (throws
    // CommitConflictError), ABORT discards them, KEEP leaves them in place.
    EffectSummary finalize(EffectAction action, bool dry_run = false);
    bool finalized() const;

    std::mutex &mutex() const noexcept { return mutex_; }

private:
    Resolved resolve_locked(const std::string &rel, bool follow_last) const;
    std::vector<DirEntry> list_locked(const std::string &rel, int *error) const;
    bool dir_touched_locked(const std::string &rel) const;
    std::string lower_path(const std::string &rel) const;
    std::string upper_path(const std::string &rel) const;
    int ensure_upper_parents(const std::string &rel);
    int copy_up_locked(const Resolved &r);
    int copy_tree(const std::string &from_rel, const std::string &to_upper);
    int place_upper(const std::string &rel, bool directory);
    int remove_locked(const std::string &rel, bool directory);
    void record_origin(const std::string &rel);
    void add_mask(std::set<std::string> &set, const char *op, const std::string &rel);
    void drop_mask(std::set<std::string> &set, const char *op, const std::string &rel);
    void drop_masks_below(const std::string &rel);
    void append_manifest(const std::string &line);
    void load_manifest();
    bool quota_allows(std::uint64_t extra) const;
    EffectSummary summary_locked() const;
    void commit_locked(const EffectSummary &summary);
    void discard_locked();

    std::string lower_;
    std::string storage_;
    std::string upper_;
    std::string manifest_path_;
    std::optional<std::uint64_t> quota_;
    bool bypass_ = true;
    bool owns_storage_ = false;
    bool finalized_ = false;
    bool kept_ = false;

    std::set<std::string> whiteouts_;
    std::set<std::string> opaque_;
    struct Origin {
        std::int64_t size = -1; // -1: absent
        std::int64_t mtime_ns = 0;
        mode_t mode = 0;
    };
    std::map<std::string, Origin> origins_;
    mutable std::mutex mutex_;
};

// Workspace backends. Only the seccomp backend is implemented; the
// filesystem-level branch backend is an interface placeholder.
class WorkspaceBackend {
public:
    virtual ~WorkspaceBackend() = default;
    virtual const char *name() const = 0;
    virtual std::shared_ptr<Workspace> create(const WorkspaceConfig &config) = 0;
    virtual EffectSummary commit(Workspace &ws) = 0;
    virtual EffectSummary abort(Workspace &ws) = 0;
    virtual std::optional<std::uint64_t> quota(const Workspace &ws) const = 0;
};

std::unique_ptr<WorkspaceBackend> make_seccomp_backend();
// Throws Error(Unsupported) from every entry point.
std::unique_ptr<WorkspaceBackend> make_branchfs_backend();

struct CowRuntime {
    std::shared_ptr<Workspace> workspace;
    LivePolicyCell *live = nullptr;
    // Open directory listings served by the supervisor.
    struct Listing {
        std::vector<DirEntry> entries;
        // The kernel serves this handle; nothing could differ.
        bool kernel = false;
        bool seekable = true;
        std::size_t cursor = 0;
    };
    // Runtime-hook integration: File events and live path denials for paths
    // inside the workspace, and the open path for everything outside it.
    std::function<std::optional<Verdict>(NotifyContext &, const std::string &abs)> file_gate;
    std::function<Verdict(NotifyContext &, const std::string &abs, int flags, mode_t mode)>
        outside_open;
    std::mutex listings_mutex;
    std::map<std::tuple<pid_t, int, dev_t, ino_t>, Listing> listings;
};

void install_cow_handlers(HandlerTable &table, const EnforcementPlan &plan,
                          std::shared_ptr<CowRuntime> runtime);

} // namespace lockbox
