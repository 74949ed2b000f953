#include "lockbox/cow.hpp"
#include "lockbox/proc.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <sys/stat.h>
#include <sys/syscall.h>
#include <sys/time.h>
#include <unistd.h>
#include <utime.h>

#include <cerrno>
#include <cstddef>
#include <cstring>

namespace lockbox {

namespace {

constexpr std::size_t kMaxListings = 4096;

// A path argument resolved against the calling task.
struct PathArg {
    std::string raw;
    std::optional<std::string> abs;
    std::optional<std::string> rel; // set when inside the workspace
};

PathArg path_arg(CowRuntime &rt, NotifyContext &ctx, int dirfd, std::uint64_t addr)
{
    PathArg p;
    p.raw = ctx.read_string(addr);
    p.abs = resolve_at(ctx.pid(), dirfd, p.raw);
    if (p.abs) p.rel = rt.workspace->relative(*p.abs);
    return p;
}

int dirfd_arg(std::uint64_t v)
{
    return static_cast<int>(static_cast<std::int32_t>(v));
}

Verdict result(int err)
{
    return err ? Verdict::deny(err) : Verdict::emulate(0);
}

// Live denials and hook File events for a path inside the workspace.
std::optional<Verdict> gate(CowRuntime &rt, NotifyContext &ctx, const PathArg &p)
{
    if (rt.live && rt.live->load()->scope.denied(*p.abs)) return Verdict::deny(EACCES);
    if (rt.file_gate) return rt.file_gate(ctx, *p.abs);
    return std::nullopt;
}

Verdict handle_open(CowRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    int dirfd = AT_FDCWD;
    std::uint64_t addr;
    int flags;
    mode_t mode;
    if (n.nr == SYS_openat) {
        dirfd = dirfd_arg(ctx.arg(0));
        addr = ctx.arg(1);
        flags = static_cast<int>(ctx.arg(2));
        mode = static_cast<mode_t>(ctx.arg(3));
    } else if (n.nr == SYS_creat) {
        addr = ctx.arg(0);
        flags = O_CREAT | O_WRONLY | O_TRUNC;
        mode = static_cast<mode_t>(ctx.arg(1));
    } else {
        addr = ctx.arg(0);
        flags = static_cast<int>(ctx.arg(1));
        mode = static_cast<mode_t>(ctx.arg(2));
    }
    PathArg p = path_arg(rt, ctx, dirfd, addr);
    if (p.raw.empty()) return Verdict::deny(ENOENT);
    if (!p.abs) return Verdict::allow();
    if (!p.rel) {
        if (rt.outside_open) return rt.outside_open(ctx, *p.abs, flags, mode);
        return Verdict::allow();
    }
    if (auto denied = gate(rt, ctx, p)) return *denied;
    if (flags & O_CREAT) mode = mode & ~proc_umask(ctx.pid()) & 07777;
    OpenOutcome out = rt.workspace->open(*p.rel, flags, mode);
    if (out.error) return Verdict::deny(out.error);
    if (out.passthrough) return Verdict::allow();
    ctx.check_valid();
    return Verdict::emulate_fd(std::move(out.fd), std::nullopt, (flags & O_CLOEXEC) != 0);
}

// An fd-based metadata change is refused on lower-layer files.
Verdict fd_mutation(CowRuntime &rt, NotifyContext &ctx, int fd)
{
    auto path = proc_fd_path(ctx.pid(), fd);
    if (!path) return Verdict::allow();
    if (path_has_prefix(*path, rt.workspace->upper_root())) return Verdict::allow();
    if (path_has_prefix(*path, rt.workspace->lower_root())) return Verdict::deny(EPERM);
    return Verdict::allow();
}

Verdict with_upper(CowRuntime &rt, NotifyContext &ctx, const PathArg &p, bool follow,
                   const std::function<int(const std::string &)> &op)
{
    if (auto denied = gate(rt, ctx, p)) return *denied;
    std::string upper;
    if (int err = rt.workspace->copy_up(*p.rel, follow, &upper)) return Verdict::deny(err);
    return result(op(upper) < 0 ? errno : 0);
}

std::optional<std::array<timespec, 2>> read_times(NotifyContext &ctx, int nr, std::uint64_t addr)
{
    if (addr == 0) return std::nullopt;
    std::array<timespec, 2> ts{};
    if (nr == SYS_utime) {
        auto buf = ctx.read_struct<utimbuf>(addr);
        ts[0] = {buf.actime, 0};
        ts[1] = {buf.modtime, 0};
    } else if (nr == SYS_utimes || nr == SYS_futimesat) {
        auto tv = ctx.read_struct<std::array<timeval, 2>>(addr);
        for (int i = 0; i < 2; i++) ts[i] = {tv[i].tv_sec, tv[i].tv_usec * 1000};
    } else {
        ts = ctx.read_struct<std::array<timespec, 2>>(addr);
    }
    return ts;
}

Verdict handle_mutate(CowRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    auto &ws = *rt.workspace;
    auto inside = [&](const PathArg &p) { return p.abs && p.rel; };

    switch (n.nr) {
        case SYS_unlink:
        case SYS_rmdir:
        case SYS_unlinkat: {
            bool at = n.nr == SYS_unlinkat;
            PathArg p = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD, ctx.arg(at ? 1 : 0));
            if (!inside(p)) return Verdict::allow();
            if (auto denied = gate(rt, ctx, p)) return *denied;
            bool dir = n.nr == SYS_rmdir || (at && (ctx.arg(2) & AT_REMOVEDIR));
            return result(ws.remove(*p.rel, dir));
        }
        case SYS_mkdir:
        case SYS_mkdirat: {
            bool at = n.nr == SYS_mkdirat;
            PathArg p = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD, ctx.arg(at ? 1 : 0));
            if (!inside(p)) return Verdict::allow();
            if (auto denied = gate(rt, ctx, p)) return *denied;
            auto mode = static_cast<mode_t>(ctx.arg(at ? 2 : 1)) & ~proc_umask(ctx.pid()) & 07777;
            return result(ws.mkdir(*p.rel, mode));
        }
        case SYS_rename:
        case SYS_renameat:
        case SYS_renameat2: {
            bool at = n.nr != SYS_rename;
            PathArg from = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD, ctx.arg(at ? 1 : 0));
            PathArg to = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(2)) : AT_FDCWD, ctx.arg(at ? 3 : 1));
            unsigned flags = n.nr == SYS_renameat2 ? static_cast<unsigned>(ctx.arg(4)) : 0;
            if (!inside(from) && !inside(to)) return Verdict::allow();
            if (!inside(from) || !inside(to)) return Verdict::deny(EXDEV);
            if (auto denied = gate(rt, ctx, from)) return *denied;
            if (auto denied = gate(rt, ctx, to)) return *denied;
            return result(ws.rename(*from.rel, *to.rel, flags));
        }
        case SYS_symlink:
        case SYS_symlinkat: {
            bool at = n.nr == SYS_symlinkat;
            std::string target = ctx.read_string(ctx.arg(0));
            PathArg p = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(1)) : AT_FDCWD, ctx.arg(at ? 2 : 1));
            if (!inside(p)) return Verdict::allow();
            if (auto denied = gate(rt, ctx, p)) return *denied;
            return result(ws.symlink(target, *p.rel));
        }
        case SYS_link:
        case SYS_linkat: {
            bool at = n.nr == SYS_linkat;
            PathArg from = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD, ctx.arg(at ? 1 : 0));
            PathArg to = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(2)) : AT_FDCWD, ctx.arg(at ? 3 : 1));
            if (!inside(from) && !inside(to)) return Verdict::allow();
            return Verdict::deny(EXDEV);
        }
        case SYS_mknod:
        case SYS_mknodat: {
            bool at = n.nr == SYS_mknodat;
            PathArg p = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD, ctx.arg(at ? 1 : 0));
            if (!inside(p)) return Verdict::allow();
            return Verdict::deny(EPERM);
        }
        case SYS_truncate: {
            PathArg p = path_arg(rt, ctx, AT_FDCWD, ctx.arg(0));
            if (!inside(p)) return Verdict::allow();
            auto len = static_cast<off_t>(ctx.arg(1));
            return with_upper(rt, ctx, p, true,
                              [&](const std::string &u) { return ::truncate(u.c_str(), len); });
        }
        case SYS_chmod:
        case SYS_fchmodat: {
            bool at = n.nr == SYS_fchmodat;
            PathArg p = path_arg(rt, ctx, at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD, ctx.arg(at ? 1 : 0));
            if (!inside(p)) return Verdict::allow();
            auto mode = static_cast<mode_t>(ctx.arg(at ? 2 : 1));
            return with_upper(rt, ctx, p, true,
                              [&](const std::string &u) { return ::chmod(u.c_str(), mode); });
        }
        case SYS_chown:
        case SYS_lchown:
        case SYS_fchownat: {
            bool at = n.nr == SYS_fchownat;
            int flags = at ? static_cast<int>(ctx.arg(4)) : 0;
            int dirfd = at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD;
            PathArg p = path_arg(rt, ctx, dirfd, ctx.arg(at ? 1 : 0));
            if (at && p.raw.empty() && (flags & AT_EMPTY_PATH)) return fd_mutation(rt, ctx, dirfd);
            if (!inside(p)) return Verdict::allow();
            auto uid = static_cast<uid_t>(ctx.arg(at ? 2 : 1));
            auto gid = static_cast<gid_t>(ctx.arg(at ? 3 : 2));
            bool follow = n.nr == SYS_chown || (at && !(flags & AT_SYMLINK_NOFOLLOW));
            return with_upper(rt, ctx, p, follow,
                              [&](const std::string &u) { return ::lchown(u.c_str(), uid, gid); });
        }
        case SYS_utimensat:
        case SYS_utime:
        case SYS_utimes:
        case SYS_futimesat: {
            bool at = n.nr == SYS_utimensat || n.nr == SYS_futimesat;
            int dirfd = at ? dirfd_arg(ctx.arg(0)) : AT_FDCWD;
            std::uint64_t path_addr = ctx.arg(at ? 1 : 0);
            if (n.nr == SYS_utimensat && path_addr == 0) return fd_mutation(rt, ctx, dirfd);
            PathArg p = path_arg(rt, ctx, dirfd, path_addr);
            if (!inside(p)) return Verdict::allow();
            auto times = read_times(ctx, n.nr, ctx.arg(at ? 2 : 1));
            int flags = n.nr == SYS_utimensat ? static_cast<int>(ctx.arg(3)) : 0;
            bool follow = !(flags & AT_SYMLINK_NOFOLLOW);
            return with_upper(rt, ctx, p, follow, [&](const std::string &u) {
                return ::utimensat(AT_FDCWD, u.c_str(), times ? times->data() : nullptr,
                                   AT_SYMLINK_NOFOLLOW);
            });
        }
        case SYS_fchmod:
        case SYS_fchown: return fd_mutation(rt, ctx, static_cast<int>(ctx.arg(0)));
        default: return Verdict::allow();
    }
}

Verdict handle_stat(CowRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    int dirfd = AT_FDCWD;
    std::uint64_t path_addr = ctx.arg(0);
    int flags = 0;
    switch (n.nr) {
        case SYS_lstat: flags = AT_SYMLINK_NOFOLLOW; break;
        case SYS_newfstatat:
            dirfd = dirfd_arg(ctx.arg(0));
            path_addr = ctx.arg(1);
            flags = static_cast<int>(ctx.arg(3));
            break;
        case SYS_statx:
            dirfd = dirfd_arg(ctx.arg(0));
            path_addr = ctx.arg(1);
            flags = static_cast<int>(ctx.arg(2));
            break;
        case SYS_faccessat:
            dirfd = dirfd_arg(ctx.arg(0));
            path_addr = ctx.arg(1);
            break;
        case SYS_faccessat2:
            dirfd = dirfd_arg(ctx.arg(0));
            path_addr = ctx.arg(1);
            flags = static_cast<int>(ctx.arg(3));
            break;
        case SYS_readlink: flags = AT_SYMLINK_NOFOLLOW; break;
        case SYS_readlinkat:
            dirfd = dirfd_arg(ctx.arg(0));
            path_addr = ctx.arg(1);
            flags = AT_SYMLINK_NOFOLLOW;
            break;
        default: break;
    }
    if (path_addr == 0) return Verdict::allow();
    PathArg p = path_arg(rt, ctx, dirfd, path_addr);
    if (p.raw.empty()) {
        if (flags & AT_EMPTY_PATH) return Verdict::allow();
        return Verdict::deny(ENOENT);
    }
    if (!p.abs || !p.rel) return Verdict::allow();
    if (auto denied = gate(rt, ctx, p)) return *denied;

    bool follow = !(flags & AT_SYMLINK_NOFOLLOW);
    Resolved r = rt.workspace->resolve(*p.rel, follow);
    if (r.kind == Resolved::Kind::Escape) return Verdict::deny(EACCES);
    if (r.error) return Verdict::deny(r.error);
    if (!r.exists()) return Verdict::deny(ENOENT);
    if (rt.workspace->bypass_unmodified_reads() && r.pure_lower) return Verdict::allow();

    switch (n.nr) {
        case SYS_stat:
        case SYS_lstat:
        case SYS_newfstatat: {
            struct stat st{};
            if (::lstat(r.real.c_str(), &st) < 0) return Verdict::deny(errno);
            ctx.write(ctx.arg(n.nr == SYS_newfstatat ? 2 : 1), &st, sizeof(st));
            return Verdict::emulate(0);
        }
        case SYS_statx: {
            struct statx stx{};
            unsigned mask = static_cast<unsigned>(ctx.arg(3));
            if (::statx(AT_FDCWD, r.real.c_str(), AT_SYMLINK_NOFOLLOW | (flags & AT_STATX_SYNC_TYPE),
                        mask, &stx) < 0) {
                return Verdict::deny(errno);
            }
            ctx.write(ctx.arg(4), &stx, sizeof(stx));
            return Verdict::emulate(0);
        }
        case SYS_access:
        case SYS_faccessat:
        case SYS_faccessat2: {
            int mode = static_cast<int>(ctx.arg(n.nr == SYS_access ? 1 : 2));
            if (::faccessat(AT_FDCWD, r.real.c_str(), mode, AT_SYMLINK_NOFOLLOW) < 0) {
                return Verdict::deny(errno);
            }
            return Verdict::emulate(0);
        }
        case SYS_readlink:
        case SYS_readlinkat: {
            if (!S_ISLNK(r.mode)) return Verdict::deny(EINVAL);
            bool at = n.nr == SYS_readlinkat;
            std::uint64_t buf = ctx.arg(at ? 2 : 1);
            auto size = static_cast<std::size_t>(ctx.arg(at ? 3 : 2));
            if (static_cast<std::int64_t>(size) <= 0) return Verdict::deny(EINVAL);
            std::string target(4096, '\0');
            ssize_t len = ::readlink(r.real.c_str(), target.data(), target.size());
            if (len < 0) return Verdict::deny(errno);
            std::size_t out = std::min<std::size_t>(static_cast<std::size_t>(len), size);
            ctx.write(buf, target.data(), out);
            return Verdict::emulate(static_cast<std::int64_t>(out));
        }
        default: return Verdict::allow();
    }
}

std::size_t align_up(std::size_t v, std::size_t a)
{
    return (v + a - 1) & ~(a - 1);
}

// Serializes entries starting at `index` into getdents64 or getdents records.
std::vector<std::uint8_t> encode_dirents(const std::vector<DirEntry> &entries, std::size_t index,
                                         std::size_t capacity, bool legacy, std::size_t *next)
{
    std::vector<std::uint8_t> out;
    std::size_t i = index;
    for (; i < entries.size(); i++) {
        const DirEntry &e = entries[i];
        std::size_t reclen;
        if (legacy) {
            reclen = align_up(2 * sizeof(unsigned long) + sizeof(unsigned short) + e.name.size() + 2,
                              sizeof(long));
        } else {
            reclen = align_up(offsetof(struct dirent64, d_name) + e.name.size() + 1, 8);
        }
        if (out.size() + reclen > capacity) break;
        std::size_t base = out.size();
        out.resize(base + reclen, 0);
        std::uint8_t *rec = out.data() + base;
        auto off = static_cast<std::int64_t>(i + 1);
        auto rl = static_cast<unsigned short>(reclen);
        if (legacy) {
            unsigned long ino = e.ino;
            unsigned long loff = static_cast<unsigned long>(off);
            std::memcpy(rec, &ino, sizeof(ino));
            std::memcpy(rec + sizeof(long), &loff, sizeof(loff));
            std::memcpy(rec + 2 * sizeof(long), &rl, sizeof(rl));
            std::memcpy(rec + 2 * sizeof(long) + sizeof(rl), e.name.data(), e.name.size());
            rec[reclen - 1] = e.type;
        } else {
            std::uint64_t ino = e.ino;
            std::memcpy(rec + offsetof(struct dirent64, d_ino), &ino, sizeof(ino));
            std::memcpy(rec + offsetof(struct dirent64, d_off), &off, sizeof(off));
            std::memcpy(rec + offsetof(struct dirent64, d_reclen), &rl, sizeof(rl));
            rec[offsetof(struct dirent64, d_type)] = e.type;
            std::memcpy(rec + offsetof(struct dirent64, d_name), e.name.data(), e.name.size());
        }
    }
    *next = i;
    return out;
}

Verdict handle_dirents(CowRuntime &rt, NotifyContext &ctx)
{
    const Notification &n = ctx.notification();
    int fd = static_cast<int>(ctx.arg(0));
    auto path = proc_fd_path(ctx.pid(), fd);
    if (!path) return Verdict::allow();
    auto rel = rt.workspace->relative(*path);
    if (!rel) return Verdict::allow();
    UniqueFd dup = ctx.get_fd(fd);
    if (!dup) return Verdict::deny(EBADF);
    struct stat st{};
    if (::fstat(dup.get(), &st) < 0) return Verdict::deny(errno);
    if (!S_ISDIR(st.st_mode)) return Verdict::deny(ENOTDIR);
    off_t pos = ::lseek(dup.get(), 0, SEEK_CUR);

    auto key = std::make_tuple(tgid_of(ctx.pid()), fd, st.st_dev, st.st_ino);
    std::lock_guard lock(rt.listings_mutex);
    auto it = rt.listings.find(key);
    bool fresh = it == rt.listings.end() || (pos == 0 && it->second.seekable);
    if (!fresh && it->second.kernel) return Verdict::allow();
    if (fresh) {
        if (rt.listings.size() >= kMaxListings) rt.listings.clear();
        CowRuntime::Listing listing;
        if (rt.workspace->bypass_unmodified_reads() && !rt.workspace->dir_touched(*rel) &&
            (pos == 0 || it == rt.listings.end())) {
            listing.kernel = true;
            rt.listings[key] = std::move(listing);
            return Verdict::allow();
        }
        int err = 0;
        auto merged = rt.workspace->list(*rel, &err);
        if (err) return Verdict::deny(err);
        std::uint64_t parent_ino = 0;
        struct stat pst{};
        if (::fstatat(dup.get(), "..", &pst, 0) == 0) parent_ino = pst.st_ino;
        listing.entries.push_back(DirEntry{".", DT_DIR, st.st_ino});
        listing.entries.push_back(DirEntry{"..", DT_DIR, parent_ino});
        listing.entries.insert(listing.entries.end(), merged.begin(), merged.end());
        listing.cursor = pos > 0 ? static_cast<std::size_t>(pos) : 0;
        it = rt.listings.insert_or_assign(key, std::move(listing)).first;
    }
    auto &listing = it->second;
    std::size_t index = listing.seekable && pos >= 0 ? static_cast<std::size_t>(pos) : listing.cursor;
    std::size_t next = index;
    auto capacity = static_cast<std::size_t>(ctx.arg(2));
    auto bytes = encode_dirents(listing.entries, index, capacity, n.nr == SYS_getdents, &next);
    if (bytes.empty() && index < listing.entries.size()) return Verdict::deny(EINVAL);
    if (!bytes.empty()) ctx.write(ctx.arg(1), bytes.data(), bytes.size());
    listing.cursor = next;
    if (::lseek(dup.get(), static_cast<off_t>(next), SEEK_SET) != static_cast<off_t>(next)) {
        listing.seekable = false;
    }
    return Verdict::emulate(static_cast<std::int64_t>(bytes.size()));
}

} // namespace

void install_cow_handlers(HandlerTable &table, const EnforcementPlan &plan,
                          std::shared_ptr<CowRuntime> runtime)
{
    for (const auto &[nr, id] : plan.supervisor_handlers) {
        auto rt = runtime;
        switch (id) {
            case HandlerId::CowOpen:
                table.set(nr, [rt](NotifyContext &ctx) { return handle_open(*rt, ctx); });
                break;
            case HandlerId::CowMutate:
                table.set(nr, [rt](NotifyContext &ctx) { return handle_mutate(*rt, ctx); });
                break;
            case HandlerId::CowStat:
                table.set(nr, [rt](NotifyContext &ctx) { return handle_stat(*rt, ctx); });
                break;
            case HandlerId::CowDirents:
                table.set(nr, [rt](NotifyContext &ctx) { return handle_dirents(*rt, ctx); });
                break;
            default: break;
        }
    }
}

} // namespace lockbox
