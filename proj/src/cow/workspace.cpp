#include "lockbox/cow.hpp"
#include "lockbox/error.hpp"

#include "json.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>

namespace fs = std::filesystem;

namespace lockbox {

namespace {

constexpr int kMaxSymlinkHops = 40;

std::string join(const std::string &rel, const std::string &name)
{
    return rel.empty() ? name : rel + "/" + name;
}

std::string parent_of(const std::string &rel)
{
    auto slash = rel.rfind('/');
    return slash == std::string::npos ? std::string() : rel.substr(0, slash);
}

std::vector<std::string> split(const std::string &rel)
{
    std::vector<std::string> out;
    std::size_t pos = 0;
    while (pos <= rel.size()) {
        auto next = rel.find('/', pos);
        if (next == std::string::npos) next = rel.size();
        if (next > pos) out.push_back(rel.substr(pos, next - pos));
        pos = next + 1;
    }
    return out;
}

std::optional<struct stat> lstat_opt(const std::string &path)
{
    struct stat st{};
    if (::lstat(path.c_str(), &st) < 0) return std::nullopt;
    return st;
}

std::int64_t mtime_ns(const struct stat &st)
{
    return static_cast<std::int64_t>(st.st_mtim.tv_sec) * 1000000000 + st.st_mtim.tv_nsec;
}

std::optional<std::string> read_link(const std::string &path)
{
    std::string buf(4096, '\0');
    ssize_t n = ::readlink(path.c_str(), buf.data(), buf.size());
    if (n < 0) return std::nullopt;
    buf.resize(static_cast<std::size_t>(n));
    return buf;
}

unsigned char dtype_of(mode_t mode)
{
    if (S_ISDIR(mode)) return DT_DIR;
    if (S_ISREG(mode)) return DT_REG;
    if (S_ISLNK(mode)) return DT_LNK;
    if (S_ISFIFO(mode)) return DT_FIFO;
    if (S_ISSOCK(mode)) return DT_SOCK;
    if (S_ISCHR(mode)) return DT_CHR;
    if (S_ISBLK(mode)) return DT_BLK;
    return DT_UNKNOWN;
}

std::vector<DirEntry> read_dir(const std::string &path)
{
    std::vector<DirEntry> out;
    DIR *d = ::opendir(path.c_str());
    if (!d) return out;
    while (auto *ent = ::readdir(d)) {
        std::string name = ent->d_name;
        if (name == "." || name == "..") continue;
        unsigned char type = ent->d_type;
        if (type == DT_UNKNOWN) {
            if (auto st = lstat_opt(path + "/" + name)) type = dtype_of(st->st_mode);
        }
        out.push_back(DirEntry{name, type, ent->d_ino});
    }
    ::closedir(d);
    std::sort(out.begin(), out.end(), [](const auto &a, const auto &b) { return a.name < b.name; });
    return out;
}

std::string temp_name(const std::string &dir, const std::string &base)
{
    static thread_local std::mt19937_64 rng(std::random_device{}());
    char suffix[17];
    std::snprintf(suffix, sizeof(suffix), "%016llx", static_cast<unsigned long long>(rng()));
    return dir + "/.lockbox-" + base + "-" + suffix;
}

// Copies a regular file, its permission bits and mtime. Returns 0 or errno.
int copy_regular(const std::string &from, const std::string &to)
{
    UniqueFd in(::open(from.c_str(), O_RDONLY | O_CLOEXEC | O_NOFOLLOW));
    if (!in) return errno;
    struct stat st{};
    if (::fstat(in.get(), &st) < 0) return errno;
    std::string dir = to.substr(0, to.rfind('/'));
    std::string tmp = temp_name(dir, to.substr(to.rfind('/') + 1));
    UniqueFd out(::open(tmp.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0600));
    if (!out) return errno;
    char buf[65536];
    for (;;) {
        ssize_t n = ::read(in.get(), buf, sizeof(buf));
        if (n < 0) {
            if (errno == EINTR) continue;
            ::unlink(tmp.c_str());
            return EIO;
        }
        if (n == 0) break;
        for (ssize_t off = 0; off < n;) {
            ssize_t w = ::write(out.get(), buf + off, static_cast<std::size_t>(n - off));
            if (w < 0) {
                int err = errno == ENOSPC ? ENOSPC : EIO;
                ::unlink(tmp.c_str());
                return err;
            }
            off += w;
        }
    }
    ::fchmod(out.get(), st.st_mode & 07777);
    timespec times[2] = {st.st_atim, st.st_mtim};
    ::futimens(out.get(), times);
    if (::rename(tmp.c_str(), to.c_str()) < 0) {
        int err = errno;
        ::unlink(tmp.c_str());
        return err;
    }
    return 0;
}

// Creates a symlink at `to` through a temporary name.
int replace_symlink(const std::string &target, const std::string &to)
{
    std::string dir = to.substr(0, to.rfind('/'));
    std::string tmp = temp_name(dir, to.substr(to.rfind('/') + 1));
    if (::symlink(target.c_str(), tmp.c_str()) < 0) return errno;
    if (::rename(tmp.c_str(), to.c_str()) < 0) {
        int err = errno;
        ::unlink(tmp.c_str());
        return err;
    }
    return 0;
}

bool has_entries(const std::string &dir)
{
    DIR *d = ::opendir(dir.c_str());
    if (!d) return false;
    bool found = false;
    while (auto *ent = ::readdir(d)) {
        std::string name = ent->d_name;
        if (name != "." && name != "..") {
            found = true;
            break;
        }
    }
    ::closedir(d);
    return found;
}

bool rel_has_prefix(const std::string &rel, const std::string &prefix)
{
    if (prefix.empty()) return true;
    return rel == prefix || (rel.size() > prefix.size() && rel.compare(0, prefix.size(), prefix) == 0 &&
                             rel[prefix.size()] == '/');
}

} // namespace

std::vector<DirEntry> merge_dirents(const std::vector<DirEntry> &lower,
                                    const std::vector<DirEntry> &upper,
                                    const std::set<std::string> &whiteouts, bool opaque)
{
    std::map<std::string, DirEntry> merged;
    if (!opaque) {
        for (const auto &e : lower) {
            if (!whiteouts.count(e.name)) merged[e.name] = e;
        }
    }
    for (const auto &e : upper) merged[e.name] = e;
    std::vector<DirEntry> out;
    out.reserve(merged.size());
    for (auto &[name, entry] : merged) out.push_back(std::move(entry));
    return out;
}

std::string EffectSummary::to_json() const
{
    nlohmann::json j;
    j["created"] = created;
    j["modified"] = modified;
    j["deleted"] = deleted;
    j["bytes_written"] = bytes_written;
    if (kept_at) j["kept_at"] = *kept_at;
    return j.dump();
}

// ---- Workspace -------------------------------------------------------------------

Workspace::Workspace(std::string lower_root, std::optional<std::string> storage,
                     std::optional<std::uint64_t> quota_bytes, bool bypass_unmodified_reads)
    : lower_(normalize_path(lower_root)), quota_(quota_bytes), bypass_(bypass_unmodified_reads)
{
    auto st = lstat_opt(lower_);
    if (!st || !S_ISDIR(st->st_mode)) {
        throw ValidationError("workspace root is not a directory: " + lower_);
    }
    if (storage) {
        storage_ = normalize_path(*storage);
        std::error_code ec;
        fs::create_directories(storage_, ec);
        if (ec) throw Error(ErrorKind::System, "cannot create workspace storage: " + ec.message());
    } else {
        const char *tmp = std::getenv("TMPDIR");
        std::string tmpl = std::string(tmp && *tmp ? tmp : "/tmp") + "/lockbox-ws-XXXXXX";
        if (!::mkdtemp(tmpl.data())) throw_errno("mkdtemp");
        storage_ = tmpl;
        owns_storage_ = true;
    }
    if (path_has_prefix(storage_, lower_)) {
        throw ValidationError("workspace storage must be outside the workspace root");
    }
    upper_ = storage_ + "/upper";
    manifest_path_ = storage_ + "/manifest";
    ::mkdir(upper_.c_str(), 0755);
    load_manifest();
}

Workspace::~Workspace()
{
    if (owns_storage_ && !kept_) {
        std::error_code ec;
        fs::remove_all(storage_, ec);
    }
}

std::string Workspace::lower_path(const std::string &rel) const
{
    return rel.empty() ? lower_ : lower_ + "/" + rel;
}

std::string Workspace::upper_path(const std::string &rel) const
{
    return rel.empty() ? upper_ : upper_ + "/" + rel;
}

LayerSet Workspace::layers() const
{
    std::lock_guard lock(mutex_);
    return LayerSet{lower_, upper_, whiteouts_, opaque_};
}

bool Workspace::finalized() const
{
    std::lock_guard lock(mutex_);
    return finalized_;
}

std::optional<std::string> Workspace::relative(const std::string &abs) const
{
    std::string p = normalize_path(abs);
    for (const std::string *root : {&upper_, &lower_}) {
        if (path_has_prefix(p, *root)) {
            return p.size() == root->size() ? std::string() : p.substr(root->size() + 1);
        }
    }
    return std::nullopt;
}

Resolved Workspace::resolve(const std::string &rel, bool follow_last) const
{
    std::lock_guard lock(mutex_);
    return resolve_locked(rel, follow_last);
}

Resolved Workspace::resolve_locked(const std::string &rel_in, bool follow_last) const
{
    Resolved r;
    std::string abs = normalize_path(lower_ + "/" + rel_in);
    if (!path_has_prefix(abs, lower_)) {
        r.kind = Resolved::Kind::Escape;
        r.escaped = abs;
        return r;
    }
    std::string path = abs.size() == lower_.size() ? std::string() : abs.substr(lower_.size() + 1);
    int hops = 0;
    bool pure = true;

restart:
    auto comps = split(path);
    if (comps.empty()) {
        auto st = lstat_opt(lower_);
        r.kind = Resolved::Kind::Lower;
        r.rel.clear();
        r.real = lower_;
        r.mode = st ? st->st_mode : (S_IFDIR | 0755);
        r.in_lower = true;
        r.in_upper = true;
        r.lower_dir_visible = true;
        r.pure_lower = pure;
        return r;
    }
    std::string cur;
    bool lower_vis = true;
    for (std::size_t i = 0; i < comps.size(); i++) {
        bool last = i + 1 == comps.size();
        std::string q = join(cur, comps[i]);
        auto up = lstat_opt(upper_path(q));
        bool masked = whiteouts_.count(q) > 0;
        bool opaque = opaque_.count(q) > 0;
        if (masked || opaque) pure = false;
        std::optional<struct stat> lo;
        if (lower_vis && !masked) lo = lstat_opt(lower_path(q));
        if (!up && !lo) {
            r.kind = Resolved::Kind::NotFound;
            r.error = last ? 0 : ENOENT;
            std::string rest = q;
            for (std::size_t j = i + 1; j < comps.size(); j++) rest = join(rest, comps[j]);
            r.rel = rest;
            r.pure_lower = pure;
            return r;
        }
        bool from_upper = up.has_value();
        const struct stat &st = from_upper ? *up : *lo;
        if (from_upper && !S_ISDIR(up->st_mode)) pure = false;
        if (S_ISLNK(st.st_mode) && (!last || follow_last)) {
            if (++hops > kMaxSymlinkHops) {
                r.kind = Resolved::Kind::NotFound;
                r.error = ELOOP;
                r.rel = q;
                return r;
            }
            if (from_upper) pure = false;
            auto target = read_link(from_upper ? upper_path(q) : lower_path(q));
            if (!target) {
                r.kind = Resolved::Kind::NotFound;
                r.error = EIO;
                r.rel = q;
                return r;
            }
            std::string rest;
            for (std::size_t j = i + 1; j < comps.size(); j++) rest = join(rest, comps[j]);
            std::string base = (!target->empty() && (*target)[0] == '/')
                                   ? *target
                                   : lower_path(cur) + "/" + *target;
            std::string next = normalize_path(rest.empty() ? base : base + "/" + rest);
            if (!path_has_prefix(next, lower_)) {
                r.kind = Resolved::Kind::Escape;
                r.escaped = next;
                r.pure_lower = pure;
                return r;
            }
            path = next.size() == lower_.size() ? std::string() : next.substr(lower_.size() + 1);
            goto restart;
        }
        if (!last && !S_ISDIR(st.st_mode)) {
            r.kind = Resolved::Kind::NotFound;
            r.error = ENOTDIR;
            r.rel = q;
            return r;
        }
        bool next_vis = lower_vis && !masked && lo && S_ISDIR(lo->st_mode) && !opaque &&
                        (!up || S_ISDIR(up->st_mode));
        if (last) {
            r.rel = q;
            r.in_upper = from_upper;
            r.in_lower = lo.has_value();
            r.mode = st.st_mode;
            r.kind = from_upper ? Resolved::Kind::Upper : Resolved::Kind::Lower;
            bool lower_dir = lo && S_ISDIR(lo->st_mode) && (!up || S_ISDIR(up->st_mode));
            r.real = (S_ISDIR(st.st_mode) && lower_dir) || !from_upper ? lower_path(q) : upper_path(q);
            r.lower_dir_visible = next_vis;
            r.pure_lower = pure;
            return r;
        }
        cur = q;
        lower_vis = next_vis;
    }
    return r;
}

void Workspace::append_manifest(const std::string &line)
{
    std::ofstream out(manifest_path_, std::ios::app);
    out << line << '\n';
}

void Workspace::load_manifest()
{
    std::ifstream in(manifest_path_);
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("op") || !j.contains("path")) continue;
        std::string op = j["op"];
        std::string path = j["path"];
        if (op == "whiteout") whiteouts_.insert(path);
        else if (op == "unwhiteout") whiteouts_.erase(path);
        else if (op == "opaque") opaque_.insert(path);
        else if (op == "unopaque") opaque_.erase(path);
        else if (op == "origin") {
            Origin o;
            o.size = j.value("size", std::int64_t{-1});
            o.mtime_ns = j.value("mtime_ns", std::int64_t{0});
            o.mode = j.value("mode", 0u);
            origins_.emplace(path, o);
        }
    }
}

void Workspace::add_mask(std::set<std::string> &set, const char *op, const std::string &rel)
{
    if (set.insert(rel).second) {
        append_manifest(nlohmann::json{{"op", op}, {"path", rel}}.dump());
    }
}

void Workspace::drop_mask(std::set<std::string> &set, const char *op, const std::string &rel)
{
    if (set.erase(rel)) {
        append_manifest(nlohmann::json{{"op", op}, {"path", rel}}.dump());
    }
}

void Workspace::drop_masks_below(const std::string &rel)
{
    auto sweep = [&](std::set<std::string> &set, const char *op) {
        std::vector<std::string> doomed;
        for (const auto &p : set) {
            if (p != rel && rel_has_prefix(p, rel)) doomed.push_back(p);
        }
        for (const auto &p : doomed) drop_mask(set, op, p);
    };
    sweep(whiteouts_, "unwhiteout");
    sweep(opaque_, "unopaque");
}

void Workspace::record_origin(const std::string &rel)
{
    if (origins_.count(rel)) return;
    Origin o;
    if (auto st = lstat_opt(lower_path(rel))) {
        o.size = S_ISDIR(st->st_mode) ? 0 : st->st_size;
        o.mtime_ns = mtime_ns(*st);
        o.mode = st->st_mode;
    }
    origins_.emplace(rel, o);
    append_manifest(nlohmann::json{{"op", "origin"},
                                   {"path", rel},
                                   {"size", o.size},
                                   {"mtime_ns", o.mtime_ns},
                                   {"mode", o.mode}}
                        .dump());
}

std::uint64_t Workspace::upper_bytes() const
{
    std::uint64_t total = 0;
    std::error_code ec;
    for (auto it = fs::recursive_directory_iterator(upper_, ec); !ec && it != fs::end(it);
         it.increment(ec)) {
        if (it->is_regular_file(ec) && !it->is_symlink(ec)) total += it->file_size(ec);
    }
    return total;
}

bool Workspace::quota_allows(std::uint64_t extra) const
{
    if (!quota_) return true;
    std::uint64_t used = upper_bytes();
    return used + extra <= *quota_ && (extra > 0 || used < *quota_);
}

int Workspace::ensure_upper_parents(const std::string &rel)
{
    auto comps = split(rel);
    std::string cur;
    for (std::size_t i = 0; i + 1 < comps.size(); i++) {
        cur = join(cur, comps[i]);
        auto up = lstat_opt(upper_path(cur));
        if (up) {
            if (!S_ISDIR(up->st_mode)) return ENOTDIR;
            continue;
        }
        mode_t mode = 0755;
        if (auto lo = lstat_opt(lower_path(cur)); lo && S_ISDIR(lo->st_mode)) mode = lo->st_mode & 07777;
        if (::mkdir(upper_path(cur).c_str(), mode) < 0 && errno != EEXIST) return errno;
        ::chmod(upper_path(cur).c_str(), mode);
    }
    return 0;
}

int Workspace::place_upper(const std::string &rel, bool directory)
{
    if (int err = ensure_upper_parents(rel)) return err;
    if (whiteouts_.count(rel)) {
        drop_mask(whiteouts_, "unwhiteout", rel);
        if (directory) add_mask(opaque_, "opaque", rel);
    }
    return 0;
}

int Workspace::copy_up_locked(const Resolved &r)
{
    if (r.in_upper) return 0;
    if (int err = ensure_upper_parents(r.rel)) return err;
    std::string dst = upper_path(r.rel);
    if (S_ISDIR(r.mode)) {
        if (::mkdir(dst.c_str(), r.mode & 07777) < 0 && errno != EEXIST) return errno;
        return 0;
    }
    if (S_ISLNK(r.mode)) {
        auto target = read_link(r.real);
        if (!target) return EIO;
        record_origin(r.rel);
        return replace_symlink(*target, dst);
    }
    if (!S_ISREG(r.mode)) return EPERM;
    auto st = lstat_opt(r.real);
    if (!st) return EIO;
    if (!quota_allows(static_cast<std::uint64_t>(st->st_size))) return ENOSPC;
    record_origin(r.rel);
    int err = copy_regular(r.real, dst);
    if (err && err != ENOSPC) return EIO;
    return err;
}

int Workspace::copy_up(const std::string &rel, bool follow, std::string *upper_out)
{
    std::lock_guard lock(mutex_);
    Resolved r = resolve_locked(rel, follow);
    if (r.kind == Resolved::Kind::Escape) return EACCES;
    if (r.error) return r.error;
    if (!r.exists()) return ENOENT;
    if (int err = copy_up_locked(r)) return err;
    if (upper_out) *upper_out = upper_path(r.rel);
    return 0;
}

OpenOutcome Workspace::open(const std::string &rel, int flags, mode_t mode)
{
    std::lock_guard lock(mutex_);
    OpenOutcome out;
    bool tmpfile = (flags & O_TMPFILE) == O_TMPFILE;
    bool write = (flags & O_ACCMODE) != O_RDONLY || (flags & (O_CREAT | O_TRUNC)) || tmpfile;
    bool excl_create = (flags & O_CREAT) && (flags & O_EXCL);
    bool follow = !(flags & O_NOFOLLOW) && !excl_create;
    Resolved r = resolve_locked(rel, follow);
    if (r.kind == Resolved::Kind::Escape) {
        out.error = EACCES;
        return out;
    }
    if (r.error) {
        out.error = r.error;
        return out;
    }
    int oflags = flags | O_CLOEXEC;

    if (!write) {
        if (!r.exists()) {
            out.error = ENOENT;
            return out;
        }
        if (S_ISLNK(r.mode) && !(flags & O_PATH)) {
            out.error = ELOOP;
            return out;
        }
        if (bypass_ && r.pure_lower && !(S_ISDIR(r.mode) && dir_touched_locked(r.rel))) {
            out.passthrough = true;
            return out;
        }
        out.fd = UniqueFd(::open(r.real.c_str(), oflags, mode));
        if (!out.fd) out.error = errno;
        return out;
    }

    std::string target;
    if (r.exists()) {
        if (excl_create) {
            out.error = EEXIST;
            return out;
        }
        if (S_ISLNK(r.mode)) {
            out.error = ELOOP;
            return out;
        }
        if (S_ISDIR(r.mode) && !tmpfile) {
            out.error = EISDIR;
            return out;
        }
        if (int err = copy_up_locked(r)) {
            out.error = err;
            return out;
        }
        target = upper_path(r.rel);
        if (!quota_allows(0)) {
            out.error = ENOSPC;
            return out;
        }
    } else {
        if (!(flags & O_CREAT) || tmpfile) {
            out.error = ENOENT;
            return out;
        }
        if (!quota_allows(0)) {
            out.error = ENOSPC;
            return out;
        }
        if (int err = place_upper(r.rel, false)) {
            out.error = err;
            return out;
        }
        target = upper_path(r.rel);
        out.fd = UniqueFd(::open(target.c_str(), oflags, mode));
        if (!out.fd) {
            out.error = errno;
        } else {
            ::fchmod(out.fd.get(), mode & 07777);
        }
        return out;
    }
    out.fd = UniqueFd(::open(target.c_str(), oflags, mode));
    if (!out.fd) out.error = errno;
    return out;
}

int Workspace::mkdir(const std::string &rel, mode_t mode)
{
    std::lock_guard lock(mutex_);
    Resolved r = resolve_locked(rel, false);
    if (r.kind == Resolved::Kind::Escape) return EACCES;
    if (r.error) return r.error;
    if (r.exists()) return EEXIST;
    if (int err = place_upper(r.rel, true)) return err;
    if (::mkdir(upper_path(r.rel).c_str(), mode) < 0) return errno;
    ::chmod(upper_path(r.rel).c_str(), mode & 07777);
    return 0;
}

int Workspace::symlink(const std::string &target, const std::string &rel)
{
    std::lock_guard lock(mutex_);
    Resolved r = resolve_locked(rel, false);
    if (r.kind == Resolved::Kind::Escape) return EACCES;
    if (r.error) return r.error;
    if (r.exists()) return EEXIST;
    if (int err = place_upper(r.rel, false)) return err;
    if (::symlink(target.c_str(), upper_path(r.rel).c_str()) < 0) return errno;
    return 0;
}

int Workspace::remove(const std::string &rel, bool directory)
{
    std::lock_guard lock(mutex_);
    return remove_locked(rel, directory);
}

int Workspace::remove_locked(const std::string &rel, bool directory)
{
    Resolved r = resolve_locked(rel, false);
    if (r.kind == Resolved::Kind::Escape) return EACCES;
    if (r.error) return r.error;
    if (!r.exists()) return ENOENT;
    if (r.rel.empty()) return EBUSY;
    if (directory) {
        if (!S_ISDIR(r.mode)) return ENOTDIR;
        int err = 0;
        if (!list_locked(r.rel, &err).empty()) return ENOTEMPTY;
    } else if (S_ISDIR(r.mode)) {
        return EISDIR;
    }
    if (r.in_upper) {
        std::error_code ec;
        fs::remove_all(upper_path(r.rel), ec);
        if (ec) return EIO;
    }
    drop_masks_below(r.rel);
    drop_mask(opaque_, "unopaque", r.rel);
    if (r.in_lower) {
        record_origin(r.rel);
        add_mask(whiteouts_, "whiteout", r.rel);
    }
    return 0;
}

int Workspace::copy_tree(const std::string &from_rel, const std::string &to_upper)
{
    Resolved r = resolve_locked(from_rel, false);
    if (!r.exists()) return ENOENT;
    if (S_ISDIR(r.mode)) {
        if (::mkdir(to_upper.c_str(), r.mode & 07777) < 0 && errno != EEXIST) return errno;
        int err = 0;
        for (const auto &e : list_locked(r.rel, &err)) {
            if (int sub = copy_tree(join(r.rel, e.name), to_upper + "/" + e.name)) return sub;
        }
        return err;
    }
    if (S_ISLNK(r.mode)) {
        auto target = read_link(r.real);
        if (!target) return EIO;
        return replace_symlink(*target, to_upper);
    }
    if (!S_ISREG(r.mode)) return EPERM;
    if (r.kind == Resolved::Kind::Lower) record_origin(r.rel);
    return copy_regular(r.real, to_upper);
}

int Workspace::rename(const std::string &from, const std::string &to, unsigned flags)
{
    constexpr unsigned kNoReplace = 1; // RENAME_NOREPLACE
    std::lock_guard lock(mutex_);
    if (flags & ~kNoReplace) return EINVAL;
    Resolved rf = resolve_locked(from, false);
    if (rf.kind == Resolved::Kind::Escape) return EXDEV;
    if (rf.error) return rf.error;
    if (!rf.exists()) return ENOENT;
    if (rf.rel.empty()) return EBUSY;
    Resolved rt = resolve_locked(to, false);
    if (rt.kind == Resolved::Kind::Escape) return EXDEV;
    if (rt.error) return rt.error;
    if (rt.rel.empty()) return EBUSY;
    if (rf.rel == rt.rel) return 0;
    bool from_dir = S_ISDIR(rf.mode);
    if (rel_has_prefix(rt.rel, rf.rel)) return EINVAL;
    if (rt.exists()) {
        if (flags & kNoReplace) return EEXIST;
        if (from_dir) {
            if (!S_ISDIR(rt.mode)) return ENOTDIR;
            int err = 0;
            if (!list_locked(rt.rel, &err).empty()) return ENOTEMPTY;
        } else if (S_ISDIR(rt.mode)) {
            return EISDIR;
        }
    }
    bool upper_only = rf.in_upper && !rf.in_lower;
    if (!upper_only && !quota_allows(0)) return ENOSPC;

    if (rt.exists()) {
        if (int err = remove_locked(rt.rel, S_ISDIR(rt.mode))) return err;
    }
    if (int err = ensure_upper_parents(rt.rel)) return err;
    if (upper_only) {
        if (::rename(upper_path(rf.rel).c_str(), upper_path(rt.rel).c_str()) < 0) return errno;
    } else {
        if (int err = copy_tree(rf.rel, upper_path(rt.rel))) {
            std::error_code ec;
            fs::remove_all(upper_path(rt.rel), ec);
            return err == ENOSPC ? ENOSPC : EIO;
        }
        if (rf.in_upper) {
            std::error_code ec;
            fs::remove_all(upper_path(rf.rel), ec);
        }
        record_origin(rf.rel);
        add_mask(whiteouts_, "whiteout", rf.rel);
    }
    drop_masks_below(rf.rel);
    drop_mask(opaque_, "unopaque", rf.rel);
    if (whiteouts_.count(rt.rel)) {
        drop_mask(whiteouts_, "unwhiteout", rt.rel);
        if (from_dir) add_mask(opaque_, "opaque", rt.rel);
    }
    return 0;
}

std::vector<DirEntry> Workspace::list(const std::string &rel, int *error) const
{
    std::lock_guard lock(mutex_);
    return list_locked(rel, error);
}

std::vector<DirEntry> Workspace::list_locked(const std::string &rel, int *error) const
{
    *error = 0;
    Resolved r = resolve_locked(rel, true);
    if (r.kind == Resolved::Kind::Escape) {
        *error = EACCES;
        return {};
    }
    if (r.error || !r.exists()) {
        *error = r.error ? r.error : ENOENT;
        return {};
    }
    if (!S_ISDIR(r.mode)) {
        *error = ENOTDIR;
        return {};
    }
    std::vector<DirEntry> lower, upper;
    if (r.lower_dir_visible || (r.rel.empty() && !opaque_.count(""))) lower = read_dir(lower_path(r.rel));
    if (r.in_upper) {
        auto up = lstat_opt(upper_path(r.rel));
        if (up && S_ISDIR(up->st_mode)) upper = read_dir(upper_path(r.rel));
    }
    std::set<std::string> hidden;
    for (const auto &w : whiteouts_) {
        if (!w.empty() && parent_of(w) == r.rel) hidden.insert(w.substr(r.rel.empty() ? 0 : r.rel.size() + 1));
    }
    // Staging names from interrupted copies never show.
    upper.erase(std::remove_if(upper.begin(), upper.end(),
                               [](const DirEntry &e) { return e.name.rfind(".lockbox-", 0) == 0; }),
                upper.end());
    return merge_dirents(lower, upper, hidden, false);
}

bool Workspace::dir_touched(const std::string &rel) const
{
    std::lock_guard lock(mutex_);
    return dir_touched_locked(rel);
}

bool Workspace::dir_touched_locked(const std::string &rel) const
{
    Resolved r = resolve_locked(rel, true);
    if (!r.pure_lower) return true;
    if (r.in_upper && has_entries(upper_path(r.rel))) return true;
    auto below = [&](const std::set<std::string> &set) {
        for (const auto &p : set) {
            if (rel_has_prefix(p, r.rel)) return true;
        }
        return false;
    };
    return below(whiteouts_) || below(opaque_);
}

EffectSummary Workspace::summary() const
{
    std::lock_guard lock(mutex_);
    return summary_locked();
}

EffectSummary Workspace::summary_locked() const
{
    EffectSummary s;
    if (finalized_ && !kept_) return s;

    // Lower entries under `rel` that the upper directory does not replace.
    std::function<void(const std::string &)> deleted_under = [&](const std::string &rel) {
        for (const auto &e : read_dir(lower_path(rel))) {
            std::string q = join(rel, e.name);
            auto up = lstat_opt(upper_path(q));
            if (!up) {
                s.deleted.push_back(q);
            } else if (S_ISDIR(up->st_mode) && e.type == DT_DIR) {
                deleted_under(q);
            }
        }
    };
    std::function<void(const std::string &)> walk = [&](const std::string &rel) {
        for (const auto &e : read_dir(upper_path(rel))) {
            if (e.name.rfind(".lockbox-", 0) == 0) continue;
            std::string q = join(rel, e.name);
            auto up = lstat_opt(upper_path(q));
            if (!up) continue;
            auto lo = lstat_opt(lower_path(q));
            if (S_ISDIR(up->st_mode)) {
                if (!lo) {
                    s.created.push_back(q);
                } else if (!S_ISDIR(lo->st_mode)) {
                    s.modified.push_back(q);
                } else if (opaque_.count(q)) {
                    deleted_under(q);
                }
                walk(q);
            } else {
                (lo ? s.modified : s.created).push_back(q);
                if (S_ISREG(up->st_mode)) s.bytes_written += static_cast<std::uint64_t>(up->st_size);
            }
        }
    };
    walk("");
    for (const auto &w : whiteouts_) {
        if (lstat_opt(lower_path(w))) s.deleted.push_back(w);
    }
    std::sort(s.created.begin(), s.created.end());
    std::sort(s.modified.begin(), s.modified.end());
    std::sort(s.deleted.begin(), s.deleted.end());
    s.deleted.erase(std::unique(s.deleted.begin(), s.deleted.end()), s.deleted.end());
    return s;
}

void Workspace::commit_locked(const EffectSummary &summary)
{
    std::vector<std::string> conflicts;
    for (const auto &[rel, origin] : origins_) {
        auto st = lstat_opt(lower_path(rel));
        if (origin.size < 0) {
            if (st) conflicts.push_back(rel);
            continue;
        }
        if (!st || (st->st_mode & S_IFMT) != (origin.mode & S_IFMT) ||
            (!S_ISDIR(st->st_mode) && st->st_size != origin.size) || mtime_ns(*st) != origin.mtime_ns) {
            conflicts.push_back(rel);
        }
    }
    if (!conflicts.empty()) {
        throw CommitConflictError("lower tree changed since capture", conflicts);
    }

    std::error_code ec;
    for (const auto &rel : summary.deleted) fs::remove_all(lower_path(rel), ec);

    std::function<void(const std::string &)> apply = [&](const std::string &rel) {
        for (const auto &e : read_dir(upper_path(rel))) {
            if (e.name.rfind(".lockbox-", 0) == 0) continue;
            std::string q = join(rel, e.name);
            auto up = lstat_opt(upper_path(q));
            if (!up) continue;
            auto lo = lstat_opt(lower_path(q));
            std::string dst = lower_path(q);
            if (S_ISDIR(up->st_mode)) {
                if (lo && !S_ISDIR(lo->st_mode)) {
                    ::unlink(dst.c_str());
                    lo.reset();
                }
                if (!lo) {
                    ::mkdir(dst.c_str(), up->st_mode & 07777);
                } else if ((lo->st_mode & 07777) != (up->st_mode & 07777)) {
                    ::chmod(dst.c_str(), up->st_mode & 07777);
                }
                apply(q);
                continue;
            }
            if (lo && S_ISDIR(lo->st_mode)) fs::remove_all(dst, ec);
            if (S_ISLNK(up->st_mode)) {
                if (auto target = read_link(upper_path(q))) replace_symlink(*target, dst);
            } else if (S_ISREG(up->st_mode)) {
                copy_regular(upper_path(q), dst);
            }
        }
    };
    apply("");
}

void Workspace::discard_locked()
{
    std::error_code ec;
    fs::remove_all(upper_, ec);
    fs::remove(manifest_path_, ec);
    whiteouts_.clear();
    opaque_.clear();
    origins_.clear();
    if (owns_storage_) fs::remove_all(storage_, ec);
}

EffectSummary Workspace::finalize(EffectAction action, bool dry_run)
{
    std::lock_guard lock(mutex_);
    EffectSummary s = summary_locked();
    if (dry_run || finalized_) return s;
    switch (action) {
        case EffectAction::Commit:
            commit_locked(s);
            discard_locked();
            break;
        case EffectAction::Abort: discard_locked(); break;
        case EffectAction::Keep:
            kept_ = true;
            s.kept_at = storage_;
            break;
    }
    finalized_ = true;
    return s;
}

// ---- backends -------------------------------------------------------------------

namespace {

class SeccompBackend final : public WorkspaceBackend {
public:
    const char *name() const override { return "seccomp"; }
    std::shared_ptr<Workspace> create(const WorkspaceConfig &config) override
    {
        return std::make_shared<Workspace>(config.root, config.storage, config.quota_bytes,
                                           config.bypass_unmodified_reads);
    }
    EffectSummary commit(Workspace &ws) override { return ws.finalize(EffectAction::Commit); }
    EffectSummary abort(Workspace &ws) override { return ws.finalize(EffectAction::Abort); }
    std::optional<std::uint64_t> quota(const Workspace &) const override { return std::nullopt; }
};

class BranchFsBackend final : public WorkspaceBackend {
public:
    const char *name() const override { return "branchfs"; }
    std::shared_ptr<Workspace> create(const WorkspaceConfig &) override { unsupported(); }
    EffectSummary commit(Workspace &) override { unsupported(); }
    EffectSummary abort(Workspace &) override { unsupported(); }
    std::optional<std::uint64_t> quota(const Workspace &) const override { unsupported(); }

private:
    [[noreturn]] static void unsupported()
    {
        throw Error(ErrorKind::Unsupported, "the branchfs workspace backend is not available");
    }
};

} // namespace

std::unique_ptr<WorkspaceBackend> make_seccomp_backend()
{
    return std::make_unique<SeccompBackend>();
}

std::unique_ptr<WorkspaceBackend> make_branchfs_backend()
{
    return std::make_unique<BranchFsBackend>();
}

} // namespace lockbox
