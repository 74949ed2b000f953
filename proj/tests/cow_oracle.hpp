#pragma once

// Seeded operation sequences applied both through a Workspace and directly
// to a plain copy of the lower tree.

#include "lockbox/cow.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>

#include <cerrno>
#include <filesystem>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

namespace lockbox::oracle {

struct Op {
    enum class Kind { Write, Append, Mkdir, Unlink, Rmdir, Rename, Symlink, Truncate } kind;
    std::string a;
    std::string b;
    std::string data;

    std::string describe() const
    {
        static const char *names[] = {"write", "append", "mkdir", "unlink", "rmdir", "rename",
                                      "symlink", "truncate"};
        std::ostringstream os;
        os << names[static_cast<int>(kind)] << " " << a;
        if (!b.empty()) os << " " << b;
        return os.str();
    }
};

using Tree = std::map<std::string, std::string>;

inline const std::vector<std::string> &names()
{
    static const std::vector<std::string> n = {"a",   "b",   "d",   "d/a", "d/b", "d/e",
                                               "d/e/a", "e",  "e/a", "e/d", "e/d/b"};
    return n;
}

inline Op random_op(std::mt19937 &rng)
{
    const auto &n = names();
    auto pick = [&] { return n[rng() % n.size()]; };
    auto data = [&] {
        std::string s(1 + rng() % 24, 'x');
        for (auto &c : s) c = static_cast<char>('a' + rng() % 26);
        return s;
    };
    switch (rng() % 10) {
        case 0:
        case 1: return Op{Op::Kind::Write, pick(), "", data()};
        case 2: return Op{Op::Kind::Append, pick(), "", data()};
        case 3: return Op{Op::Kind::Mkdir, pick(), "", ""};
        case 4: return Op{Op::Kind::Unlink, pick(), "", ""};
        case 5: return Op{Op::Kind::Rmdir, pick(), "", ""};
        case 6:
        case 7: return Op{Op::Kind::Rename, pick(), pick(), ""};
        case 8: return Op{Op::Kind::Symlink, pick(), "t" + std::to_string(rng() % 3), ""};
        default: return Op{Op::Kind::Truncate, pick(), "", ""};
    }
}

inline void seed_lower(const std::string &root, std::mt19937 &rng)
{
    namespace fs = std::filesystem;
    fs::create_directories(root + "/d/e");
    fs::create_directories(root + "/e");
    for (const char *f : {"a", "d/a", "d/e/a", "e/a"}) {
        if (rng() % 4 == 0) continue;
        int fd = ::open((root + "/" + f).c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
        std::string s = "lower:" + std::string(f) + ":" + std::to_string(rng() % 1000);
        if (::write(fd, s.data(), s.size()) < 0) {
        }
        ::close(fd);
    }
    if (rng() % 2) {
        if (::symlink("a", (root + "/d/b").c_str()) < 0) {
        }
    }
}

// Direct application. Returns 0 or errno.
inline int apply_direct(const std::string &root, const Op &op)
{
    std::string a = root + "/" + op.a;
    std::string b = root + "/" + op.b;
    int rc = 0;
    switch (op.kind) {
        case Op::Kind::Write:
        case Op::Kind::Append:
        case Op::Kind::Truncate: {
            int flags = O_WRONLY | O_CREAT | O_NOFOLLOW;
            flags |= op.kind == Op::Kind::Append ? O_APPEND : O_TRUNC;
            int fd = ::open(a.c_str(), flags, 0644);
            if (fd < 0) return errno;
            if (!op.data.empty() && ::write(fd, op.data.data(), op.data.size()) < 0) rc = errno;
            ::close(fd);
            return rc;
        }
        case Op::Kind::Mkdir: return ::mkdir(a.c_str(), 0755) < 0 ? errno : 0;
        case Op::Kind::Unlink: return ::unlink(a.c_str()) < 0 ? errno : 0;
        case Op::Kind::Rmdir: return ::rmdir(a.c_str()) < 0 ? errno : 0;
        case Op::Kind::Rename: return ::rename(a.c_str(), b.c_str()) < 0 ? errno : 0;
        case Op::Kind::Symlink: return ::symlink(op.b.c_str(), a.c_str()) < 0 ? errno : 0;
    }
    return EINVAL;
}

inline int apply_workspace(Workspace &ws, const Op &op)
{
    switch (op.kind) {
        case Op::Kind::Write:
        case Op::Kind::Append:
        case Op::Kind::Truncate: {
            int flags = O_WRONLY | O_CREAT | O_NOFOLLOW;
            flags |= op.kind == Op::Kind::Append ? O_APPEND : O_TRUNC;
            OpenOutcome out = ws.open(op.a, flags, 0644);
            if (out.error) return out.error;
            if (!out.fd) return EIO;
            if (!op.data.empty() && ::write(out.fd.get(), op.data.data(), op.data.size()) < 0) {
                return errno;
            }
            return 0;
        }
        case Op::Kind::Mkdir: return ws.mkdir(op.a, 0755);
        case Op::Kind::Unlink: return ws.remove(op.a, false);
        case Op::Kind::Rmdir: return ws.remove(op.a, true);
        case Op::Kind::Rename: return ws.rename(op.a, op.b);
        case Op::Kind::Symlink: return ws.symlink(op.b, op.a);
    }
    return EINVAL;
}

inline std::string read_fd(int fd)
{
    std::string out;
    char buf[4096];
    ssize_t n;
    while ((n = ::read(fd, buf, sizeof(buf))) > 0) out.append(buf, static_cast<std::size_t>(n));
    return out;
}

// Plain walk of a host tree: "d", "l:target", "f:contents".
inline Tree snapshot(const std::string &root)
{
    Tree out;
    std::function<void(const std::string &)> walk = [&](const std::string &rel) {
        std::string dir = rel.empty() ? root : root + "/" + rel;
        DIR *d = ::opendir(dir.c_str());
        if (!d) return;
        std::vector<std::string> entries;
        while (dirent *e = ::readdir(d)) {
            std::string name = e->d_name;
            if (name != "." && name != "..") entries.push_back(name);
        }
        ::closedir(d);
        for (const auto &name : entries) {
            std::string r = rel.empty() ? name : rel + "/" + name;
            std::string p = root + "/" + r;
            struct stat st{};
            if (::lstat(p.c_str(), &st) < 0) continue;
            if (S_ISLNK(st.st_mode)) {
                char buf[4096];
                ssize_t n = ::readlink(p.c_str(), buf, sizeof(buf));
                out[r] = "l:" + std::string(buf, n > 0 ? static_cast<std::size_t>(n) : 0);
            } else if (S_ISDIR(st.st_mode)) {
                out[r] = "d";
                walk(r);
            } else {
                int fd = ::open(p.c_str(), O_RDONLY | O_CLOEXEC);
                out[r] = "f:" + (fd >= 0 ? read_fd(fd) : std::string("?"));
                if (fd >= 0) ::close(fd);
            }
        }
    };
    walk("");
    return out;
}

// The merged view as seen through the workspace API.
inline Tree merged_view(Workspace &ws)
{
    Tree out;
    std::function<void(const std::string &)> walk = [&](const std::string &rel) {
        int err = 0;
        auto entries = ws.list(rel, &err);
        for (const auto &e : entries) {
            std::string r = rel.empty() ? e.name : rel + "/" + e.name;
            Resolved res = ws.resolve(r, false);
            if (!res.exists()) {
                out[r] = "?missing";
                continue;
            }
            if (S_ISLNK(res.mode)) {
                char buf[4096];
                ssize_t n = ::readlink(res.real.c_str(), buf, sizeof(buf));
                out[r] = "l:" + std::string(buf, n > 0 ? static_cast<std::size_t>(n) : 0);
            } else if (S_ISDIR(res.mode)) {
                out[r] = "d";
                walk(r);
            } else {
                OpenOutcome o = ws.open(r, O_RDONLY | O_NOFOLLOW, 0);
                UniqueFd fd = std::move(o.fd);
                if (!fd && o.passthrough && !o.error) {
                    fd = UniqueFd(::open(res.real.c_str(), O_RDONLY | O_CLOEXEC));
                }
                out[r] = fd ? "f:" + read_fd(fd.get()) : "?unreadable";
            }
        }
    };
    walk("");
    return out;
}

inline std::string diff(const Tree &want, const Tree &got)
{
    std::ostringstream os;
    for (const auto &[k, v] : want) {
        auto it = got.find(k);
        if (it == got.end()) {
            os << "missing " << k << "=" << v << "; ";
        } else if (it->second != v) {
            os << "differs " << k << ": want " << v << " got " << it->second << "; ";
        }
    }
    for (const auto &[k, v] : got) {
        if (!want.count(k)) os << "extra " << k << "=" << v << "; ";
    }
    return os.str();
}

inline void copy_tree(const std::string &from, const std::string &to)
{
    namespace fs = std::filesystem;
    fs::create_directories(to);
    fs::copy(from, to, fs::copy_options::recursive | fs::copy_options::copy_symlinks);
}

struct SequenceResult {
    bool ok = true;
    std::string failure;
    std::size_t steps = 0;
};

// Runs one seeded sequence; checks the merged view after each step against
// the direct tree, then COMMIT (or ABORT when `abort`) against the lower.
inline SequenceResult run_sequence(std::uint32_t seed, std::size_t length, bool abort,
                                   const std::string &scratch)
{
    namespace fs = std::filesystem;
    SequenceResult result;
    std::mt19937 rng(seed);
    std::string lower = scratch + "/lower";
    std::string direct = scratch + "/direct";
    std::string storage = scratch + "/storage";
    std::error_code ec;
    fs::remove_all(scratch, ec);
    fs::create_directories(lower);
    seed_lower(lower, rng);
    copy_tree(lower, direct);
    Tree before = snapshot(lower);

    auto fail = [&](const std::string &why) {
        result.ok = false;
        result.failure = "seed " + std::to_string(seed) + ": " + why;
    };
    {
        Workspace ws(lower, storage, std::nullopt, rng() % 2 == 0);
        for (std::size_t i = 0; i < length; i++) {
            Op op = random_op(rng);
            int want = apply_direct(direct, op);
            int got = apply_workspace(ws, op);
            result.steps++;
            if ((want == 0) != (got == 0)) {
                fail("step " + std::to_string(i) + " " + op.describe() + ": direct errno " +
                     std::to_string(want) + ", workspace errno " + std::to_string(got));
                break;
            }
            Tree w = snapshot(direct);
            Tree m = merged_view(ws);
            if (w != m) {
                fail("step " + std::to_string(i) + " " + op.describe() + ": " + diff(w, m));
                break;
            }
            if (snapshot(lower) != before) {
                fail("step " + std::to_string(i) + ": lower changed before finalize");
                break;
            }
        }
        if (result.ok) {
            if (abort) {
                ws.finalize(EffectAction::Abort);
                if (snapshot(lower) != before) fail("lower changed by ABORT");
            } else {
                ws.finalize(EffectAction::Commit);
                Tree w = snapshot(direct);
                Tree l = snapshot(lower);
                if (w != l) fail("post-COMMIT lower differs: " + diff(w, l));
            }
        }
    }
    if (result.ok) fs::remove_all(scratch, ec);
    return result;
}

} // namespace lockbox::oracle
