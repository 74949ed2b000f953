#include "doctest.h"

#include "lockbox/cow.hpp"
#include "lockbox/error.hpp"

#include "../cow_oracle.hpp"
#include "support.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <random>

using namespace lockbox;

namespace {

std::vector<DirEntry> entries(std::initializer_list<const char *> names, unsigned char type = DT_REG)
{
    std::vector<DirEntry> out;
    std::uint64_t ino = 1;
    for (const char *n : names) out.push_back(DirEntry{n, type, ino++});
    return out;
}

std::vector<std::string> names_of(const std::vector<DirEntry> &v)
{
    std::vector<std::string> out;
    for (const auto &e : v) out.push_back(e.name);
    return out;
}

void put(Workspace &ws, const std::string &rel, const std::string &data)
{
    OpenOutcome o = ws.open(rel, O_WRONLY | O_CREAT | O_TRUNC, 0644);
    REQUIRE(o.error == 0);
    REQUIRE(::write(o.fd.get(), data.data(), data.size()) == static_cast<ssize_t>(data.size()));
}

} // namespace

TEST_SUITE("kernel-free")
{
TEST_CASE("merge: upper wins, whiteouts hide, opaque masks the lower")
{
    auto lower = entries({"a", "b", "c"});
    auto upper = entries({"b", "d"}, DT_DIR);
    auto merged = merge_dirents(lower, upper, {"c"}, false);
    CHECK(names_of(merged) == std::vector<std::string>{"a", "b", "d"});
    for (const auto &e : merged) {
        if (e.name == "b") CHECK(e.type == DT_DIR);
    }
    CHECK(names_of(merge_dirents(lower, upper, {}, true)) == std::vector<std::string>{"b", "d"});
}

TEST_CASE("merge algebra properties")
{
    std::mt19937 rng(99);
    const char *pool[] = {"a", "b", "c", "d", "e", "f", "g"};
    auto random_set = [&](unsigned char type) {
        std::vector<DirEntry> v;
        for (const char *n : pool) {
            if (rng() % 2) v.push_back(DirEntry{n, type, rng() % 100});
        }
        std::shuffle(v.begin(), v.end(), rng);
        return v;
    };
    for (int i = 0; i < 2000; i++) {
        auto lower = random_set(DT_REG);
        auto upper = random_set(DT_DIR);
        std::set<std::string> wh;
        for (const char *n : pool) {
            if (rng() % 4 == 0) wh.insert(n);
        }
        // Whiteouts only name entries that are absent from upper.
        for (const auto &u : upper) wh.erase(u.name);
        bool opaque = rng() % 5 == 0;
        auto m = merge_dirents(lower, upper, wh, opaque);

        auto names = names_of(m);
        CHECK(std::is_sorted(names.begin(), names.end()));
        CHECK(std::adjacent_find(names.begin(), names.end()) == names.end());
        for (const auto &u : upper) {
            auto it = std::find_if(m.begin(), m.end(), [&](const DirEntry &e) { return e.name == u.name; });
            REQUIRE(it != m.end());
            CHECK(*it == u);
        }
        for (const auto &l : lower) {
            bool in_upper = std::any_of(upper.begin(), upper.end(),
                                        [&](const DirEntry &u) { return u.name == l.name; });
            bool visible = std::find(names.begin(), names.end(), l.name) != names.end();
            CHECK(visible == (in_upper || (!opaque && !wh.count(l.name))));
        }
        // Empty upper without masks is the identity on the lower listing.
        auto id = merge_dirents(lower, {}, {}, false);
        auto sorted = lower;
        std::sort(sorted.begin(), sorted.end(), [](auto &x, auto &y) { return x.name < y.name; });
        CHECK(id == sorted);
        // Merging is idempotent over its own output.
        CHECK(merge_dirents(m, {}, {}, false) == m);
    }
}

TEST_CASE("workspace matches direct application over seeded sequences")
{
    TempDir scratch;
    for (std::uint32_t seed = 1; seed <= 150; seed++) {
        auto r = oracle::run_sequence(seed, 25, seed % 3 == 0, scratch / "run");
        CHECK_MESSAGE(r.ok, r.failure);
        if (!r.ok) break;
    }
}

TEST_CASE("effect summary lists created, modified and deleted entries")
{
    TempDir dir;
    make_dir(dir / "lower/sub");
    write_file(dir / "lower/keep", "k");
    write_file(dir / "lower/edit", "old");
    write_file(dir / "lower/sub/gone", "g");
    Workspace ws(dir / "lower", dir / "storage");
    put(ws, "new", "fresh");
    put(ws, "edit", "newer");
    CHECK(ws.remove("sub/gone", false) == 0);
    auto s = ws.summary();
    CHECK(s.created == std::vector<std::string>{"new"});
    CHECK(s.modified == std::vector<std::string>{"edit"});
    CHECK(s.deleted == std::vector<std::string>{"sub/gone"});
    CHECK(s.bytes_written >= 10);
    CHECK(read_file(dir / "lower/edit") == "old");

    auto dry = ws.finalize(EffectAction::Abort, true);
    CHECK(dry == s);
    CHECK(read_file(dir / "lower/edit") == "old");
    CHECK(std::filesystem::exists(dir / "lower/sub/gone"));
}

TEST_CASE("commit refuses when the lower changed underneath")
{
    TempDir dir;
    make_dir(dir / "lower");
    write_file(dir / "lower/f", "one");
    Workspace ws(dir / "lower", dir / "storage");
    put(ws, "f", "two");
    write_file(dir / "lower/f", "external");
    CHECK_THROWS_AS(ws.finalize(EffectAction::Commit), CommitConflictError);
    CHECK(read_file(dir / "lower/f") == "external");
}

TEST_CASE("quota bounds the upper layer")
{
    TempDir dir;
    make_dir(dir / "lower");
    write_file(dir / "lower/big", std::string(4096, 'b'));
    Workspace ws(dir / "lower", dir / "storage", 1024);
    CHECK(ws.open("big", O_WRONLY | O_APPEND, 0).error == ENOSPC);
    put(ws, "small", "ok");
}

TEST_CASE("keep leaves the upper layer for a later session")
{
    TempDir dir;
    make_dir(dir / "lower");
    {
        Workspace ws(dir / "lower", dir / "storage");
        put(ws, "kept", "v1");
        auto s = ws.finalize(EffectAction::Keep);
        REQUIRE(s.kept_at);
    }
    CHECK_FALSE(std::filesystem::exists(dir / "lower/kept"));
    Workspace again(dir / "lower", dir / "storage");
    CHECK(again.resolve("kept").exists());
    again.finalize(EffectAction::Commit);
    CHECK(read_file(dir / "lower/kept") == "v1");
}

TEST_CASE("escapes and cross-boundary operations")
{
    TempDir dir;
    make_dir(dir / "lower");
    make_dir(dir / "outside");
    ::symlink((dir / "outside").c_str(), (dir / "lower/out").c_str());
    Workspace ws(dir / "lower", dir / "storage");
    Resolved r = ws.resolve("out/x");
    CHECK(r.kind == Resolved::Kind::Escape);
    CHECK(ws.resolve("../etc").kind != Resolved::Kind::Upper);
    CHECK(ws.relative(dir / "lower/a/b") == "a/b");
    CHECK_FALSE(ws.relative(dir / "outside/x"));
}

TEST_CASE("branch backend is an explicit placeholder")
{
    auto b = make_branchfs_backend();
    CHECK_THROWS_AS(b->create(WorkspaceConfig{}), Error);
    CHECK(std::string(make_seccomp_backend()->name()) == "seccomp");
}
}
