#include "lockbox/proc.hpp"
#include "lockbox/policy.hpp"

#include <dirent.h>
#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

namespace lockbox {

namespace {

std::optional<std::string> read_link(const std::string &path)
{
    char buf[4096];
    ssize_t n = ::readlink(path.c_str(), buf, sizeof(buf));
    if (n < 0 || n == static_cast<ssize_t>(sizeof(buf))) return std::nullopt;
    return std::string(buf, static_cast<std::size_t>(n));
}

std::optional<ProcStat> parse_stat(const std::string &path)
{
    std::ifstream in(path);
    std::string line;
    if (!std::getline(in, line)) return std::nullopt;
    auto close = line.rfind(')');
    if (close == std::string::npos || close + 2 >= line.size()) return std::nullopt;
    ProcStat st;
    st.pid = std::atoi(line.c_str());
    std::istringstream rest(line.substr(close + 2));
    rest >> st.state >> st.ppid >> st.pgid;
    if (!rest) return std::nullopt;
    return st;
}

std::vector<pid_t> numeric_entries(const std::string &dir)
{
    std::vector<pid_t> out;
    DIR *d = ::opendir(dir.c_str());
    if (!d) return out;
    while (auto *ent = ::readdir(d)) {
        char *end = nullptr;
        long v = std::strtol(ent->d_name, &end, 10);
        if (end != ent->d_name && *end == 0 && v > 0) out.push_back(static_cast<pid_t>(v));
    }
    ::closedir(d);
    return out;
}

} // namespace

bool fd_cloexec(pid_t pid, int fd)
{
    std::ifstream in("/proc/" + std::to_string(pid) + "/fdinfo/" + std::to_string(fd));
    std::string key;
    while (in >> key) {
        if (key == "flags:") {
            std::string value;
            in >> value;
            return (std::strtoul(value.c_str(), nullptr, 8) & O_CLOEXEC) != 0;
        }
    }
    return false;
}

std::optional<std::string> proc_cwd(pid_t pid)
{
    return read_link("/proc/" + std::to_string(pid) + "/cwd");
}

std::optional<std::string> proc_fd_path(pid_t pid, int fd)
{
    return read_link("/proc/" + std::to_string(pid) + "/fd/" + std::to_string(fd));
}

std::optional<std::string> resolve_at(pid_t pid, int dirfd, const std::string &path)
{
    if (!path.empty() && path[0] == '/') return normalize_path(path);
    auto base = dirfd == AT_FDCWD ? proc_cwd(pid) : proc_fd_path(pid, dirfd);
    if (!base || base->empty() || (*base)[0] != '/') return std::nullopt;
    if (path.empty()) return normalize_path(*base);
    return normalize_path(*base + "/" + path);
}

std::optional<ProcStat> read_proc_stat(pid_t pid)
{
    return parse_stat("/proc/" + std::to_string(pid) + "/stat");
}

std::optional<ProcStat> read_task_stat(pid_t pid, pid_t tid)
{
    return parse_stat("/proc/" + std::to_string(pid) + "/task/" + std::to_string(tid) + "/stat");
}

std::vector<pid_t> processes_in_group(pid_t pgid)
{
    std::vector<pid_t> out;
    for (pid_t pid : numeric_entries("/proc")) {
        auto st = read_proc_stat(pid);
        if (st && st->pgid == pgid) out.push_back(pid);
    }
    return out;
}

std::vector<pid_t> threads_of(pid_t pid)
{
    return numeric_entries("/proc/" + std::to_string(pid) + "/task");
}

namespace {

std::optional<std::string> status_field(pid_t pid, const char *key)
{
    std::ifstream in("/proc/" + std::to_string(pid) + "/status");
    std::string line;
    std::size_t len = std::strlen(key);
    while (std::getline(in, line)) {
        if (line.compare(0, len, key) == 0 && line.size() > len && line[len] == ':') {
            auto value = line.substr(len + 1);
            auto start = value.find_first_not_of(" \t");
            return start == std::string::npos ? std::string() : value.substr(start);
        }
    }
    return std::nullopt;
}

} // namespace

pid_t tgid_of(pid_t tid)
{
    auto v = status_field(tid, "Tgid");
    return v ? static_cast<pid_t>(std::atoi(v->c_str())) : 0;
}

mode_t proc_umask(pid_t pid)
{
    auto v = status_field(pid, "Umask");
    return v ? static_cast<mode_t>(std::strtoul(v->c_str(), nullptr, 8)) : 022;
}

std::uint64_t vm_size(pid_t pid)
{
    std::ifstream in("/proc/" + std::to_string(pid) + "/status");
    std::string line;
    while (std::getline(in, line)) {
        if (line.rfind("VmSize:", 0) == 0) {
            return std::strtoull(line.c_str() + 7, nullptr, 10) * 1024;
        }
    }
    return 0;
}

} // namespace lockbox
