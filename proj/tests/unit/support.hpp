#pragma once

#include <sys/stat.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

namespace lockbox {

class TempDir {
public:
    TempDir()
    {
        std::string tmpl = (std::filesystem::temp_directory_path() / "lockbox-test-XXXXXX").string();
        std::vector<char> buf(tmpl.begin(), tmpl.end());
        buf.push_back('\0');
        if (!mkdtemp(buf.data())) throw std::runtime_error("mkdtemp failed");
        path_ = std::filesystem::canonical(buf.data()).string();
    }
    ~TempDir()
    {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    TempDir(const TempDir &) = delete;
    TempDir &operator=(const TempDir &) = delete;

    const std::string &path() const noexcept { return path_; }
    std::string operator/(const std::string &rel) const { return path_ + "/" + rel; }

private:
    std::string path_;
};

inline void make_dir(const std::string &path)
{
    std::filesystem::create_directories(path);
}

inline void write_file(const std::string &path, const std::string &data)
{
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out << data;
}

inline std::string read_file(const std::string &path)
{
    std::ifstream in(path, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

// Path -> "d" for directories, "l:target" for symlinks, "f:contents" for
// files. Relative to `root`.
inline std::map<std::string, std::string> snapshot_tree(const std::string &root)
{
    std::map<std::string, std::string> out;
    namespace fs = std::filesystem;
    std::error_code ec;
    if (!fs::exists(root, ec)) return out;
    for (auto it = fs::recursive_directory_iterator(root, ec); it != fs::recursive_directory_iterator();
         it.increment(ec)) {
        std::string rel = fs::relative(it->path(), root).string();
        auto st = it->symlink_status();
        if (fs::is_symlink(st)) {
            out[rel] = "l:" + fs::read_symlink(it->path()).string();
        } else if (fs::is_directory(st)) {
            out[rel] = "d";
        } else {
            out[rel] = "f:" + read_file(it->path().string());
        }
    }
    return out;
}

// Directory of the running test binary.
inline std::string self_dir()
{
    return std::filesystem::canonical("/proc/self/exe").parent_path().string();
}

} // namespace lockbox
