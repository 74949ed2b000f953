#pragma once

#include <optional>
#include <span>
#include <string_view>

namespace lockbox {

struct SyscallInfo {
    int number;
    std::string_view name;
};

// Syscalls this library knows by name (x86_64 numbering).
std::span<const SyscallInfo> known_syscalls();

std::string_view syscall_name(int number);
std::optional<int> syscall_number(std::string_view name);

} // namespace lockbox
