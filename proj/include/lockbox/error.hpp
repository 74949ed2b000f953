#pragma once

#include <stdexcept>
#include <string>
#include <vector>

namespace lockbox {

enum class ErrorKind {
    Validation,
    Launch,
    KernelFloor,
    HandshakeTimeout,
    Exec,
    Policy,
    Resolution,
    CommitConflict,
    Unsupported,
    System,
};

const char *to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string &message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ValidationError : public Error {
public:
    explicit ValidationError(const std::string &message)
        : Error(ErrorKind::Validation, message) {}
};

class PolicyError : public Error {
public:
    explicit PolicyError(const std::string &message) : Error(ErrorKind::Policy, message) {}
};

class CommitConflictError : public Error {
public:
    CommitConflictError(const std::string &message, std::vector<std::string> conflicts)
        : Error(ErrorKind::CommitConflict, message), conflicts_(std::move(conflicts)) {}

    const std::vector<std::string> &conflicts() const noexcept { return conflicts_; }

private:
    std::vector<std::string> conflicts_;
};

// Exec failure of the sandboxed command; carries the errno from execve.
class ExecError : public Error {
public:
    ExecError(const std::string &message, int error_number)
        : Error(ErrorKind::Exec, message), error_number_(error_number) {}

    int error_number() const noexcept { return error_number_; }

private:
    int error_number_;
};

// Throws Error(ErrorKind::System) carrying strerror(err).
[[noreturn]] void throw_errno(const std::string &what, int err);
[[noreturn]] void throw_errno(const std::string &what);

} // namespace lockbox
