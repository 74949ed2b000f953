#include "lockbox/net_types.hpp"
#include "lockbox/error.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>

#include <cerrno>
#include <cstring>

namespace lockbox {

const char *to_string(ErrorKind kind)
{
    switch (kind) {
        case ErrorKind::Validation: return "validation";
        case ErrorKind::Launch: return "launch";
        case ErrorKind::KernelFloor: return "kernel-floor";
        case ErrorKind::HandshakeTimeout: return "handshake-timeout";
        case ErrorKind::Exec: return "exec";
        case ErrorKind::Policy: return "policy";
        case ErrorKind::Resolution: return "resolution";
        case ErrorKind::CommitConflict: return "commit-conflict";
        case ErrorKind::Unsupported: return "unsupported";
        case ErrorKind::System: return "system";
    }
    return "unknown";
}

void throw_errno(const std::string &what, int err)
{
    throw Error(ErrorKind::System, what + ": " + std::strerror(err));
}

void throw_errno(const std::string &what)
{
    throw_errno(what, errno);
}

const char *to_string(Protocol proto)
{
    switch (proto) {
        case Protocol::Tcp: return "tcp";
        case Protocol::Udp: return "udp";
        case Protocol::Icmp: return "icmp";
    }
    return "?";
}

std::optional<Protocol> parse_protocol(std::string_view text)
{
    if (text == "tcp") return Protocol::Tcp;
    if (text == "udp") return Protocol::Udp;
    if (text == "icmp") return Protocol::Icmp;
    return std::nullopt;
}

std::optional<IpAddress> IpAddress::parse(std::string_view text)
{
    std::string buf(text);
    if (buf.size() > 2 && buf.front() == '[' && buf.back() == ']') {
        buf = buf.substr(1, buf.size() - 2);
    }
    in_addr v4{};
    if (inet_pton(AF_INET, buf.c_str(), &v4) == 1) {
        return from_bytes(Family::V4, reinterpret_cast<const std::uint8_t *>(&v4));
    }
    in6_addr v6{};
    if (inet_pton(AF_INET6, buf.c_str(), &v6) == 1) {
        return from_bytes(Family::V6, v6.s6_addr);
    }
    return std::nullopt;
}

IpAddress IpAddress::v4(std::uint32_t host_order)
{
    std::uint32_t net = htonl(host_order);
    return from_bytes(Family::V4, reinterpret_cast<const std::uint8_t *>(&net));
}

IpAddress IpAddress::from_bytes(Family family, const std::uint8_t *bytes)
{
    IpAddress ip;
    if (family == Family::V6) {
        static constexpr std::uint8_t mapped_prefix[12] = {0, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0xff, 0xff};
        if (std::memcmp(bytes, mapped_prefix, sizeof(mapped_prefix)) == 0) {
            ip.family_ = Family::V4;
            std::memcpy(ip.bytes_.data(), bytes + 12, 4);
            return ip;
        }
        ip.family_ = Family::V6;
        std::memcpy(ip.bytes_.data(), bytes, 16);
    } else {
        ip.family_ = Family::V4;
        std::memcpy(ip.bytes_.data(), bytes, 4);
    }
    return ip;
}

bool IpAddress::is_loopback() const noexcept
{
    if (family_ == Family::V4) {
        return bytes_[0] == 127;
    }
    for (int i = 0; i < 15; i++) {
        if (bytes_[i]) return false;
    }
    return bytes_[15] == 1;
}

std::string IpAddress::to_string() const
{
    char buf[INET6_ADDRSTRLEN] = {};
    inet_ntop(family_ == Family::V4 ? AF_INET : AF_INET6, bytes_.data(), buf, sizeof(buf));
    return buf;
}

std::string Destination::to_string() const
{
    std::string out = lockbox::to_string(protocol);
    out += ':';
    out += ip.family() == IpAddress::Family::V6 ? "[" + ip.to_string() + "]" : ip.to_string();
    if (protocol != Protocol::Icmp) {
        out += ':';
        out += std::to_string(port);
    }
    return out;
}

std::optional<std::pair<IpAddress, std::uint16_t>> decode_sockaddr(const void *data,
                                                                   std::size_t len)
{
    if (len < sizeof(sa_family_t)) {
        return std::nullopt;
    }
    sa_family_t family;
    std::memcpy(&family, data, sizeof(family));
    if (family == AF_INET && len >= sizeof(sockaddr_in)) {
        sockaddr_in sin;
        std::memcpy(&sin, data, sizeof(sin));
        return std::pair{IpAddress::from_bytes(IpAddress::Family::V4,
                                               reinterpret_cast<const std::uint8_t *>(&sin.sin_addr)),
                         ntohs(sin.sin_port)};
    }
    if (family == AF_INET6 && len >= sizeof(sockaddr_in6)) {
        sockaddr_in6 sin6;
        std::memcpy(&sin6, data, sizeof(sin6));
        return std::pair{IpAddress::from_bytes(IpAddress::Family::V6, sin6.sin6_addr.s6_addr),
                         ntohs(sin6.sin6_port)};
    }
    return std::nullopt;
}

std::size_t encode_sockaddr(const IpAddress &ip, std::uint16_t port, void *storage,
                            std::size_t capacity)
{
    if (ip.family() == IpAddress::Family::V4) {
        if (capacity < sizeof(sockaddr_in)) return 0;
        sockaddr_in sin{};
        sin.sin_family = AF_INET;
        sin.sin_port = htons(port);
        std::memcpy(&sin.sin_addr, ip.bytes().data(), 4);
        std::memcpy(storage, &sin, sizeof(sin));
        return sizeof(sin);
    }
    if (capacity < sizeof(sockaddr_in6)) return 0;
    sockaddr_in6 sin6{};
    sin6.sin6_family = AF_INET6;
    sin6.sin6_port = htons(port);
    std::memcpy(sin6.sin6_addr.s6_addr, ip.bytes().data(), 16);
    std::memcpy(storage, &sin6, sizeof(sin6));
    return sizeof(sin6);
}

} // namespace lockbox
