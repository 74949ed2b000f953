#pragma once

#include <array>
#include <compare>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>

struct sockaddr;

namespace lockbox {

enum class Protocol : std::uint8_t { Tcp, Udp, Icmp };

const char *to_string(Protocol proto);
std::optional<Protocol> parse_protocol(std::string_view text);

// IPv4 or IPv6 address. IPv4-mapped IPv6 addresses are folded to IPv4 on
// construction so that allowlist comparisons see one canonical form.
class IpAddress {
public:
    enum class Family : std::uint8_t { V4, V6 };

    IpAddress() = default;

    static std::optional<IpAddress> parse(std::string_view text);
    static IpAddress v4(std::uint32_t host_order);
    static IpAddress from_bytes(Family family, const std::uint8_t *bytes);

    Family family() const noexcept { return family_; }
    const std::array<std::uint8_t, 16> &bytes() const noexcept { return bytes_; }
    bool is_loopback() const noexcept;

    std::string to_string() const;

    auto operator<=>(const IpAddress &) const = default;

private:
    Family family_ = Family::V4;
    std::array<std::uint8_t, 16> bytes_{};
};

struct Destination {
    Protocol protocol = Protocol::Tcp;
    IpAddress ip;
    std::uint16_t port = 0; // ignored for ICMP

    std::string to_string() const;

    auto operator<=>(const Destination &) const = default;
};

// Decodes an AF_INET/AF_INET6 sockaddr. Returns nullopt for other families
// or truncated buffers.
std::optional<std::pair<IpAddress, std::uint16_t>> decode_sockaddr(const void *data,
                                                                   std::size_t len);

// Fills `storage` with a sockaddr for ip:port and returns its length.
std::size_t encode_sockaddr(const IpAddress &ip, std::uint16_t port, void *storage,
                            std::size_t capacity);

} // namespace lockbox
