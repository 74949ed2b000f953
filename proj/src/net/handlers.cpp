#include "lockbox/net.hpp"
#include "lockbox/proc.hpp"

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <sys/syscall.h>
#include <sys/un.h>

#include <cerrno>
#include <cstring>

namespace lockbox {

namespace {

constexpr std::size_t kMaxPayload = 256 * 1024;
constexpr std::size_t kMaxIov = 1024;
constexpr std::size_t kMaxControl = 64 * 1024;
constexpr unsigned kMaxMmsg = 1024;

struct SocketInfo {
    int domain = 0;
    int type = 0;
    int protocol = 0;
};

std::optional<SocketInfo> socket_info(int fd, int *err)
{
    SocketInfo info;
    socklen_t len = sizeof(int);
    if (::getsockopt(fd, SOL_SOCKET, SO_DOMAIN, &info.domain, &len) < 0) {
        *err = errno;
        return std::nullopt;
    }
    len = sizeof(int);
    ::getsockopt(fd, SOL_SOCKET, SO_TYPE, &info.type, &len);
    len = sizeof(int);
    ::getsockopt(fd, SOL_SOCKET, SO_PROTOCOL, &info.protocol, &len);
    return info;
}

Protocol protocol_of(const SocketInfo &info)
{
    if (info.protocol == IPPROTO_ICMP || info.protocol == IPPROTO_ICMPV6) return Protocol::Icmp;
    if (info.type == SOCK_STREAM) return Protocol::Tcp;
    return Protocol::Udp;
}

Verdict emulate_result(long rc)
{
    if (rc < 0) return Verdict::emulate_error(errno);
    return Verdict::emulate(rc);
}

std::vector<std::uint8_t> read_addr(NotifyContext &ctx, std::uint64_t addr, std::uint64_t len)
{
    if (len > sizeof(sockaddr_storage)) len = sizeof(sockaddr_storage);
    return ctx.read(addr, static_cast<std::size_t>(len));
}

sa_family_t family_of(const std::vector<std::uint8_t> &bytes)
{
    sa_family_t family = AF_UNSPEC;
    if (bytes.size() >= sizeof(family)) std::memcpy(&family, bytes.data(), sizeof(family));
    return family;
}

// Outcome of checking a unix-domain address: an error, or the address to use
// on the supervisor side.
struct UnixTarget {
    int error = 0;
    std::vector<std::uint8_t> addr;
};

UnixTarget check_unix(NetRuntime &rt, pid_t pid, const std::vector<std::uint8_t> &bytes,
                      bool binding)
{
    constexpr std::size_t off = offsetof(sockaddr_un, sun_path);
    UnixTarget out;
    if (bytes.size() <= off) {
        // Autobind or unnamed.
        out.addr = bytes;
        return out;
    }
    if (bytes[off] == 0) {
        std::string name(reinterpret_cast<const char *>(bytes.data()) + off, bytes.size() - off);
        std::lock_guard lock(rt.abstract_mutex);
        if (binding) {
            rt.abstract_names.insert(name);
        } else if (!rt.abstract_names.count(name)) {
            out.error = EPERM;
            return out;
        }
        out.addr = bytes;
        return out;
    }
    std::string path(reinterpret_cast<const char *>(bytes.data()) + off,
                     strnlen(reinterpret_cast<const char *>(bytes.data()) + off, bytes.size() - off));
    auto abs = resolve_at(pid, AT_FDCWD, path);
    if (!abs) {
        out.error = EACCES;
        return out;
    }
    if (!rt.live->load()->scope.writable(*abs)) {
        out.error = EACCES;
        return out;
    }
    sockaddr_un sun{};
    sun.sun_family = AF_UNIX;
    if (abs->size() >= sizeof(sun.sun_path)) {
        out.error = ENAMETOOLONG;
        return out;
    }
    std::memcpy(sun.sun_path, abs->data(), abs->size());
    auto *raw = reinterpret_cast<const std::uint8_t *>(&sun);
    out.addr.assign(raw, raw + off + abs->size() + 1);
    return out;
}

std::optional<Verdict> consult_gate(NetRuntime &rt, NotifyContext &ctx, const char *syscall,
                                    const Destination &dest)
{
    if (!rt.gate || !rt.gate->subscribed(EventCategory::Net)) return std::nullopt;
    Event event;
    event.syscall = syscall;
    event.category = EventCategory::Net;
    event.pid = ctx.pid();
    event.ppid = read_ppid(ctx.pid());
    event.net_dest = dest;
    HookVerdict hv = rt.gate->deliver(event);
    ctx.check_valid();
    if (!hv.permits()) return hv.to_verdict();
    return std::nullopt;
}

// Checks an inet destination for a datagram send. Returns an error verdict
// when the destination is refused.
std::optional<Verdict> check_datagram_dest(NetRuntime &rt, NotifyContext &ctx,
                                           const SocketInfo &info,
                                           const std::vector<std::uint8_t> &bytes,
                                           const char *syscall)
{
    auto decoded = decode_sockaddr(bytes.data(), bytes.size());
    if (!decoded) return Verdict::deny(EINVAL);
    Destination dest{protocol_of(info), decoded->first, decoded->second};
    if (dest.protocol == Protocol::Icmp) dest.port = 0;
    auto live = rt.live->load();
    if (classify_flow(dest, *rt.plan, live->pins) == FlowPath::Denied) {
        rt.counters.denied++;
        return Verdict::deny(EACCES);
    }
    return consult_gate(rt, ctx, syscall, dest);
}

// Verifies the address of a datagram message. On success `addr` holds the
// bytes to hand to the kernel.
std::optional<Verdict> check_message_name(NetRuntime &rt, NotifyContext &ctx,
                                          const SocketInfo &info, std::vector<std::uint8_t> &addr,
                                          const char *syscall)
{
    if (info.domain == AF_UNIX) {
        auto target = check_unix(rt, ctx.pid(), addr, false);
        if (target.error) {
            rt.counters.denied++;
            return Verdict::deny(target.error);
        }
        addr = std::move(target.addr);
        return std::nullopt;
    }
    return check_datagram_dest(rt, ctx, info, addr, syscall);
}

Verdict redirect_to_proxy(NetRuntime &rt, NotifyContext &ctx, int child_fd, int local_sock,
                          const Destination &dest)
{
    UniqueFd sock(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!sock) return Verdict::deny(errno);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(sock.get(), reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) < 0) {
        return Verdict::deny(errno);
    }
    socklen_t len = sizeof(addr);
    ::getsockname(sock.get(), reinterpret_cast<sockaddr *>(&addr), &len);
    ProxyFlow flow{dest, rt.live->load()->pins.hostnames_for(dest.ip), ctx.pid()};
    rt.proxy->register_flow(ntohs(addr.sin_port), std::move(flow));

    addr.sin_port = htons(rt.proxy->port());
    if (::connect(sock.get(), reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) < 0) {
        return Verdict::deny(ECONNREFUSED);
    }
    int flags = ::fcntl(local_sock, F_GETFL);
    if (flags >= 0 && (flags & O_NONBLOCK)) {
        ::fcntl(sock.get(), F_SETFL, ::fcntl(sock.get(), F_GETFL) | O_NONBLOCK);
    }
    bool cloexec = fd_cloexec(ctx.pid(), child_fd);
    ctx.check_valid();
    rt.counters.proxied++;
    return Verdict::emulate_fd(std::move(sock), child_fd, cloexec, 0);
}

Verdict handle_connect(NetRuntime &rt, NotifyContext &ctx)
{
    rt.counters.connects++;
    int fd = static_cast<int>(ctx.arg(0));
    std::uint64_t len = ctx.arg(2);
    if (len < sizeof(sa_family_t)) return Verdict::deny(EINVAL);
    auto bytes = read_addr(ctx, ctx.arg(1), len);
    UniqueFd sock = ctx.get_fd(fd);
    if (!sock) return Verdict::deny(EBADF);
    int err = 0;
    auto info = socket_info(sock.get(), &err);
    if (!info) return Verdict::deny(err);

    sa_family_t family = family_of(bytes);
    if (family == AF_UNSPEC) {
        rt.counters.on_behalf++;
        return emulate_result(::connect(sock.get(), reinterpret_cast<const sockaddr *>(bytes.data()),
                                        static_cast<socklen_t>(bytes.size())));
    }
    if (info->domain == AF_UNIX) {
        auto target = check_unix(rt, ctx.pid(), bytes, false);
        if (target.error) {
            rt.counters.denied++;
            return Verdict::deny(target.error);
        }
        rt.counters.on_behalf++;
        return emulate_result(::connect(sock.get(),
                                        reinterpret_cast<const sockaddr *>(target.addr.data()),
                                        static_cast<socklen_t>(target.addr.size())));
    }
    if (info->domain != AF_INET && info->domain != AF_INET6) {
        rt.counters.denied++;
        return Verdict::deny(EACCES);
    }
    auto decoded = decode_sockaddr(bytes.data(), bytes.size());
    if (!decoded) return Verdict::deny(EINVAL);
    Destination dest{protocol_of(*info), decoded->first, decoded->second};
    if (dest.protocol == Protocol::Icmp) dest.port = 0;

    auto live = rt.live->load();
    FlowPath path = classify_flow(dest, *rt.plan, live->pins);
    if (path == FlowPath::Denied) {
        rt.counters.denied++;
        return Verdict::deny(ECONNREFUSED);
    }
    if (auto gated = consult_gate(rt, ctx, "connect", dest)) {
        rt.counters.denied++;
        return *gated;
    }
    if (path == FlowPath::HttpProxied && rt.proxy) {
        return redirect_to_proxy(rt, ctx, fd, sock.get(), dest);
    }
    rt.counters.on_behalf++;
    return emulate_result(::connect(sock.get(), reinterpret_cast<const sockaddr *>(bytes.data()),
                                    static_cast<socklen_t>(bytes.size())));
}

Verdict handle_sendto(NetRuntime &rt, NotifyContext &ctx)
{
    int fd = static_cast<int>(ctx.arg(0));
    std::uint64_t buf = ctx.arg(1);
    std::uint64_t len = ctx.arg(2);
    int flags = static_cast<int>(ctx.arg(3));
    std::uint64_t addr = ctx.arg(4);
    std::uint64_t alen = ctx.arg(5);
    if (addr == 0) {
        rt.counters.continued++;
        return Verdict::allow();
    }
    UniqueFd sock = ctx.get_fd(fd);
    if (!sock) return Verdict::deny(EBADF);
    int err = 0;
    auto info = socket_info(sock.get(), &err);
    if (!info) return Verdict::deny(err);
    if (info->domain == AF_NETLINK) {
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (info->type == SOCK_STREAM || info->type == SOCK_SEQPACKET) {
        if (flags & MSG_FASTOPEN) return Verdict::deny(EOPNOTSUPP);
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (info->domain != AF_UNIX && info->domain != AF_INET && info->domain != AF_INET6) {
        return Verdict::deny(EACCES);
    }
    if (alen < sizeof(sa_family_t)) return Verdict::deny(EINVAL);
    auto name = read_addr(ctx, addr, alen);
    if (auto refused = check_message_name(rt, ctx, *info, name, "sendto")) return *refused;
    if (len > kMaxPayload) return Verdict::deny(EMSGSIZE);
    auto payload = ctx.read(buf, static_cast<std::size_t>(len));
    rt.counters.on_behalf++;
    return emulate_result(::sendto(sock.get(), payload.data(), payload.size(), flags,
                                   reinterpret_cast<const sockaddr *>(name.data()),
                                   static_cast<socklen_t>(name.size())));
}

// A datagram message copied out of the child with its name already checked.
struct CopiedMessage {
    std::vector<std::uint8_t> name;
    std::vector<std::uint8_t> payload;
    std::vector<std::uint8_t> control;
    std::vector<UniqueFd> passed;
};

std::optional<Verdict> copy_message(NetRuntime &rt, NotifyContext &ctx, const SocketInfo &info,
                                    const msghdr &hdr, CopiedMessage &out, const char *syscall)
{
    if (hdr.msg_name) {
        if (hdr.msg_namelen < sizeof(sa_family_t)) return Verdict::deny(EINVAL);
        out.name = read_addr(ctx, reinterpret_cast<std::uint64_t>(hdr.msg_name), hdr.msg_namelen);
        if (auto refused = check_message_name(rt, ctx, info, out.name, syscall)) return refused;
    }

    if (hdr.msg_iovlen > kMaxIov) return Verdict::deny(EMSGSIZE);
    std::vector<iovec> iov(hdr.msg_iovlen);
    if (!iov.empty()) {
        auto raw = ctx.read(reinterpret_cast<std::uint64_t>(hdr.msg_iov), iov.size() * sizeof(iovec));
        std::memcpy(iov.data(), raw.data(), raw.size());
    }
    for (const auto &v : iov) {
        if (out.payload.size() + v.iov_len > kMaxPayload) return Verdict::deny(EMSGSIZE);
        if (v.iov_len == 0) continue;
        auto part = ctx.read(reinterpret_cast<std::uint64_t>(v.iov_base), v.iov_len);
        out.payload.insert(out.payload.end(), part.begin(), part.end());
    }

    if (hdr.msg_control && hdr.msg_controllen > 0) {
        if (hdr.msg_controllen > kMaxControl) return Verdict::deny(ENOBUFS);
        out.control = ctx.read(reinterpret_cast<std::uint64_t>(hdr.msg_control), hdr.msg_controllen);
        msghdr local{};
        local.msg_control = out.control.data();
        local.msg_controllen = out.control.size();
        for (cmsghdr *c = CMSG_FIRSTHDR(&local); c; c = CMSG_NXTHDR(&local, c)) {
            if (c->cmsg_level != SOL_SOCKET) continue;
            if (c->cmsg_type == SCM_CREDENTIALS) return Verdict::deny(EPERM);
            if (c->cmsg_type != SCM_RIGHTS) continue;
            std::size_t count = (c->cmsg_len - CMSG_LEN(0)) / sizeof(int);
            auto *fds = reinterpret_cast<int *>(CMSG_DATA(c));
            for (std::size_t i = 0; i < count; i++) {
                int child_fd;
                std::memcpy(&child_fd, fds + i, sizeof(int));
                UniqueFd local_fd = ctx.get_fd(child_fd);
                if (!local_fd) return Verdict::deny(EBADF);
                int mine = local_fd.get();
                std::memcpy(fds + i, &mine, sizeof(int));
                out.passed.push_back(std::move(local_fd));
            }
        }
    }
    return std::nullopt;
}

long send_copied(int sock, CopiedMessage &m, int flags)
{
    iovec v{m.payload.data(), m.payload.size()};
    msghdr hdr{};
    if (!m.name.empty()) {
        hdr.msg_name = m.name.data();
        hdr.msg_namelen = static_cast<socklen_t>(m.name.size());
    }
    hdr.msg_iov = &v;
    hdr.msg_iovlen = 1;
    if (!m.control.empty()) {
        hdr.msg_control = m.control.data();
        hdr.msg_controllen = m.control.size();
    }
    return ::sendmsg(sock, &hdr, flags);
}

bool datagram_socket(const SocketInfo &info)
{
    return info.type != SOCK_STREAM && info.type != SOCK_SEQPACKET;
}

Verdict handle_sendmsg(NetRuntime &rt, NotifyContext &ctx)
{
    int fd = static_cast<int>(ctx.arg(0));
    int flags = static_cast<int>(ctx.arg(2));
    UniqueFd sock = ctx.get_fd(fd);
    if (!sock) return Verdict::deny(EBADF);
    int err = 0;
    auto info = socket_info(sock.get(), &err);
    if (!info) return Verdict::deny(err);
    if (info->domain == AF_NETLINK) {
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (!datagram_socket(*info)) {
        if (flags & MSG_FASTOPEN) return Verdict::deny(EOPNOTSUPP);
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (info->domain != AF_UNIX && info->domain != AF_INET && info->domain != AF_INET6) {
        return Verdict::deny(EACCES);
    }
    auto hdr = ctx.read_struct<msghdr>(ctx.arg(1));
    if (!hdr.msg_name) {
        rt.counters.continued++;
        return Verdict::allow();
    }
    CopiedMessage m;
    if (auto refused = copy_message(rt, ctx, *info, hdr, m, "sendmsg")) return *refused;
    rt.counters.on_behalf++;
    return emulate_result(send_copied(sock.get(), m, flags));
}

Verdict handle_sendmmsg(NetRuntime &rt, NotifyContext &ctx)
{
    int fd = static_cast<int>(ctx.arg(0));
    std::uint64_t vec = ctx.arg(1);
    unsigned vlen = static_cast<unsigned>(ctx.arg(2));
    int flags = static_cast<int>(ctx.arg(3));
    UniqueFd sock = ctx.get_fd(fd);
    if (!sock) return Verdict::deny(EBADF);
    int err = 0;
    auto info = socket_info(sock.get(), &err);
    if (!info) return Verdict::deny(err);
    if (info->domain == AF_NETLINK) {
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (!datagram_socket(*info)) {
        if (flags & MSG_FASTOPEN) return Verdict::deny(EOPNOTSUPP);
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (info->domain != AF_UNIX && info->domain != AF_INET && info->domain != AF_INET6) {
        return Verdict::deny(EACCES);
    }
    if (vlen > kMaxMmsg) vlen = kMaxMmsg;
    if (vlen == 0) return Verdict::emulate(0);
    std::vector<mmsghdr> msgs(vlen);
    auto raw = ctx.read(vec, vlen * sizeof(mmsghdr));
    std::memcpy(msgs.data(), raw.data(), raw.size());
    bool any_named = false;
    for (const auto &m : msgs) any_named = any_named || m.msg_hdr.msg_name;
    if (!any_named) {
        rt.counters.continued++;
        return Verdict::allow();
    }

    rt.counters.on_behalf++;
    unsigned sent = 0;
    for (; sent < vlen; sent++) {
        CopiedMessage m;
        if (auto refused = copy_message(rt, ctx, *info, msgs[sent].msg_hdr, m, "sendmmsg")) {
            if (sent == 0) return *refused;
            break;
        }
        long rc = send_copied(sock.get(), m, flags);
        if (rc < 0) {
            if (sent == 0) return Verdict::emulate_error(errno);
            break;
        }
        unsigned len = static_cast<unsigned>(rc);
        ctx.write(vec + sent * sizeof(mmsghdr) + offsetof(mmsghdr, msg_len), &len, sizeof(len));
    }
    return Verdict::emulate(sent);
}

bool bind_port_allowed(const EnforcementPlan &plan, std::uint16_t port)
{
    if (port == 0) return true;
    for (const auto &rule : plan.spec.spec.net.endpoints) {
        if (rule.port && *rule.port == port) return true;
    }
    return false;
}

Verdict handle_bind(NetRuntime &rt, NotifyContext &ctx)
{
    int fd = static_cast<int>(ctx.arg(0));
    std::uint64_t len = ctx.arg(2);
    if (len < sizeof(sa_family_t)) return Verdict::deny(EINVAL);
    auto bytes = read_addr(ctx, ctx.arg(1), len);
    UniqueFd sock = ctx.get_fd(fd);
    if (!sock) return Verdict::deny(EBADF);
    int err = 0;
    auto info = socket_info(sock.get(), &err);
    if (!info) return Verdict::deny(err);
    if (info->domain == AF_NETLINK) {
        rt.counters.continued++;
        return Verdict::allow();
    }
    if (info->domain == AF_UNIX) {
        auto target = check_unix(rt, ctx.pid(), bytes, true);
        if (target.error) {
            rt.counters.denied++;
            return Verdict::deny(target.error);
        }
        rt.counters.on_behalf++;
        return emulate_result(::bind(sock.get(), reinterpret_cast<const sockaddr *>(target.addr.data()),
                                     static_cast<socklen_t>(target.addr.size())));
    }
    if (info->domain != AF_INET && info->domain != AF_INET6) return Verdict::deny(EACCES);
    auto decoded = decode_sockaddr(bytes.data(), bytes.size());
    if (!decoded) return Verdict::deny(EINVAL);
    if (!bind_port_allowed(*rt.plan, decoded->second)) {
        rt.counters.denied++;
        return Verdict::deny(EACCES);
    }
    rt.counters.on_behalf++;
    return emulate_result(::bind(sock.get(), reinterpret_cast<const sockaddr *>(bytes.data()),
                                 static_cast<socklen_t>(bytes.size())));
}

} // namespace

void install_net_handlers(HandlerTable &table, std::shared_ptr<NetRuntime> runtime)
{
    const auto &handlers = runtime->plan->supervisor_handlers;
    for (const auto &[nr, id] : handlers) {
        auto rt = runtime;
        switch (id) {
            case HandlerId::NetConnect:
                table.set(nr, [rt](NotifyContext &ctx) { return handle_connect(*rt, ctx); });
                break;
            case HandlerId::NetBind:
                table.set(nr, [rt](NotifyContext &ctx) { return handle_bind(*rt, ctx); });
                break;
            case HandlerId::NetSend:
                if (nr == SYS_sendto) {
                    table.set(nr, [rt](NotifyContext &ctx) { return handle_sendto(*rt, ctx); });
                } else if (nr == SYS_sendmsg) {
                    table.set(nr, [rt](NotifyContext &ctx) { return handle_sendmsg(*rt, ctx); });
                } else if (nr == SYS_sendmmsg) {
                    table.set(nr, [rt](NotifyContext &ctx) { return handle_sendmmsg(*rt, ctx); });
                }
                break;
            default:
                break;
        }
    }
}

} // namespace lockbox
