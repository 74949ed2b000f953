#include "lockbox/error.hpp"
#include "lockbox/net.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <cstring>

namespace lockbox {

namespace {

constexpr std::size_t kMaxHead = 16 * 1024;

bool send_all(int fd, const char *data, std::size_t len)
{
    while (len > 0) {
        ssize_t n = ::send(fd, data, len, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        data += n;
        len -= static_cast<std::size_t>(n);
    }
    return true;
}

void send_status(int fd, int status)
{
    const char *reason = status == 403 ? "Forbidden" : status == 400 ? "Bad Request" : "Bad Gateway";
    std::string body = std::to_string(status) + " " + reason + "\n";
    std::string response = "HTTP/1.1 " + std::to_string(status) + " " + reason +
                           "\r\nContent-Type: text/plain\r\nContent-Length: " +
                           std::to_string(body.size()) + "\r\nConnection: close\r\n\r\n" + body;
    send_all(fd, response.data(), response.size());
}

std::string lowercase(std::string s)
{
    std::transform(s.begin(), s.end(), s.begin(),
                   [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

bool hop_by_hop(const std::string &name)
{
    std::string n = lowercase(name);
    return n == "connection" || n == "proxy-connection" || n == "keep-alive";
}

UniqueFd connect_upstream(const Destination &dest)
{
    sockaddr_storage addr{};
    std::size_t len = encode_sockaddr(dest.ip, dest.port, &addr, sizeof(addr));
    UniqueFd fd(::socket(addr.ss_family, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!fd) return fd;
    if (::connect(fd.get(), reinterpret_cast<sockaddr *>(&addr), static_cast<socklen_t>(len)) < 0) {
        return UniqueFd();
    }
    return fd;
}

} // namespace

HttpProxy::HttpProxy(std::vector<HttpRule> rules, LivePolicyCell *live, AuditLog *audit)
    : rules_(std::move(rules)), live_(live), audit_(audit)
{
}

HttpProxy::~HttpProxy()
{
    stop();
}

void HttpProxy::start()
{
    listener_ = UniqueFd(::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0));
    if (!listener_) throw_errno("proxy socket");
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    if (::bind(listener_.get(), reinterpret_cast<sockaddr *>(&addr), sizeof(addr)) < 0) {
        throw_errno("proxy bind");
    }
    if (::listen(listener_.get(), 128) < 0) throw_errno("proxy listen");
    socklen_t len = sizeof(addr);
    ::getsockname(listener_.get(), reinterpret_cast<sockaddr *>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    wake_ = UniqueFd(::eventfd(0, EFD_CLOEXEC | EFD_NONBLOCK));
    if (!wake_) throw_errno("eventfd");
    acceptor_ = std::thread([this] { accept_loop(); });
}

void HttpProxy::stop()
{
    if (stopping_.exchange(true)) return;
    if (wake_) {
        std::uint64_t one = 1;
        [[maybe_unused]] auto rc = ::write(wake_.get(), &one, sizeof(one));
    }
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> threads;
    {
        std::lock_guard lock(mutex_);
        for (int fd : active_) ::shutdown(fd, SHUT_RDWR);
        threads.swap(connections_);
    }
    for (auto &t : threads) t.join();
}

void HttpProxy::register_flow(std::uint16_t local_port, ProxyFlow flow)
{
    std::lock_guard lock(mutex_);
    flows_[local_port] = std::move(flow);
}

ProxyCounters HttpProxy::counters() const
{
    return ProxyCounters{accepted_.load(), parsed_.load(), forwarded_.load(), rejected_.load(),
                         upstream_.load()};
}

void HttpProxy::accept_loop()
{
    for (;;) {
        pollfd fds[2] = {{listener_.get(), POLLIN, 0}, {wake_.get(), POLLIN, 0}};
        int rc = ::poll(fds, 2, -1);
        if (rc < 0) {
            if (errno == EINTR) continue;
            return;
        }
        if (fds[1].revents) return;
        if (!(fds[0].revents & POLLIN)) continue;
        UniqueFd client(::accept4(listener_.get(), nullptr, nullptr, SOCK_CLOEXEC));
        if (!client) continue;
        accepted_++;
        std::lock_guard lock(mutex_);
        if (stopping_) return;
        active_.insert(client.get());
        connections_.emplace_back([this, fd = client.release()] { serve(UniqueFd(fd)); });
    }
}

void HttpProxy::serve(UniqueFd client)
{
    int cfd = client.get();
    auto finish = [&] {
        std::lock_guard lock(mutex_);
        active_.erase(cfd);
    };

    sockaddr_storage peer{};
    socklen_t plen = sizeof(peer);
    std::optional<ProxyFlow> flow;
    if (::getpeername(cfd, reinterpret_cast<sockaddr *>(&peer), &plen) == 0) {
        if (auto decoded = decode_sockaddr(&peer, plen)) {
            std::lock_guard lock(mutex_);
            auto it = flows_.find(decoded->second);
            if (it != flows_.end()) {
                flow = std::move(it->second);
                flows_.erase(it);
            }
        }
    }
    if (!flow) {
        rejected_++;
        finish();
        return;
    }

    AuditRecord record;
    record.pid = flow->pid;
    record.kind = "http";

    std::string buffer;
    std::size_t head_end = std::string::npos;
    char chunk[4096];
    while (head_end == std::string::npos && buffer.size() < kMaxHead) {
        ssize_t n = ::recv(cfd, chunk, sizeof(chunk), 0);
        if (n < 0 && errno == EINTR) continue;
        if (n <= 0) break;
        buffer.append(chunk, static_cast<std::size_t>(n));
        head_end = buffer.find("\r\n\r\n");
    }
    std::optional<HttpRequestHead> head;
    if (head_end != std::string::npos && head_end + 4 <= kMaxHead) {
        head = parse_request_head(std::string_view(buffer).substr(0, head_end + 4));
    }
    if (!head) {
        rejected_++;
        send_status(cfd, 400);
        record.decision = "bad-request";
        if (audit_) audit_->append(record);
        finish();
        return;
    }
    parsed_++;

    std::string host;
    if (head->host) {
        host = *head->host;
    } else if (!flow->hostnames.empty()) {
        host = flow->hostnames.front();
    } else {
        host = flow->destination.ip.to_string();
    }
    record.method = head->method;
    record.host = host;
    record.path = head->path;

    bool host_ok = host == flow->destination.ip.to_string() ||
                   std::find(flow->hostnames.begin(), flow->hostnames.end(), host) !=
                       flow->hostnames.end();
    HttpDecision decision;
    if (host_ok) {
        decision = decide_http(head->method, host, flow->destination.port, head->path, rules_);
    }
    if (decision.action == HttpDecision::Action::Forward && live_) {
        if (!live_->load()->pins.contains(flow->destination)) {
            decision = HttpDecision{};
        }
    }
    if (decision.action != HttpDecision::Action::Forward) {
        rejected_++;
        send_status(cfd, 403);
        record.decision = "deny";
        if (audit_) audit_->append(record);
        finish();
        return;
    }

    upstream_++;
    UniqueFd up = connect_upstream(flow->destination);
    if (!up) {
        send_status(cfd, 502);
        record.decision = "upstream-error";
        if (audit_) audit_->append(record);
        finish();
        return;
    }

    std::string target = head->target;
    if (lowercase(target.substr(0, 7)) == "http://") target = head->path;
    std::string out = head->method + " " + target + " " + head->version + "\r\n";
    for (const auto &[name, value] : head->headers) {
        if (hop_by_hop(name)) continue;
        out += name + ": " + value + "\r\n";
    }
    out += "Connection: close\r\n\r\n";

    // Only the declared body is forwarded; a chunked body passes through opaquely.
    std::optional<std::uint64_t> body_left;
    if (auto te = head->header("Transfer-Encoding"); !te || lowercase(*te) == "identity") {
        body_left = 0;
        if (auto cl = head->header("Content-Length")) {
            try {
                body_left = std::stoull(*cl);
            } catch (const std::exception &) {
                body_left = 0;
            }
        }
    }
    std::string rest = buffer.substr(head_end + 4);
    if (body_left && rest.size() > *body_left) rest.resize(*body_left);
    if (body_left) *body_left -= rest.size();
    out += rest;
    bool ok = send_all(up.get(), out.data(), out.size());
    forwarded_++;
    record.decision = "forward";
    if (audit_) audit_->append(record);

    bool client_open = ok;
    bool upstream_open = ok;
    while (upstream_open) {
        bool want_client = client_open && (!body_left || *body_left > 0);
        pollfd fds[2] = {{up.get(), POLLIN, 0}, {want_client ? cfd : -1, POLLIN, 0}};
        int rc = ::poll(fds, 2, -1);
        if (rc < 0) {
            if (errno == EINTR) continue;
            break;
        }
        if (fds[0].revents) {
            ssize_t n = ::recv(up.get(), chunk, sizeof(chunk), 0);
            if (n <= 0 || !send_all(cfd, chunk, static_cast<std::size_t>(n))) upstream_open = false;
        }
        if (want_client && fds[1].revents) {
            std::size_t cap = sizeof(chunk);
            if (body_left) cap = std::min<std::uint64_t>(cap, *body_left);
            ssize_t n = ::recv(cfd, chunk, cap, 0);
            if (n <= 0) {
                client_open = false;
                ::shutdown(up.get(), SHUT_WR);
            } else {
                if (body_left) *body_left -= static_cast<std::uint64_t>(n);
                if (!send_all(up.get(), chunk, static_cast<std::size_t>(n))) upstream_open = false;
            }
        }
    }
    ::shutdown(cfd, SHUT_WR);
    finish();
}

} // namespace lockbox
