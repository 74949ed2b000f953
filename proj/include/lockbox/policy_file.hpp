#pragma once

#include "lockbox/policy.hpp"

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

namespace lockbox {

// JSON policy documents. Unknown keys are rejected with ValidationError.
SandboxSpec spec_from_json(std::string_view text);
std::string spec_to_json(const SandboxSpec &spec);
SandboxSpec load_policy_file(const std::string &path);

struct StageDocument {
    SandboxSpec spec;
    std::vector<std::string> cmd;
};

// {"stages": [{"policy": {...}, "cmd": [...]}, ...]}
std::vector<StageDocument> load_pipeline_file(const std::string &path);
std::vector<StageDocument> pipeline_from_json(std::string_view text);

// "64M" -> 67108864. Suffixes K, M, G are powers of 1024.
std::uint64_t parse_size(std::string_view text);
// "tcp:PORT" or "PROTO:HOST:PORT" ("icmp:HOST" carries no port).
EndpointRule parse_net_flag(std::string_view text);
// "METHOD HOST PATHGLOB"; HOST may carry ":PORT".
HttpRule parse_http_flag(std::string_view text);

} // namespace lockbox
