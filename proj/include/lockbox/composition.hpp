#pragma once

#include "lockbox/runtime.hpp"

#include <chrono>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lockbox {

struct Stage {
    SandboxSpec spec;
    std::vector<std::string> cmd;
    HookCallback policy_fn;
};

struct StageResult {
    ExitStatus status;
    std::vector<AuditRecord> audits;
    std::optional<EffectSummary> effects;
    SupervisorCounters supervisor;
    NetStats net;
};

struct PipelineOptions {
    std::vector<std::string> env = default_env();
    // Fed to the first stage's stdin; stdin_spec applies otherwise.
    std::optional<std::string> input;
    StdioSpec stdin_spec = StdioSpec::null();
    // Where the last stage writes; captured into stdout_data when unset.
    std::optional<StdioSpec> stdout_spec;
    std::size_t capture_limit = 64u << 20;
    std::optional<std::chrono::milliseconds> timeout;
    // Stage stderr; inherited by default.
    StdioSpec stderr_spec;
};

struct PipelineResult {
    std::vector<StageResult> stages;
    std::string stdout_data;
    bool capture_overflow = false;

    bool success() const;
};

// Runs the stages concurrently, stage i's stdout feeding stage i+1's stdin.
PipelineResult run_pipeline(const std::vector<Stage> &stages, const PipelineOptions &options = {});

struct ForkPlan {
    // Runs once, before confinement, in the process the workers fork from.
    std::function<void()> init;
    // Worker body: runs confined in a forked child with stdout captured.
    // The return value is the worker's exit code.
    std::function<int(std::size_t index, const std::string &input)> worker;
    std::size_t workers = 1;
    std::vector<std::string> inputs;
    enum class InputMode : std::uint8_t { Argument, Stdin };
    InputMode input_mode = InputMode::Argument;
    std::optional<Stage> reducer;
    std::size_t output_cap = 1u << 20;
    // Workers alive at the same time.
    std::size_t parallelism = 8;
};

struct WorkerResult {
    ExitStatus status;
    std::string output;
    bool overflow = false;
};

struct ForkResult {
    std::vector<WorkerResult> workers;
    std::optional<StageResult> reducer;
    std::string reduced_output;
    // Fork phase only: first fork to last worker reaped.
    std::chrono::nanoseconds elapsed{0};
    double forks_per_second = 0;
};

// Only static confinement applies to forked workers: specs that need a
// supervisor are rejected with PolicyError.
ForkResult run_cow_fork(const ForkPlan &plan, const SandboxSpec &spec);

} // namespace lockbox
