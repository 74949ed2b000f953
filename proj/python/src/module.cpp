#include "lockbox/composition.hpp"
#include "lockbox/error.hpp"
#include "lockbox/event.hpp"
#include "lockbox/kernel.hpp"
#include "lockbox/policy_file.hpp"
#include "lockbox/runtime.hpp"

#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <climits>
#include <memory>

namespace py = pybind11;
using namespace lockbox;

namespace {

// Python objects outliving the GIL-holding scope that created them.
std::shared_ptr<py::object> hold(py::object obj)
{
    return std::shared_ptr<py::object>(new py::object(std::move(obj)), [](py::object *o) {
        py::gil_scoped_acquire gil;
        delete o;
    });
}

struct BoundEvent {
    std::string syscall;
    std::string category;
    pid_t pid = 0;
    pid_t ppid = 0;
    std::optional<std::vector<std::string>> argv;
    std::optional<std::string> net_protocol;
    std::optional<std::string> net_host;
    std::optional<int> net_port;
    Event raw;

    bool argv_contains(const std::string &needle) const { return raw.argv_contains(needle); }
};

BoundEvent to_py(const Event &e)
{
    BoundEvent p;
    p.syscall = e.syscall;
    p.category = to_string(e.category);
    p.pid = e.pid;
    p.ppid = e.ppid;
    p.argv = e.argv;
    if (e.net_dest) {
        p.net_protocol = to_string(e.net_dest->protocol);
        p.net_host = e.net_dest->ip.to_string();
        p.net_port = e.net_dest->port;
    }
    p.raw = e;
    return p;
}

// Valid only while the callback that received it runs.
struct BoundContext {
    RuntimeContext *ctx = nullptr;

    RuntimeContext &get() const
    {
        if (!ctx) throw std::runtime_error("context used outside its callback");
        return *ctx;
    }
};

EndpointRule endpoint_from(const py::handle &item)
{
    if (py::isinstance<py::str>(item)) {
        std::string text = item.cast<std::string>();
        if (text.find(':') == std::string::npos) text = "tcp:" + text;
        return parse_net_flag(text);
    }
    auto t = item.cast<py::tuple>();
    if (t.size() != 2) throw ValidationError("endpoint tuples are (host, port)");
    EndpointRule rule;
    if (!t[0].is_none()) rule.destination = t[0].cast<std::string>();
    rule.port = t[1].cast<std::uint16_t>();
    rule.port_only = t[0].is_none();
    return rule;
}

CallbackValue value_from(const py::object &v)
{
    if (v.is_none()) return std::monostate{};
    if (py::isinstance<py::bool_>(v)) return v.cast<bool>();
    if (py::isinstance<py::int_>(v)) {
        int overflow = 0;
        long long n = PyLong_AsLongLongAndOverflow(v.ptr(), &overflow);
        if (overflow) return std::int64_t{-1};
        return static_cast<std::int64_t>(n);
    }
    if (py::isinstance<py::str>(v)) return v.cast<std::string>();
    return std::string("<unsupported>");
}

HookCallback wrap_callback(const py::object &fn)
{
    if (fn.is_none()) return {};
    auto held = hold(fn);
    return [held](const Event &event, RuntimeContext &ctx) -> CallbackValue {
        py::gil_scoped_acquire gil;
        auto pctx = std::make_shared<BoundContext>(BoundContext{&ctx});
        try {
            py::object result = (*held)(to_py(event), pctx);
            pctx->ctx = nullptr;
            return value_from(result);
        } catch (py::error_already_set &e) {
            pctx->ctx = nullptr;
            throw std::runtime_error(e.what());
        }
    };
}

std::vector<std::string> strings(const py::object &obj)
{
    std::vector<std::string> out;
    if (obj.is_none()) return out;
    for (auto item : obj) out.push_back(py::str(item).cast<std::string>());
    return out;
}

std::uint64_t size_from(const py::handle &v)
{
    if (py::isinstance<py::str>(v)) return parse_size(v.cast<std::string>());
    return v.cast<std::uint64_t>();
}

ResourceLimits limits_from(const py::dict &d)
{
    ResourceLimits r;
    for (auto [k, v] : d) {
        std::string key = k.cast<std::string>();
        if (key == "max_processes") {
            r.max_processes = v.cast<std::uint64_t>();
        } else if (key == "max_memory") {
            r.max_memory = size_from(v);
        } else if (key == "max_fds") {
            r.max_fds = v.cast<std::uint64_t>();
        } else if (key == "max_cpu") {
            r.max_cpu = v.cast<double>();
        } else {
            throw ValidationError("unknown limit '" + key + "'");
        }
    }
    return r;
}

struct PySandbox {
    SandboxSpec spec;
    std::shared_ptr<py::object> policy_fn;
};

PySandbox make_sandbox(const py::object &fs_readable, const py::object &fs_writable,
                       const py::object &fs_denied, const py::object &net, const py::object &http,
                       const py::object &limits, const py::object &policy_fn, const py::object &events,
                       const py::object &workspace, const std::string &on_exit,
                       const std::optional<std::string> &cwd)
{
    PySandbox sb;
    SandboxSpec &spec = sb.spec;
    for (auto &p : strings(fs_readable)) spec.fs.rules.push_back({p, PathAccess::Read});
    for (auto &p : strings(fs_writable)) spec.fs.rules.push_back({p, PathAccess::Write});
    for (auto &p : strings(fs_denied)) spec.fs.rules.push_back({p, PathAccess::Deny});
    if (!net.is_none()) {
        for (auto item : net) spec.net.endpoints.push_back(endpoint_from(item));
    }
    for (auto &h : strings(http)) spec.net.http.push_back(parse_http_flag(h));
    if (!limits.is_none()) spec.resources = limits_from(limits.cast<py::dict>());
    if (!workspace.is_none()) {
        WorkspaceConfig ws;
        ws.root = workspace.cast<std::string>();
        spec.fs.workspace = ws;
    }
    if (on_exit == "commit") {
        spec.fs.on_exit = EffectAction::Commit;
    } else if (on_exit == "keep") {
        spec.fs.on_exit = EffectAction::Keep;
    } else if (on_exit != "abort") {
        throw ValidationError("on_exit must be commit, abort or keep");
    }
    spec.cwd = cwd;
    if (!policy_fn.is_none()) {
        spec.runtime.enabled = true;
        spec.runtime.categories.clear();
        std::vector<std::string> cats =
            events.is_none() ? std::vector<std::string>{"exec", "net", "file"} : strings(events);
        for (const auto &c : cats) {
            if (c == "exec") {
                spec.runtime.categories.insert(EventCategory::Exec);
            } else if (c == "net") {
                spec.runtime.categories.insert(EventCategory::Net);
            } else if (c == "file") {
                spec.runtime.categories.insert(EventCategory::File);
            } else {
                throw ValidationError("unknown event category '" + c + "'");
            }
        }
        sb.policy_fn = hold(policy_fn);
    }
    validate(spec);
    return sb;
}

struct PyStage {
    PySandbox sandbox;
    std::vector<std::string> cmd;

    Stage to_stage() const
    {
        HookCallback cb;
        // The held object keeps the Python callable alive for the run.
        if (sandbox.policy_fn) cb = wrap_callback(*sandbox.policy_fn);
        return Stage{sandbox.spec, cmd, cb};
    }
};

struct PyPipeline {
    std::vector<PyStage> stages;
};

struct PyStageResult {
    int returncode = 0;
    std::vector<AuditRecord> audits;
    std::optional<EffectSummary> effects;
};

struct PyResult {
    int returncode = 0;
    py::bytes stdout_data;
    py::bytes stderr_data;
    bool timed_out = false;
    std::vector<PyStageResult> stages;
    std::vector<AuditRecord> audits;
    std::optional<EffectSummary> effects;
};

std::optional<std::chrono::milliseconds> timeout_from(const std::optional<double> &seconds)
{
    if (!seconds) return std::nullopt;
    return std::chrono::milliseconds(static_cast<std::int64_t>(*seconds * 1000));
}

PyResult run_single(const PyStage &stage, const std::optional<std::string> &input,
                    const std::optional<double> &timeout)
{
    RunResult r;
    {
        Stage s = stage.to_stage();
        py::gil_scoped_release release;
        RunOptions o;
        o.stdio[0] = input ? StdioSpec::pipe() : StdioSpec::null();
        o.stdio[1] = StdioSpec::pipe();
        o.stdio[2] = StdioSpec::pipe();
        if (input) o.input = *input;
        o.policy_fn = s.policy_fn;
        o.timeout = timeout_from(timeout);
        r = Sandbox(s.spec).run(s.cmd, std::move(o));
    }
    PyResult out;
    out.returncode = r.status.shell_code();
    out.stdout_data = py::bytes(r.stdout_data);
    out.stderr_data = py::bytes(r.stderr_data);
    out.timed_out = r.timed_out;
    out.audits = r.audits;
    out.effects = r.effects;
    out.stages.push_back(PyStageResult{out.returncode, r.audits, r.effects});
    return out;
}

PyResult run_many(const PyPipeline &p, const std::optional<std::string> &input,
                  const std::optional<double> &timeout)
{
    std::vector<Stage> stages;
    for (const auto &s : p.stages) stages.push_back(s.to_stage());
    PipelineResult r;
    {
        py::gil_scoped_release release;
        PipelineOptions o;
        o.input = input;
        o.timeout = timeout_from(timeout);
        o.stderr_spec = StdioSpec::null();
        r = run_pipeline(stages, o);
    }
    PyResult out;
    out.stdout_data = py::bytes(r.stdout_data);
    for (const auto &s : r.stages) {
        out.stages.push_back(PyStageResult{s.status.shell_code(), s.audits, s.effects});
        out.audits.insert(out.audits.end(), s.audits.begin(), s.audits.end());
    }
    out.returncode = out.stages.empty() ? 0 : out.stages.back().returncode;
    for (const auto &s : out.stages) {
        if (s.returncode != 0) out.returncode = s.returncode;
    }
    out.effects = r.stages.empty() ? std::nullopt : r.stages.back().effects;
    return out;
}

} // namespace

PYBIND11_MODULE(_lockbox, m)
{
    m.attr("EVENT_SCHEMA_VERSION") = kEventSchemaVersion;

    static py::exception<Error> error(m, "Error");
    static py::exception<ValidationError> validation(m, "ValidationError", error.ptr());
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ValidationError &e) {
            py::set_error(validation, e.what());
        } catch (const Error &e) {
            py::set_error(error, e.what());
        }
    });

    py::class_<BoundEvent>(m, "Event")
        .def_readonly("syscall", &BoundEvent::syscall)
        .def_readonly("category", &BoundEvent::category)
        .def_readonly("pid", &BoundEvent::pid)
        .def_readonly("ppid", &BoundEvent::ppid)
        .def_readonly("argv", &BoundEvent::argv)
        .def_readonly("net_protocol", &BoundEvent::net_protocol)
        .def_readonly("net_host", &BoundEvent::net_host)
        .def_readonly("net_port", &BoundEvent::net_port)
        .def("argv_contains", &BoundEvent::argv_contains)
        .def("__repr__", [](const BoundEvent &e) {
            return "<Event " + e.syscall + " " + e.category + " pid=" + std::to_string(e.pid) + ">";
        });

    py::class_<BoundContext, std::shared_ptr<BoundContext>>(m, "Context")
        .def("restrict_network",
             [](BoundContext &c, const py::list &endpoints) {
                 std::vector<EndpointRule> rules;
                 for (auto item : endpoints) rules.push_back(endpoint_from(item));
                 c.get().restrict_network(rules);
             })
        .def("deny_path", [](BoundContext &c, const std::string &path) { c.get().deny_path(path); })
        .def("tighten_resources", [](BoundContext &c, const py::kwargs &kw) {
            c.get().tighten_resources(limits_from(kw));
        });

    py::class_<AuditRecord>(m, "Audit")
        .def_readonly("ts_ms", &AuditRecord::ts_ms)
        .def_readonly("pid", &AuditRecord::pid)
        .def_readonly("kind", &AuditRecord::kind)
        .def_readonly("method", &AuditRecord::method)
        .def_readonly("host", &AuditRecord::host)
        .def_readonly("path", &AuditRecord::path)
        .def_readonly("decision", &AuditRecord::decision)
        .def_readonly("argv", &AuditRecord::argv)
        .def("__repr__", [](const AuditRecord &a) { return a.to_json(); });

    py::class_<EffectSummary>(m, "Effects")
        .def_readonly("created", &EffectSummary::created)
        .def_readonly("modified", &EffectSummary::modified)
        .def_readonly("deleted", &EffectSummary::deleted)
        .def_readonly("bytes_written", &EffectSummary::bytes_written)
        .def_readonly("kept_at", &EffectSummary::kept_at);

    py::class_<PyStageResult>(m, "StageResult")
        .def_readonly("returncode", &PyStageResult::returncode)
        .def_readonly("audits", &PyStageResult::audits)
        .def_readonly("effects", &PyStageResult::effects);

    py::class_<PyResult>(m, "Result")
        .def_readonly("returncode", &PyResult::returncode)
        .def_readonly("stdout", &PyResult::stdout_data)
        .def_readonly("stderr", &PyResult::stderr_data)
        .def_readonly("timed_out", &PyResult::timed_out)
        .def_readonly("stages", &PyResult::stages)
        .def_readonly("audits", &PyResult::audits)
        .def_readonly("effects", &PyResult::effects)
        .def_property_readonly("success", [](const PyResult &r) { return r.returncode == 0; });

    py::class_<PySandbox>(m, "Sandbox")
        .def(py::init(&make_sandbox), py::kw_only(), py::arg("fs_readable") = py::none(),
             py::arg("fs_writable") = py::none(), py::arg("fs_denied") = py::none(),
             py::arg("net") = py::none(), py::arg("http") = py::none(), py::arg("limits") = py::none(),
             py::arg("policy_fn") = py::none(), py::arg("events") = py::none(),
             py::arg("workspace") = py::none(), py::arg("on_exit") = "abort",
             py::arg("cwd") = py::none())
        .def("cmd", [](const PySandbox &s, std::vector<std::string> argv) {
            if (argv.empty()) throw ValidationError("cmd needs at least one argument");
            return PyStage{s, std::move(argv)};
        })
        .def("to_json", [](const PySandbox &s) { return spec_to_json(s.spec); });

    py::class_<PyPipeline>(m, "Pipeline")
        .def_property_readonly("stages", [](const PyPipeline &p) { return p.stages; })
        .def("__or__",
             [](const PyPipeline &p, const PyStage &s) {
                 PyPipeline out = p;
                 out.stages.push_back(s);
                 return out;
             })
        .def("run", &run_many, py::kw_only(), py::arg("input") = py::none(), py::arg("timeout") = py::none());

    py::class_<PyStage>(m, "Stage")
        .def_readonly("cmd", &PyStage::cmd)
        .def("__or__", [](const PyStage &a, const PyStage &b) { return PyPipeline{{a, b}}; })
        .def("__or__",
             [](const PyStage &a, const PyPipeline &b) {
                 PyPipeline out{{a}};
                 out.stages.insert(out.stages.end(), b.stages.begin(), b.stages.end());
                 return out;
             })
        .def("run", &run_single, py::kw_only(), py::arg("input") = py::none(), py::arg("timeout") = py::none());

    m.def("check_kernel", [] { return check_kernel().lines(); });
}
