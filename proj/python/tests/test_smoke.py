import os
import socket
import tempfile
import threading

import pytest

import lockbox
from lockbox import Sandbox

PROBE = os.environ.get("LOCKBOX_PROBE", "")
BASE = ["/usr", "/lib"]


def on_event(event, ctx):
    if event.syscall == "execve":
        # argv is an observation signal, not a boundary
        if event.argv_contains("curl"):
            return "audit"  # flag; name matching is evadable
        ctx.restrict_network([])  # real control: revoke network
        ctx.deny_path("/etc/shadow")  # and tighten fs scope
    if event.category == "file":
        return "audit"  # allow + flag
    return 0  # allow


@pytest.fixture
def listener():
    srv = socket.socket()
    srv.bind(("127.0.0.1", 0))
    srv.listen(16)
    stop = threading.Event()

    def loop():
        while not stop.is_set():
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            conn.close()

    t = threading.Thread(target=loop, daemon=True)
    t.start()
    yield srv.getsockname()[1]
    stop.set()
    srv.shutdown(socket.SHUT_RDWR)
    srv.close()


@pytest.fixture
def opt_data():
    path = "/opt/data/secret.csv"
    created = not os.path.exists(path)
    if created:
        os.makedirs("/opt/data", exist_ok=True)
        with open(path, "w") as f:
            f.write("name,amount\nalice,10\nbob,20\n")
    with open(path) as f:
        content = f.read()
    yield content
    if created:
        os.unlink(path)


def probe_dirs():
    return [os.path.dirname(PROBE)]


def test_exports():
    for name in ["Sandbox", "Stage", "Pipeline", "Event", "Context"]:
        assert hasattr(lockbox, name)
    assert lockbox.EVENT_SCHEMA_VERSION == 1


def test_true_runs():
    r = Sandbox(fs_readable=BASE).cmd(["/bin/true"]).run()
    assert r.returncode == 0
    assert r.success


def test_validation_errors_raise():
    with pytest.raises(lockbox.ValidationError):
        Sandbox(fs_readable=BASE, limits={"max_processes": 0})
    with pytest.raises(lockbox.ValidationError):
        Sandbox(http=["GET onlyhost"])


def test_figure2_curl_exec_is_flagged():
    with tempfile.TemporaryDirectory() as d:
        curl = os.path.join(d, "curl")
        os.symlink("/bin/true", curl)
        sb = Sandbox(fs_readable=BASE + [d], policy_fn=on_event)
        r = sb.cmd([curl, "https://example.com"]).run()
        assert r.returncode == 0
        execs = [a for a in r.audits if a.kind == "exec"]
        assert len(execs) == 1
        assert execs[0].decision == "audit"
        assert execs[0].argv[0] == curl


def test_figure2_network_revoked(listener):
    args = [PROBE, "connect", "127.0.0.1", str(listener)]
    net = ["tcp:127.0.0.1:%d" % listener]
    plain = Sandbox(fs_readable=BASE + probe_dirs(), net=net).cmd(args).run()
    assert plain.stdout.decode().strip() == "OK"
    hooked = Sandbox(fs_readable=BASE + probe_dirs(), net=net, policy_fn=on_event).cmd(args).run()
    assert hooked.stdout.decode().strip() == "ECONNREFUSED"


def test_figure2_shadow_denied():
    args = [PROBE, "read", "/etc/shadow"]
    plain = Sandbox(fs_readable=BASE + ["/etc"] + probe_dirs()).cmd(args).run()
    assert plain.stdout.decode().strip() == "OK"
    hooked = Sandbox(fs_readable=BASE + ["/etc"] + probe_dirs(), policy_fn=on_event).cmd(args).run()
    assert hooked.stdout.decode().strip() == "EACCES"


def test_figure3_pipeline(opt_data):
    trusted = Sandbox(
        fs_readable=["/usr", "/lib", "/opt/data"])
    restricted = Sandbox(
        fs_readable=["/usr", "/lib"])  # no /opt/data
    result = (
        trusted.cmd(["cat", "/opt/data/secret.csv"])
      | restricted.cmd(["tr", "a-z", "A-Z"])
    ).run()
    assert result.stdout.decode() == opt_data.upper()
    assert [s.returncode for s in result.stages] == [0, 0]

    direct = restricted.cmd(["cat", "/opt/data/secret.csv"]).run()
    assert direct.returncode != 0
    assert b"Permission denied" in direct.stderr


def test_callback_verdicts():
    def deny_all(event, ctx):
        return True

    with pytest.raises(lockbox.Error):
        Sandbox(fs_readable=BASE, policy_fn=deny_all, events=["exec"]).cmd(["/bin/true"]).run()

    def broken(event, ctx):
        raise RuntimeError("boom")

    with pytest.raises(lockbox.Error):
        Sandbox(fs_readable=BASE, policy_fn=broken, events=["exec"]).cmd(["/bin/true"]).run()

    seen = []

    def record(event, ctx):
        seen.append((event.syscall, event.category, event.pid > 0, list(event.argv)))
        return 0

    r = Sandbox(fs_readable=BASE, policy_fn=record, events=["exec"]).cmd(["/bin/echo", "hi"]).run()
    assert r.stdout == b"hi\n"
    assert seen == [("execve", "exec", True, ["/bin/echo", "hi"])]


def test_three_stage_pipeline_and_input():
    sb = Sandbox(fs_readable=BASE)
    p = sb.cmd(["cat"]) | sb.cmd(["sort"]) | sb.cmd(["head", "-n", "2"])
    assert isinstance(p, lockbox.Pipeline)
    r = p.run(input="c\na\nb\n")
    assert r.stdout == b"a\nb\n"
