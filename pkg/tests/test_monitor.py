from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bienclave import syscalls
from bienclave.accounting import AccountingLog, verify_jsonl
from bienclave.errors import (
    ChainBroken,
    DeniedByDefault,
    DeniedByRule,
    EnclaveTerminated,
    IagoViolation,
    NoChannel,
    NoPolicyLoaded,
    ParseError,
    PolicyDigestMismatch,
)
from bienclave.fixture import CPU, build_fixture, fixture_policy, read_data
from bienclave.kernel import KernelResult, SimKernel
from bienclave.monitor import (
    Monitor,
    SealedLog,
    SyscallRequest,
    Verdict,
    syscall,
)
from bienclave.policy import Action, ListKind, Rule, load_policy, render

from strategies import policies

SAMPLE = read_data("sample.policy")


@pytest.fixture
def sample_fx():
    return build_fixture(policy=SAMPLE)


def _req(fx, who, sysno, **args):
    return SyscallRequest(fx.ids[who], sysno, args)


# --- policy parsing -------------------------------------------------------

def test_sample_listing_parses():
    p = load_policy(SAMPLE)
    assert p.actions == {0: Action.ALLOW, 1: Action.NOTIFY, 2: Action.LOG,
                         42: Action.KILL, 43: Action.TRAP}
    assert [(r.kind, r.sysno) for r in p.rules] == [
        (ListKind.BLACKLIST, 0), (ListKind.WHITELIST, 2), (ListKind.BLACKLIST, 43)]
    assert p.rules[0].pattern == "/path/to/top/secret*"


@pytest.mark.parametrize("text, line", [
    (b"7 4\n", 1),
    (b"SYS_NUM ACTION\n0 0\nBLACKLIST 43 \"112.233.0.0/33\"\n", 3),
    (b"0 0\nBLACKLIST 0 \"/unterminated\n", 2),
    (b"0 0\n0 1\n", 2),
    (b"BLACKLIST 0 \"/a/[b\"\n", 1),
    (b"BLACKLIST 0 \"/a/**\"\n", 1),
    (b"GREYLIST 0 \"/a\"\n", 1),
    (b"\xff\xfe", 0),
])
def test_parse_errors(text, line):
    with pytest.raises(ParseError) as info:
        load_policy(text)
    assert info.value.line == line


def test_empty_policy_has_no_entries():
    p = load_policy(b"")
    assert p.actions == {} and p.rules == []


def test_comments_and_digest():
    a = load_policy(b"0 0 // read\n")
    b = load_policy(b"0 0 // something else\n")
    assert a == b
    assert a.digest != b.digest
    assert len(a.digest) == 32


def test_render_of_sample_is_stable():
    p = load_policy(SAMPLE)
    text = render(p)
    assert load_policy(text.encode()) == p
    assert render(load_policy(text.encode())) == text


@settings(max_examples=300, deadline=None)
@given(policies())
def test_policy_round_trip(policy):
    assert load_policy(render(policy).encode()) == policy


@pytest.mark.parametrize("pattern, value, expected", [
    ("/path/to/top/secret*", "/path/to/top/secret", True),
    ("/path/to/top/secret*", "/path/to/top/secret/key", True),
    ("/path/to/top/secret*", "/path/to/top/secre", False),
    ("/path/to/no/secret/[a-z_\\-\\s0-9\\.]", "/path/to/no/secret/abc.txt", True),
    ("/path/to/no/secret/[a-z_\\-\\s0-9\\.]", "/path/to/no/secret/a b-c_1.txt", True),
    ("/path/to/no/secret/[a-z_\\-\\s0-9\\.]", "/path/to/no/secret/ABC", False),
    ("/path/to/no/secret/[a-z_\\-\\s0-9\\.]", "/path/to/no/secret/sub/x", False),
    ("/path/to/no/secret/[a-z_\\-\\s0-9\\.]", "/path/to/no/secret/", False),
])
def test_glob_dialect(pattern, value, expected):
    assert Rule(ListKind.BLACKLIST, 0, pattern).matches(value) is expected


# --- digest queries -------------------------------------------------------

def test_digest_query_paths(sample_fx):
    mon = sample_fx.monitor
    os_view = mon.query_digest()
    assert os_view == mon.query_digest(sample_fx.a) == load_policy(SAMPLE).digest
    assert mon.confirm_digest(sample_fx.a, os_view) == os_view
    with pytest.raises(PolicyDigestMismatch):
        mon.confirm_digest(sample_fx.a, bytes(32))
    with pytest.raises(NoChannel):
        mon.query_digest(sample_fx.mon)


def test_query_before_load():
    fx = build_fixture()
    mon = Monitor(fx.m, fx.mon)
    with pytest.raises(NoPolicyLoaded):
        mon.query_digest()


# --- filtering ------------------------------------------------------------

def test_filter_examples(sample_fx):
    mon = sample_fx.monitor
    assert mon.filter_syscall(_req(sample_fx, "A", 0, path="/tmp/a")) is Verdict.EXECUTE
    with pytest.raises(DeniedByRule) as info:
        mon.filter_syscall(_req(sample_fx, "A", 0, path="/path/to/top/secret/key"))
    assert info.value.index == 0
    assert mon.filter_syscall(_req(sample_fx, "A", 42, addr="8.8.8.8:53")) is Verdict.KILL
    with pytest.raises(DeniedByRule) as info:
        mon.filter_syscall(_req(sample_fx, "A", 43, addr="112.233.9.9:4000"))
    assert info.value.index == 2
    assert mon.filter_syscall(
        _req(sample_fx, "A", 2, path="/path/to/no/secret/abc.txt")) is Verdict.EXECUTE_LOG


def test_whitelist_miss_and_default_deny(sample_fx):
    mon = sample_fx.monitor
    with pytest.raises(DeniedByRule) as info:
        mon.filter_syscall(_req(sample_fx, "A", 2, path="/etc/passwd"))
    assert info.value.index == 1 and info.value.whitelist_miss
    with pytest.raises(DeniedByDefault):
        mon.filter_syscall(_req(sample_fx, "A", 9))
    mon.load_policy(b"")
    with pytest.raises(DeniedByDefault):
        mon.filter_syscall(_req(sample_fx, "A", 0, path="/tmp/a"))


def test_connect_kills_and_terminates(sample_fx):
    fx = sample_fx
    out = syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], syscalls.CONNECT, addr="8.8.8.8:53")
    assert out.verdict is Verdict.KILL and not out.executed
    assert fx.kernel.terminated == [fx.a]
    assert {"event": "terminate", "origin": fx.a, "sysno": 42} in fx.monitor.events
    assert not fx.m.enclaves[fx.a].alive
    with pytest.raises(EnclaveTerminated):
        fx.monitor.handle(_req(fx, "A", 0, path="/tmp/a"))
    assert fx.kernel.executed == []


def test_notify_and_log_and_trap(sample_fx):
    fx = sample_fx
    fx.kernel.files["/path/to/no/secret/abc.txt"] = b"abc"
    h = syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], 2, path="/path/to/no/secret/abc.txt").value
    out = syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], 1, fd=h, len=3, data=b"xyz")
    assert out.verdict is Verdict.EXECUTE_NOTIFY
    assert fx.kernel.notifications[0]["sysno"] == 1
    records = SealedLog.open_export(fx.monitor.sealing_key, fx.monitor.sealed_log.export_jsonl())
    assert records[0]["args"]["path"] == "/path/to/no/secret/abc.txt"
    out = syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], 43, addr="10.0.0.1:5000")
    assert out.verdict is Verdict.TRAP
    assert fx.monitor.provider_messages == [{"origin": fx.a, "sysno": 43}]


def test_trap_hook_can_refuse():
    fx = build_fixture(policy=SAMPLE)
    fx.monitor.trap_hook = lambda mon, req: False
    out = fx.monitor.handle(_req(fx, "A", 43, addr="10.0.0.1:5000"))
    assert out.verdict is Verdict.TRAP and not out.executed
    assert fx.kernel.executed == []


# --- return validation ----------------------------------------------------

def _opened(fx, name="A", path="/path/to/no/secret/f"):
    fx.kernel.files[path] = bytes(4096)
    return fx.monitor.handle(_req(fx, name, 2, path=path)).value


def test_read_in_range(fx):
    h = _opened(fx)
    out = fx.monitor.handle(_req(fx, "A", 0, fd=h, len=100))
    assert out.value == 100 and len(out.data) == 100


def test_read_range_oracle(fx):
    h = _opened(fx)
    length = 100
    for ret in range(-2, length + 3):
        req = _req(fx, "A", 0, fd=h, len=length)
        raw = KernelResult(ret, bytes(max(ret, 0)))
        expected_ok = -1 <= ret <= length
        try:
            fx.monitor.validate_return(req, raw)
            ok = True
        except IagoViolation as exc:
            assert exc.kind == "RangeViolation"
            ok = False
        assert ok is expected_ok, ret


def test_forged_read_length_is_suppressed(fx):
    h = _opened(fx)
    fx.kernel.forge(0, 150)
    with pytest.raises(IagoViolation) as info:
        fx.monitor.handle(_req(fx, "A", 0, fd=h, len=100))
    assert info.value.kind == "RangeViolation"
    assert fx.monitor.events[-1]["event"] == "iago"
    assert len(fx.monitor.accounting) == 0


def test_closed_descriptor_reuse(fx):
    h = _opened(fx)
    kfd = fx.monitor.fd_tables[fx.a].get(h).kernel_fd
    assert fx.monitor.handle(_req(fx, "A", 3, fd=h)).value == 0
    fx.kernel.forge(2, kfd)
    with pytest.raises(IagoViolation) as info:
        fx.monitor.handle(_req(fx, "A", 2, path="/path/to/no/secret/f"))
    assert info.value.kind == "UnknownDescriptor"
    with pytest.raises(IagoViolation):
        fx.monitor.handle(_req(fx, "A", 0, fd=h, len=1))


def test_handles_are_not_valid_across_enclaves(fx):
    h = _opened(fx, "A")
    with pytest.raises(IagoViolation) as info:
        fx.monitor.handle(_req(fx, "B", 0, fd=h, len=1))
    assert info.value.kind == "UnknownDescriptor"
    hb = _opened(fx, "B", "/path/to/no/secret/g")
    assert hb != h


@pytest.mark.parametrize("uaddr, ok", [(3, False), (19, False), (28, False), (40, False),
                                       (17, True), (None, False)])
def test_futex_address_must_be_private(fx, uaddr, ok):
    args = {"op": 0} if uaddr is None else {"uaddr": uaddr, "op": 0}
    if uaddr == 28:
        from bienclave import isa
        isa.esadd(fx.m, CPU["A"], fx.pa("A", "spare"), fx.b)  # pending share
    req = SyscallRequest(fx.a, syscalls.FUTEX, args)
    if ok:
        assert fx.monitor.handle(req).executed
    else:
        with pytest.raises(IagoViolation) as info:
            fx.monitor.handle(req)
        assert info.value.kind == "SharedSyncObject"


def test_semaphore_and_mmap_returns(fx):
    out = fx.monitor.handle(_req(fx, "A", syscalls.SEM_OPEN, name="s", addr=18))
    assert fx.monitor.fd_tables[fx.a].get(out.value).kind == "sem"
    fx.kernel.forge(syscalls.SEM_OPEN, 3)
    with pytest.raises(IagoViolation) as info:
        fx.monitor.handle(_req(fx, "A", syscalls.SEM_OPEN, name="s", addr=18))
    assert info.value.kind == "SharedSyncObject"
    out = fx.monitor.handle(_req(fx, "A", syscalls.MMAP, pages=2))
    rec = fx.monitor.fd_tables[fx.a].get(out.value)
    assert rec.kind == "map" and out.value != rec.kernel_fd
    fx.kernel.forge(syscalls.MMAP, 15)
    with pytest.raises(IagoViolation) as info:
        fx.monitor.handle(_req(fx, "A", syscalls.MMAP, pages=2))
    assert info.value.kind == "RawPointerLeak"


# --- accounting -----------------------------------------------------------

def test_three_reads_accounted(fx):
    h = _opened(fx)
    for _ in range(3):
        syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], 0, fd=h, len=1024)
    log = fx.monitor.accounting
    assert len(log) == 3
    assert log.totals()["file_read"] == 3072
    log.verify_chain()


def test_flipped_entry_breaks_chain():
    log = AccountingLog()
    for _ in range(3):
        log.append(1, 0, file_read=1024)
    blob = bytearray(log.to_jsonl())
    start = blob.index(b"\n") + 1
    pos = blob.index(b'"file_read":1024', start) + len('"file_read":1')
    blob[pos] ^= 0x01
    with pytest.raises(ChainBroken) as info:
        verify_jsonl(bytes(blob))
    assert info.value.index == 1


@settings(max_examples=200, deadline=None)
@given(n=st.integers(1, 12), data=st.data())
def test_any_bit_flip_detected(n, data):
    log = AccountingLog()
    for i in range(n):
        log.append(i % 3, i % 2, file_read=i * 7, net_out=i)
    blob = bytearray(log.to_jsonl())
    bit = data.draw(st.integers(0, len(blob) * 8 - 1))
    blob[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(ChainBroken):
        verify_jsonl(bytes(blob))


def test_log_export_round_trip():
    log = AccountingLog()
    log.append(1, 0, file_read=5)
    log.append(2, 44, net_out=9)
    again = AccountingLog.from_jsonl(log.to_jsonl())
    assert [e.to_dict() for e in again] == [e.to_dict() for e in log]
    assert again.summary()["per_enclave"] == {"1": {"file_read": 5, "file_written": 0,
                                                   "net_in": 0, "net_out": 0},
                                              "2": {"file_read": 0, "file_written": 0,
                                                    "net_in": 0, "net_out": 9}}
    with pytest.raises(ValueError):
        log.append(1, 0, cpu_time=3)


# --- pipeline invariants ----------------------------------------------------

def test_every_kernel_effect_has_one_execute_verdict(fx):
    fx.kernel.files["/path/to/no/secret/a.txt"] = b"a" * 50
    h = syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], 2, path="/path/to/no/secret/a.txt").value
    calls = [(0, {"fd": h, "len": 10}), (0, {"path": "/path/to/top/secret/x", "len": 1}),
             (9, {"pages": 1}), (1, {"fd": h, "len": 4, "data": b"abcd"}), (999, {}),
             (202, {"uaddr": 17, "op": 0})]
    for sysno, args in calls:
        try:
            syscall(fx.m, fx.monitor, CPU["A"], CPU["M"], sysno, **args)
        except Exception:
            pass
    executed = [(v["origin"], v["sysno"]) for v in fx.monitor.verdicts
                if v["verdict"] not in ("Kill",)]
    assert fx.kernel.executed == executed


def test_request_serialization_round_trip():
    req = SyscallRequest(4, 1, {"fd": 2, "data": b"\x00\xff", "path": "/x"})
    assert SyscallRequest.from_dict(json.loads(json.dumps(req.to_dict()))) == req
    assert SyscallRequest.from_dict(req.to_dict()).args == req.args


def test_events_jsonl_is_sorted_json(sample_fx):
    with pytest.raises(DeniedByRule):
        sample_fx.monitor.handle(_req(sample_fx, "A", 0, path="/path/to/top/secret"))
    line = sample_fx.monitor.events_jsonl().decode().strip()
    assert json.loads(line)["event"] == "deny"


def test_unregistered_origin_has_no_channel():
    kernel = SimKernel()
    fx = build_fixture(kernel=kernel)
    mon = Monitor(fx.m, fx.mon, kernel)
    mon.load_policy(fixture_policy())
    with pytest.raises(NoChannel):
        mon.filter_syscall(_req(fx, "A", 0, path="/tmp/a"))
