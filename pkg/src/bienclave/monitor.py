"""Monitor enclave software: policy, syscall filtering, Iago checks, accounting.

Bi-enclaves have no way to reach the OS directly, so every system call
arrives here over an attested channel. The monitor filters it against the
policy, forwards it to the simulated kernel, validates what comes back and
records resource usage in a hash chain.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from . import syscalls
from .accounting import AccountingLog, LogEntry
from .channel import (
    FRAME_CAPACITY,
    CallDescriptor,
    Channel,
    Direction,
    Param,
    ParamType,
    Phase,
    channel_call,
)
from .errors import (
    DeniedByDefault,
    DeniedByRule,
    EnclaveTerminated,
    IagoViolation,
    MonitorError,
    NoChannel,
    NoPolicyLoaded,
    PolicyDigestMismatch,
    SimError,
)
from .isa import eremove_enclave
from .kernel import KernelResult, SimKernel
from .machine import Machine
from .policy import Action, ListKind, Policy, load_policy

OS = "OS"


class Verdict(enum.Enum):
    EXECUTE = "Execute"
    EXECUTE_LOG = "Execute+Log"
    EXECUTE_NOTIFY = "Execute+Notify"
    TRAP = "Trap"
    KILL = "Kill"


ACTION_VERDICT = {
    Action.ALLOW: Verdict.EXECUTE,
    Action.LOG: Verdict.EXECUTE_LOG,
    Action.NOTIFY: Verdict.EXECUTE_NOTIFY,
    Action.TRAP: Verdict.TRAP,
    Action.KILL: Verdict.KILL,
}

# arguments that name a descriptor handle
_FD_ARG = "fd"


@dataclass(frozen=True)
class SyscallRequest:
    origin: int
    sysno: int
    args: dict = field(default_factory=dict, hash=False)

    def to_dict(self) -> dict:
        args = {k: ({"b64": base64.b64encode(v).decode()} if isinstance(v, bytes) else v)
                for k, v in self.args.items()}
        return {"origin": self.origin, "sysno": self.sysno, "args": args}

    @classmethod
    def from_dict(cls, doc: dict) -> "SyscallRequest":
        args = {k: (base64.b64decode(v["b64"]) if isinstance(v, dict) else v)
                for k, v in doc.get("args", {}).items()}
        return cls(int(doc["origin"]), int(doc["sysno"]), args)


@dataclass(frozen=True)
class CheckedReturn:
    value: int
    data: bytes = b""


@dataclass(frozen=True)
class SyscallOutcome:
    verdict: Verdict
    executed: bool
    value: Optional[int] = None
    data: bytes = b""


@dataclass
class FdRecord:
    handle: int
    kernel_fd: int
    kind: str  # file, socket, map or sem
    resource: str


@dataclass
class FdTable:
    owner: int
    entries: dict = field(default_factory=dict)

    def get(self, handle) -> Optional[FdRecord]:
        return self.entries.get(handle)

    def add(self, rec: FdRecord) -> None:
        self.entries[rec.handle] = rec

    def remove(self, handle: int) -> None:
        self.entries.pop(handle, None)

    def to_dict(self) -> dict:
        return {str(h): {"kernel_fd": r.kernel_fd, "kind": r.kind, "resource": r.resource}
                for h, r in sorted(self.entries.items())}


class SealedLog:
    """LOG-action sink: AES-GCM records under the monitor's sealing key."""

    def __init__(self, key: bytes):
        self._aead = AESGCM(key)
        self.records: list[bytes] = []

    def append(self, record: dict) -> None:
        seq = len(self.records)
        plain = json.dumps(record, sort_keys=True, separators=(",", ":")).encode()
        self.records.append(self._aead.encrypt(seq.to_bytes(12, "little"), plain, None))

    def export_jsonl(self) -> bytes:
        return b"".join(json.dumps({"seq": i, "ct": ct.hex()}).encode() + b"\n"
                        for i, ct in enumerate(self.records))

    @staticmethod
    def open_export(key: bytes, blob: bytes) -> list:
        aead = AESGCM(key)
        out = []
        for line in blob.splitlines():
            doc = json.loads(line)
            plain = aead.decrypt(doc["seq"].to_bytes(12, "little"), bytes.fromhex(doc["ct"]), None)
            out.append(json.loads(plain))
        return out


def sealing_key(mrenclave: bytes) -> bytes:
    return hashlib.sha256(b"seal:" + mrenclave).digest()[:16]


def _host(addr: Optional[str]) -> Optional[str]:
    if addr is None:
        return None
    return addr.rsplit(":", 1)[0] if addr.count(":") == 1 else addr


class Monitor:
    def __init__(self, m: Machine, enclave_id: int, kernel: Optional[SimKernel] = None, *,
                 trap_hook: Optional[Callable[["Monitor", SyscallRequest], bool]] = None):
        self.m = m
        self.enclave_id = enclave_id
        self.kernel = kernel if kernel is not None else SimKernel()
        self.policy: Optional[Policy] = None
        self.channels: dict[int, Channel] = {}
        self.fd_tables: dict[int, FdTable] = {}
        self.terminated: set = set()
        self.events: list[dict] = []
        self.verdicts: list[dict] = []
        self.provider_messages: list[dict] = []
        self.accounting = AccountingLog()
        self.sealing_key = sealing_key(m.enclaves[enclave_id].mrenclave)
        self.sealed_log = SealedLog(self.sealing_key)
        self.trap_hook = trap_hook or Monitor.default_trap_hook
        self._next_handle = 1
        self._seen_kernel_fds: set = set()
        self._doomed: list = []

    # --- setup ---------------------------------------------------------------

    def load_policy(self, data: bytes) -> Policy:
        self.policy = load_policy(data)
        return self.policy

    def register(self, ch: Channel) -> int:
        """Accept an attested channel from a bi-enclave; returns its id."""
        if ch.phase is not Phase.ATTESTED:
            raise NoChannel(f"channel is {ch.phase.value}, not Attested")
        origin = ch.peer_of(self.enclave_id)
        self.channels[origin] = ch
        self.fd_tables.setdefault(origin, FdTable(origin))
        return origin

    def query_digest(self, requester=OS) -> bytes:
        """Policy digest; the OS uses the upcall path, bi-enclaves their channel."""
        if requester != OS:
            ch = self.channels.get(requester)
            if ch is None or ch.phase is not Phase.ATTESTED:
                raise NoChannel(f"bi-enclave {requester} has no attested channel")
        if self.policy is None:
            raise NoPolicyLoaded("no policy loaded")
        return self.policy.digest

    def confirm_digest(self, requester: int, expected: bytes) -> bytes:
        """The bi-enclave side check: refuse service unless the digests agree."""
        digest = self.query_digest(requester)
        if digest != expected:
            raise PolicyDigestMismatch(
                f"monitor policy {digest.hex()[:16]} != expected {expected.hex()[:16]}")
        return digest

    # --- filtering -----------------------------------------------------------

    def _table(self, origin: int) -> FdTable:
        return self.fd_tables.setdefault(origin, FdTable(origin))

    def _record_for(self, req: SyscallRequest) -> Optional[FdRecord]:
        if _FD_ARG not in req.args:
            return None
        rec = self._table(req.origin).get(req.args[_FD_ARG])
        if rec is None:
            raise IagoViolation("UnknownDescriptor",
                                f"handle {req.args[_FD_ARG]} was not issued to {req.origin}")
        return rec

    def match_value(self, req: SyscallRequest) -> Optional[str]:
        """The argument a rule for this syscall is matched against."""
        rec = self._record_for(req)
        if req.sysno in syscalls.NETWORK:
            addr = req.args.get("addr")
            if addr is None and rec is not None:
                addr = rec.resource
            return _host(addr)
        if rec is not None:
            return rec.resource
        return req.args.get("path")

    def _check_origin(self, req: SyscallRequest) -> None:
        if req.origin in self.terminated:
            raise EnclaveTerminated(f"bi-enclave {req.origin} was terminated")
        ch = self.channels.get(req.origin)
        if ch is None or ch.phase is not Phase.ATTESTED:
            raise NoChannel(f"bi-enclave {req.origin} has no attested channel")
        if self.policy is None:
            raise NoPolicyLoaded("no policy loaded")

    def filter_syscall(self, req: SyscallRequest) -> Verdict:
        """Rules first (file order, first match wins), then the action table."""
        self._check_origin(req)
        policy = self.policy
        value = self.match_value(req)
        rules = policy.rules_for(req.sysno)
        for index, rule in rules:
            if rule.matches(value):
                if rule.kind is ListKind.BLACKLIST:
                    raise DeniedByRule(index)
                break
        else:
            whitelist = [i for i, r in rules if r.kind is ListKind.WHITELIST]
            if whitelist:
                raise DeniedByRule(whitelist[0], whitelist_miss=True)
        action = policy.actions.get(req.sysno)
        if action is None:
            raise DeniedByDefault(req.sysno)
        return ACTION_VERDICT[action]

    # --- return validation ---------------------------------------------------

    def _private_page(self, origin: int, va: int) -> bool:
        """True if ``va`` is backed by an EPC page only ``origin`` can reach."""
        secs = self.m.enclaves[origin]
        if not secs.in_elrange(va):
            return False
        for pa in secs.pages:
            entry = self.m.epcm_entry(pa)
            if entry.valid and entry.mapped_va == va:
                return not entry.co_owned and pa not in self._pending_pages()
        return False

    def _pending_pages(self) -> set:
        return {r.page for r in self.m.share_requests.values()}

    def _overlaps_enclave(self, origin: int, va: int, pages: int) -> bool:
        pid = self.m.enclaves[origin].pid
        for secs in self.m.enclaves.values():
            if secs.alive and secs.pid == pid:
                lo, hi = secs.elrange_base, secs.elrange_base + secs.elrange_len
                if va < hi and lo < va + pages:
                    return True
        return False

    def _issue(self, origin: int, kernel_fd: int, kind: str, resource: str) -> int:
        handle = self._next_handle
        self._next_handle += 1
        self._table(origin).add(FdRecord(handle, kernel_fd, kind, resource))
        return handle

    def validate_return(self, req: SyscallRequest, raw: KernelResult) -> CheckedReturn:
        ret, sysno = raw.ret, req.sysno
        if type(ret) is not int:
            raise IagoViolation("RangeViolation", f"non-integer return {ret!r}")

        if sysno in syscalls.LENGTH_RETURNING:
            limit = req.args.get("len", 0)
            if not -1 <= ret <= limit:
                raise IagoViolation("RangeViolation", f"returned {ret}, requested {limit}")
            if sysno in (syscalls.READ, syscalls.RECVFROM) and ret >= 0 and len(raw.data) != ret:
                raise IagoViolation("RangeViolation",
                                    f"returned {ret} but supplied {len(raw.data)} bytes")
            data = raw.data if sysno in (syscalls.READ, syscalls.RECVFROM) else b""
            return CheckedReturn(ret, data)

        if sysno in syscalls.DESCRIPTOR_RETURNING:
            if ret == -1:
                return CheckedReturn(-1)
            if ret < 0:
                raise IagoViolation("RangeViolation", f"descriptor {ret}")
            if ret in self._seen_kernel_fds:
                raise IagoViolation("UnknownDescriptor", f"kernel descriptor {ret} was issued before")
            # record the kernel descriptor before any handle leaves the monitor
            self._seen_kernel_fds.add(ret)
            if sysno == syscalls.ACCEPT:
                listener = self._record_for(req)
                kind, resource = "socket", req.args.get("addr") or listener.resource
            elif sysno == syscalls.SOCKET:
                kind, resource = "socket", req.args.get("addr", "")
            else:
                kind, resource = "file", str(req.args.get("path", ""))
            return CheckedReturn(self._issue(req.origin, ret, kind, resource))

        if sysno in syscalls.STATUS_RETURNING:
            uaddr = req.args.get("uaddr")
            if sysno == syscalls.FUTEX and not (
                    type(uaddr) is int and self._private_page(req.origin, uaddr)):
                raise IagoViolation("SharedSyncObject", f"futex word at va {uaddr} is not private")
            if ret not in (0, -1):
                raise IagoViolation("RangeViolation", f"status {ret}")
            if sysno == syscalls.CLOSE and ret == 0:
                self._table(req.origin).remove(req.args.get(_FD_ARG))
            return CheckedReturn(ret)

        if sysno in syscalls.POINTER_RETURNING:
            if ret == -1:
                return CheckedReturn(-1)
            if not 0 <= ret < self.m.config.va_pages:
                raise IagoViolation("RangeViolation", f"address {ret} outside the address space")
            if sysno == syscalls.SEM_OPEN:
                if not self._private_page(req.origin, ret):
                    raise IagoViolation("SharedSyncObject",
                                        f"semaphore at va {ret} is not in private enclave memory")
                return CheckedReturn(self._issue(req.origin, ret, "sem", req.args.get("name", "")))
            pages = max(1, req.args.get("pages", 1))
            if self._overlaps_enclave(req.origin, ret, pages):
                raise IagoViolation("RawPointerLeak", f"mapping at va {ret} overlaps an ELRANGE")
            return CheckedReturn(self._issue(req.origin, ret, "map", f"va:{ret}+{pages}"))

        if ret < -1:
            raise IagoViolation("RangeViolation", f"return {ret}")
        return CheckedReturn(ret)

    # --- accounting ----------------------------------------------------------

    def account(self, req: SyscallRequest, checked: CheckedReturn,
                rec: Optional[FdRecord] = None) -> Optional[LogEntry]:
        """Chain an entry for every executed data-moving request."""
        if req.sysno not in syscalls.LENGTH_RETURNING:
            return None
        n = max(checked.value, 0)
        socket = req.sysno in (syscalls.SENDTO, syscalls.RECVFROM) or (
            rec is not None and rec.kind == "socket")
        inbound = req.sysno in (syscalls.READ, syscalls.RECVFROM)
        key = ("net_in" if inbound else "net_out") if socket else (
            "file_read" if inbound else "file_written")
        return self.accounting.append(req.origin, req.sysno, **{key: n})

    # --- pipeline ------------------------------------------------------------

    @staticmethod
    def default_trap_hook(monitor: "Monitor", req: SyscallRequest) -> bool:
        monitor.provider_messages.append({"origin": req.origin, "sysno": req.sysno})
        return True

    def _event(self, event_type: str, req: SyscallRequest, **extra) -> dict:
        ev = {"event": event_type, "origin": req.origin, "sysno": req.sysno, **extra}
        self.events.append(ev)
        return ev

    def _kernel_args(self, req: SyscallRequest, rec: Optional[FdRecord]) -> dict:
        args = dict(req.args)
        if rec is not None:
            args[_FD_ARG] = rec.kernel_fd
        return args

    def reap(self) -> None:
        """Carry out kernel terminations requested by Kill verdicts."""
        while self._doomed:
            eremove_enclave(self.m, self._doomed.pop(0))

    def handle(self, req: SyscallRequest, *, defer_removal: bool = False) -> SyscallOutcome:
        """Filter, execute, validate and account one request.

        With ``defer_removal`` a killed enclave is only marked; the caller
        runs :meth:`reap` once the reply has been delivered.
        """
        try:
            verdict = self.filter_syscall(req)
        except (DeniedByRule, DeniedByDefault) as exc:
            self._event("deny", req, reason=str(exc))
            raise
        except IagoViolation as exc:
            self._event("iago", req, kind=exc.kind, detail=exc.detail)
            raise
        self.verdicts.append({"origin": req.origin, "sysno": req.sysno, "verdict": verdict.value})

        if verdict is Verdict.KILL:
            self._event("terminate", req)
            self.kernel.terminate(req.origin)
            self.terminated.add(req.origin)
            self._doomed.append(req.origin)
            if not defer_removal:
                self.reap()
            return SyscallOutcome(verdict, False)
        if verdict is Verdict.TRAP and not self.trap_hook(self, req):
            self._event("trap", req, executed=False)
            return SyscallOutcome(verdict, False, -1)
        if verdict is Verdict.TRAP:
            self._event("trap", req, executed=True)
        if verdict is Verdict.EXECUTE_NOTIFY:
            self.kernel.notify(self._event("notify", req))
        if verdict is Verdict.EXECUTE_LOG:
            self.sealed_log.append(req.to_dict())

        rec = self._record_for(req)
        raw = self.kernel.execute(req.origin, req.sysno, self._kernel_args(req, rec))
        try:
            checked = self.validate_return(req, raw)
        except IagoViolation as exc:
            self._event("iago", req, kind=exc.kind, detail=exc.detail)
            raise
        self.account(req, checked, rec)
        return SyscallOutcome(verdict, True, checked.value, checked.data)

    def events_jsonl(self) -> bytes:
        return b"".join(json.dumps(e, sort_keys=True).encode() + b"\n" for e in self.events)

    # --- channel transport ---------------------------------------------------

    def serve(self, inputs: dict) -> dict:
        """Callee body for :data:`SYSCALL_DESC` calls arriving on a channel."""
        req = SyscallRequest.from_dict(json.loads(inputs["request"]))
        try:
            out = self.handle(req, defer_removal=True)
            doc = {"verdict": out.verdict.value, "executed": out.executed, "value": out.value,
                   "data": base64.b64encode(out.data).decode()}
        except SimError as exc:
            doc = {"error": type(exc).__name__, "args": _error_args(exc)}
        blob = json.dumps(doc, sort_keys=True).encode()
        if len(blob) > inputs["reply_cap"]:
            blob = json.dumps({"error": "MarshalOverflow", "args": [str(len(blob))]}).encode()
        return {"reply": blob}


_REPLY_CAP = FRAME_CAPACITY - 64

SYSCALL_DESC = CallDescriptor(0x5C, (
    Param("request_len", ParamType.SCALAR),
    Param("request", ParamType.COUNTED, Direction.IN, elem=1, count_param="request_len"),
    Param("reply_cap", ParamType.SCALAR),
    Param("reply", ParamType.COUNTED, Direction.OUT, elem=1, count_param="reply_cap"),
))


def _error_args(exc: SimError) -> list:
    if isinstance(exc, DeniedByRule):
        return [exc.index, exc.whitelist_miss]
    if isinstance(exc, DeniedByDefault):
        return [exc.sysno]
    if isinstance(exc, IagoViolation):
        return [exc.kind, exc.detail]
    return [str(exc)]


def _raise_remote(doc: dict) -> None:
    from . import errors
    cls = getattr(errors, doc["error"], MonitorError)
    if not (isinstance(cls, type) and issubclass(cls, SimError)):
        cls = MonitorError
    try:
        raise cls(*doc["args"])
    except TypeError:
        raise MonitorError(f"{doc['error']}: {doc['args']}") from None


def syscall(m: Machine, monitor: Monitor, caller_cpu: int, monitor_cpu: int,
            sysno: int, **args) -> SyscallOutcome:
    """Issue a system call from the bi-enclave on ``caller_cpu`` via its channel.

    Errors raised inside the monitor are re-raised here with the same type.
    """
    origin = m.cpus[caller_cpu].mode
    ch = monitor.channels.get(origin)
    if ch is None:
        raise NoChannel(f"enclave {origin} has no channel to the monitor")
    request = json.dumps(SyscallRequest(origin, sysno, args).to_dict(), sort_keys=True).encode()
    try:
        reply = channel_call(m, ch, caller_cpu, monitor_cpu, SYSCALL_DESC,
                             {"request_len": len(request), "request": request,
                              "reply_cap": _REPLY_CAP}, monitor.serve)
    finally:
        monitor.reap()
    doc = json.loads(reply["reply"])
    if "error" in doc:
        _raise_remote(doc)
    return SyscallOutcome(Verdict(doc["verdict"]), doc["executed"], doc["value"],
                          base64.b64decode(doc["data"]))
