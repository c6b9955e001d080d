"""Simulated OS kernel that executes system calls forwarded by the monitor.

The kernel is honest by default. Tests and attack scenarios make it
malicious by queueing forged results with :meth:`SimKernel.forge`; the next
call of that syscall number returns the forged value instead of the real one.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional

from . import syscalls

FIRST_FD = 3
FIRST_MMAP_VA = 40  # honest mmap hands out untrusted pages from here up


@dataclass(frozen=True)
class KernelResult:
    ret: int
    data: bytes = b""


@dataclass
class OpenFile:
    kind: str  # "file" or "socket"
    resource: str
    pos: int = 0
    peer: Optional[str] = None


@dataclass
class SimKernel:
    files: dict = field(default_factory=dict)  # path -> bytes, or int size for sparse files
    fds: dict = field(default_factory=dict)
    next_fd: int = FIRST_FD
    next_mmap_va: int = FIRST_MMAP_VA
    executed: list = field(default_factory=list)
    notifications: list = field(default_factory=list)
    terminated: list = field(default_factory=list)
    _forged: dict = field(default_factory=lambda: defaultdict(deque))

    def forge(self, sysno: int, ret, data: Optional[bytes] = None) -> None:
        """Make the next ``sysno`` call return ``ret`` (the Iago attacker).

        For reads, ``data`` defaults to ``ret`` zero bytes so only the return
        value is forged.
        """
        if data is None:
            reads = sysno in (syscalls.READ, syscalls.RECVFROM)
            data = bytes(ret) if reads and isinstance(ret, int) and ret > 0 else b""
        self._forged[sysno].append(KernelResult(ret, data))

    def notify(self, record: dict) -> None:
        self.notifications.append(record)

    def terminate(self, enclave_id: int) -> None:
        self.terminated.append(enclave_id)

    def execute(self, origin: int, sysno: int, args: dict) -> KernelResult:
        self.executed.append((origin, sysno))
        try:
            honest = self._dispatch(sysno, args)
        except (KeyError, TypeError, ValueError):
            honest = KernelResult(-1)  # malformed arguments: EINVAL
        if self._forged[sysno]:
            return self._forged[sysno].popleft()
        return honest

    def _new_fd(self, f: OpenFile) -> int:
        fd = self.next_fd
        self.next_fd += 1
        self.fds[fd] = f
        return fd

    def _dispatch(self, sysno: int, args: dict) -> KernelResult:
        if sysno in (syscalls.OPEN, syscalls.OPENAT):
            path = args["path"]
            if path not in self.files:
                if not args.get("create", False):
                    return KernelResult(-1)
                self.files[path] = b""
            return KernelResult(self._new_fd(OpenFile("file", path)))
        if sysno == syscalls.SOCKET:
            return KernelResult(self._new_fd(OpenFile("socket", args.get("addr", ""))))
        if sysno == syscalls.CLOSE:
            return KernelResult(0 if self.fds.pop(args["fd"], None) else -1)
        if sysno == syscalls.CONNECT:
            f = self.fds.get(args["fd"])
            if f is None or f.kind != "socket":
                return KernelResult(-1)
            f.peer = args["addr"]
            return KernelResult(0)
        if sysno == syscalls.ACCEPT:
            f = self.fds.get(args["fd"])
            if f is None or f.kind != "socket":
                return KernelResult(-1)
            peer = args.get("addr") or "0.0.0.0"
            return KernelResult(self._new_fd(OpenFile("socket", f.resource, peer=peer)))
        if sysno == syscalls.READ and "fd" not in args:
            # path-addressed read (pread on a transient descriptor)
            f = OpenFile("file", args["path"], pos=args.get("offset", 0))
            if f.resource not in self.files:
                return KernelResult(-1)
        elif sysno in (syscalls.READ, syscalls.RECVFROM):
            f = self.fds.get(args["fd"])
        if sysno in (syscalls.READ, syscalls.RECVFROM):
            if f is None:
                return KernelResult(-1)
            n = args["len"]
            if f.kind == "file":
                body = self.files[f.resource]
                if isinstance(body, int):  # sparse file of that many zero bytes
                    data = bytes(max(0, min(n, body - f.pos)))
                else:
                    data = body[f.pos:f.pos + n]
                f.pos += len(data)
            else:
                data = bytes(n)  # the network always has data ready
            return KernelResult(len(data), data)
        if sysno in (syscalls.WRITE, syscalls.SENDTO):
            f = self.fds.get(args["fd"])
            if f is None:
                return KernelResult(-1)
            n = args["len"]
            if f.kind == "file" and isinstance(self.files[f.resource], int):
                self.files[f.resource] = max(self.files[f.resource], f.pos + n)
                f.pos += n
            elif f.kind == "file":
                body = bytearray(self.files[f.resource])
                body[f.pos:f.pos + n] = args.get("data", bytes(n))[:n].ljust(n, b"\0")
                self.files[f.resource] = bytes(body)
                f.pos += n
            return KernelResult(n)
        if sysno == syscalls.MMAP:
            va = self.next_mmap_va
            self.next_mmap_va += max(1, args.get("pages", 1))
            return KernelResult(va)
        if sysno == syscalls.SEM_OPEN:
            # the semaphore object lives where the caller asked for it
            return KernelResult(args["addr"])
        if sysno == syscalls.FUTEX:
            return KernelResult(0)
        return KernelResult(0)
