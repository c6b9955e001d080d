"""Attested pairwise channels over a shared EPC page, and the call API.

Page layout: bytes [0, 32) initiator MRENCLAVE, [32, 64) acceptor
MRENCLAVE, [64, 72) handshake state word, call frames from offset 128.
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import isa
from .errors import (
    AttestationMismatch,
    ChannelError,
    ChannelNotAttested,
    MarshalOverflow,
    TypeMismatch,
)
from .guard import load, store
from .machine import PAGE_SIZE, Machine

DIGEST_A_OFF = 0
DIGEST_B_OFF = 32
STATE_OFF = 64
FRAME_OFF = 128
FRAME_CAPACITY = PAGE_SIZE - FRAME_OFF - 4  # minus the length prefix

HS_EMPTY, HS_INITIATOR, HS_ACCEPTOR, HS_DONE = range(4)


class Phase(enum.Enum):
    SHARE_PENDING = "SharePending"
    ACCEPTED = "Accepted"
    ATTESTED = "Attested"
    DESTROYED = "Destroyed"


@dataclass
class Channel:
    page: int
    a: int
    b: int
    va: int
    expected_digest_a: bytes  # what b expects a's MRENCLAVE to be
    expected_digest_b: bytes  # what a expects b's MRENCLAVE to be
    phase: Phase = Phase.SHARE_PENDING
    verified: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    def __post_init__(self):
        self.history.append(self.phase)

    def _move(self, phase: Phase) -> None:
        allowed = {
            Phase.SHARE_PENDING: {Phase.ACCEPTED, Phase.DESTROYED},
            Phase.ACCEPTED: {Phase.ATTESTED, Phase.DESTROYED},
            Phase.ATTESTED: {Phase.DESTROYED},
            Phase.DESTROYED: set(),
        }
        if phase not in allowed[self.phase]:
            raise ChannelError(f"illegal channel transition {self.phase.value} -> {phase.value}")
        self.phase = phase
        self.history.append(phase)

    def parties(self) -> tuple:
        return (self.a, self.b)

    def peer_of(self, enclave_id: int) -> int:
        if enclave_id == self.a:
            return self.b
        if enclave_id == self.b:
            return self.a
        raise ChannelError(f"enclave {enclave_id} is not a party to this channel")


def _running(m: Machine, cpu: int) -> int:
    mode = m.cpus[cpu].mode
    if mode is None:
        raise ChannelError(f"cpu{cpu} is not executing an enclave")
    return mode


def propose_channel(m: Machine, owner_cpu: int, peer: int, page: int, *,
                    expected_digest_a: bytes, expected_digest_b: bytes) -> Channel:
    """ESADD by the owner; the channel starts out SharePending."""
    isa.esadd(m, owner_cpu, page, peer)  # NotOwner for untrusted callers
    owner = _running(m, owner_cpu)
    va = m.epcm_entry(page).mapped_va
    return Channel(page, owner, peer, va, expected_digest_a, expected_digest_b)


def accept_channel(m: Machine, ch: Channel, peer_cpu: int) -> None:
    """Honest OS maps the page into the peer's space, then the peer ESACCEPTs."""
    peer = _running(m, peer_cpu)
    m.os_map_page(m.enclaves[peer].pid, ch.va, ch.page)
    isa.esaccept(m, peer_cpu, ch.page)
    ch._move(Phase.ACCEPTED)


def attest_channel(m: Machine, ch: Channel, owner_cpu: int, peer_cpu: int) -> None:
    """Exchange MRENCLAVEs through the page; destroy the channel on mismatch.

    The digest each party writes comes from the hardware (``ereport``), so a
    compromised enclave cannot claim another enclave's identity.
    """
    if ch.phase is not Phase.ACCEPTED:
        raise ChannelNotAttested(f"channel is {ch.phase.value}, expected Accepted")
    skip = m.ablated("attestation")

    store(m, owner_cpu, ch.va, isa.ereport(m, owner_cpu), DIGEST_A_OFF)
    store(m, owner_cpu, ch.va, struct.pack("<Q", HS_INITIATOR), STATE_OFF)

    seen_a = load(m, peer_cpu, ch.va, DIGEST_A_OFF, 32)
    if seen_a != ch.expected_digest_a and not skip:
        _fail(m, ch, "initiator")
    store(m, peer_cpu, ch.va, isa.ereport(m, peer_cpu), DIGEST_B_OFF)
    store(m, peer_cpu, ch.va, struct.pack("<Q", HS_ACCEPTOR), STATE_OFF)

    seen_b = load(m, owner_cpu, ch.va, DIGEST_B_OFF, 32)
    if seen_b != ch.expected_digest_b and not skip:
        _fail(m, ch, "acceptor")
    store(m, owner_cpu, ch.va, struct.pack("<Q", HS_DONE), STATE_OFF)
    ch.verified = {ch.a: seen_a, ch.b: seen_b}
    ch._move(Phase.ATTESTED)


def _fail(m: Machine, ch: Channel, side: str) -> None:
    destroy_channel(m, ch)
    raise AttestationMismatch(side, ch)


def establish_channel(m: Machine, owner_cpu: int, peer_cpu: int, page: int, *,
                      owner_expects: bytes, peer_expects: bytes) -> Channel:
    """ESADD, ESACCEPT and mutual attestation in one go.

    ``owner_expects`` is the peer MRENCLAVE the owner will accept;
    ``peer_expects`` is the owner MRENCLAVE the peer will accept. Raises
    :class:`AttestationMismatch` (with ``.channel`` in phase Destroyed) when
    either check fails.
    """
    peer = _running(m, peer_cpu)
    ch = propose_channel(m, owner_cpu, peer, page,
                         expected_digest_a=peer_expects, expected_digest_b=owner_expects)
    accept_channel(m, ch, peer_cpu)
    attest_channel(m, ch, owner_cpu, peer_cpu)
    return ch


def expire_channel(m: Machine, ch: Channel) -> None:
    """Handshake timeout: a channel that never reached Attested is torn down."""
    if ch.phase in (Phase.SHARE_PENDING, Phase.ACCEPTED):
        destroy_channel(m, ch)


def destroy_channel(m: Machine, ch: Channel) -> None:
    if ch.phase is Phase.DESTROYED:
        return
    isa.destroy_share(m, ch.page)
    ch._move(Phase.DESTROYED)


# --- call descriptors -----------------------------------------------------

class ParamType(enum.Enum):
    SCALAR = "scalar"
    FIXED = "fixed-buffer"
    COUNTED = "counted-array"


class Direction(enum.Enum):
    IN = "in"
    OUT = "out"
    INOUT = "inout"


@dataclass(frozen=True)
class Param:
    name: str
    type: ParamType
    dir: Direction = Direction.IN
    length: int = 0
    elem: int = 0
    count_param: Optional[str] = None

    @property
    def inbound(self) -> bool:
        return self.dir is not Direction.OUT

    @property
    def outbound(self) -> bool:
        return self.dir is not Direction.IN


@dataclass(frozen=True)
class CallDescriptor:
    fn: int
    params: tuple

    def __post_init__(self):
        names = [p.name for p in self.params]
        if len(set(names)) != len(names):
            raise TypeMismatch("duplicate parameter names")
        by_name = {p.name: p for p in self.params}
        for p in self.params:
            if p.type is ParamType.FIXED and p.length < 0:
                raise TypeMismatch(f"{p.name}: negative buffer length")
            if p.type is ParamType.COUNTED:
                if p.elem <= 0:
                    raise TypeMismatch(f"{p.name}: counted array needs a positive element size")
                cp = by_name.get(p.count_param)
                if cp is None or cp.type is not ParamType.SCALAR or not cp.inbound:
                    raise TypeMismatch(f"{p.name}: count_param must name an inbound scalar")

    @classmethod
    def from_dict(cls, doc: dict) -> "CallDescriptor":
        try:
            params = tuple(
                Param(p["name"], ParamType(p["type"]), Direction(p.get("dir", "in")),
                      int(p.get("len", 0)), int(p.get("elem", 0)), p.get("count_param"))
                for p in doc["params"])
            return cls(int(doc["fn"]), params)
        except (KeyError, ValueError, TypeError) as exc:
            raise TypeMismatch(f"bad call descriptor: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "CallDescriptor":
        return cls.from_dict(json.loads(text))

    def to_dict(self) -> dict:
        out = []
        for p in self.params:
            d = {"name": p.name, "type": p.type.value, "dir": p.dir.value}
            if p.type is ParamType.FIXED:
                d["len"] = p.length
            if p.type is ParamType.COUNTED:
                d["elem"] = p.elem
                d["count_param"] = p.count_param
            out.append(d)
        return {"fn": self.fn, "params": out}


_HEADER = struct.Struct("<IHH")
REQUEST, RESPONSE = 0, 1


def _phase_params(desc: CallDescriptor, phase: int):
    return [p for p in desc.params if (p.inbound if phase == REQUEST else p.outbound)]


def marshal(desc: CallDescriptor, values: dict, phase: int = REQUEST,
            counts: Optional[dict] = None) -> bytes:
    """Serialize the parameters that travel in ``phase``.

    ``counts`` supplies counted-array element counts (defaults to ``values``).
    """
    counts = values if counts is None else counts
    params = _phase_params(desc, phase)
    size = _HEADER.size
    for p in params:
        if p.type is ParamType.SCALAR:
            size += 8
        elif p.type is ParamType.FIXED:
            size += p.length
        else:
            n = counts.get(p.count_param)
            if not isinstance(n, int) or isinstance(n, bool) or n < 0:
                raise TypeMismatch(f"{p.name}: count {p.count_param!r} must be a non-negative int")
            size += 4 + n * p.elem
    if size > FRAME_CAPACITY:
        raise MarshalOverflow(f"frame needs {size} bytes, capacity {FRAME_CAPACITY}")

    out = bytearray(_HEADER.pack(desc.fn, len(params), phase))
    for p in params:
        if p.name not in values:
            raise TypeMismatch(f"missing argument {p.name!r}")
        v = values[p.name]
        if p.type is ParamType.SCALAR:
            if not isinstance(v, int) or isinstance(v, bool) or not -(1 << 63) <= v < (1 << 63):
                raise TypeMismatch(f"{p.name}: expected int64 scalar")
            out += struct.pack("<q", v)
        elif p.type is ParamType.FIXED:
            if not isinstance(v, (bytes, bytearray)) or len(v) != p.length:
                raise TypeMismatch(f"{p.name}: expected {p.length} bytes")
            out += v
        else:
            if not isinstance(v, (bytes, bytearray)) or len(v) % p.elem:
                raise TypeMismatch(f"{p.name}: expected a whole number of {p.elem}-byte elements")
            n = len(v) // p.elem
            limit = counts[p.count_param]
            if (phase == REQUEST and n != limit) or n > limit:
                raise TypeMismatch(f"{p.name}: {n} elements, count says {limit}")
            out += struct.pack("<I", n) + v
    return bytes(out)


def unmarshal(desc: CallDescriptor, frame: bytes, phase: int = REQUEST) -> dict:
    try:
        fn, nparams, got_phase = _HEADER.unpack_from(frame)
    except struct.error:
        raise TypeMismatch("truncated frame header") from None
    params = _phase_params(desc, phase)
    if fn != desc.fn or nparams != len(params) or got_phase != phase:
        raise TypeMismatch("frame header does not match descriptor")
    pos = _HEADER.size
    values = {}
    try:
        for p in params:
            if p.type is ParamType.SCALAR:
                (values[p.name],) = struct.unpack_from("<q", frame, pos)
                pos += 8
            elif p.type is ParamType.FIXED:
                values[p.name] = bytes(frame[pos:pos + p.length])
                if len(values[p.name]) != p.length:
                    raise struct.error("short buffer")
                pos += p.length
            else:
                (n,) = struct.unpack_from("<I", frame, pos)
                pos += 4
                data = bytes(frame[pos:pos + n * p.elem])
                if len(data) != n * p.elem:
                    raise struct.error("short array")
                values[p.name] = data
                pos += n * p.elem
    except struct.error as exc:
        raise TypeMismatch(f"malformed frame: {exc}") from None
    return values


def channel_call(m: Machine, ch: Channel, caller_cpu: int, callee_cpu: int,
                 desc: CallDescriptor, args: dict, callee: Callable[[dict], dict], *,
                 after_copy: Optional[Callable[[], None]] = None,
                 callee_scratch_va: Optional[int] = None) -> dict:
    """Call ``callee`` in the peer enclave through the shared page.

    The callee copies the whole request frame out of the shared page before
    demarshalling it, so later writes to the shared page cannot change what
    it acts on. ``after_copy`` runs in that window (test hook). No TLB flush
    happens between the two sides.
    """
    if ch.phase is not Phase.ATTESTED:
        raise ChannelNotAttested(f"channel is {ch.phase.value}")
    caller = _running(m, caller_cpu)
    callee_id = _running(m, callee_cpu)
    if ch.peer_of(caller) != callee_id:
        raise ChannelError("caller and callee must be the two channel parties")

    frame = marshal(desc, args, REQUEST)
    store(m, caller_cpu, ch.va, struct.pack("<I", len(frame)) + frame, FRAME_OFF)

    (n,) = struct.unpack("<I", load(m, callee_cpu, ch.va, FRAME_OFF, 4))
    if n > FRAME_CAPACITY:
        raise MarshalOverflow(f"frame length {n} exceeds capacity")
    private = load(m, callee_cpu, ch.va, FRAME_OFF + 4, n)
    if callee_scratch_va is not None:
        store(m, callee_cpu, callee_scratch_va, private)
        private = load(m, callee_cpu, callee_scratch_va, 0, n)
    if after_copy is not None:
        after_copy()
    inputs = unmarshal(desc, private, REQUEST)

    outputs = callee(dict(inputs))
    if not isinstance(outputs, dict):
        raise TypeMismatch("callee must return a dict of out-parameters")
    merged = {**inputs, **outputs}
    for p in desc.params:
        if p.dir is Direction.OUT and p.name not in outputs:
            raise TypeMismatch(f"callee did not set out-parameter {p.name!r}")
    reply = marshal(desc, merged, RESPONSE, counts=inputs)
    store(m, callee_cpu, ch.va, struct.pack("<I", len(reply)) + reply, FRAME_OFF)

    (n,) = struct.unpack("<I", load(m, caller_cpu, ch.va, FRAME_OFF, 4))
    if n > FRAME_CAPACITY:
        raise MarshalOverflow(f"reply length {n} exceeds capacity")
    return unmarshal(desc, load(m, caller_cpu, ch.va, FRAME_OFF + 4, n), RESPONSE)
