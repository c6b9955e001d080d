"""TLB-miss access validation and the memory operations built on it.

Decision order for a miss, per request:

* untrusted mode: PTE into PRM -> abort page, else fill;
* enclave mode, va outside ELRANGE: bi-enclave -> abort page, otherwise as
  untrusted;
* enclave mode, va inside ELRANGE, first failing check wins:
  ElrangeMismatch (target not EPC), IntegrityViolation, EpcmOwnerMismatch,
  SharePendingBlocked, VaMismatch, PermDenied.

Data is only read from or written to physical memory after an ``Allow``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .errors import AccessFault, AddressError
from .machine import (
    ABORT_BYTE,
    PAGE_SIZE,
    AccessKind,
    Machine,
    PageKind,
    Perm,
    TlbEntry,
    mode_tag,
)


class FaultReason(enum.Enum):
    NOT_MAPPED = "NotMapped"
    ELRANGE_MISMATCH = "ElrangeMismatch"
    INTEGRITY_VIOLATION = "IntegrityViolation"
    EPCM_OWNER_MISMATCH = "EpcmOwnerMismatch"
    SHARE_PENDING_BLOCKED = "SharePendingBlocked"
    VA_MISMATCH = "VaMismatch"
    PERM_DENIED = "PermDenied"


class Outcome(enum.Enum):
    ALLOW = "Allow"
    ABORT = "AbortPage"
    FAULT = "Fault"


@dataclass(frozen=True)
class AccessOutcome:
    outcome: Outcome
    pa: Optional[int] = None
    reason: Optional[FaultReason] = None
    tlb_fill: bool = False

    @property
    def allowed(self) -> bool:
        return self.outcome is Outcome.ALLOW

    def __str__(self) -> str:
        if self.outcome is Outcome.FAULT:
            return f"Fault:{self.reason.value}"
        return self.outcome.value


ABORT = AccessOutcome(Outcome.ABORT)


def _fault(reason: FaultReason) -> AccessOutcome:
    return AccessOutcome(Outcome.FAULT, reason=reason)


def decide(m: Machine, mode: Optional[int], va: int, pa: Optional[int],
           pte_perms: Perm, kind: AccessKind) -> AccessOutcome:
    """Validate one translation without touching the TLB.

    ``pa``/``pte_perms`` come from the page-table walk (``pa=None`` when the
    PTE is absent).
    """
    if mode is None:
        return _untrusted(m, pa, pte_perms, kind)

    secs = m.enclaves[mode]
    if not secs.in_elrange(va):
        if secs.bi_enclave and not m.ablated("check1"):
            return ABORT
        return _untrusted(m, pa, pte_perms, kind)

    if pa is None:
        return _fault(FaultReason.NOT_MAPPED)
    if not m.is_epc(pa):
        return _fault(FaultReason.ELRANGE_MISMATCH)
    if not (m.integrity_ok(pa) and m.integrity_ok(m.epcm_meta_page(pa))):
        return _fault(FaultReason.INTEGRITY_VIOLATION)
    entry = m.epcm_entry(pa)
    me = m.secs_ref(mode)
    if not entry.valid:
        return _fault(FaultReason.EPCM_OWNER_MISMATCH)
    if not m.ablated("owner_check") and me not in (entry.owner_secs, entry.co_owner_secs):
        return _fault(FaultReason.EPCM_OWNER_MISMATCH)
    if entry.page_kind is PageKind.SHARE_PENDING:
        return _fault(FaultReason.SHARE_PENDING_BLOCKED)
    if entry.mapped_va != va:
        return _fault(FaultReason.VA_MISMATCH)
    if not (kind.perm & entry.perms & pte_perms):
        return _fault(FaultReason.PERM_DENIED)
    return AccessOutcome(Outcome.ALLOW, pa=pa)


def _untrusted(m: Machine, pa: Optional[int], pte_perms: Perm, kind: AccessKind) -> AccessOutcome:
    if pa is None:
        return _fault(FaultReason.NOT_MAPPED)
    if m.is_prm(pa):
        return ABORT
    if not kind.perm & pte_perms:
        return _fault(FaultReason.PERM_DENIED)
    return AccessOutcome(Outcome.ALLOW, pa=pa)


def translate(m: Machine, cpu: int, va: int, kind: AccessKind) -> AccessOutcome:
    """Resolve one access on ``cpu``: TLB hit, or full validation plus fill."""
    m.check_va(va)
    ctx = m.cpus[cpu]
    mode = ctx.mode
    key = (ctx.pid, va)
    hit = m.tlbs[cpu].get(key)
    if hit is not None and hit.mode == mode and kind.perm & hit.perms:
        result = AccessOutcome(Outcome.ALLOW, pa=hit.pa)
    else:
        pte = m.page_table(ctx.pid).get(va)
        pa = pte.pa if pte else None
        perms = pte.perms if pte else Perm.NONE
        result = decide(m, mode, va, pa, perms, kind)
        if result.allowed:
            fill_perms = perms
            if mode is not None and m.enclaves[mode].in_elrange(va):
                fill_perms = m.epcm_entry(pa).perms & perms
            m.tlbs[cpu][key] = TlbEntry(ctx.pid, va, pa, mode, fill_perms)
            result = AccessOutcome(Outcome.ALLOW, pa=pa, tlb_fill=True)
    if m.trace is not None:
        record = {"cpu": cpu, "mode": mode_tag(mode), "va": va, "kind": kind.value,
                  "outcome": result.outcome.value}
        if result.reason is not None:
            record["reason"] = result.reason.value
        m.trace(record)
    return result


def _checked(m: Machine, cpu: int, va: int, kind: AccessKind) -> AccessOutcome:
    result = translate(m, cpu, va, kind)
    if result.allowed and not m.integrity_ok(result.pa):
        # MEE check on the data itself, also on TLB hits.
        result = _fault(FaultReason.INTEGRITY_VIOLATION)
    return result


def load(m: Machine, cpu: int, va: int, offset: int = 0, size: int = PAGE_SIZE) -> bytes:
    """Read bytes from a virtual page. Abort pages read as all-ones."""
    _check_span(offset, size)
    result = _checked(m, cpu, va, AccessKind.READ)
    if result.outcome is Outcome.ABORT:
        return bytes([ABORT_BYTE]) * size
    if not result.allowed:
        raise AccessFault(result)
    return m.read_phys(result.pa, offset, size)


def store(m: Machine, cpu: int, va: int, data: bytes, offset: int = 0) -> AccessOutcome:
    """Write bytes to a virtual page. Writes to abort pages are discarded."""
    _check_span(offset, len(data))
    result = _checked(m, cpu, va, AccessKind.WRITE)
    if result.outcome is Outcome.ABORT:
        m.abort_writes += 1
        return result
    if not result.allowed:
        raise AccessFault(result)
    m.write_phys(result.pa, bytes(data), offset)
    m._after_step()
    return result


def fetch(m: Machine, cpu: int, va: int) -> bytes:
    """Instruction fetch (also models jmp/ret/call targets). Abort pages fault."""
    result = _checked(m, cpu, va, AccessKind.EXECUTE)
    if not result.allowed:
        raise AccessFault(result)
    return m.read_phys(result.pa)


def access(m: Machine, cpu: int, va: int, kind: AccessKind,
           data: bytes = b"", offset: int = 0) -> tuple:
    """Perform one access and report ``(outcome, bytes read or None)``.

    Unlike :func:`load`/:func:`store` this never raises on a fault, which is
    what attack scripts want.
    """
    result = _checked(m, cpu, va, kind)
    if result.outcome is Outcome.ABORT:
        if kind is AccessKind.WRITE:
            m.abort_writes += 1
        return result, (bytes([ABORT_BYTE]) * PAGE_SIZE if kind is AccessKind.READ else None)
    if not result.allowed:
        return result, None
    if kind is AccessKind.WRITE:
        _check_span(offset, len(data))
        m.write_phys(result.pa, bytes(data), offset)
        m._after_step()
        return result, None
    return result, m.read_phys(result.pa)


def _check_span(offset: int, size: int) -> None:
    if offset < 0 or size < 0 or offset + size > PAGE_SIZE:
        raise AddressError("access crosses page boundary")


def check_invariants(m: Machine) -> None:
    """TLB soundness and the two-party EPCM bound. Raises AssertionError."""
    for cpu, tlb in enumerate(m.tlbs):
        for entry in tlb.values():
            if entry.mode is not None and entry.mode not in m.enclaves:
                raise AssertionError(f"cpu{cpu}: TLB entry for unknown enclave {entry.mode}")
            for kind in AccessKind:
                if not kind.perm & entry.perms:
                    continue
                res = decide(m, entry.mode, entry.va, entry.pa, entry.perms, kind)
                # tampering is caught by the MEE on the data path, not here
                if not res.allowed and res.reason is not FaultReason.INTEGRITY_VIOLATION:
                    raise AssertionError(
                        f"cpu{cpu}: stale TLB entry {entry} now yields {res}")
    for idx, e in enumerate(m.epcm):
        if e.valid and e.co_owned and e.co_owner_secs == e.owner_secs:
            raise AssertionError(f"EPCM {idx}: co-owner equals owner")
