"""Brute-force access matrix and an independent reference model.

``access_matrix_oracle`` drives :func:`bienclave.guard.translate` over every
(actor, va, physical target, access kind) on a scratch copy of the machine.
``reference_matrix`` derives the same matrix from the JSON state dump alone,
without calling into the guard, so the two can be compared cell by cell.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

from .errors import ScaleError
from .guard import translate
from .machine import AccessKind, Machine, Perm

MAX_ENCLAVES = 4
MAX_PAGES = 64
OS = "OS"
UNMAPPED = "unmapped"
FORGED_PERMS = Perm.R | Perm.W | Perm.X


@dataclass
class Matrix:
    """Outcome strings keyed by (actor, va, target, kind)."""

    cells: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.cells)

    def allowed_actors(self, target) -> set:
        return {a for (a, _, t, _), out in self.cells.items() if t == target and out == "Allow"}

    def row(self, actor) -> dict:
        return {k: v for k, v in self.cells.items() if k[0] == actor}

    def diff(self, other: "Matrix") -> list:
        keys = self.cells.keys() | other.cells.keys()
        return sorted(((k, self.cells.get(k), other.cells.get(k)) for k in keys
                       if self.cells.get(k) != other.cells.get(k)), key=str)


def _check_scale(m: Machine) -> None:
    alive = [s for s in m.enclaves.values() if s.alive]
    if len(alive) > MAX_ENCLAVES:
        raise ScaleError(f"{len(alive)} enclaves exceeds oracle bound {MAX_ENCLAVES}")
    if m.config.va_pages > MAX_PAGES or m.config.epc_pages > MAX_PAGES:
        raise ScaleError(f"oracle bound is {MAX_PAGES} virtual and EPC pages")


def targets(m: Machine) -> list:
    """Physical target classes: unmapped, one DRAM page, one EPCM page, all EPC."""
    out = [UNMAPPED]
    if m.prm_base > 0:
        out.append(0)
    out.append(m.epcm_base)
    out.extend(range(m.epc_base, m.epc_base + m.config.epc_pages))
    return out


def actors(m: Machine) -> list:
    return [OS] + sorted(e for e, s in m.enclaves.items() if s.alive and s.initialized)


def access_matrix_oracle(m: Machine) -> Matrix:
    """Run translate() over the whole (actor, va, target, kind) domain."""
    _check_scale(m)
    scratch = copy.deepcopy(m)
    scratch.trace = None
    scratch.debug = False
    ctx = scratch.cpus[0]
    matrix = Matrix()
    for actor in actors(scratch):
        if actor == OS:
            ctx.mode, ctx.pid = None, 0
        else:
            ctx.mode, ctx.pid = actor, scratch.enclaves[actor].pid
        pt = scratch.page_table(ctx.pid)
        saved = dict(pt)
        for va in range(scratch.config.va_pages):
            for target in targets(scratch):
                if target == UNMAPPED:
                    pt.pop(va, None)
                else:
                    scratch.os_map_page(ctx.pid, va, target, FORGED_PERMS, invalidate=False)
                for kind in AccessKind:
                    scratch.tlb_flush(0)
                    out = translate(scratch, 0, va, kind)
                    matrix.cells[(actor, va, target, kind.value)] = str(out)
        pt.clear()
        pt.update(saved)
    return matrix


def reference_outcome(state: dict, actor, va: int, target, kind: str) -> str:
    """Expected outcome from the state dump only."""
    layout = state["layout"]
    cfg = state["config"]
    prm_base = layout["prm_base"]
    epc_base = layout["epc_base"]
    epc_end = epc_base + cfg["epc_pages"]
    ablations = set(state["ablations"])
    tampered = set(state["tampered"])
    mapped = target != UNMAPPED

    def outside(pa) -> str:
        if not mapped:
            return "Fault:NotMapped"
        if pa >= prm_base:
            return "AbortPage"
        return "Allow"  # forged PTEs carry rwx

    if actor == OS:
        return outside(target)
    encl = next(e for e in state["enclaves"] if e["enclave_id"] == actor)
    base, length = encl["elrange"]
    if not base <= va < base + length:
        if encl["bi_enclave"] and "check1" not in ablations:
            return "AbortPage"
        return outside(target)
    if not mapped:
        return "Fault:NotMapped"
    if not epc_base <= target < epc_end:
        return "Fault:ElrangeMismatch"
    idx = target - epc_base
    meta = layout["epcm_base"] + idx * 32 // 4096
    if target in tampered or meta in tampered:
        return "Fault:IntegrityViolation"
    entry = state["epcm"]["valid"].get(str(idx))
    me = encl["secs_page"] - epc_base
    if entry is None:
        return "Fault:EpcmOwnerMismatch"
    parties = {entry["owner_secs"], entry["co_owner_secs"]}
    if "owner_check" not in ablations and me not in parties:
        return "Fault:EpcmOwnerMismatch"
    if entry["page_kind"] == "SharePending":
        return "Fault:SharePendingBlocked"
    if entry["mapped_va"] != va:
        return "Fault:VaMismatch"
    if kind.lower() not in entry["perms"]:
        return "Fault:PermDenied"
    return "Allow"


def reference_matrix(m: Machine, state: Optional[dict] = None) -> Matrix:
    _check_scale(m)
    state = state or m.dump_state()
    matrix = Matrix()
    for actor in actors(m):
        for va in range(m.config.va_pages):
            for target in targets(m):
                for kind in AccessKind:
                    matrix.cells[(actor, va, target, kind.value)] = reference_outcome(
                        state, actor, va, target, kind.value)
    return matrix
