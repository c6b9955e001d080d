"""Enclave instructions: build/measure, enter/exit, AEX, and EPC sharing.

ESADD/ESACCEPT implement pairwise page sharing; ``destroy_share`` is the
teardown used when channel attestation fails.
"""

from __future__ import annotations

import base64
import hashlib
import json
import struct
from dataclasses import dataclass
from typing import Optional

from .errors import (
    AcceptorRangeError,
    AddressError,
    AlreadyInEnclave,
    AlreadyInitialized,
    AlreadyShared,
    BiEnclaveEscapeFault,
    ConfigError,
    EnclaveDead,
    LaunchEntryExhausted,
    NoPendingShare,
    NoSavedContext,
    NotInEnclave,
    NotInitialized,
    NotOwner,
    OutOfEpc,
    OverlapError,
    PendingExists,
    UnknownCoOwner,
    WrongAcceptor,
)
from .machine import (
    NO_CO_OWNER,
    PAGE_SIZE,
    EnclaveKind,
    EpcmEntry,
    Machine,
    PageKind,
    Perm,
    Secs,
    ShareRequest,
)

_KIND_CODE = {PageKind.REGULAR: 0, PageKind.SECS: 1, PageKind.SHARE_PENDING: 2}


@dataclass(frozen=True)
class ImagePage:
    va: int
    content: bytes
    perms: Perm


@dataclass(frozen=True)
class EnclaveImage:
    elrange_base: int
    elrange_len: int
    pages: tuple
    kind: EnclaveKind = EnclaveKind.NORMAL

    @classmethod
    def from_manifest(cls, doc: dict) -> "EnclaveImage":
        """Load ``{elrange_base, [elrange_len], pages: [{va, content_b64, perms}], kind}``."""
        try:
            pages = tuple(
                ImagePage(int(p["va"]), base64.b64decode(p.get("content_b64", "")),
                          Perm.parse(p.get("perms", "r--")))
                for p in doc["pages"])
            base = int(doc["elrange_base"])
            kind = EnclaveKind(doc.get("kind", "normal"))
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"bad enclave manifest: {exc}") from None
        length = doc.get("elrange_len")
        if length is None:
            length = max((p.va for p in pages), default=base) - base + 1
        return cls(base, int(length), pages, kind)

    def to_manifest(self) -> dict:
        return {
            "elrange_base": self.elrange_base,
            "elrange_len": self.elrange_len,
            "kind": self.kind.value,
            "pages": [{"va": p.va, "content_b64": base64.b64encode(p.content).decode(),
                       "perms": p.perms.render()} for p in self.pages],
        }


def _transition(m: Machine, cpu: int, new_mode: Optional[int], via: str) -> None:
    ctx = m.cpus[cpu]
    m.transitions.append((cpu, ctx.mode, new_mode, via))
    ctx.mode = new_mode
    m.tlb_flush(cpu)


def _secs(m: Machine, enclave_id: int) -> Secs:
    try:
        return m.enclaves[enclave_id]
    except KeyError:
        raise NotInitialized(f"no enclave {enclave_id}") from None


# --- build and measurement ------------------------------------------------

def ecreate(m: Machine, elrange_base: int, elrange_len: int, *, pid: Optional[int] = None,
            kind: EnclaveKind = EnclaveKind.NORMAL, launch_entries: int = 1) -> int:
    if elrange_len <= 0:
        raise AddressError("ELRANGE must be non-empty")
    m.check_va(elrange_base)
    m.check_va(elrange_base + elrange_len - 1)
    if pid is None:
        pid = m.new_process()
    m.page_table(pid)
    for other in m.enclaves.values():
        if other.pid == pid and other.alive and any(
                elrange_base <= m.epcm_entry(pa).mapped_va < elrange_base + elrange_len
                for pa in other.pages):
            raise OverlapError(f"ELRANGE overlaps pages of enclave {other.enclave_id}")
    pa = m.alloc_epc()
    if pa is None:
        raise OutOfEpc("no free EPC page for SECS")
    eid = m.next_enclave_id()
    secs = Secs(eid, elrange_base, elrange_len, pa, pid, kind=kind, launch_entries=launch_entries)
    secs.hasher = hashlib.sha256(b"ECREATE" + struct.pack("<Q", elrange_len))
    m.epcm[m.epc_index(pa)] = EpcmEntry(valid=True, owner_secs=m.epc_index(pa),
                                        page_kind=PageKind.SECS)
    m.enclaves[eid] = secs
    return eid


def eadd(m: Machine, enclave_id: int, va: int, content: bytes, perms: Perm) -> int:
    """EADD + EEXTEND of one page; the honest OS maps it. Returns the EPC page."""
    secs = _secs(m, enclave_id)
    if secs.initialized:
        raise AlreadyInitialized(f"enclave {enclave_id} already initialized")
    if not secs.in_elrange(va):
        raise AddressError(f"page va {va} outside ELRANGE")
    if len(content) > PAGE_SIZE:
        raise AddressError("page content larger than a page")
    if any(m.epcm_entry(p).mapped_va == va for p in secs.pages):
        raise OverlapError(f"va {va} already added")
    pa = m.alloc_epc()
    if pa is None:
        raise OutOfEpc("EPC exhausted")
    m.epcm[m.epc_index(pa)] = EpcmEntry(valid=True, owner_secs=m.secs_ref(enclave_id),
                                        mapped_va=va, page_kind=PageKind.REGULAR,
                                        perms=Perm(perms))
    if content:
        m.write_phys(pa, content)
    secs.pages.append(pa)
    record = struct.pack("<QBBI", va - secs.elrange_base, int(perms),
                         _KIND_CODE[PageKind.REGULAR], len(content))
    secs.hasher.update(b"EADD" + record + content.ljust(PAGE_SIZE, b"\0"))
    m.os_map_page(secs.pid, va, pa, perms)
    return pa


def einit(m: Machine, enclave_id: int) -> bytes:
    secs = _secs(m, enclave_id)
    if secs.initialized:
        raise AlreadyInitialized(f"enclave {enclave_id} already initialized")
    secs.bi_enclave = secs.kind is EnclaveKind.BI_ENCLAVE
    secs.hasher.update(b"EINIT" + bytes([secs.bi_enclave]))
    secs.mrenclave = secs.hasher.digest()
    secs.hasher = None
    secs.initialized = True
    m._after_step()
    return secs.mrenclave


def ecreate_add_init(m: Machine, image: EnclaveImage, kind: Optional[EnclaveKind] = None, *,
                     pid: Optional[int] = None, launch_entries: int = 1) -> int:
    """Build, measure and initialize an enclave from an image. Returns its id."""
    kind = kind or image.kind
    vas = [p.va for p in image.pages]
    if len(set(vas)) != len(vas):
        raise AddressError("duplicate page va in image")
    for p in image.pages:
        if not image.elrange_base <= p.va < image.elrange_base + image.elrange_len:
            raise AddressError(f"page va {p.va} outside ELRANGE")
    if m.free_epc_count < len(image.pages) + 1:
        raise OutOfEpc(f"need {len(image.pages) + 1} EPC pages, {m.free_epc_count} free")
    eid = ecreate(m, image.elrange_base, image.elrange_len, pid=pid, kind=kind,
                  launch_entries=launch_entries)
    for p in image.pages:
        eadd(m, eid, p.va, p.content, p.perms)
    einit(m, eid)
    return eid


def measure_image(image: EnclaveImage, kind: Optional[EnclaveKind] = None) -> bytes:
    """MRENCLAVE an image would get, computed without a machine."""
    kind = kind or image.kind
    h = hashlib.sha256(b"ECREATE" + struct.pack("<Q", image.elrange_len))
    for p in image.pages:
        record = struct.pack("<QBBI", p.va - image.elrange_base, int(p.perms),
                             _KIND_CODE[PageKind.REGULAR], len(p.content))
        h.update(b"EADD" + record + p.content.ljust(PAGE_SIZE, b"\0"))
    h.update(b"EINIT" + bytes([kind is EnclaveKind.BI_ENCLAVE]))
    return h.digest()


# --- entry and exit -------------------------------------------------------

def _ssa_bytes(regs: dict) -> bytes:
    body = json.dumps(sorted(regs.items()), separators=(",", ":")).encode()
    return struct.pack("<I", len(body)) + body


def _ssa_regs(blob: bytes) -> dict:
    (n,) = struct.unpack_from("<I", blob)
    return {k: v for k, v in json.loads(blob[4:4 + n])}


def eenter(m: Machine, cpu: int, enclave_id: int) -> None:
    secs = _secs(m, enclave_id)
    if not secs.alive:
        raise EnclaveDead(f"enclave {enclave_id} was removed")
    if not secs.initialized:
        raise NotInitialized(f"enclave {enclave_id} not initialized")
    ctx = m.cpus[cpu]
    if ctx.in_enclave:
        raise AlreadyInEnclave(f"cpu{cpu} already in enclave {ctx.mode}")
    if secs.bi_enclave:
        if secs.launch_entries <= 0:
            raise LaunchEntryExhausted(f"bi-enclave {enclave_id} accepts no further EENTER")
        secs.launch_entries -= 1
    ctx.pid = secs.pid
    _transition(m, cpu, enclave_id, "EENTER")
    if secs.ssa_saved:
        ctx.regs = _ssa_regs(m.read_phys(secs.secs_page))
        secs.ssa_saved = False
    else:
        ctx.regs = {}
    m._after_step()


def eexit(m: Machine, cpu: int) -> None:
    ctx = m.cpus[cpu]
    if not ctx.in_enclave:
        raise NotInEnclave(f"cpu{cpu} is not in enclave mode")
    if m.enclaves[ctx.mode].bi_enclave and not m.ablated("eexit"):
        raise BiEnclaveEscapeFault(f"EEXIT aborted in bi-enclave {ctx.mode}")
    ctx.regs = {}
    _transition(m, cpu, None, "EEXIT")
    m._after_step()


def aex(m: Machine, cpu: int, reason: str = "Interrupt") -> None:
    """Asynchronous exit: save context to the SSA, scrub CPU state, leave."""
    ctx = m.cpus[cpu]
    if not ctx.in_enclave:
        raise NotInEnclave(f"cpu{cpu} is not in enclave mode")
    secs = m.enclaves[ctx.mode]
    m.write_phys(secs.secs_page, _ssa_bytes(ctx.regs))
    secs.ssa_saved = True
    ctx.regs = {}
    _transition(m, cpu, None, f"AEX:{reason}")
    m._after_step()


def eresume(m: Machine, cpu: int, enclave_id: int) -> None:
    secs = _secs(m, enclave_id)
    if not secs.alive:
        raise EnclaveDead(f"enclave {enclave_id} was removed")
    ctx = m.cpus[cpu]
    if ctx.in_enclave:
        raise AlreadyInEnclave(f"cpu{cpu} already in enclave {ctx.mode}")
    if not secs.ssa_saved:
        raise NoSavedContext(f"enclave {enclave_id} has no saved context")
    ctx.pid = secs.pid
    _transition(m, cpu, enclave_id, "ERESUME")
    ctx.regs = _ssa_regs(m.read_phys(secs.secs_page))
    secs.ssa_saved = False
    m._after_step()


def ereport(m: Machine, cpu: int) -> bytes:
    """MRENCLAVE of the enclave executing on ``cpu`` (hardware-sourced)."""
    ctx = m.cpus[cpu]
    if not ctx.in_enclave:
        raise NotInEnclave(f"cpu{cpu} is not in enclave mode")
    return m.enclaves[ctx.mode].mrenclave


# --- EPC sharing ----------------------------------------------------------

def esadd(m: Machine, cpu: int, page: int, co_owner: int) -> None:
    """Propose sharing ``page`` (owned by the running enclave) with ``co_owner``."""
    ctx = m.cpus[cpu]
    if not ctx.in_enclave or not m.is_epc(page):
        raise NotOwner("ESADD must run inside the page's owner enclave")
    entry = m.epcm_entry(page)
    if (not entry.valid or entry.page_kind is PageKind.SECS
            or entry.owner_secs != m.secs_ref(ctx.mode)):
        raise NotOwner(f"enclave {ctx.mode} does not own page {page}")
    if entry.page_kind is PageKind.SHARE_PENDING:
        raise PendingExists(f"page {page} already has a pending share")
    if entry.co_owned:
        raise AlreadyShared(f"page {page} already has a co-owner")
    peer = m.enclaves.get(co_owner)
    if peer is None or not peer.initialized or not peer.alive or co_owner == ctx.mode:
        raise UnknownCoOwner(f"no eligible enclave {co_owner}")
    m.zero_page(page)
    entry.page_kind = PageKind.SHARE_PENDING
    m.share_requests[m.epc_index(page)] = ShareRequest(ctx.mode, page, co_owner)
    m.tlb_shootdown(page)
    m._after_step()


def esaccept(m: Machine, cpu: int, page: int) -> None:
    ctx = m.cpus[cpu]
    req = m.share_requests.get(m.epc_index(page)) if m.is_epc(page) else None
    if req is None:
        raise NoPendingShare(f"no pending share for page {page}")
    if ctx.mode != req.proposed_co_owner:
        raise WrongAcceptor(f"page {page} was offered to enclave {req.proposed_co_owner}")
    entry = m.epcm_entry(page)
    if not m.enclaves[ctx.mode].in_elrange(entry.mapped_va):
        raise AcceptorRangeError(f"va {entry.mapped_va} outside acceptor ELRANGE")
    m.tlb_shootdown(page)
    entry.co_owner_secs = m.secs_ref(ctx.mode)
    entry.page_kind = PageKind.REGULAR
    req.state = "Consumed"
    del m.share_requests[m.epc_index(page)]
    m._after_step()


def destroy_share(m: Machine, page: int) -> None:
    """Tear down a pending or established share; the owner keeps the page."""
    entry = m.epcm_entry(page)
    idx = m.epc_index(page)
    if idx not in m.share_requests and not entry.co_owned:
        raise NoPendingShare(f"page {page} is not shared")
    m.zero_page(page)
    entry.co_owner_secs = NO_CO_OWNER
    entry.page_kind = PageKind.REGULAR
    m.share_requests.pop(idx, None)
    m.tlb_shootdown(page)
    m._after_step()


def esdestroy(m: Machine, cpu: int, page: int) -> None:
    """Either party may tear down a share it participates in."""
    ctx = m.cpus[cpu]
    if not ctx.in_enclave or not m.is_epc(page):
        raise NotOwner("share teardown must run inside a participating enclave")
    entry = m.epcm_entry(page)
    me = m.secs_ref(ctx.mode)
    req = m.share_requests.get(m.epc_index(page))
    parties = {entry.owner_secs, entry.co_owner_secs}
    if req is not None:
        parties.add(m.secs_ref(req.proposed_co_owner))
    if not entry.valid or me not in parties:
        raise NotOwner(f"enclave {ctx.mode} is not a party to page {page}")
    destroy_share(m, page)


def eremove_enclave(m: Machine, enclave_id: int) -> None:
    """Tear an enclave down (kernel-requested termination)."""
    secs = _secs(m, enclave_id)
    if not secs.alive:
        return
    for cpu, ctx in enumerate(m.cpus):
        if ctx.mode == enclave_id:
            ctx.regs = {}
            _transition(m, cpu, None, "EREMOVE")
    ref = m.secs_ref(enclave_id)
    for idx, req in list(m.share_requests.items()):
        if req.proposed_co_owner == enclave_id:
            destroy_share(m, m.epc_pa(idx))
    for idx, entry in enumerate(m.epcm):
        if entry.valid and entry.co_owned and entry.co_owner_secs == ref:
            destroy_share(m, m.epc_pa(idx))
    for pa in secs.pages + [secs.secs_page]:
        m.share_requests.pop(m.epc_index(pa), None)
        m.tlb_shootdown(pa)
        m.free_epc(pa)
    secs.pages = []
    secs.alive = False
    secs.ssa_saved = False
    m._after_step()
