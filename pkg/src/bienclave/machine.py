"""Physical memory, PRM/EPC layout, EPCM, page tables and per-CPU TLBs.

The machine is one mutable state object. Everything the untrusted OS can do
(page-table edits, TLB shootdowns, raw DRAM writes) lives here; the enclave
instructions are in :mod:`bienclave.isa` and the translation check is in
:mod:`bienclave.guard`.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .errors import AblationRefused, AddressError, ConfigError

PAGE_SIZE = 4096
EPCM_ENTRY_SIZE = 32
EPCM_ENTRIES_PER_PAGE = PAGE_SIZE // EPCM_ENTRY_SIZE
SECS_FIELD_BITS = 52
NO_CO_OWNER = (1 << SECS_FIELD_BITS) - 1
ABORT_BYTE = 0xFF

ABLATIONS = frozenset({"check1", "owner_check", "attestation", "eexit"})
TEST_BUILD_ENV = "BIENCLAVE_TEST_BUILD"

_ZERO_DIGEST = hashlib.blake2b(bytes(PAGE_SIZE), digest_size=16).digest()


class Perm(enum.IntFlag):
    NONE = 0
    R = 1
    W = 2
    X = 4

    @classmethod
    def parse(cls, text: str) -> "Perm":
        perms = cls.NONE
        for ch in text:
            if ch == "-":
                continue
            try:
                perms |= {"r": cls.R, "w": cls.W, "x": cls.X}[ch.lower()]
            except KeyError:
                raise ValueError(f"bad permission string {text!r}") from None
        return perms

    def render(self) -> str:
        return "".join(c if self & f else "-" for c, f in (("r", Perm.R), ("w", Perm.W), ("x", Perm.X)))


class AccessKind(enum.Enum):
    READ = "R"
    WRITE = "W"
    EXECUTE = "X"

    @property
    def perm(self) -> Perm:
        return {"R": Perm.R, "W": Perm.W, "X": Perm.X}[self.value]


class PageKind(enum.Enum):
    REGULAR = "Regular"
    SECS = "SecsPage"
    SHARE_PENDING = "SharePending"


class EnclaveKind(enum.Enum):
    NORMAL = "normal"
    BI_ENCLAVE = "bi"
    MONITOR = "monitor"


@dataclass(frozen=True)
class MachineConfig:
    phys_pages: int
    epc_pages: int
    cpus: int = 1
    va_pages: int = 1024
    prm_pages: Optional[int] = None

    @classmethod
    def from_dict(cls, doc: dict) -> "MachineConfig":
        required = {"phys_pages", "epc_pages", "cpus", "va_pages"}
        missing = required - doc.keys()
        if missing:
            raise ConfigError(f"missing config keys: {sorted(missing)}")
        unknown = doc.keys() - required - {"prm_pages"}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        for key, value in doc.items():
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError(f"{key} must be an integer")
        return cls(**doc)

    @classmethod
    def from_json(cls, text: str) -> "MachineConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        doc = {"phys_pages": self.phys_pages, "epc_pages": self.epc_pages,
               "cpus": self.cpus, "va_pages": self.va_pages}
        if self.prm_pages is not None:
            doc["prm_pages"] = self.prm_pages
        return doc


@dataclass
class EpcmEntry:
    valid: bool = False
    owner_secs: int = NO_CO_OWNER
    co_owner_secs: int = NO_CO_OWNER
    mapped_va: Optional[int] = None
    page_kind: PageKind = PageKind.REGULAR
    perms: Perm = Perm.NONE

    @property
    def co_owned(self) -> bool:
        return self.co_owner_secs != NO_CO_OWNER

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "owner_secs": self.owner_secs,
            "co_owner_secs": None if not self.co_owned else self.co_owner_secs,
            "mapped_va": self.mapped_va,
            "page_kind": self.page_kind.value,
            "perms": self.perms.render(),
        }


@dataclass
class Secs:
    """Enclave control structure plus the simulator's runtime bookkeeping."""

    enclave_id: int
    elrange_base: int
    elrange_len: int
    secs_page: int
    pid: int
    kind: EnclaveKind = EnclaveKind.NORMAL
    bi_enclave: bool = False
    initialized: bool = False
    mrenclave: Optional[bytes] = None
    alive: bool = True
    launch_entries: int = 1
    ssa_saved: bool = False
    pages: list = field(default_factory=list)
    hasher: object = field(default=None, repr=False, compare=False)

    def in_elrange(self, va: int) -> bool:
        return self.elrange_base <= va < self.elrange_base + self.elrange_len

    def to_dict(self) -> dict:
        return {
            "enclave_id": self.enclave_id,
            "elrange": [self.elrange_base, self.elrange_len],
            "secs_page": self.secs_page,
            "pid": self.pid,
            "kind": self.kind.value,
            "bi_enclave": self.bi_enclave,
            "initialized": self.initialized,
            "mrenclave": self.mrenclave.hex() if self.mrenclave else None,
            "alive": self.alive,
            "launch_entries": self.launch_entries,
            "ssa_saved": self.ssa_saved,
            "pages": list(self.pages),
        }


@dataclass(frozen=True)
class Pte:
    pa: int
    perms: Perm


@dataclass(frozen=True)
class TlbEntry:
    pid: int
    va: int
    pa: int
    mode: Optional[int]  # None = untrusted, otherwise the enclave id
    perms: Perm


@dataclass
class CpuContext:
    cpu_id: int
    mode: Optional[int] = None
    pid: int = 0
    regs: dict = field(default_factory=dict)

    @property
    def in_enclave(self) -> bool:
        return self.mode is not None

    def mode_tag(self) -> str:
        return "untrusted" if self.mode is None else f"enclave:{self.mode}"


def mode_tag(mode: Optional[int]) -> str:
    return "untrusted" if mode is None else f"enclave:{mode}"


@dataclass
class ShareRequest:
    owner: int
    page: int
    proposed_co_owner: int
    state: str = "Pending"


class Machine:
    """Simulated SGX-style machine with the bi-enclave extensions.

    Physical layout: ordinary DRAM first, then PRM, which starts with the
    EPCM metadata pages followed by the EPC pages.
    """

    def __init__(self, config: MachineConfig, *, debug: bool = False,
                 ablations: Iterable[str] = ()):
        self.config = config
        self._validate_config(config)
        ablations = frozenset(ablations)
        if ablations:
            unknown = ablations - ABLATIONS
            if unknown:
                raise ConfigError(f"unknown ablation(s): {sorted(unknown)}")
            if os.environ.get(TEST_BUILD_ENV) != "1":
                raise AblationRefused(
                    f"ablations require a test build ({TEST_BUILD_ENV}=1)")
        self.ablations = ablations
        self.debug = debug

        self.epcm_meta_pages = -(-config.epc_pages * EPCM_ENTRY_SIZE // PAGE_SIZE)
        self.prm_pages = config.prm_pages or (self.epcm_meta_pages + config.epc_pages)
        self.prm_base = config.phys_pages - self.prm_pages
        self.epcm_base = self.prm_base
        self.epc_base = self.epcm_base + self.epcm_meta_pages

        self.epcm = [EpcmEntry() for _ in range(config.epc_pages)]
        self.enclaves: dict[int, Secs] = {}
        self.processes: dict[int, dict[int, Pte]] = {0: {}}
        self.cpus = [CpuContext(i) for i in range(config.cpus)]
        self.tlbs: list[dict[tuple, TlbEntry]] = [{} for _ in range(config.cpus)]
        self.share_requests: dict[int, ShareRequest] = {}
        self.abort_writes = 0
        self.transitions: list[tuple] = []  # (cpu, old mode, new mode, instruction)
        self.trace = None  # callable receiving one dict per translation

        self._mem: dict[int, bytearray] = {}
        self._shadow: dict[int, bytes] = {}
        self._free_epc = list(range(config.epc_pages))
        self._next_eid = 1
        self._next_pid = 1

    @staticmethod
    def _validate_config(config: MachineConfig) -> None:
        for name in ("phys_pages", "epc_pages", "cpus", "va_pages"):
            if getattr(config, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if config.epc_pages > config.phys_pages:
            raise ConfigError("EPC larger than physical memory")
        meta = -(-config.epc_pages * EPCM_ENTRY_SIZE // PAGE_SIZE)
        prm = config.prm_pages if config.prm_pages is not None else meta + config.epc_pages
        if prm < meta + config.epc_pages:
            raise ConfigError("EPC and EPCM metadata exceed PRM")
        if prm > config.phys_pages:
            raise ConfigError("PRM larger than physical memory")
        if config.phys_pages >= NO_CO_OWNER:
            raise ConfigError("physical page numbers must fit the 52-bit SECS field")

    # --- address classification -------------------------------------------

    def check_va(self, va: int) -> None:
        if not 0 <= va < self.config.va_pages:
            raise AddressError(f"virtual page {va} outside address space")

    def check_pa(self, pa: int) -> None:
        if not 0 <= pa < self.config.phys_pages:
            raise AddressError(f"physical page {pa} outside physical memory")

    def is_prm(self, pa: int) -> bool:
        return pa >= self.prm_base

    def is_epc(self, pa: int) -> bool:
        return self.epc_base <= pa < self.epc_base + self.config.epc_pages

    def epc_index(self, pa: int) -> int:
        if not self.is_epc(pa):
            raise AddressError(f"physical page {pa} is not an EPC page")
        return pa - self.epc_base

    def epc_pa(self, index: int) -> int:
        return self.epc_base + index

    def epcm_entry(self, pa: int) -> EpcmEntry:
        return self.epcm[self.epc_index(pa)]

    def epcm_meta_page(self, pa: int) -> int:
        """Physical PRM page holding the EPCM entry for EPC page ``pa``."""
        return self.epcm_base + self.epc_index(pa) // EPCM_ENTRIES_PER_PAGE

    def secs_ref(self, enclave_id: int) -> int:
        """EPC-relative page number of an enclave's SECS, as stored in EPCM."""
        ref = self.epc_index(self.enclaves[enclave_id].secs_page)
        assert ref < NO_CO_OWNER
        return ref

    def enclave_by_secs_ref(self, ref: int) -> Optional[Secs]:
        if ref == NO_CO_OWNER:
            return None
        pa = self.epc_pa(ref)
        for secs in self.enclaves.values():
            if secs.alive and secs.secs_page == pa:
                return secs
        return None

    def ablated(self, name: str) -> bool:
        return name in self.ablations

    # --- processes and page tables (untrusted) ----------------------------

    def new_process(self) -> int:
        pid = self._next_pid
        self._next_pid += 1
        self.processes[pid] = {}
        return pid

    def page_table(self, pid: int) -> dict[int, Pte]:
        try:
            return self.processes[pid]
        except KeyError:
            raise AddressError(f"no process {pid}") from None

    def os_map_page(self, pid: int, va: int, pa: int, perms: Perm = Perm.R | Perm.W | Perm.X,
                    *, invalidate: bool = True) -> None:
        """OS page-table write. ``invalidate=False`` is the adversarial variant."""
        self.check_va(va)
        self.check_pa(pa)
        self.page_table(pid)[va] = Pte(pa, Perm(perms))
        if invalidate:
            self.tlb_invalidate(pid, va)
        self._after_step()

    def os_unmap_page(self, pid: int, va: int, *, invalidate: bool = True) -> None:
        self.page_table(pid).pop(va, None)
        if invalidate:
            self.tlb_invalidate(pid, va)
        self._after_step()

    def os_schedule(self, cpu: int, pid: int) -> None:
        """Switch an untrusted CPU to another process's address space."""
        ctx = self.cpus[cpu]
        if ctx.in_enclave:
            raise AddressError("cannot switch address space while in enclave mode")
        self.page_table(pid)
        if ctx.pid != pid:
            ctx.pid = pid
            self.tlb_flush(cpu)

    # --- TLBs -------------------------------------------------------------

    def tlb_flush(self, cpu: int) -> None:
        self.tlbs[cpu].clear()

    def tlb_invalidate(self, pid: int, va: int) -> None:
        for tlb in self.tlbs:
            tlb.pop((pid, va), None)

    def tlb_shootdown(self, pa: int) -> None:
        """Remove every cached translation to ``pa`` on all CPUs."""
        for tlb in self.tlbs:
            for key in [k for k, e in tlb.items() if e.pa == pa]:
                del tlb[key]

    def tlb_entries(self, cpu: int) -> list[TlbEntry]:
        return sorted(self.tlbs[cpu].values(), key=lambda e: (e.pid, e.va))

    # --- physical memory ----------------------------------------------------

    def read_phys(self, pa: int, offset: int = 0, size: int = PAGE_SIZE) -> bytes:
        page = self._mem.get(pa)
        if page is None:
            return bytes(size)
        return bytes(page[offset:offset + size])

    def write_phys(self, pa: int, data: bytes, offset: int = 0) -> None:
        """Trusted write path (CPU or MEE): keeps the integrity shadow current."""
        if offset < 0 or offset + len(data) > PAGE_SIZE:
            raise AddressError("write crosses page boundary")
        page = self._mem.get(pa)
        if page is None:
            page = self._mem[pa] = bytearray(PAGE_SIZE)
        page[offset:offset + len(data)] = data
        if self.is_prm(pa):
            self._shadow[pa] = hashlib.blake2b(page, digest_size=16).digest()

    def zero_page(self, pa: int) -> None:
        self._mem.pop(pa, None)
        self._shadow.pop(pa, None)

    def dram_write(self, pa: int, data: bytes, offset: int = 0) -> None:
        """Physical write that bypasses the CPU (bus or rowhammer attacker)."""
        self.check_pa(pa)
        if offset < 0 or offset + len(data) > PAGE_SIZE:
            raise AddressError("write crosses page boundary")
        page = self._mem.get(pa)
        if page is None:
            page = self._mem[pa] = bytearray(PAGE_SIZE)
        page[offset:offset + len(data)] = data

    def dram_flip(self, pa: int, bit: int) -> None:
        byte, shift = divmod(bit, 8)
        cur = self.read_phys(pa, byte, 1)[0]
        self.dram_write(pa, bytes([cur ^ (1 << shift)]), byte)

    def dram_read(self, pa: int) -> bytes:
        """What a bus probe sees: plaintext for DRAM, MEE ciphertext for PRM."""
        self.check_pa(pa)
        content = self.read_phys(pa)
        if not self.is_prm(pa):
            return content
        return hashlib.shake_256(b"mee" + pa.to_bytes(8, "little") + content).digest(PAGE_SIZE)

    def integrity_ok(self, pa: int) -> bool:
        if not self.is_prm(pa):
            return True
        page = self._mem.get(pa)
        current = _ZERO_DIGEST if page is None else hashlib.blake2b(page, digest_size=16).digest()
        return current == self._shadow.get(pa, _ZERO_DIGEST)

    def trusted_digest(self, pa: int) -> str:
        """Digest of the last trusted write to a PRM page (what the MEE vouches for)."""
        if not self.is_prm(pa):
            return self.page_digest(pa)
        return self._shadow.get(pa, _ZERO_DIGEST).hex()

    def page_digest(self, pa: int) -> str:
        return hashlib.sha256(self.read_phys(pa)).hexdigest()

    # --- EPC allocation -----------------------------------------------------

    def alloc_epc(self) -> Optional[int]:
        if not self._free_epc:
            return None
        return self.epc_pa(self._free_epc.pop(0))

    def free_epc(self, pa: int) -> None:
        idx = self.epc_index(pa)
        self.epcm[idx] = EpcmEntry()
        self.zero_page(pa)
        self._free_epc.append(idx)
        self._free_epc.sort()

    @property
    def free_epc_count(self) -> int:
        return len(self._free_epc)

    def next_enclave_id(self) -> int:
        eid = self._next_eid
        self._next_eid += 1
        return eid

    # --- invariants and dumps -----------------------------------------------

    def _after_step(self) -> None:
        if self.debug:
            from .guard import check_invariants
            check_invariants(self)

    def dump_state(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "layout": {"prm_base": self.prm_base, "epcm_base": self.epcm_base,
                       "epc_base": self.epc_base, "epcm_meta_pages": self.epcm_meta_pages},
            "ablations": sorted(self.ablations),
            "cpus": [{"cpu": c.cpu_id, "mode": c.mode_tag(), "pid": c.pid,
                      "regs": dict(sorted(c.regs.items()))} for c in self.cpus],
            "enclaves": [s.to_dict() for _, s in sorted(self.enclaves.items())],
            "epcm": {"entries": len(self.epcm),
                     "valid": {str(i): e.to_dict() for i, e in enumerate(self.epcm) if e.valid}},
            "page_tables": {str(pid): {str(va): [pte.pa, pte.perms.render()]
                                       for va, pte in sorted(pt.items())}
                            for pid, pt in sorted(self.processes.items())},
            "tlbs": [[{"pid": e.pid, "va": e.va, "pa": e.pa, "mode": mode_tag(e.mode),
                       "perms": e.perms.render()} for e in self.tlb_entries(i)]
                     for i in range(len(self.tlbs))],
            "share_requests": {str(k): {"owner": r.owner, "co_owner": r.proposed_co_owner,
                                        "state": r.state}
                               for k, r in sorted(self.share_requests.items())},
            "memory": {str(pa): self.page_digest(pa) for pa in sorted(self._mem)},
            "tampered": [pa for pa in sorted(self._mem) if not self.integrity_ok(pa)],
            "abort_writes": self.abort_writes,
        }

    def dump_json(self) -> str:
        return json.dumps(self.dump_state(), sort_keys=True, indent=1)


def build_machine(config: MachineConfig, **kwargs) -> Machine:
    return Machine(config, **kwargs)
