"""The default machine fixture used by the attack suite, the CLI and tests.

Two bi-enclaves (A, B) and one monitor enclave (M), each in its own process
with ELRANGE [16, 32). Every process also maps two untrusted DRAM pages at
va 2 (code) and 3 (data). A and B each own a channel page attested with M.

    enclave  code  data  secret  channel  spare
    A        16    17    18      19       28
    B        20    21    22      23       29
    M        24    25    26      -        30

CPUs: 0 runs A, 1 runs B, 2 runs M, 3 stays in untrusted mode for the OS.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from typing import Optional

from . import isa
from .channel import Channel, establish_channel
from .kernel import SimKernel
from .machine import EnclaveKind, Machine, MachineConfig, Perm
from .monitor import Monitor

ELRANGE_BASE = 16
ELRANGE_LEN = 16
UNTRUSTED_CODE_VA = 2
UNTRUSTED_DATA_VA = 3
UNTRUSTED_CODE_PA = 2
UNTRUSTED_DATA_PA = 3

LAYOUT = {
    "A": {"code": 16, "data": 17, "secret": 18, "chan": 19, "spare": 28},
    "B": {"code": 20, "data": 21, "secret": 22, "chan": 23, "spare": 29},
    "M": {"code": 24, "data": 25, "secret": 26, "spare": 30},
}
CPU = {"A": 0, "B": 1, "M": 2, "OS": 3}
CONFIG = MachineConfig(phys_pages=256, epc_pages=64, cpus=4, va_pages=64)

_PERMS = {"code": Perm.R | Perm.X, "data": Perm.R | Perm.W, "secret": Perm.R | Perm.W,
          "chan": Perm.R | Perm.W, "spare": Perm.R | Perm.W}


def read_data(name: str) -> bytes:
    return resources.files("bienclave").joinpath("data").joinpath(name).read_bytes()


def fixture_policy() -> bytes:
    return read_data("fixture.policy")


def image_for(name: str) -> isa.EnclaveImage:
    kind = EnclaveKind.MONITOR if name == "M" else EnclaveKind.BI_ENCLAVE
    pages = tuple(isa.ImagePage(va, f"{name}:{role}".encode(), _PERMS[role])
                  for role, va in sorted(LAYOUT[name].items(), key=lambda kv: kv[1]))
    return isa.EnclaveImage(ELRANGE_BASE, ELRANGE_LEN, pages, kind)


@dataclass
class Fixture:
    m: Machine
    ids: dict
    monitor: Monitor
    kernel: SimKernel
    channels: dict = field(default_factory=dict)

    @property
    def a(self) -> int:
        return self.ids["A"]

    @property
    def b(self) -> int:
        return self.ids["B"]

    @property
    def mon(self) -> int:
        return self.ids["M"]

    def pid(self, name: str) -> int:
        return self.m.enclaves[self.ids[name]].pid

    def pa(self, name: str, role: str) -> int:
        """Physical page backing an enclave's page with the given role."""
        va = LAYOUT[name][role]
        secs = self.m.enclaves[self.ids[name]]
        for pa in secs.pages:
            if self.m.epcm_entry(pa).mapped_va == va:
                return pa
        raise KeyError(f"{name} has no page at va {va}")

    def name_of(self, enclave_id: int) -> str:
        return next(n for n, e in self.ids.items() if e == enclave_id)


def build_fixture(*, ablations=(), debug: bool = False, policy: Optional[bytes] = None,
                  kernel: Optional[SimKernel] = None) -> Fixture:
    m = Machine(CONFIG, debug=debug, ablations=ablations)
    ids = {}
    for name in ("A", "B", "M"):
        ids[name] = isa.ecreate_add_init(m, image_for(name))
        pid = m.enclaves[ids[name]].pid
        m.os_map_page(pid, UNTRUSTED_CODE_VA, UNTRUSTED_CODE_PA, Perm.R | Perm.X)
        m.os_map_page(pid, UNTRUSTED_DATA_VA, UNTRUSTED_DATA_PA, Perm.R | Perm.W)
    m.write_phys(UNTRUSTED_CODE_PA, b"untrusted code")
    m.write_phys(UNTRUSTED_DATA_PA, b"untrusted data")
    for name in ("A", "B", "M"):
        isa.eenter(m, CPU[name], ids[name])

    mrs = {n: m.enclaves[e].mrenclave for n, e in ids.items()}
    kernel = kernel if kernel is not None else SimKernel()
    monitor = Monitor(m, ids["M"], kernel)
    fx = Fixture(m, ids, monitor, kernel)
    for name in ("A", "B"):
        ch = establish_channel(m, CPU[name], CPU["M"], fx.pa(name, "chan"),
                               owner_expects=mrs["M"], peer_expects=mrs[name])
        fx.channels[name] = ch
        monitor.register(ch)
    monitor.load_policy(fixture_policy() if policy is None else policy)
    return fx


def channel_of(fx: Fixture, name: str) -> Channel:
    return fx.channels[name]
