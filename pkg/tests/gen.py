"""Random small machines for oracle and share-protocol tests."""

from __future__ import annotations

import random

from bienclave import isa
from bienclave.errors import IsaError
from bienclave.machine import EnclaveKind, Machine, MachineConfig, Perm

SMALL = MachineConfig(phys_pages=48, epc_pages=24, cpus=4, va_pages=24)
_PERMS = [Perm.R, Perm.R | Perm.W, Perm.R | Perm.X, Perm.R | Perm.W | Perm.X]


def random_machine(rng: random.Random, *, ablations=()) -> Machine:
    """1-4 enclaves, random ELRANGEs, some shares, some tampering."""
    m = Machine(SMALL, ablations=ablations)
    m.write_phys(0, b"dram")
    ids = []
    for i in range(rng.randint(1, 4)):
        base = rng.randrange(4, 16)
        length = rng.randint(2, 6)
        n = rng.randint(1, min(length, 3))
        vas = rng.sample(range(base, base + length), n)
        kind = rng.choice(list(EnclaveKind))
        pages = tuple(isa.ImagePage(va, bytes([i, va]), rng.choice(_PERMS)) for va in vas)
        ids.append(isa.ecreate_add_init(m, isa.EnclaveImage(base, length, pages, kind)))
    for cpu, eid in enumerate(ids):
        isa.eenter(m, cpu, eid)
    for _ in range(rng.randint(0, 3)):
        if len(ids) < 2:
            break
        owner, peer = rng.sample(range(len(ids)), 2)
        pa = rng.choice(m.enclaves[ids[owner]].pages)
        try:
            isa.esadd(m, owner, pa, ids[peer])
            if rng.random() < 0.7:
                m.os_map_page(m.enclaves[ids[peer]].pid, m.epcm_entry(pa).mapped_va, pa)
                isa.esaccept(m, peer, pa)
        except IsaError:
            pass
    if rng.random() < 0.3:
        victims = [pa for s in m.enclaves.values() for pa in s.pages]
        m.dram_flip(rng.choice(victims), rng.randrange(8 * 64))
    return m
