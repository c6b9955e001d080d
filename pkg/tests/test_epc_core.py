from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bienclave import isa
from bienclave.errors import AblationRefused, AddressError, ConfigError
from bienclave.guard import load, store, translate
from bienclave.machine import (
    ABORT_BYTE,
    NO_CO_OWNER,
    PAGE_SIZE,
    AccessKind,
    EnclaveKind,
    Machine,
    MachineConfig,
    Perm,
    build_machine,
)

SMALL = MachineConfig(phys_pages=64, epc_pages=16, cpus=2, va_pages=32)


def _tlb(m, cpu):
    return [(e.pid, e.va, e.pa) for e in m.tlb_entries(cpu)]


def test_build_machine_large_config():
    m = build_machine(MachineConfig(phys_pages=16384, epc_pages=8192, cpus=1))
    assert len(m.epcm) == 8192
    assert not any(e.valid for e in m.epcm)
    assert m.enclaves == {}
    assert m.tlbs == [{}]
    assert list(m.processes) == [0]


@pytest.mark.parametrize("doc", [
    {"phys_pages": 64, "epc_pages": 0, "cpus": 1, "va_pages": 8},
    {"phys_pages": 1024, "epc_pages": 2048, "cpus": 1, "va_pages": 8},
    {"phys_pages": 64, "epc_pages": 8, "cpus": 0, "va_pages": 8},
    {"phys_pages": 64, "epc_pages": 8, "cpus": 1, "va_pages": 0},
    {"phys_pages": 64, "epc_pages": 8, "cpus": 1, "va_pages": 8, "prm_pages": 4},
])
def test_bad_configs_rejected(doc):
    with pytest.raises(ConfigError):
        Machine(MachineConfig.from_dict(doc))


def test_config_json_round_trip():
    text = json.dumps(SMALL.to_dict())
    assert MachineConfig.from_json(text) == SMALL
    with pytest.raises(ConfigError):
        MachineConfig.from_json('{"phys_pages": 4}')
    with pytest.raises(ConfigError):
        MachineConfig.from_json("[1, 2]")
    with pytest.raises(ConfigError):
        MachineConfig.from_json('{"phys_pages": 64, "epc_pages": 8, "cpus": 1, "va_pages": 8, "x": 1}')


def test_prm_layout_is_at_top_of_memory():
    m = Machine(SMALL)
    assert m.prm_base + m.prm_pages == SMALL.phys_pages
    assert m.epcm_base == m.prm_base
    assert m.epc_base == m.epcm_base + m.epcm_meta_pages
    assert [m.is_epc(pa) for pa in (m.epc_base - 1, m.epc_base, 63)] == [False, True, True]
    assert not m.is_prm(m.prm_base - 1)


def test_untrusted_map_and_access():
    m = Machine(SMALL)
    m.os_map_page(0, 10, 5, Perm.R | Perm.W)
    store(m, 0, 10, b"hello")
    assert load(m, 0, 10, 0, 5) == b"hello"


def test_remap_invalidates_old_tlb_entry():
    m = Machine(SMALL)
    m.write_phys(5, b"five")
    m.write_phys(6, b"six")
    m.os_map_page(0, 10, 5)
    assert load(m, 0, 10, 0, 4) == b"five"
    assert _tlb(m, 0) == [(0, 10, 5)]
    m.os_map_page(0, 10, 6)
    assert _tlb(m, 0) == []
    assert load(m, 0, 10, 0, 3) == b"six"


def test_adversarial_remap_keeps_stale_entry():
    m = Machine(SMALL)
    m.os_map_page(0, 10, 5)
    translate(m, 0, 10, AccessKind.READ)
    m.os_map_page(0, 10, 6, invalidate=False)
    assert _tlb(m, 0) == [(0, 10, 5)]


def test_tlb_flush_empty_is_noop():
    m = Machine(SMALL)
    m.tlb_flush(0)
    assert m.tlb_entries(0) == []


def test_two_cpu_flush_is_per_cpu():
    # hand-enumerated TLB contents after each scripted step
    m = Machine(SMALL)
    m.os_map_page(0, 4, 4)
    m.os_map_page(0, 5, 5)
    steps = [
        (lambda: translate(m, 0, 4, AccessKind.READ), [(0, 4, 4)], []),
        (lambda: translate(m, 1, 5, AccessKind.READ), [(0, 4, 4)], [(0, 5, 5)]),
        (lambda: translate(m, 1, 4, AccessKind.READ), [(0, 4, 4)], [(0, 4, 4), (0, 5, 5)]),
        (lambda: m.tlb_flush(0), [], [(0, 4, 4), (0, 5, 5)]),
        (lambda: m.os_map_page(0, 5, 6), [], [(0, 4, 4)]),
        (lambda: m.tlb_flush(1), [], []),
    ]
    for action, cpu0, cpu1 in steps:
        action()
        assert _tlb(m, 0) == cpu0
        assert _tlb(m, 1) == cpu1


def _one_enclave(kind=EnclaveKind.NORMAL):
    m = Machine(SMALL, debug=True)
    image = isa.EnclaveImage(8, 4, (isa.ImagePage(8, b"secret", Perm.R | Perm.W),), kind)
    eid = isa.ecreate_add_init(m, image)
    return m, eid


def test_untrusted_view_of_epc_is_abort_page():
    m, eid = _one_enclave()
    pa = m.enclaves[eid].pages[0]
    m.os_map_page(0, 9, pa)
    assert load(m, 0, 9) == bytes([ABORT_BYTE]) * PAGE_SIZE
    store(m, 0, 9, b"overwrite")
    assert m.abort_writes == 1
    assert m.read_phys(pa, 0, 6) == b"secret"


def test_untrusted_view_of_epcm_is_abort_page():
    m, _ = _one_enclave()
    m.os_map_page(0, 9, m.epcm_base)
    assert str(translate(m, 0, 9, AccessKind.READ)) == "AbortPage"


def test_enclave_pte_to_wrong_epc_page_faults():
    m, eid = _one_enclave()
    other = m.alloc_epc()
    secs = m.enclaves[eid]
    isa.eenter(m, 0, eid)
    m.os_map_page(secs.pid, 8, other, invalidate=True)
    assert str(translate(m, 0, 8, AccessKind.READ)) == "Fault:EpcmOwnerMismatch"


def test_direct_dram_write_to_prm_breaks_integrity():
    m, eid = _one_enclave()
    pa = m.enclaves[eid].pages[0]
    assert m.integrity_ok(pa)
    m.dram_flip(pa, 3)
    assert not m.integrity_ok(pa)
    isa.eenter(m, 0, eid)
    assert str(translate(m, 0, 8, AccessKind.READ)) == "Fault:IntegrityViolation"


def test_dram_outside_prm_has_no_integrity_check():
    m = Machine(SMALL)
    m.dram_write(4, b"x")
    assert m.integrity_ok(4)
    assert m.dram_read(4)[:1] == b"x"


def test_bus_probe_of_prm_sees_ciphertext():
    m, eid = _one_enclave()
    pa = m.enclaves[eid].pages[0]
    assert m.dram_read(pa) != m.read_phys(pa)


def test_co_owner_field_sentinel_and_width():
    m, eid = _one_enclave()
    entry = m.epcm_entry(m.enclaves[eid].pages[0])
    assert entry.co_owner_secs == NO_CO_OWNER == (1 << 52) - 1
    assert not entry.co_owned
    assert entry.owner_secs < NO_CO_OWNER


def test_address_bounds():
    m = Machine(SMALL)
    with pytest.raises(AddressError):
        m.os_map_page(0, SMALL.va_pages, 1)
    with pytest.raises(AddressError):
        m.os_map_page(0, 1, SMALL.phys_pages)
    with pytest.raises(AddressError):
        m.page_table(99)


def test_ablation_needs_test_build(monkeypatch):
    monkeypatch.delenv("BIENCLAVE_TEST_BUILD", raising=False)
    with pytest.raises(AblationRefused):
        Machine(SMALL, ablations=["check1"])
    monkeypatch.setenv("BIENCLAVE_TEST_BUILD", "1")
    assert Machine(SMALL, ablations=["check1"]).ablated("check1")
    with pytest.raises(ConfigError):
        Machine(SMALL, ablations=["nonsense"])


@settings(max_examples=50, deadline=None)
@given(phys=st.integers(8, 4096), epc_frac=st.floats(0.05, 0.9), cpus=st.integers(1, 8),
       va=st.integers(1, 4096))
def test_construction_is_deterministic(phys, epc_frac, cpus, va):
    epc = max(1, int(phys * epc_frac))
    cfg = MachineConfig(phys_pages=phys, epc_pages=epc, cpus=cpus, va_pages=va)
    try:
        first = Machine(cfg).dump_json()
    except ConfigError:
        return
    assert Machine(cfg).dump_json() == first
    m = Machine(cfg)
    assert m.epc_base + epc <= phys
    assert m.free_epc_count == epc
