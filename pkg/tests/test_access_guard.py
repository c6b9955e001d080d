from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bienclave import isa
from bienclave.errors import ScaleError
from bienclave.fixture import CPU, LAYOUT, UNTRUSTED_DATA_VA, build_fixture
from bienclave.guard import FaultReason, Outcome, access, check_invariants, translate
from bienclave.machine import AccessKind, EnclaveKind, Machine, MachineConfig, Perm
from bienclave.oracle import OS, UNMAPPED, access_matrix_oracle, reference_matrix, targets

from gen import random_machine

TINY = MachineConfig(phys_pages=32, epc_pages=12, cpus=2, va_pages=16)


def _pair(share: bool):
    """A bi-enclave and a monitor in separate processes, ELRANGE [8, 12)."""
    m = Machine(TINY)
    bi = isa.ecreate_add_init(m, isa.EnclaveImage(8, 4, (
        isa.ImagePage(8, b"bi code", Perm.R | Perm.X),
        isa.ImagePage(9, b"bi chan", Perm.R | Perm.W)), EnclaveKind.BI_ENCLAVE))
    mon = isa.ecreate_add_init(m, isa.EnclaveImage(8, 4, (
        isa.ImagePage(10, b"mon data", Perm.R | Perm.W),), EnclaveKind.MONITOR))
    isa.eenter(m, 0, bi)
    isa.eenter(m, 1, mon)
    shared = m.enclaves[bi].pages[1]
    if share:
        isa.esadd(m, 0, shared, mon)
        m.os_map_page(m.enclaves[mon].pid, 9, shared)
        isa.esaccept(m, 1, shared)
    return m, bi, mon, shared


def test_bi_enclave_outside_elrange_is_abort(fx):
    out, data = access(fx.m, CPU["A"], UNTRUSTED_DATA_VA, AccessKind.READ)
    assert out.outcome is Outcome.ABORT
    assert set(data) == {0xFF}


def test_normal_enclave_outside_elrange_reaches_dram():
    m = Machine(TINY)
    eid = isa.ecreate_add_init(m, isa.EnclaveImage(8, 2, (isa.ImagePage(8, b"x", Perm.R),)))
    m.os_map_page(m.enclaves[eid].pid, 2, 2)
    m.write_phys(2, b"shared dram")
    isa.eenter(m, 0, eid)
    out, data = access(m, 0, 2, AccessKind.READ)
    assert out.allowed and data[:11] == b"shared dram"


def test_co_owner_reaches_shared_page(fx):
    out, _ = access(fx.m, CPU["M"], LAYOUT["A"]["chan"], AccessKind.WRITE, b"ok")
    assert out.allowed


def test_third_enclave_with_forged_pte_faults_on_owner(fx):
    m = fx.m
    m.os_map_page(fx.pid("B"), LAYOUT["A"]["chan"], fx.pa("A", "chan"))
    out, _ = access(m, CPU["B"], LAYOUT["A"]["chan"], AccessKind.READ)
    assert out.reason is FaultReason.EPCM_OWNER_MISMATCH


def test_pte_to_own_other_page_is_va_mismatch(fx):
    m = fx.m
    m.os_map_page(fx.pid("A"), LAYOUT["A"]["data"], fx.pa("A", "secret"))
    out, _ = access(m, CPU["A"], LAYOUT["A"]["data"], AccessKind.READ)
    assert out.reason is FaultReason.VA_MISMATCH


def test_pte_to_dram_inside_elrange_is_elrange_mismatch(fx):
    m = fx.m
    m.os_map_page(fx.pid("A"), LAYOUT["A"]["data"], 5)
    out, _ = access(m, CPU["A"], LAYOUT["A"]["data"], AccessKind.READ)
    assert out.reason is FaultReason.ELRANGE_MISMATCH


def test_perm_denied_on_execute_of_data(fx):
    out, _ = access(fx.m, CPU["A"], LAYOUT["A"]["data"], AccessKind.EXECUTE)
    assert out.reason is FaultReason.PERM_DENIED


def test_matrix_with_shared_page_matches_hand_written():
    m, bi, mon, shared = _pair(share=True)
    matrix = access_matrix_oracle(m)
    # the shared page is reachable only at va 9, by the owner and the co-owner
    expected = {(bi, 9, "R"), (bi, 9, "W"), (mon, 9, "R"), (mon, 9, "W")}
    got = {(a, va, k) for (a, va, t, k), out in matrix.cells.items()
           if t == shared and out == "Allow"}
    assert got == expected
    assert matrix.allowed_actors(shared) == {bi, mon}


def test_matrix_without_shares_is_block_diagonal():
    m, bi, mon, _ = _pair(share=False)
    matrix = access_matrix_oracle(m)
    for eid in (bi, mon):
        for pa in m.enclaves[eid].pages:
            assert matrix.allowed_actors(pa) == {eid}
    epc = [t for t in targets(m) if t != UNMAPPED and m.is_epc(t)]
    assert all(matrix.allowed_actors(pa) == set()
               for pa in epc if not any(pa in s.pages for s in m.enclaves.values()))


def test_os_row_has_no_allow_over_prm():
    m, *_ = _pair(share=True)
    matrix = access_matrix_oracle(m)
    os_cells = matrix.row(OS)
    assert os_cells
    for (_, _, target, _), out in os_cells.items():
        if target != UNMAPPED and m.is_prm(target):
            assert out == "AbortPage"


def test_oracle_refuses_large_machines():
    m = Machine(MachineConfig(phys_pages=256, epc_pages=128, cpus=1, va_pages=32))
    with pytest.raises(ScaleError):
        access_matrix_oracle(m)
    m = Machine(MachineConfig(phys_pages=64, epc_pages=16, cpus=6, va_pages=16))
    for i in range(5):
        isa.ecreate_add_init(m, isa.EnclaveImage(1 + 2 * i, 2, (isa.ImagePage(1 + 2 * i, b"", Perm.R),)))
    with pytest.raises(ScaleError):
        reference_matrix(m)


def test_oracle_leaves_machine_untouched():
    m, *_ = _pair(share=True)
    before = m.dump_json()
    access_matrix_oracle(m)
    assert m.dump_json() == before


def test_flowchart_covers_every_outcome():
    rng = random.Random(7)
    seen = set()
    for _ in range(40):
        m = random_machine(rng)
        seen.update(access_matrix_oracle(m).cells.values())
    expected = {"Allow", "AbortPage"} | {f"Fault:{r.value}" for r in FaultReason}
    assert expected <= seen


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([(), ("check1",), ("owner_check",)]))
def test_guard_matches_reference_model(seed, ablations):
    m = random_machine(random.Random(seed), ablations=ablations)
    assert access_matrix_oracle(m).diff(reference_matrix(m)) == []


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_confinement_and_mutual_exclusion(seed):
    m = random_machine(random.Random(seed))
    matrix = access_matrix_oracle(m)
    for (actor, va, target, _), out in matrix.cells.items():
        if actor != OS and m.enclaves[actor].bi_enclave and not m.enclaves[actor].in_elrange(va):
            assert out == "AbortPage"
    for pa in targets(m):
        if pa == UNMAPPED or not m.is_epc(pa):
            continue
        e = m.epcm_entry(pa)
        if not e.valid or not m.integrity_ok(pa) or not m.integrity_ok(m.epcm_meta_page(pa)):
            assert matrix.allowed_actors(pa) == set()
            continue
        parties = {s.enclave_id for s in m.enclaves.values()
                   if m.secs_ref(s.enclave_id) in (e.owner_secs, e.co_owner_secs)}
        if e.page_kind.value == "SharePending" or e.page_kind.value == "SecsPage":
            assert matrix.allowed_actors(pa) == set()
        else:
            assert matrix.allowed_actors(pa) == parties


@settings(max_examples=60, deadline=None)
@given(actor=st.sampled_from(["A", "B", "M", "OS"]), va=st.integers(0, 63),
       kind=st.sampled_from(list(AccessKind)))
def test_allow_is_followed_by_tlb_hit(actor, va, kind):
    fx = build_fixture()
    cpu = CPU[actor]
    first = translate(fx.m, cpu, va, kind)
    if first.allowed:
        again = translate(fx.m, cpu, va, kind)
        assert again.allowed and not again.tlb_fill and again.pa == first.pa
    check_invariants(fx.m)


@settings(max_examples=60, deadline=None)
@given(actor=st.sampled_from(["A", "B", "M", "OS"]), va=st.integers(0, 63),
       pa=st.integers(0, 255), kind=st.sampled_from(list(AccessKind)))
def test_no_data_before_allow(actor, va, pa, kind):
    fx = build_fixture()
    pid = 0 if actor == "OS" else fx.pid(actor)
    fx.m.os_map_page(pid, va, pa, Perm.R | Perm.W | Perm.X)
    if actor == "OS":
        fx.m.os_schedule(CPU["OS"], 0)
    out, data = access(fx.m, CPU[actor], va, kind)
    if out.allowed:
        return
    if out.outcome is Outcome.ABORT and kind is AccessKind.READ:
        assert set(data) == {0xFF}
    else:
        assert data is None


def test_trace_hook_records_each_translation(fx):
    log = []
    fx.m.trace = log.append
    translate(fx.m, CPU["A"], UNTRUSTED_DATA_VA, AccessKind.READ)
    translate(fx.m, CPU["A"], LAYOUT["A"]["data"], AccessKind.EXECUTE)
    assert log == [
        {"cpu": 0, "mode": f"enclave:{fx.a}", "va": 3, "kind": "R", "outcome": "AbortPage"},
        {"cpu": 0, "mode": f"enclave:{fx.a}", "va": 17, "kind": "X", "outcome": "Fault",
         "reason": "PermDenied"},
    ]
