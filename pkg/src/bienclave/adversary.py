"""Scripted attacks against the default fixture.

A scenario is a JSON document::

    {"name": "...", "row": 1, "attacker": "OS", "target": "BiEnclave",
     "victims": ["A", "M"], "setup": [...], "steps": [...]}

Steps are machine commands; any step may carry ``"expect"`` (a string or a
list of acceptable strings). Operands are symbolic: cpus and processes are
``A``/``B``/``M``/``OS``, physical pages are ``"A.secret"``, ``"epcm"``,
``"dram:5"`` or plain integers. A scenario counts as blocked only if every
expectation holds and every victim page is unchanged afterwards. Pages
co-owned with a channel peer are left out of the snapshot unless listed in
``"protect"``.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from . import isa
from .channel import establish_channel
from .errors import (
    AccessFault,
    AttestationMismatch,
    IagoViolation,
    PolicyDenied,
    ScenarioError,
    SimError,
)
from .fixture import CPU, LAYOUT, Fixture, build_fixture
from .guard import access
from .machine import AccessKind, Perm
from .monitor import syscall

ROWS = {
    1: ("Read / Write / Execute", "OS", "BiEnclave, Monitor", "PRM abort page and MEE integrity"),
    2: ("Read / Write / Execute", "BiEnclave", "Other BiEnclave, Monitor",
        "EPCM owner/co-owner check and share attestation"),
    3: ("Read / Write / Execute", "Monitor", "BiEnclave", "EPCM owner check"),
    4: ("Read / Write / Execute", "BiEnclave", "Outside sandbox", "bi-enclave ELRANGE confinement"),
    5: ("Transfer control", "BiEnclave", "Other BiEnclave, Monitor", "EPCM owner check on fetch"),
    6: ("Transfer control", "BiEnclave", "Outside sandbox",
        "ELRANGE confinement and EEXIT abort"),
    7: ("Establish a connection", "OS", "BiEnclave, Monitor",
        "ESADD/ESACCEPT restricted to the enclaves named in EPCM"),
    8: ("Eavesdrop / Modify", "OS", "Shared Channel", "shared page stays in PRM"),
    9: ("Known Iago attacks", "OS", "BiEnclave, Monitor", "monitor return validation"),
}

# which rows each ablation is expected to break
PREDICTED_FLIPS = {
    "check1": {4, 6},
    "owner_check": {2, 3, 5},
    "attestation": {2},
    "eexit": {6},
}
ACCEPTANCE_ABLATIONS = ("check1", "owner_check", "attestation")

_OPS = {"map", "unmap", "load", "store", "fetch", "flip", "dram_write", "bus_read", "eexit",
        "eenter", "esadd", "esaccept", "establish", "syscall", "destroy", "file"}


@dataclass
class Report:
    name: str
    row: int
    attacker: str
    target: str
    blocked: bool
    expected: list
    observed: list
    victim_unchanged: bool
    diff: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "row": self.row, "attacker": self.attacker,
                "target": self.target, "blocked": self.blocked, "expected": self.expected,
                "observed": self.observed, "victim_unchanged": self.victim_unchanged,
                "diff": self.diff}


@dataclass
class SuiteReport:
    rows: dict
    scenarios: list
    ablations: list
    elapsed_s: float

    @property
    def blocked_rows(self) -> set:
        return {r for r, ok in self.rows.items() if ok}

    @property
    def failed_rows(self) -> set:
        return {r for r, ok in self.rows.items() if not ok}

    @property
    def passed(self) -> bool:
        return len(self.blocked_rows) == len(ROWS)

    def to_dict(self) -> dict:
        return {
            "ablations": self.ablations,
            "blocked": f"{len(self.blocked_rows)}/{len(ROWS)}",
            "passed": self.passed,
            "rows": [{"row": r, "type": ROWS[r][0], "attacker": ROWS[r][1],
                      "target": ROWS[r][2], "defense": ROWS[r][3],
                      "verdict": "BLOCKED" if self.rows[r] else "FAILED",
                      "scenarios": [s.name for s in self.scenarios if s.row == r]}
                     for r in sorted(self.rows)],
            "scenarios": [s.to_dict() for s in self.scenarios],
            "elapsed_s": round(self.elapsed_s, 3),
        }

    def table(self) -> str:
        lines = [f"{'row':<4}{'type':<24}{'attacker':<11}{'target':<26}{'verdict':<9}defense"]
        for r in sorted(self.rows):
            kind, attacker, target, defense = ROWS[r]
            verdict = "BLOCKED" if self.rows[r] else "FAILED"
            lines.append(f"{r:<4}{kind:<24}{attacker:<11}{target:<26}{verdict:<9}{defense}")
        lines.append(f"{len(self.blocked_rows)}/{len(ROWS)} rows blocked")
        return "\n".join(lines)


# --- scenario loading -----------------------------------------------------

def default_scenario_dir():
    return resources.files("bienclave").joinpath("scenarios")


def load_scenarios(directory=None) -> list:
    """Load every ``*.json`` scenario in ``directory`` (default: built-ins)."""
    if directory is None:
        root = default_scenario_dir()
        entries = sorted((e for e in root.iterdir() if e.name.endswith(".json")),
                         key=lambda e: e.name)
    else:
        root = Path(directory)
        if not root.is_dir():
            raise FileNotFoundError(f"scenario directory {root} not found")
        entries = sorted(root.glob("*.json"))
    out = []
    for entry in entries:
        try:
            doc = json.loads(entry.read_text())
        except ValueError as exc:
            raise ScenarioError(f"{entry.name}: {exc}") from None
        docs = doc if isinstance(doc, list) else [doc]
        for d in docs:
            validate_scenario(d)
            out.append(d)
    return out


def validate_scenario(doc: dict) -> None:
    if not isinstance(doc, dict):
        raise ScenarioError("scenario must be an object")
    for key in ("name", "row", "attacker", "target", "steps"):
        if key not in doc:
            raise ScenarioError(f"scenario {doc.get('name', '?')}: missing {key!r}")
    if doc["row"] not in ROWS:
        raise ScenarioError(f"scenario {doc['name']}: unknown row {doc['row']}")
    for step in doc.get("setup", []) + doc["steps"]:
        if not isinstance(step, dict) or step.get("op") not in _OPS:
            raise ScenarioError(f"scenario {doc['name']}: bad step {step!r}")


# --- interpretation -------------------------------------------------------

class _Runner:
    def __init__(self, fx: Fixture, name: str):
        self.fx = fx
        self.m = fx.m
        self.name = name
        self.vars: dict = {}
        self.channels: dict = {}

    def fail(self, msg: str) -> ScenarioError:
        return ScenarioError(f"scenario {self.name}: {msg}")

    def cpu(self, sym) -> int:
        if sym in CPU:
            return CPU[sym]
        if isinstance(sym, int) and 0 <= sym < len(self.m.cpus):
            return sym
        raise self.fail(f"unknown cpu {sym!r}")

    def pid(self, sym) -> int:
        if sym == "OS":
            return 0
        if sym in self.fx.ids:
            return self.fx.pid(sym)
        raise self.fail(f"unknown process {sym!r}")

    def enclave(self, sym) -> int:
        if sym in self.fx.ids:
            return self.fx.ids[sym]
        raise self.fail(f"unknown enclave {sym!r}")

    def pa(self, sym) -> int:
        if isinstance(sym, int):
            return sym
        if sym == "epcm":
            return self.m.epcm_base
        if isinstance(sym, str) and sym.startswith("dram:"):
            return int(sym[5:])
        if isinstance(sym, str) and "." in sym:
            owner, role = sym.split(".", 1)
            if owner in LAYOUT and role in LAYOUT[owner]:
                return self.fx.pa(owner, role)
        raise self.fail(f"unknown page {sym!r}")

    def value(self, v):
        if isinstance(v, str) and v.startswith("$"):
            if v == "$last_kernel_fd":
                return self.fx.kernel.next_fd - 1
            if v[1:] not in self.vars:
                raise self.fail(f"undefined variable {v}")
            return self.vars[v[1:]]
        return v

    def run(self, step: dict) -> str:
        op = step["op"]
        try:
            return getattr(self, "op_" + op)(step)
        except AttestationMismatch as exc:
            return exc.channel.phase.value
        except IagoViolation as exc:
            return f"IagoViolation:{exc.kind}"
        except AccessFault as exc:
            return str(exc.outcome)
        except PolicyDenied as exc:
            return type(exc).__name__
        except ScenarioError:
            raise
        except SimError as exc:
            return type(exc).__name__
        except KeyError as exc:
            raise self.fail(f"step {step!r} missing field {exc}") from None

    def op_map(self, s):
        perms = Perm.parse(s.get("perms", "rwx"))
        self.m.os_map_page(self.pid(s["pid"]), s["va"], self.pa(s["pa"]), perms,
                           invalidate=s.get("invalidate", True))
        return "ok"

    def op_unmap(self, s):
        self.m.os_unmap_page(self.pid(s["pid"]), s["va"])
        return "ok"

    def _access(self, s, kind):
        data = s.get("data", "").encode()
        result, _ = access(self.m, self.cpu(s["cpu"]), s["va"], kind, data, s.get("offset", 0))
        return str(result)

    def op_load(self, s):
        return self._access(s, AccessKind.READ)

    def op_store(self, s):
        return self._access(s, AccessKind.WRITE)

    def op_fetch(self, s):
        return self._access(s, AccessKind.EXECUTE)

    def op_flip(self, s):
        self.m.dram_flip(self.pa(s["pa"]), s.get("bit", 0))
        return "ok"

    def op_dram_write(self, s):
        self.m.dram_write(self.pa(s["pa"]), s.get("data", "x").encode(), s.get("offset", 0))
        return "ok"

    def op_bus_read(self, s):
        pa = self.pa(s["pa"])
        return "Plaintext" if self.m.dram_read(pa) == self.m.read_phys(pa) else "Ciphertext"

    def op_eexit(self, s):
        isa.eexit(self.m, self.cpu(s["cpu"]))
        return "ok"

    def op_eenter(self, s):
        isa.eenter(self.m, self.cpu(s["cpu"]), self.enclave(s["enclave"]))
        return "ok"

    def op_esadd(self, s):
        isa.esadd(self.m, self.cpu(s["cpu"]), self.pa(s["page"]), self.enclave(s["co_owner"]))
        return "SharePending"

    def op_esaccept(self, s):
        isa.esaccept(self.m, self.cpu(s["cpu"]), self.pa(s["page"]))
        return "ok"

    def op_destroy(self, s):
        isa.destroy_share(self.m, self.pa(s["page"]))
        return "ok"

    def op_establish(self, s):
        mr = {n: self.m.enclaves[e].mrenclave for n, e in self.fx.ids.items()}
        ch = establish_channel(self.m, self.cpu(s["owner"]), self.cpu(s["peer"]),
                               self.pa(s["page"]), owner_expects=mr[s["owner_expects"]],
                               peer_expects=mr[s["peer_expects"]])
        self.channels[s.get("save", "channel")] = ch
        return ch.phase.value

    def op_file(self, s):
        self.fx.kernel.files[s["path"]] = s.get("content", "").encode() or s.get("size", 0)
        return "ok"

    def op_syscall(self, s):
        forge = s.get("forge")
        if forge is not None:
            data = forge.get("data")
            self.fx.kernel.forge(s["sysno"], self.value(forge["ret"]),
                                 None if data is None else data.encode())
        args = {k: self.value(v) for k, v in s.get("args", {}).items()}
        out = syscall(self.m, self.fx.monitor, self.cpu(s["cpu"]), CPU["M"], s["sysno"], **args)
        if "save" in s:
            self.vars[s["save"]] = out.value
        return out.verdict.value


def _victim_pages(runner: _Runner, victims: list, protect: list) -> dict:
    fx = runner.fx
    pages = {}
    for name in victims:
        secs = fx.m.enclaves[fx.ids[name]]
        for pa in secs.pages + [secs.secs_page]:
            if not fx.m.epcm_entry(pa).co_owned:
                pages[f"{name}@{pa}"] = pa
    for sym in protect:
        pages[sym] = runner.pa(sym)
    return pages


def snapshot(fx: Fixture, pages: dict) -> dict:
    """Trusted contents and EPCM metadata of each victim page."""
    m = fx.m
    return {k: (m.trusted_digest(pa),
                json.dumps(m.epcm_entry(pa).to_dict(), sort_keys=True) if m.is_epc(pa) else None)
            for k, pa in pages.items()}


def _matches(expect, observed: str) -> bool:
    if isinstance(expect, list):
        return observed in expect
    return observed == expect


def run_attack(scenario: dict, fx: Optional[Fixture] = None, *, ablations=()) -> Report:
    validate_scenario(scenario)
    fx = fx or build_fixture(ablations=ablations)
    runner = _Runner(fx, scenario["name"])
    for step in scenario.get("setup", []):
        out = runner.run(step)
        if "expect" in step and not _matches(step["expect"], out):
            raise ScenarioError(f"scenario {scenario['name']}: setup step {step['op']} gave {out}")
    pages = _victim_pages(runner, scenario.get("victims", []), scenario.get("protect", []))
    before = snapshot(fx, pages)
    expected, observed, ok = [], [], True
    for step in scenario["steps"]:
        out = runner.run(step)
        if "expect" in step:
            expected.append(step["expect"])
            observed.append(out)
            ok = ok and _matches(step["expect"], out)
    after = snapshot(fx, pages)
    diff = sorted(k for k in pages if before[k] != after[k])
    return Report(scenario["name"], scenario["row"], scenario["attacker"], scenario["target"],
                  ok and not diff, expected, observed, not diff, diff)


def full_table_suite(*, ablations=(), scenario_dir=None, scenarios=None) -> SuiteReport:
    """Run every scenario on a fresh fixture; a row is blocked if all its scenarios are."""
    start = time.perf_counter()
    scenarios = scenarios if scenarios is not None else load_scenarios(scenario_dir)
    reports = [run_attack(s, ablations=ablations) for s in scenarios]
    rows = {}
    for r in ROWS:
        mine = [rep for rep in reports if rep.row == r]
        rows[r] = bool(mine) and all(rep.blocked for rep in mine)
    return SuiteReport(rows, reports, sorted(ablations), time.perf_counter() - start)
