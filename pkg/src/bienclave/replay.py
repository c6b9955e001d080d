"""Build a system from a JSON config and replay a trace of events against it.

Config keys (all optional except where noted)::

    {"fixture": "default"}                  # the built-in three-enclave fixture
    {"machine": {...}, "enclaves": [...], "channels": [...], "untrusted": [...]}
    "policy": "path/to/file.policy"         # relative to the config file
    "trace": "path/to/trace.jsonl"          # or "synthetic": {"events": N}
    "files": {"/path": size-or-text}        # contents of the simulated file system

Trace events: ``{"seq", "actor", "op", ...}`` with ``op`` one of
``syscall`` (``sysno``, ``args``), ``mem_access`` (``va``, ``kind``) and
``channel_call`` (``desc``, ``args``). Syscall arguments written as
``"$<seq>"`` refer to the value returned by that earlier event.
"""

from __future__ import annotations

import base64
import hashlib
import json
import random
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional

from . import isa, syscalls
from .channel import CallDescriptor, Direction, ParamType, channel_call, establish_channel
from .errors import (
    AccessFault,
    ConfigError,
    EnclaveTerminated,
    IagoViolation,
    PolicyDenied,
    SimError,
)
from .fixture import CPU, build_fixture, fixture_policy
from .guard import access
from .kernel import SimKernel
from .machine import AccessKind, EnclaveKind, Machine, MachineConfig, Perm
from .monitor import Monitor, syscall

OPS = ("syscall", "mem_access", "channel_call")
_KINDS = {"Read": AccessKind.READ, "Write": AccessKind.WRITE, "Execute": AccessKind.EXECUTE,
          "R": AccessKind.READ, "W": AccessKind.WRITE, "X": AccessKind.EXECUTE}


class TraceError(SimError):
    def __init__(self, seq, reason: str):
        super().__init__(f"seq {seq}: {reason}")
        self.seq = seq


@dataclass
class System:
    m: Machine
    monitor: Monitor
    kernel: SimKernel
    cpus: dict  # actor name -> cpu
    ids: dict   # actor name -> enclave id
    channels: dict = field(default_factory=dict)  # frozenset of names -> Channel
    monitor_name: str = "M"


def _resolve(base: Optional[Path], p: str) -> Path:
    path = Path(p)
    if base is not None and not path.is_absolute():
        path = base / path
    return path


def load_config(path) -> tuple:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    except ValueError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    return doc, path.parent


def build_system(doc: dict, base: Optional[Path] = None, *, ablations=()) -> System:
    policy = fixture_policy()
    if "policy" in doc:
        try:
            policy = _resolve(base, doc["policy"]).read_bytes()
        except OSError as exc:
            raise ConfigError(f"cannot read policy: {exc}") from None
    kernel = SimKernel()
    for fpath, body in doc.get("files", {}).items():
        kernel.files[fpath] = body.encode() if isinstance(body, str) else int(body)

    if doc.get("fixture", "default" if "enclaves" not in doc else None) == "default":
        fx = build_fixture(ablations=ablations, policy=policy, kernel=kernel)
        channels = {frozenset((n, "M")): ch for n, ch in fx.channels.items()}
        return System(fx.m, fx.monitor, kernel, dict(CPU), dict(fx.ids), channels)
    return _build_custom(doc, policy, kernel, ablations)


def _build_custom(doc: dict, policy: bytes, kernel: SimKernel, ablations) -> System:
    try:
        config = MachineConfig.from_dict(doc["machine"])
        enclaves = doc["enclaves"]
    except KeyError as exc:
        raise ConfigError(f"config missing {exc}") from None
    m = Machine(config, ablations=ablations)
    ids, cpus = {}, {}
    monitor_name = None
    for i, e in enumerate(enclaves):
        name = e.get("name") or f"E{i}"
        image = isa.EnclaveImage.from_manifest(e["manifest"])
        kind = EnclaveKind(e.get("kind", image.kind.value))
        ids[name] = isa.ecreate_add_init(m, image, kind)
        if kind is EnclaveKind.MONITOR:
            monitor_name = name
        cpus[name] = int(e.get("cpu", i))
    if monitor_name is None:
        raise ConfigError("config needs one enclave of kind 'monitor'")
    for u in doc.get("untrusted", []):
        for name in ids:
            m.os_map_page(m.enclaves[ids[name]].pid, int(u["va"]), int(u["pa"]),
                          Perm.parse(u.get("perms", "rw-")))
    for name, eid in ids.items():
        isa.eenter(m, cpus[name], eid)
    monitor = Monitor(m, ids[monitor_name], kernel)
    system = System(m, monitor, kernel, cpus, ids, monitor_name=monitor_name)
    mrs = {n: m.enclaves[e].mrenclave for n, e in ids.items()}
    for c in doc.get("channels", []):
        owner, peer = c["owner"], c["peer"]
        page = next((pa for pa in m.enclaves[ids[owner]].pages
                     if m.epcm_entry(pa).mapped_va == int(c["va"])), None)
        if page is None:
            raise ConfigError(f"{owner} has no page at va {c['va']}")
        ch = establish_channel(m, cpus[owner], cpus[peer], page,
                               owner_expects=mrs[peer], peer_expects=mrs[owner])
        system.channels[frozenset((owner, peer))] = ch
        if monitor_name in (owner, peer):
            monitor.register(ch)
    monitor.load_policy(policy)
    return system


def load_trace(doc: dict, base: Optional[Path], seed: int, actors: list) -> list:
    if "trace" in doc:
        try:
            text = _resolve(base, doc["trace"]).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read trace: {exc}") from None
        text = text.strip()
        try:
            if text.startswith("["):
                return json.loads(text)
            return [json.loads(line) for line in text.splitlines() if line.strip()]
        except ValueError as exc:
            raise ConfigError(f"trace is not valid JSON: {exc}") from None
    synth = doc.get("synthetic")
    if synth is not None:
        return synthetic_trace(int(synth.get("events", 100)), seed, actors)
    return []


def synthetic_trace(n: int, seed: int, actors: list) -> list:
    """Reads and writes over a few files plus the odd memory access."""
    rng = random.Random(seed)
    events, seq = [], 0
    opened = {}
    for a in actors:
        seq += 1
        events.append({"seq": seq, "actor": a, "op": "syscall", "sysno": syscalls.OPEN,
                       "args": {"path": f"/path/to/no/secret/{a.lower()}.dat", "create": True}})
        opened[a] = seq
    while len(events) < n:
        seq += 1
        a = rng.choice(actors)
        r = rng.random()
        if r < 0.6:
            events.append({"seq": seq, "actor": a, "op": "syscall", "sysno": syscalls.READ,
                           "args": {"fd": f"${opened[a]}", "len": rng.choice([64, 256, 1024])}})
        elif r < 0.8:
            events.append({"seq": seq, "actor": a, "op": "syscall", "sysno": syscalls.WRITE,
                           "args": {"fd": f"${opened[a]}", "len": rng.choice([16, 128])}})
        else:
            events.append({"seq": seq, "actor": a, "op": "mem_access",
                           "va": rng.choice([2, 3, 16, 17]), "kind": rng.choice(["Read", "Write"])})
    return events


def validate_trace(events: list, system: System) -> None:
    last = None
    for i, ev in enumerate(events):
        seq = ev.get("seq") if isinstance(ev, dict) else None
        if not isinstance(seq, int):
            raise TraceError(seq if seq is not None else f"#{i}", "missing integer seq")
        if last is not None and seq <= last:
            raise TraceError(seq, f"seq not strictly increasing after {last}")
        last = seq
        actor = ev.get("actor")
        if actor not in system.ids or actor == system.monitor_name:
            raise TraceError(seq, f"unknown actor {actor!r}")
        if ev.get("op") not in OPS:
            raise TraceError(seq, f"unknown op {ev.get('op')!r}")
        if ev["op"] == "mem_access" and ev.get("kind", "Read") not in _KINDS:
            raise TraceError(seq, f"unknown access kind {ev.get('kind')!r}")


def _decode(v):
    if isinstance(v, dict) and set(v) == {"b64"}:
        return base64.b64decode(v["b64"])
    return v


def _echo(desc: CallDescriptor):
    def callee(inputs: dict) -> dict:
        out = {}
        for p in desc.params:
            if p.dir is Direction.OUT:
                if p.type is ParamType.SCALAR:
                    out[p.name] = 0
                elif p.type is ParamType.FIXED:
                    out[p.name] = bytes(p.length)
                else:
                    out[p.name] = b""
        return out
    return callee


def _jsonable(values: dict) -> dict:
    return {k: ({"b64": base64.b64encode(v).decode()} if isinstance(v, bytes) else v)
            for k, v in values.items()}


def replay(system: System, events: list, *, trace_access: bool = False) -> dict:
    validate_trace(events, system)
    m = system.m
    access_log = []
    if trace_access:
        m.trace = access_log.append
    results = {}
    rows = []
    for ev in events:
        seq, actor, op = ev["seq"], ev["actor"], ev["op"]
        cpu = system.cpus[actor]
        row = {"seq": seq, "actor": actor, "op": op}
        try:
            if op == "syscall":
                args = {}
                for k, v in ev.get("args", {}).items():
                    if isinstance(v, str) and v.startswith("$") and v[1:].isdigit():
                        v = results.get(int(v[1:]))
                    args[k] = _decode(v)
                row["sysno"] = ev["sysno"]
                if system.ids[actor] in system.monitor.terminated:
                    raise EnclaveTerminated(f"bi-enclave {actor} was terminated")
                out = syscall(m, system.monitor, cpu, system.cpus[system.monitor_name],
                              ev["sysno"], **args)
                row["verdict"] = out.verdict.value
                row["value"] = out.value
                results[seq] = out.value
            elif op == "mem_access":
                kind = _KINDS.get(ev.get("kind", "Read"))
                if kind is None:
                    raise TraceError(seq, f"unknown access kind {ev.get('kind')!r}")
                result, _ = access(m, cpu, int(ev["va"]), kind, b"\0" if kind is AccessKind.WRITE else b"")
                row["outcome"] = str(result)
            else:
                desc = CallDescriptor.from_dict(ev["desc"])
                peer = ev.get("peer", system.monitor_name)
                ch = system.channels.get(frozenset((actor, peer)))
                if ch is None:
                    raise TraceError(seq, f"no channel between {actor} and {peer}")
                reply = channel_call(m, ch, cpu, system.cpus[peer], desc,
                                     {k: _decode(v) for k, v in ev.get("args", {}).items()},
                                     _echo(desc))
                row["outcome"] = "Returned"
                row["reply"] = _jsonable(reply)
        except IagoViolation as exc:
            row["error"] = f"IagoViolation:{exc.kind}"
        except AccessFault as exc:
            row["outcome"] = str(exc.outcome)
        except PolicyDenied as exc:
            row["verdict"] = "Denied"
            row["error"] = f"{type(exc).__name__}: {exc}"
        except TraceError:
            raise
        except SimError as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    m.trace = None
    return build_report(system, rows, access_log if trace_access else None)


def build_report(system: System, rows: list, access_log: Optional[list]) -> dict:
    counts, verdicts = {}, {}
    for r in rows:
        if r["op"] == "syscall":
            name = syscalls.name(r["sysno"])
            counts[name] = counts.get(name, 0) + 1
            v = r.get("verdict", "Error")
            verdicts[v] = verdicts.get(v, 0) + 1
    mon = system.monitor
    report = {
        "timestamp": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "events": rows,
        "syscall_counts": dict(sorted(counts.items())),
        "verdicts": dict(sorted(verdicts.items())),
        "accounting": mon.accounting.summary(),
        "violations": [e for e in mon.events if e["event"] in ("iago", "deny")],
        "termination_events": [e for e in mon.events if e["event"] == "terminate"],
        "notifications": len(mon.kernel.notifications),
        "sealed_log_records": len(mon.sealed_log.records),
        "policy_digest": mon.policy.digest.hex() if mon.policy else None,
        "state_digest": hashlib.sha256(system.m.dump_json().encode()).hexdigest(),
    }
    if access_log is not None:
        report["access_trace"] = access_log
    return report


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=1) + "\n"


def run_config(path, *, seed: int = 0, ablations=(), trace_access: bool = False) -> dict:
    doc, base = load_config(path)
    system = build_system(doc, base, ablations=ablations)
    actors = sorted(n for n in system.ids if n != system.monitor_name)
    events = load_trace(doc, base, seed, actors)
    report = replay(system, events, trace_access=trace_access)
    report["seed"] = seed
    return report
