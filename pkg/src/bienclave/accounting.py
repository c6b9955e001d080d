"""Hash-chained resource accounting kept in monitor memory.

Each entry commits to its own fields and to the previous entry's hash, so
editing, reordering or dropping a committed entry breaks every later link.
Hashes are SHA-256 over canonical JSON (sorted keys, no whitespace).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from typing import Optional

from .errors import ChainBroken

GENESIS = "0" * 64
DELTA_FIELDS = ("file_read", "file_written", "net_in", "net_out")
_FIELDS = ("seq", "bi_enclave", "sysno") + DELTA_FIELDS + ("prev_hash", "entry_hash")


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()


def compute_hash(body: dict) -> str:
    """Hash of an entry body (every field except ``entry_hash``)."""
    return hashlib.sha256(_canonical(body)).hexdigest()


@dataclass(frozen=True)
class LogEntry:
    seq: int
    bi_enclave: int
    sysno: int
    file_read: int
    file_written: int
    net_in: int
    net_out: int
    prev_hash: str
    entry_hash: str

    def body(self) -> dict:
        doc = asdict(self)
        del doc["entry_hash"]
        return doc

    def to_dict(self) -> dict:
        return asdict(self)


class AccountingLog:
    """Append-only log; there is deliberately no API to edit entries."""

    def __init__(self):
        self._entries: list[LogEntry] = []

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self._entries)

    def __getitem__(self, i: int) -> LogEntry:
        return self._entries[i]

    @property
    def head(self) -> str:
        return self._entries[-1].entry_hash if self._entries else GENESIS

    def append(self, bi_enclave: int, sysno: int, **deltas: int) -> LogEntry:
        unknown = set(deltas) - set(DELTA_FIELDS)
        if unknown:
            raise ValueError(f"unknown resource fields {sorted(unknown)}")
        body = {"seq": len(self._entries), "bi_enclave": bi_enclave, "sysno": sysno,
                **{k: int(deltas.get(k, 0)) for k in DELTA_FIELDS}, "prev_hash": self.head}
        entry = LogEntry(**body, entry_hash=compute_hash(body))
        self._entries.append(entry)
        return entry

    def totals(self, bi_enclave: Optional[int] = None) -> dict:
        out = dict.fromkeys(DELTA_FIELDS, 0)
        for e in self._entries:
            if bi_enclave is None or e.bi_enclave == bi_enclave:
                for k in DELTA_FIELDS:
                    out[k] += getattr(e, k)
        return out

    def first_corruption(self) -> Optional[int]:
        return _first_bad([e.to_dict() for e in self._entries])

    def verify_chain(self) -> None:
        bad = self.first_corruption()
        if bad is not None:
            raise ChainBroken(bad)

    def summary(self) -> dict:
        per = sorted({e.bi_enclave for e in self._entries})
        return {"entries": len(self), "head": self.head, "totals": self.totals(),
                "per_enclave": {str(b): self.totals(b) for b in per}}

    def to_jsonl(self) -> bytes:
        return b"".join(_canonical(e.to_dict()) + b"\n" for e in self._entries)

    @classmethod
    def from_jsonl(cls, blob: bytes) -> "AccountingLog":
        """Load an exported log, verifying the whole chain first."""
        docs = []
        bad = scan_jsonl(blob, collect=docs)
        if bad is not None:
            raise ChainBroken(bad)
        log = cls()
        log._entries = [LogEntry(**d) for d in docs]
        return log


def verify_jsonl(blob: bytes) -> None:
    """Raise :class:`ChainBroken` at the first corrupted line of an export."""
    bad = scan_jsonl(blob)
    if bad is not None:
        raise ChainBroken(bad)


def scan_jsonl(blob: bytes, *, start: int = 0, prev_hash: str = GENESIS,
               collect: Optional[list] = None) -> Optional[int]:
    """Index of the first bad line of an export, or None if the chain holds.

    ``start`` and ``prev_hash`` let a caller check a slice of an export that
    begins at entry ``start``, given the hash of the entry before it. The
    scan stops at the first bad line.
    """
    lines = blob.split(b"\n")
    terminated = lines[-1] == b""
    if terminated:
        lines.pop()
    prev = prev_hash
    for offset, line in enumerate(lines):
        index = start + offset
        if not terminated and offset == len(lines) - 1:
            return index  # a damaged final newline is charged to the last line
        doc = _check_line(line, index, prev)
        if doc is None:
            return index
        prev = doc["entry_hash"]
        if collect is not None:
            collect.append(doc)
    return None


def _check_line(line: bytes, index: int, prev: str) -> Optional[dict]:
    try:
        doc = json.loads(line)
    except (ValueError, UnicodeDecodeError):
        return None
    if not isinstance(doc, dict) or set(doc) != set(_FIELDS):
        return None
    if line != _canonical(doc):
        return None  # non-canonical bytes: someone edited the export
    ints = [doc[k] for k in ("seq", "bi_enclave", "sysno") + DELTA_FIELDS]
    if any(type(v) is not int for v in ints) or any(doc[k] < 0 for k in DELTA_FIELDS):
        return None
    if doc["seq"] != index or doc["prev_hash"] != prev:
        return None
    body = {k: v for k, v in doc.items() if k != "entry_hash"}
    if doc["entry_hash"] != compute_hash(body):
        return None
    return doc


def _first_bad(docs: list) -> Optional[int]:
    prev = GENESIS
    for i, doc in enumerate(docs):
        if not isinstance(doc, dict) or set(doc) != set(_FIELDS):
            return i
        if doc["seq"] != i or doc["prev_hash"] != prev:
            return i
        body = {k: v for k, v in doc.items() if k != "entry_hash"}
        if doc["entry_hash"] != compute_hash(body):
            return i
        prev = doc["entry_hash"]
    return None
