"""Host microbenchmark: shared protected page versus encrypted untrusted buffer.

Only the data-path work is timed. For the protected page that is copying the
message into a 4 KiB page frame chunk by chunk and copying it out on the
other side. For the baseline it is AES-GCM seal, a copy into untrusted
memory, a copy out, and open. Simulator bookkeeping is never on the clock.
"""

from __future__ import annotations

import csv
import gc
import hashlib
import io
import platform
import statistics
import sys
import time
from dataclasses import asdict, dataclass

from .machine import PAGE_SIZE
from .swchannel import CIPHER_NAME, endpoint_pair

SIZES = (64, 1024, 16 * 1024, 64 * 1024)
ALLOWED_SIZES = tuple(1 << k for k in range(6, 17))  # 64 B .. 64 KiB
MIN_ITERS = 1000
WARMUP = 50
CSV_COLUMNS = ("chunk", "transport", "median_ns", "p99_ns", "throughput_bps", "iters")
PROTECTED = "ProtectedPage"
ENCRYPTED = "EncryptedUntrusted"

METHODOLOGY = (
    f"Per-message host wall-clock (perf_counter_ns) of data-path kernels only. "
    f"{PROTECTED}: chunked copy-in to a {PAGE_SIZE}-byte page frame and copy-out. "
    f"{ENCRYPTED}: {CIPHER_NAME} seal, copy to untrusted buffer, copy out, open. "
    f"{WARMUP} warm-up rounds, GC disabled while timing; throughput = chunk / median."
)


@dataclass(frozen=True)
class BenchResult:
    chunk: int
    transport: str
    median_ns: float
    p99_ns: float
    throughput_bps: float
    iters: int


def host_description() -> dict:
    return {"platform": platform.platform(), "machine": platform.machine(),
            "python": sys.version.split()[0], "implementation": platform.python_implementation()}


def _protected_roundtrip(payload: bytes, frame: bytearray, out: bytearray) -> None:
    view = memoryview(frame)
    for off in range(0, len(payload), PAGE_SIZE):
        piece = payload[off:off + PAGE_SIZE]
        view[:len(piece)] = piece              # sender copies into the shared page
        out[off:off + len(piece)] = view[:len(piece)]  # receiver copies it out


def _encrypted_roundtrip(payload: bytes, sender, receiver, untrusted: bytearray) -> bytes:
    blob = sender.seal(payload)
    untrusted[:len(blob)] = blob
    return receiver.open(bytes(untrusted[:len(blob)]))


def _summarize(chunk: int, transport: str, samples: list) -> BenchResult:
    samples.sort()
    median = statistics.median(samples)
    p99 = samples[min(len(samples) - 1, int(0.99 * len(samples)))]
    return BenchResult(chunk, transport, float(median), float(p99),
                       chunk / (median / 1e9), len(samples))


def _validate(sizes, iters: int) -> None:
    if iters < MIN_ITERS:
        raise ValueError(f"iterations must be at least {MIN_ITERS}")
    for s in sizes:
        if s not in ALLOWED_SIZES:
            raise ValueError(f"chunk size {s} is not a power of two in 64..65536")


def bench_size(chunk: int, iters: int, seed: int = 0) -> tuple:
    """Time both transports for one chunk size; returns (protected, encrypted)."""
    payload = hashlib.shake_256(seed.to_bytes(8, "little")).digest(chunk)
    key = hashlib.sha256(b"bench" + seed.to_bytes(8, "little")).digest()[:16]
    sender, receiver = endpoint_pair(key)
    frame = bytearray(PAGE_SIZE)
    out = bytearray(chunk)
    untrusted = bytearray(chunk + 64)

    for _ in range(WARMUP):
        _protected_roundtrip(payload, frame, out)
        _encrypted_roundtrip(payload, sender, receiver, untrusted)
    if bytes(out) != payload or _encrypted_roundtrip(payload, sender, receiver, untrusted) != payload:
        raise AssertionError("transport corrupted the payload")

    clock = time.perf_counter_ns
    pp, enc = [], []
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        # interleave so drift affects both transports equally
        for _ in range(iters):
            t0 = clock()
            _protected_roundtrip(payload, frame, out)
            t1 = clock()
            _encrypted_roundtrip(payload, sender, receiver, untrusted)
            t2 = clock()
            pp.append(t1 - t0)
            enc.append(t2 - t1)
    finally:
        if gc_was_enabled:
            gc.enable()
    return _summarize(chunk, PROTECTED, pp), _summarize(chunk, ENCRYPTED, enc)


def run_bench(sizes=SIZES, iters: int = MIN_ITERS, seed: int = 0) -> dict:
    _validate(sizes, iters)
    results = []
    for chunk in sorted(sizes):
        results.extend(bench_size(chunk, iters, seed))
    return make_report(results)


def make_report(results: list) -> dict:
    by = {(r.chunk, r.transport): r for r in results}
    chunks = sorted({r.chunk for r in results})
    ratio = {c: by[(c, PROTECTED)].throughput_bps / by[(c, ENCRYPTED)].throughput_bps
             for c in chunks}
    gap = {c: by[(c, ENCRYPTED)].median_ns - by[(c, PROTECTED)].median_ns for c in chunks}
    return {
        "methodology": METHODOLOGY,
        "host": host_description(),
        "results": [asdict(r) for r in results],
        "ratio": {str(c): ratio[c] for c in chunks},
        "latency_gap_ns": {str(c): gap[c] for c in chunks},
        "throughput_higher_everywhere": all(v > 1 for v in ratio.values()),
        "gap_non_decreasing": all(gap[a] <= gap[b] for a, b in zip(chunks, chunks[1:])),
    }


def to_csv(report: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# {report['methodology']}\n")
    writer = csv.DictWriter(buf, fieldnames=CSV_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in report["results"]:
        writer.writerow(row)
    return buf.getvalue()
