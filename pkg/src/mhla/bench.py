"""Throughput sweeps over sequence length and log-log scaling fits."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import statistics
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from threadpoolctl import threadpool_limits

from .attention import AttentionConfig, linear_attention, mhla_forward, softmax_attention
from .partition import LINEAR_1D, locality_init, make_partition
from .tensor_core import FeatureMap

log = logging.getLogger(__name__)

BENCH_HEADER = ["mechanism", "n", "d", "m", "reps", "median_seconds", "tokens_per_second"]
DEFAULT_MEM_BUDGET = 4 * 2**30
MEM_BUDGET_ENV = "MHLA_MEM_BUDGET_BYTES"
PROTOCOL_LINES = [
    "# protocol: 1 warm-up run discarded, median wall time (time.perf_counter) of the timed repetitions",
    "# protocol: BLAS limited to 1 thread in timed regions; inputs drawn once per n and shared by all mechanisms",
    "# protocol: softmax skipped (reps=0, nan timings) when its n x n score matrix exceeds the memory budget",
]


@dataclass(frozen=True)
class BenchRecord:
    mechanism: str
    n: int
    d: int
    m: int
    repetitions: int
    median_seconds: float
    tokens_per_second: float

    @property
    def skipped(self) -> bool:
        return self.repetitions == 0

    def csv_row(self) -> list:
        return [self.mechanism, self.n, self.d, self.m, self.repetitions,
                repr(self.median_seconds), repr(self.tokens_per_second)]


@dataclass
class RunConfig:
    mechanisms: list = field(default_factory=lambda: ["softmax", "linear", "mhla"])
    n_values: list = field(default_factory=lambda: [1024, 4096, 16384])
    d: int = 64
    m_rule: str = "floor-sqrt-n"
    m: int = 16
    feature_map: str = FeatureMap.ELU_PLUS_ONE.value
    normalize: bool = True
    seed: int = 0
    precision: str = "double"
    reps: int = 5
    out: str | None = None
    mem_budget: int | None = None
    init_floor: float = 0.0
    max_linear_slope: float = 1.2
    min_softmax_slope: float = 1.7

    def __post_init__(self):
        if self.m_rule not in ("fixed", "floor-sqrt-n"):
            raise ValueError(f"m_rule must be 'fixed' or 'floor-sqrt-n', got {self.m_rule!r}")
        if self.precision not in ("double", "single"):
            raise ValueError(f"precision must be 'double' or 'single', got {self.precision!r}")
        if self.reps < 3:
            raise ValueError("reps must be at least 3")
        unknown = set(self.mechanisms) - {"softmax", "linear", "mhla"}
        if unknown:
            raise ValueError(f"unknown mechanisms: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**data)

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def blocks_for(self, n: int) -> int:
        if self.m_rule == "fixed":
            return self.m
        return floor_sqrt_blocks(n)

    def memory_budget(self) -> int:
        if self.mem_budget is not None:
            return int(self.mem_budget)
        return int(os.environ.get(MEM_BUDGET_ENV, DEFAULT_MEM_BUDGET))


def floor_sqrt_blocks(n: int) -> int:
    """Largest divisor of ``n`` not above ``floor(sqrt(n))``, so that M^2 <= N."""
    for m in range(math.isqrt(n), 0, -1):
        if n % m == 0:
            return m
    return 1


def _inputs(seed: int, n: int, d: int, dtype):
    rng = np.random.default_rng([seed, n])
    q, k, v = (rng.standard_normal((n, d)).astype(dtype) for _ in range(3))
    digest = hashlib.sha256(q.tobytes() + k.tobytes() + v.tobytes()).hexdigest()
    return q, k, v, digest


def _time(fn, reps: int, timer) -> float:
    fn()
    times = []
    for _ in range(reps):
        t0 = timer()
        fn()
        times.append(timer() - t0)
    return statistics.median(times)


def run_benchmark(cfg: RunConfig, timer=time.perf_counter) -> list:
    dtype = np.float32 if cfg.precision == "single" else np.float64
    fmap = FeatureMap.parse(cfg.feature_map)
    budget = cfg.memory_budget()
    records = []
    for n in cfg.n_values:
        q, k, v, digest = _inputs(cfg.seed, n, cfg.d, dtype)
        m = cfg.blocks_for(n)
        partition = make_partition(n, LINEAR_1D, m)
        attn = AttentionConfig(fmap, cfg.normalize, partition, locality_init(partition, cfg.init_floor))
        kernels = {
            "softmax": lambda: softmax_attention(q, k, v),
            "linear": lambda: linear_attention(q, k, v, attn),
            "mhla": lambda: mhla_forward(q, k, v, attn),
        }
        for mech in cfg.mechanisms:
            log.info("bench %s n=%d d=%d m=%d inputs sha256=%s", mech, n, cfg.d, m, digest)
            rec_m = m if mech == "mhla" else 1
            if mech == "softmax" and n * n * np.dtype(dtype).itemsize > budget:
                log.info("softmax n=%d skipped: score matrix exceeds %d bytes", n, budget)
                records.append(BenchRecord(mech, n, cfg.d, rec_m, 0, math.nan, math.nan))
                continue
            try:
                with threadpool_limits(limits=1):
                    median = _time(kernels[mech], cfg.reps, timer)
            except MemoryError:
                log.warning("%s n=%d skipped: out of memory", mech, n)
                records.append(BenchRecord(mech, n, cfg.d, rec_m, 0, math.nan, math.nan))
                continue
            records.append(BenchRecord(mech, n, cfg.d, rec_m, cfg.reps, median, n / median))
    return records


def fit_scaling_exponent(records, mechanism: str) -> float:
    """Least-squares slope of log(median_seconds) against log(n)."""
    pts = [(r.n, r.median_seconds) for r in records if r.mechanism == mechanism and not r.skipped]
    if len(pts) < 3:
        raise ValueError(f"need at least 3 timed records for {mechanism}, got {len(pts)}")
    ns = [p[0] for p in pts]
    if max(ns) < 8 * min(ns):
        raise ValueError(f"{mechanism} records span only {max(ns) / min(ns):.1f}x in n (need 8x)")
    x = np.log(np.array(ns, dtype=np.float64))
    y = np.log(np.array([p[1] for p in pts], dtype=np.float64))
    x -= x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def records_to_csv(records, header: bool = True, comments: bool = True) -> str:
    buf = io.StringIO()
    if comments:
        buf.write("\n".join(PROTOCOL_LINES) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(BENCH_HEADER)
    for r in records:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def records_from_csv(text: str) -> list:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    rows = list(csv.reader(lines))
    if not rows or rows[0] != BENCH_HEADER:
        raise ValueError("bench CSV header does not match the documented schema")
    return [BenchRecord(r[0], int(r[1]), int(r[2]), int(r[3]), int(r[4]), float(r[5]), float(r[6]))
            for r in rows[1:] if r != BENCH_HEADER]


def append_records(path, records) -> None:
    """Append records to a CSV file with one write call; header only for a new file."""
    fresh = not os.path.exists(path) or os.path.getsize(path) == 0
    text = records_to_csv(records, header=fresh, comments=fresh)
    with open(path, "a") as fh:
        fh.write(text)
