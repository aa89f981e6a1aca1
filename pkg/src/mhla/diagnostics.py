"""Materialized attention maps and the two collapse metrics: rank and row entropy."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .attention import AttentionConfig, check_normalizer
from .partition import GRID_2D, LINEAR_1D, locality_init, make_partition, pad_tokens
from .tensor_core import FeatureMap, apply_feature_map, as_matrix, gemm, row_softmax, singular_values

MATERIALIZE_CAP = 8192
MECHANISMS = ("softmax", "linear", "mhla")
REPORT_HEADER = ["mechanism", "N", "d", "M", "rank", "rank_bound", "entropy", "normalized_entropy", "seed"]


@dataclass(frozen=True)
class DiagnosticsReport:
    mechanism: str
    N: int
    d: int
    M: int
    numerical_rank: int
    rank_bound: int
    mean_row_entropy: float
    normalized_entropy: float
    seed: int | None = None

    def csv_row(self) -> list:
        return [self.mechanism, self.N, self.d, self.M, self.numerical_rank, self.rank_bound,
                repr(self.mean_row_entropy), repr(self.normalized_entropy),
                "" if self.seed is None else self.seed]


def materialize_attention(q, k, cfg: AttentionConfig, mechanism: str) -> np.ndarray:
    """The N x N weight matrix A with ``A @ v`` equal to the mechanism's output."""
    q = as_matrix(q, "q")
    k = as_matrix(k, "k")
    n = q.shape[0]
    if n > MATERIALIZE_CAP:
        raise ValueError(f"refusing to materialize {n}x{n} attention (cap {MATERIALIZE_CAP})")
    if mechanism == "softmax":
        return row_softmax(gemm(q, k, transpose_b=True), 1.0 / math.sqrt(q.shape[1]))
    if mechanism not in ("linear", "mhla"):
        raise ValueError(f"unknown mechanism {mechanism!r}; expected one of {MECHANISMS}")

    a = gemm(apply_feature_map(q, cfg.feature_map), apply_feature_map(k, cfg.feature_map), transpose_b=True)
    if mechanism == "mhla":
        partition, coeffs = cfg.require_blocks()
        blocks = partition.block_of_token
        a *= coeffs.values[np.ix_(blocks, blocks)]
        if coeffs.causal:
            a = np.tril(a)
    if cfg.normalize:
        den = a.sum(axis=1)
        check_normalizer(den)
        a /= den[:, None]
    return a


def numerical_rank(a, tol: float | None = None) -> int:
    """Count of singular values above ``tol`` (default max-dim * eps * sigma_max)."""
    a = as_matrix(a, "a")
    sv = singular_values(a)
    if sv.size == 0:
        return 0
    if tol is None:
        tol = max(a.shape) * np.finfo(np.float64).eps * sv[0]
    return int(np.count_nonzero(sv > tol))


def mean_row_entropy(a, row_tol: float = 1e-6) -> float:
    """Mean Shannon entropy (nats) of the rows of a row-stochastic matrix."""
    a = as_matrix(a, "a")
    sums = a.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > row_tol)
    if bad.size:
        raise ValueError(f"row {bad[0]} sums to {sums[bad[0]]!r}, not 1")
    neg = np.flatnonzero((a < -1e-12).any(axis=1))
    if neg.size:
        raise ValueError(f"row {neg[0]} has negative weights")
    p = np.maximum(a, 0.0)
    logp = np.log(np.where(p > 0, p, 1.0))
    return float(np.mean(-(p * logp).sum(axis=1)))


def rank_bound(mechanism: str, n: int, d: int, partition=None) -> int:
    if mechanism == "softmax":
        return n
    if mechanism == "linear":
        return min(n, d)
    return min(n, int(np.minimum(partition.block_sizes, d).sum()))


def default_layout(n: int, m: int, pad: bool = False) -> str:
    """grid-2d when N and M are both squares (and tile evenly, unless padding), else linear-1d."""
    sn, sm = math.isqrt(n), math.isqrt(m)
    if sn * sn == n and sm * sm == m and (pad or sn % sm == 0):
        return GRID_2D
    return LINEAR_1D


def default_partition(n: int, m: int):
    return make_partition(n, default_layout(n, m), m)


def gaussian_qkv(seed: int, n: int, d: int):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n, d)), rng.standard_normal((n, d)), rng.standard_normal((n, d))


def collapse_report(seed: int, n: int, d: int, m: int,
                    feature_map=FeatureMap.ELU_PLUS_ONE, init_floor: float = 0.0,
                    with_rank: bool = True, pad: bool = False) -> list:
    """Softmax, linear and MHLA reports on one shared Gaussian (Q, K) draw.

    MHLA uses locality-initialized coefficients. ``with_rank=False`` skips
    the SVD and reports rank as -1. A feature map that can go negative
    (identity) leaves linear/MHLA rows unnormalized, so their entropy is
    reported as nan (unsupported). ``pad=True`` zero-pads the draw until the
    blocks divide it evenly; N in the reports is then the padded length.
    """
    fmap = FeatureMap.parse(feature_map)
    q, k, _ = gaussian_qkv(seed, n, d)
    layout = default_layout(n, m, pad)
    if pad:
        q, k = pad_tokens(q, m, layout), pad_tokens(k, m, layout)
        n = q.shape[0]
    partition = make_partition(n, layout, m)
    cfg = AttentionConfig(fmap, fmap.nonnegative, partition, locality_init(partition, init_floor))
    reports = []
    log_n = math.log(n) if n > 1 else 1.0
    for mech in MECHANISMS:
        a = materialize_attention(q, k, cfg, mech)
        ent = mean_row_entropy(a) if mech == "softmax" or cfg.normalize else math.nan
        reports.append(DiagnosticsReport(
            mech, n, d, m,
            numerical_rank(a) if with_rank else -1,
            rank_bound(mech, n, d, partition),
            ent, ent / log_n, seed,
        ))
    return reports


def reports_to_csv(reports, header: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    if header:
        writer.writerow(REPORT_HEADER)
    for r in reports:
        writer.writerow(r.csv_row())
    return buf.getvalue()


def reports_from_csv(text: str) -> list:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or rows[0] != REPORT_HEADER:
        raise ValueError("diagnostics CSV header does not match the documented schema")
    return [
        DiagnosticsReport(r[0], int(r[1]), int(r[2]), int(r[3]), int(r[4]), int(r[5]),
                          float(r[6]), float(r[7]), int(r[8]) if r[8] else None)
        for r in rows[1:]
    ]
