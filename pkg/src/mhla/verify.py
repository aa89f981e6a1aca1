"""Seeded oracle-equivalence checks behind ``mhla verify``."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionConfig, linear_attention, mhla_forward, mhla_token_expansion, softmax_attention
from .causal import chunkwise_causal_forward, naive_causal_oracle, stream_sequence
from .diagnostics import collapse_report
from .fixtures import decode_fixture, encode_fixture
from .gradients import attend, finite_diff_grad, mhla_backward
from .partition import (
    LINEAR_1D,
    CoefficientMatrix,
    causal_mask,
    make_partition,
    uniform_coefficients,
)
from .tensor_core import FeatureMap


@dataclass(frozen=True)
class CheckResult:
    name: str
    max_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_error <= self.tolerance)

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: max_err={self.max_error:.3e} tol={self.tolerance:.0e}"


def rel_err(a, b) -> float:
    scale = max(float(np.max(np.abs(b))), 1e-300) if np.size(b) else 1.0
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)), initial=0.0)) / scale


def random_instance(rng, n, d, m, feature_map=FeatureMap.ELU_PLUS_ONE, normalize=True,
                    causal=False, coeff_low=0.05):
    """Gaussian q, k, v with a linear-1d partition and random coefficients in [coeff_low, 1).

    For relu the first feature of every query and key is made positive so
    normalizers stay away from zero.
    """
    fmap = FeatureMap.parse(feature_map)
    q, k, v = (rng.standard_normal((n, d)) for _ in range(3))
    if fmap is FeatureMap.RELU:
        q[:, 0] = np.abs(q[:, 0]) + 0.1
        k[:, 0] = np.abs(k[:, 0]) + 0.1
    partition = make_partition(n, LINEAR_1D, m)
    c = CoefficientMatrix(rng.uniform(coeff_low, 1.0, size=(m, m)))
    if causal:
        c = causal_mask(c)
    return q, k, v, AttentionConfig(fmap, normalize, partition, c)


def feature_settings():
    """Valid (feature map, normalize) pairs; identity is only used unnormalized."""
    return [(f, nz) for f in FeatureMap for nz in (True, False) if nz is False or f.nonnegative]


def check_block_vs_token(seed, count=20, max_n=256) -> CheckResult:
    rng = np.random.default_rng(seed)
    settings = feature_settings()
    worst = 0.0
    for i in range(count):
        m = int(rng.integers(1, 17))
        n = m * int(rng.integers(max(1, -(-8 // m)), max_n // m + 1))
        d = int(rng.integers(2, 17))
        fmap, nz = settings[i % len(settings)]
        q, k, v, cfg = random_instance(rng, n, d, m, fmap, nz)
        worst = max(worst, rel_err(mhla_forward(q, k, v, cfg), mhla_token_expansion(q, k, v, cfg)))
    return CheckResult("mhla blockwise == token expansion", worst, 1e-11)


def check_reductions(seed, count=10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        n, d = 32, 4
        q, k, v, cfg = random_instance(rng, n, d, 1)
        single = replace(cfg, coefficients=CoefficientMatrix(np.ones((1, 1))))
        worst = max(worst, rel_err(mhla_forward(q, k, v, single), linear_attention(q, k, v, cfg)))
        part = make_partition(n, LINEAR_1D, 4)
        uni = AttentionConfig(cfg.feature_map, True, part, uniform_coefficients(4))
        worst = max(worst, rel_err(mhla_forward(q, k, v, uni), linear_attention(q, k, v, uni)))
    return CheckResult("single-block and uniform mixing == global linear", worst, 1e-12)


def check_causal(seed, count=10) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        q, k, v, cfg = random_instance(rng, 32, 4, 4, normalize=bool(i % 2), causal=True)
        naive = naive_causal_oracle(q, k, v, cfg)
        worst = max(worst, rel_err(chunkwise_causal_forward(q, k, v, cfg), naive),
                    rel_err(stream_sequence(q, k, v, cfg), naive))
    return CheckResult("causal naive == chunkwise == streaming", worst, 1e-10)


def check_causality(seed) -> CheckResult:
    rng = np.random.default_rng(seed)
    q, k, v, cfg = random_instance(rng, 32, 4, 4, causal=True)
    full = chunkwise_causal_forward(q, k, v, cfg)
    changed = 0.0
    for t in range(q.shape[0]):
        k2, v2 = k.copy(), v.copy()
        k2[t + 1:] = 0.0
        v2[t + 1:] = 0.0
        out = chunkwise_causal_forward(q, k2, v2, cfg)
        changed = max(changed, float(np.max(np.abs(out[: t + 1] - full[: t + 1]))))
    return CheckResult("causality under future-token zeroing (exact)", changed, 0.0)


def gradient_fd_error(q, k, v, cfg, upstream, h=1e-5) -> float:
    """Worst ``|analytic - fd| / max(|fd|, 1e-3)`` over the q, k, v and coefficient gradients.

    A value <= 1e-4 means every entry is within 1e-4 relative or 1e-7 absolute.
    """
    n, d = q.shape
    coeffs = cfg.coefficients
    g = mhla_backward(q, k, v, cfg, upstream)

    def loss(q_, k_, v_, c_):
        return float((attend(q_, k_, v_, replace(cfg, coefficients=c_)) * upstream).sum())

    def as_coeffs(x):
        c = x.reshape(coeffs.values.shape)
        return CoefficientMatrix(np.tril(c) if coeffs.causal else c, coeffs.causal)

    pairs = [
        (g.d_q, finite_diff_grad(lambda x: loss(x.reshape(n, d), k, v, coeffs), q, h)),
        (g.d_k, finite_diff_grad(lambda x: loss(q, x.reshape(n, d), v, coeffs), k, h)),
        (g.d_v, finite_diff_grad(lambda x: loss(q, k, x.reshape(n, d), coeffs), v, h)),
        (g.d_coefficients, finite_diff_grad(lambda x: loss(q, k, v, as_coeffs(x)), coeffs.values, h)),
    ]
    worst = 0.0
    for analytic, fd in pairs:
        err = np.abs(analytic.ravel() - fd) / np.maximum(np.abs(fd), 1e-3)
        worst = max(worst, float(err.max(initial=0.0)))
    return worst


def away_from_kinks(x, margin=1e-3):
    """Move entries within ``margin`` of zero out to +-margin (relu has a kink at 0)."""
    x = x.copy()
    near = np.abs(x) < margin
    x[near] = np.where(x[near] < 0, -margin, margin)
    return x


def check_gradients(seed, count=4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        n, d, m = 8, 3, 2
        q, k, v, cfg = random_instance(rng, n, d, m, normalize=bool(i % 2), causal=i >= 2)
        worst = max(worst, gradient_fd_error(q, k, v, cfg, rng.standard_normal((n, d))))
    return CheckResult("analytic gradient == finite differences", worst, 1e-4)


def check_softmax(seed) -> CheckResult:
    rng = np.random.default_rng(seed)
    q, k, v = (rng.standard_normal((6, 3)) for _ in range(3))
    ref = np.empty_like(v)
    for i in range(6):
        w = np.exp(k @ q[i] / np.sqrt(3))
        ref[i] = (w / w.sum()) @ v
    return CheckResult("softmax attention == per-token loop", rel_err(softmax_attention(q, k, v), ref), 1e-14)


def check_linear_rank(seed) -> CheckResult:
    over = 0
    for s in range(seed, seed + 2):
        lin = next(r for r in collapse_report(s, 64, 8, 4) if r.mechanism == "linear")
        over = max(over, lin.numerical_rank - 8)
    return CheckResult("linear attention rank <= d", float(max(over, 0)), 0.0)


def check_fixture(seed) -> CheckResult:
    rng = np.random.default_rng(seed)
    tensors = {f"t{i}": rng.standard_normal((int(rng.integers(0, 5)), int(rng.integers(1, 5))))
               for i in range(20)}
    back = decode_fixture(encode_fixture(tensors))
    bad = sum(not np.array_equal(back[key].view(np.uint64), t.view(np.uint64)) for key, t in tensors.items())
    return CheckResult("fixture round trip (bitwise)", float(bad), 0.0)


CHECKS = (
    check_softmax,
    check_block_vs_token,
    check_reductions,
    check_causal,
    check_causality,
    check_gradients,
    check_linear_rank,
    check_fixture,
)


def _run_check(args):
    check, seed = args
    return check(seed)


def run_all(seed: int = 0, jobs: int = 1) -> list:
    """Run every check; ``jobs > 1`` spreads them over worker processes.

    Results come back in a fixed order either way.
    """
    work = [(check, seed) for check in CHECKS]
    if jobs <= 1:
        return [_run_check(w) for w in work]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_run_check, work))
