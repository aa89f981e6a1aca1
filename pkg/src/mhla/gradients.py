"""Analytic MHLA backward pass, finite-difference checker and a toy trainer.

The backward covers both the bidirectional forward and the chunkwise causal
forward (selected by ``cfg.coefficients.causal``); gradients are taken of
``sum(upstream * Y)``.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .attention import AttentionConfig, check_normalizer, check_qkv, mhla_forward
from .causal import _check_causal_cfg, chunkwise_causal_forward
from .errors import ShapeError, TrainingError
from .partition import (
    CoefficientMatrix,
    clip_coefficients,
    compute_local_summaries,
    gather_blocks,
    mix_summaries,
    scatter_blocks,
)
from .tensor_core import apply_feature_map, feature_map_derivative


@dataclass(frozen=True)
class GradientBundle:
    d_q: np.ndarray
    d_k: np.ndarray
    d_v: np.ndarray
    d_coefficients: np.ndarray


@dataclass(frozen=True)
class TrainRecord:
    step: int
    loss: float
    coefficient_snapshot_norm: float


def attend(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """MHLA forward matching :func:`mhla_backward`: causal iff the coefficients are."""
    if cfg.coefficients is not None and cfg.coefficients.causal:
        return chunkwise_causal_forward(q, k, v, cfg)
    return mhla_forward(q, k, v, cfg)


def _output_cotangents(num, den, g, normalize):
    # returns (d num, d den) for y = num / den, or y = num
    if not normalize:
        return g, None
    y = num / den[..., None]
    return g / den[..., None], -(g * y).sum(axis=-1) / den


def _bidirectional_backward(qf, kf, v, g, cfg):
    partition, coeffs = cfg.require_blocks()
    c = coeffs.values
    m = partition.num_blocks
    qb, kb, vb, gb = (gather_blocks(x, partition) for x in (qf, kf, v, g))
    stack = compute_local_summaries(kf, v, partition)
    mixed = mix_summaries(coeffs, stack)
    d = stack.summaries.shape[1]

    num = np.matmul(qb, mixed.summaries)
    den = np.einsum("mnd,md->mn", qb, mixed.normalizers) if cfg.normalize else None
    if den is not None:
        check_normalizer(den.reshape(-1), partition.token_order.reshape(-1))
    dnum, dden = _output_cotangents(num, den, gb, cfg.normalize)

    dqf = np.matmul(dnum, mixed.summaries.transpose(0, 2, 1))
    d_mixed = np.matmul(qb.transpose(0, 2, 1), dnum)
    d_coeff = d_mixed.reshape(m, -1) @ stack.summaries.reshape(m, -1).T
    d_sum = (c.T @ d_mixed.reshape(m, -1)).reshape(m, d, d)
    dkf = np.matmul(vb, d_sum.transpose(0, 2, 1))
    dv = np.matmul(kb, d_sum)
    if dden is not None:
        dqf += dden[..., None] * mixed.normalizers[:, None, :]
        d_mixed_z = np.einsum("mn,mnd->md", dden, qb)
        d_coeff += d_mixed_z @ stack.normalizers.T
        dkf += (c.T @ d_mixed_z)[:, None, :]
    return (scatter_blocks(dqf, partition), scatter_blocks(dkf, partition),
            scatter_blocks(dv, partition), d_coeff)


def _causal_backward(qf, kf, v, g, cfg):
    partition, coeffs = _check_causal_cfg(cfg, qf.shape[0])
    m, cs = partition.num_blocks, partition.block_size
    d = qf.shape[1]
    strict = np.tril(coeffs.values, -1)
    w = np.diag(coeffs.values)
    qb, kb, vb, gb = (x.reshape(m, cs, d) for x in (qf, kf, v, g))
    stack = compute_local_summaries(kf, v, partition)
    prefix = (strict @ stack.summaries.reshape(m, -1)).reshape(m, d, d)
    prefix_z = strict @ stack.normalizers
    mask = np.tril(np.ones((cs, cs)))
    intra = np.matmul(qb, kb.transpose(0, 2, 1)) * mask

    num = np.matmul(qb, prefix) + w[:, None, None] * np.matmul(intra, vb)
    den = None
    if cfg.normalize:
        den = np.einsum("mnd,md->mn", qb, prefix_z) + w[:, None] * intra.sum(axis=-1)
        check_normalizer(den.reshape(-1))
    dnum, dden = _output_cotangents(num, den, gb, cfg.normalize)

    # cotangent of the masked intra-block score matrix, before the c[i,i] weight
    e = np.matmul(dnum, vb.transpose(0, 2, 1))
    if dden is not None:
        e = e + dden[..., None]
    e *= mask
    d_self = (e * intra).sum(axis=(1, 2))
    d_intra = w[:, None, None] * e

    dqf = np.matmul(dnum, prefix.transpose(0, 2, 1)) + np.matmul(d_intra, kb)
    dkf = np.matmul(d_intra.transpose(0, 2, 1), qb)
    dv = w[:, None, None] * np.matmul(intra.transpose(0, 2, 1), dnum)

    d_prefix = np.matmul(qb.transpose(0, 2, 1), dnum)
    d_coeff = d_prefix.reshape(m, -1) @ stack.summaries.reshape(m, -1).T
    d_sum = (strict.T @ d_prefix.reshape(m, -1)).reshape(m, d, d)
    if dden is not None:
        dqf += dden[..., None] * prefix_z[:, None, :]
        d_prefix_z = np.einsum("mn,mnd->md", dden, qb)
        d_coeff += d_prefix_z @ stack.normalizers.T
        dkf += (strict.T @ d_prefix_z)[:, None, :]
    d_coeff = np.tril(d_coeff, -1) + np.diag(d_self)
    dkf += np.matmul(vb, d_sum.transpose(0, 2, 1))
    dv += np.matmul(kb, d_sum)
    return dqf.reshape(qf.shape), dkf.reshape(qf.shape), dv.reshape(qf.shape), d_coeff


def mhla_backward(q, k, v, cfg: AttentionConfig, upstream) -> GradientBundle:
    q, k, v = check_qkv(q, k, v)
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != q.shape:
        raise ShapeError(f"upstream must be {q.shape}, got {upstream.shape}")
    partition, coeffs = cfg.require_blocks()
    if partition.seq_len != q.shape[0]:
        raise ShapeError(f"partition covers {partition.seq_len} tokens, got {q.shape[0]}")
    qf = apply_feature_map(q, cfg.feature_map)
    kf = apply_feature_map(k, cfg.feature_map)
    backward = _causal_backward if coeffs.causal else _bidirectional_backward
    dqf, dkf, dv, dc = backward(qf, kf, v, upstream, cfg)
    return GradientBundle(
        d_q=dqf * feature_map_derivative(q, cfg.feature_map),
        d_k=dkf * feature_map_derivative(k, cfg.feature_map),
        d_v=dv,
        d_coefficients=dc,
    )


def finite_diff_grad(scalar_fn, x, h: float = 1e-5) -> np.ndarray:
    """Central differences ``(f(x + h e_i) - f(x - h e_i)) / 2h`` per coordinate."""
    if not h > 0:
        raise ValueError("h must be positive")
    x = np.array(x, dtype=np.float64).reshape(-1)
    grad = np.empty_like(x)
    for i in range(x.size):
        orig = x[i]
        x[i] = orig + h
        fp = scalar_fn(x.copy())
        x[i] = orig - h
        fm = scalar_fn(x.copy())
        x[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def _mse(y, target):
    return float(np.mean((y - target) ** 2))


def distill_coefficients(q, k, v, target, cfg: AttentionConfig, steps: int, lr: float):
    """Fit the mixing coefficients to ``target`` by plain gradient descent on MSE.

    q, k, v stay fixed. Coefficients are clipped after every update. The
    returned trace holds the loss *before* each of the ``steps`` updates.
    """
    q, k, v = check_qkv(q, k, v)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != q.shape:
        raise ShapeError(f"target must be {q.shape}, got {target.shape}")
    coeffs = cfg.coefficients
    trace = []
    for step in range(steps):
        y = attend(q, k, v, cfg)
        loss = _mse(y, target)
        if not np.isfinite(loss):
            raise TrainingError(step, loss)
        trace.append(TrainRecord(step, loss, float(np.linalg.norm(coeffs.values))))
        if lr == 0:
            # no update happens, so there is nothing to clip
            continue
        grads = mhla_backward(q, k, v, cfg, 2.0 * (y - target) / y.size)
        coeffs = clip_coefficients(CoefficientMatrix(
            coeffs.values - lr * grads.d_coefficients, coeffs.causal))
        cfg = replace(cfg, coefficients=coeffs)
    return coeffs, trace
