"""Bidirectional attention forwards: softmax, global linear, and MHLA.

MHLA splits the tokens into blocks, summarizes each block as a d x d
key-value matrix, and lets every query block read a coefficient-weighted
mixture of all block summaries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CoefficientError, DegenerateNormalizerError, ShapeError
from .partition import (
    BlockPartition,
    CoefficientMatrix,
    compute_local_summaries,
    gather_blocks,
    mix_summaries,
    scatter_blocks,
)
from .tensor_core import FeatureMap, apply_feature_map, as_matrix, gemm, row_softmax_inplace

NORMALIZER_FLOOR = 1e-30


@dataclass(frozen=True)
class AttentionConfig:
    feature_map: FeatureMap = FeatureMap.ELU_PLUS_ONE
    normalize: bool = True
    partition: BlockPartition | None = None
    coefficients: CoefficientMatrix | None = None

    def __post_init__(self):
        object.__setattr__(self, "feature_map", FeatureMap.parse(self.feature_map))
        if self.normalize and not self.feature_map.nonnegative:
            raise ValueError(f"normalize=True needs a nonnegative feature map, got {self.feature_map.value}")
        if self.partition is not None and self.coefficients is not None:
            if self.coefficients.size != self.partition.num_blocks:
                raise CoefficientError(
                    f"coefficients are {self.coefficients.size}x{self.coefficients.size} "
                    f"but the partition has {self.partition.num_blocks} blocks"
                )

    def require_blocks(self):
        if self.partition is None or self.coefficients is None:
            raise ValueError("MHLA needs a partition and a coefficient matrix in the config")
        return self.partition, self.coefficients


def check_qkv(q, k, v):
    q, k, v = as_matrix(q, "q"), as_matrix(k, "k"), as_matrix(v, "v")
    if not (q.shape == k.shape == v.shape):
        raise ShapeError(f"q, k, v must share a shape, got {q.shape}, {k.shape}, {v.shape}")
    return q, k, v


def check_normalizer(den: np.ndarray, token_index=None) -> None:
    """Raise on the first normalizer below the floor. ``den`` is per token."""
    bad = np.flatnonzero(~(den >= NORMALIZER_FLOOR))
    if bad.size:
        row = bad[0] if token_index is None else token_index[bad[0]]
        raise DegenerateNormalizerError(row, den.reshape(-1)[bad[0]])


def softmax_attention(q, k, v) -> np.ndarray:
    q, k, v = check_qkv(q, k, v)
    scores = gemm(q, k, transpose_b=True)
    return gemm(row_softmax_inplace(scores, 1.0 / math.sqrt(q.shape[1])), v)


def linear_attention(q, k, v, cfg: AttentionConfig = AttentionConfig()) -> np.ndarray:
    q, k, v = check_qkv(q, k, v)
    qf = apply_feature_map(q, cfg.feature_map)
    kf = apply_feature_map(k, cfg.feature_map)
    out = gemm(qf, gemm(kf, v, transpose_a=True))
    if not cfg.normalize:
        return out
    den = qf @ kf.sum(axis=0)
    check_normalizer(den)
    return out / den[:, None]


def _block_partition_for(q, cfg):
    partition, coeffs = cfg.require_blocks()
    if partition.seq_len != q.shape[0]:
        raise ShapeError(f"partition covers {partition.seq_len} tokens, got {q.shape[0]}")
    return partition, coeffs


def mhla_forward(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    q, k, v = check_qkv(q, k, v)
    partition, coeffs = _block_partition_for(q, cfg)
    if coeffs.causal:
        raise CoefficientError("mhla_forward is bidirectional; use causal.chunkwise_causal_forward for causal coefficients")
    qf = apply_feature_map(q, cfg.feature_map)
    kf = apply_feature_map(k, cfg.feature_map)
    mixed = mix_summaries(coeffs, compute_local_summaries(kf, v, partition))
    qb = gather_blocks(qf, partition)
    # one GEMM per query block against that block's mixed summary
    out = np.matmul(qb, mixed.summaries)
    if cfg.normalize:
        den = np.einsum("mnd,md->mn", qb, mixed.normalizers)
        check_normalizer(den.reshape(-1), partition.token_order.reshape(-1))
        out = out / den[..., None]
    return scatter_blocks(out, partition)


def mhla_token_expansion(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Per-token evaluation of MHLA, O(N^2): no block summaries are formed.

    Output row t is ``sum_j c[b(t), b(j)] (q~_t . k~_j) v_j``, divided by the
    same sum without ``v_j`` when normalizing.
    """
    q, k, v = check_qkv(q, k, v)
    partition, coeffs = _block_partition_for(q, cfg)
    qf = apply_feature_map(q, cfg.feature_map)
    kf = apply_feature_map(k, cfg.feature_map)
    c = coeffs.values
    blocks = partition.block_of_token
    out = np.empty_like(v)
    for t in range(q.shape[0]):
        w = c[blocks[t], blocks] * (kf @ qf[t])
        out[t] = w @ v
        if cfg.normalize:
            den = w.sum()
            if not den >= NORMALIZER_FLOOR:
                raise DegenerateNormalizerError(t, den)
            out[t] /= den
    return out
