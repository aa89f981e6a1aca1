"""Causal MHLA: chunkwise-parallel forward, per-token streaming, naive oracle.

Blocks double as chunks. A query in block ``i`` sees the strict prefix
``sum_{b<i} c[i, b] S_b`` plus its own block's causally masked tokens
weighted by ``c[i, i]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import AttentionConfig, check_normalizer, check_qkv, NORMALIZER_FLOOR
from .errors import CoefficientError, DegenerateNormalizerError, PartitionError, StreamError
from .partition import (
    LINEAR_1D,
    CoefficientMatrix,
    SummaryStack,
    compute_local_summaries,
    make_partition,
)
from .tensor_core import FeatureMap, apply_feature_map, gemm


def _check_causal_cfg(cfg: AttentionConfig, seq_len: int | None = None):
    partition, coeffs = cfg.require_blocks()
    if not coeffs.causal:
        raise CoefficientError("causal attention needs causal (lower-triangular) coefficients")
    if partition.layout != LINEAR_1D:
        raise PartitionError("causal attention is only defined on a linear-1d partition")
    if seq_len is not None and seq_len != partition.seq_len:
        raise PartitionError(f"partition covers {partition.seq_len} tokens, got {seq_len}")
    return partition, coeffs


def global_prefix_summaries(stack: SummaryStack) -> SummaryStack:
    """Inclusive running sums, built by the recurrence ``G_i = G_{i-1} + S_i``."""
    s = stack.summaries.copy()
    z = stack.normalizers.copy()
    for i in range(1, len(stack)):
        s[i] = s[i - 1] + s[i]
        z[i] = z[i - 1] + z[i]
    return SummaryStack(s, z)


def mixed_prefix(coeffs: CoefficientMatrix, stack: SummaryStack) -> SummaryStack:
    """Strict mixed prefix ``sum_{b<i} c[i, b] S_b`` for every block ``i`` (one GEMM)."""
    m, d, e = stack.summaries.shape
    strict = np.tril(coeffs.values, -1)
    return SummaryStack(gemm(strict, stack.summaries.reshape(m, d * e)).reshape(m, d, e),
                        gemm(strict, stack.normalizers))


def chunkwise_causal_forward(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    q, k, v = check_qkv(q, k, v)
    partition, coeffs = _check_causal_cfg(cfg, q.shape[0])
    m, c = partition.num_blocks, partition.block_size
    qf = apply_feature_map(q, cfg.feature_map)
    kf = apply_feature_map(k, cfg.feature_map)
    qb = qf.reshape(m, c, -1)
    kb = kf.reshape(m, c, -1)
    vb = v.reshape(m, c, -1)

    prefix = mixed_prefix(coeffs, compute_local_summaries(kf, v, partition))
    self_w = np.diag(coeffs.values)[:, None, None]
    intra = np.matmul(qb, kb.transpose(0, 2, 1)) * np.tril(np.ones((c, c)))
    out = np.matmul(qb, prefix.summaries) + self_w * np.matmul(intra, vb)
    if cfg.normalize:
        den = np.einsum("mnd,md->mn", qb, prefix.normalizers) + self_w[..., 0] * intra.sum(axis=-1)
        check_normalizer(den.reshape(-1))
        out = out / den[..., None]
    return out.reshape(q.shape)


def naive_causal_oracle(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Explicit O(t) prefix sum per token; testing oracle only."""
    q, k, v = check_qkv(q, k, v)
    partition, coeffs = _check_causal_cfg(cfg, q.shape[0])
    qf = apply_feature_map(q, cfg.feature_map)
    kf = apply_feature_map(k, cfg.feature_map)
    blocks = partition.block_of_token
    c = coeffs.values
    out = np.empty_like(v)
    for t in range(q.shape[0]):
        w = c[blocks[t], blocks[: t + 1]] * (kf[: t + 1] @ qf[t])
        out[t] = w @ v[: t + 1]
        if cfg.normalize:
            den = w.sum()
            if not den >= NORMALIZER_FLOOR:
                raise DegenerateNormalizerError(t, den)
            out[t] /= den
    return out


@dataclass
class StreamState:
    """Single-owner decoding state. Not safe for concurrent use.

    A finished block is sealed lazily, when the first token of the next
    block arrives; at that point the mixed prefix for the new block is
    computed once and cached.
    """

    config: AttentionConfig
    dim: int
    completed_summaries: list = field(default_factory=list)
    completed_normalizers: list = field(default_factory=list)
    current_summary: np.ndarray = None
    current_normalizer: np.ndarray = None
    tokens_in_current_block: int = 0
    block_index: int = 0
    prefix_summary: np.ndarray = None
    prefix_normalizer: np.ndarray = None

    def __post_init__(self):
        d = self.dim
        if self.current_summary is None:
            self.current_summary = np.zeros((d, d))
            self.current_normalizer = np.zeros(d)
        if self.prefix_summary is None:
            self.prefix_summary = np.zeros((d, d))
            self.prefix_normalizer = np.zeros(d)

    @property
    def block_size(self) -> int:
        return self.config.partition.block_size

    @property
    def num_blocks(self) -> int:
        return self.config.partition.num_blocks

    def _enter_next_block(self):
        if self.block_index + 1 >= self.num_blocks:
            raise StreamError(
                f"sequence exceeds {self.num_blocks} blocks of {self.block_size} tokens "
                "supported by the coefficient matrix"
            )
        self.completed_summaries.append(self.current_summary)
        self.completed_normalizers.append(self.current_normalizer)
        self.block_index += 1
        self.tokens_in_current_block = 0
        self.current_summary = np.zeros((self.dim, self.dim))
        self.current_normalizer = np.zeros(self.dim)
        row = self.config.coefficients.values[self.block_index, : self.block_index]
        self.prefix_summary = np.tensordot(row, np.stack(self.completed_summaries), axes=1)
        self.prefix_normalizer = row @ np.stack(self.completed_normalizers)

    def step(self, q_t, k_t, v_t) -> np.ndarray:
        if self.tokens_in_current_block == self.block_size:
            self._enter_next_block()
        fmap = self.config.feature_map
        qf = apply_feature_map(np.asarray(q_t, dtype=np.float64), fmap)
        kf = apply_feature_map(np.asarray(k_t, dtype=np.float64), fmap)
        v_t = np.asarray(v_t, dtype=np.float64)
        self.current_summary = self.current_summary + np.outer(kf, v_t)
        self.current_normalizer = self.current_normalizer + kf
        self.tokens_in_current_block += 1

        w = self.config.coefficients.values[self.block_index, self.block_index]
        out = qf @ self.prefix_summary + w * (qf @ self.current_summary)
        if self.config.normalize:
            den = qf @ self.prefix_normalizer + w * (qf @ self.current_normalizer)
            if not den >= NORMALIZER_FLOOR:
                pos = self.block_index * self.block_size + self.tokens_in_current_block - 1
                raise DegenerateNormalizerError(pos, den)
            out = out / den
        return out

    def to_tensors(self) -> dict:
        """Named matrices for :func:`mhla.fixtures.save_fixture`."""
        cfg = self.config
        fmaps = list(FeatureMap)
        meta = [self.dim, self.block_index, self.tokens_in_current_block, self.block_size,
                self.num_blocks, fmaps.index(cfg.feature_map), int(cfg.normalize)]
        tensors = {
            "stream/meta": np.array([meta], dtype=np.float64),
            "stream/coefficients": cfg.coefficients.values,
            "stream/current_summary": self.current_summary,
            "stream/current_normalizer": self.current_normalizer[None, :],
            "stream/prefix_summary": self.prefix_summary,
            "stream/prefix_normalizer": self.prefix_normalizer[None, :],
        }
        for i, (s, z) in enumerate(zip(self.completed_summaries, self.completed_normalizers)):
            tensors[f"stream/completed/{i}/summary"] = s
            tensors[f"stream/completed/{i}/normalizer"] = z[None, :]
        return tensors

    @classmethod
    def from_tensors(cls, tensors: dict) -> "StreamState":
        meta = [int(x) for x in tensors["stream/meta"][0]]
        dim, block_index, tokens, block_size, num_blocks, fmap, normalize = meta
        partition = make_partition(block_size * num_blocks, LINEAR_1D, num_blocks)
        cfg = AttentionConfig(list(FeatureMap)[fmap], bool(normalize), partition,
                              CoefficientMatrix(tensors["stream/coefficients"], causal=True))
        return cls(
            config=cfg,
            dim=dim,
            completed_summaries=[tensors[f"stream/completed/{i}/summary"].copy() for i in range(block_index)],
            completed_normalizers=[tensors[f"stream/completed/{i}/normalizer"][0].copy() for i in range(block_index)],
            current_summary=tensors["stream/current_summary"].copy(),
            current_normalizer=tensors["stream/current_normalizer"][0].copy(),
            tokens_in_current_block=tokens,
            block_index=block_index,
            prefix_summary=tensors["stream/prefix_summary"].copy(),
            prefix_normalizer=tensors["stream/prefix_normalizer"][0].copy(),
        )


def stream_init(cfg: AttentionConfig, dim: int) -> StreamState:
    _check_causal_cfg(cfg)
    return StreamState(cfg, int(dim))


def stream_step(state: StreamState, q_t, k_t, v_t):
    """Advance ``state`` by one token; returns ``(output, state)``."""
    out = state.step(q_t, k_t, v_t)
    return out, state


def stream_sequence(q, k, v, cfg: AttentionConfig) -> np.ndarray:
    """Run a whole sequence through a fresh stream, one token at a time."""
    q, k, v = check_qkv(q, k, v)
    state = stream_init(cfg, q.shape[1])
    return np.stack([state.step(q[t], k[t], v[t]) for t in range(q.shape[0])])
