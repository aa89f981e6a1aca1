"""Token-to-block partitions, mixing coefficients and local key-value summaries."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CoefficientError, PartitionError, ShapeError
from .tensor_core import as_matrix, gemm

LINEAR_1D = "linear-1d"
GRID_2D = "grid-2d"

CLIP_EPS = 1e-6


@dataclass(frozen=True, eq=False)
class BlockPartition:
    """Assignment of ``seq_len`` tokens to ``num_blocks`` equal, non-overlapping blocks.

    ``token_order[b]`` lists the token indices of block ``b`` in ascending
    order. ``centroids`` are in token coordinates (position for 1-D, (row, col)
    for 2-D); ``block_coords`` are the same centroids in block-grid units and
    drive the locality initialization.
    """

    seq_len: int
    num_blocks: int
    layout: str
    token_order: np.ndarray
    block_of_token: np.ndarray
    centroids: np.ndarray
    block_coords: np.ndarray
    grid: tuple | None = None
    block_grid: tuple | None = None

    @property
    def block_size(self) -> int:
        return self.seq_len // self.num_blocks

    @property
    def block_sizes(self) -> np.ndarray:
        return np.full(self.num_blocks, self.block_size, dtype=np.int64)

    @property
    def is_contiguous(self) -> bool:
        return self.layout == LINEAR_1D

    def __eq__(self, other):
        if not isinstance(other, BlockPartition):
            return NotImplemented
        return (
            self.seq_len == other.seq_len
            and self.num_blocks == other.num_blocks
            and self.layout == other.layout
            and self.grid == other.grid
            and self.block_grid == other.block_grid
        )

    def __hash__(self):
        return hash((self.seq_len, self.num_blocks, self.layout, self.grid, self.block_grid))


def _padding_hint(total, parts, what):
    target = math.ceil(total / parts) * parts
    return (
        f"{what} {total} is not divisible by {parts}; zero-pad the input to {target} "
        f"(e.g. 224x224 images are padded to 256x256 before splitting into blocks)"
    )


def _square_side(n, what):
    side = math.isqrt(n)
    if side * side != n:
        raise PartitionError(f"{what} {n} is not a perfect square; pass explicit grid dimensions")
    return side


def make_partition(seq_len: int, layout: str = LINEAR_1D, num_blocks: int = 1,
                   grid: tuple | None = None, block_grid: tuple | None = None) -> BlockPartition:
    """Split a sequence into equal blocks.

    For ``grid-2d`` the tokens are laid out in raster order on a ``grid``
    of (height, width) tokens (square by default) and cut into a
    ``block_grid`` of (rows, cols) rectangular tiles (square by default).
    """
    if seq_len < 1 or num_blocks < 1:
        raise PartitionError("seq_len and num_blocks must be positive")
    if layout == LINEAR_1D:
        if seq_len % num_blocks:
            raise PartitionError(_padding_hint(seq_len, num_blocks, "seq_len"))
        nb = seq_len // num_blocks
        order = np.arange(seq_len, dtype=np.int64).reshape(num_blocks, nb)
        pos = np.arange(num_blocks, dtype=np.float64)
        centroids = (pos * nb + (nb - 1) / 2.0)[:, None]
        return BlockPartition(seq_len, num_blocks, LINEAR_1D, order, order.reshape(-1) // nb,
                              centroids, pos[:, None])
    if layout != GRID_2D:
        raise PartitionError(f"unknown layout {layout!r}; expected {LINEAR_1D!r} or {GRID_2D!r}")

    if grid is None:
        s = _square_side(seq_len, "seq_len")
        grid = (s, s)
    if block_grid is None:
        s = _square_side(num_blocks, "num_blocks")
        block_grid = (s, s)
    h, w = (int(x) for x in grid)
    bh, bw = (int(x) for x in block_grid)
    if h * w != seq_len:
        raise PartitionError(f"grid {h}x{w} does not hold {seq_len} tokens")
    if bh * bw != num_blocks:
        raise PartitionError(f"block grid {bh}x{bw} does not give {num_blocks} blocks")
    if h % bh:
        raise PartitionError(_padding_hint(h, bh, "grid height"))
    if w % bw:
        raise PartitionError(_padding_hint(w, bw, "grid width"))
    th, tw = h // bh, w // bw

    rows, cols = np.divmod(np.arange(seq_len, dtype=np.int64), w)
    block_of_token = (rows // th) * bw + (cols // tw)
    order = np.argsort(block_of_token, kind="stable").reshape(num_blocks, th * tw)
    bi, bj = np.divmod(np.arange(num_blocks), bw)
    block_coords = np.stack([bi, bj], axis=1).astype(np.float64)
    centroids = np.stack([bi * th + (th - 1) / 2.0, bj * tw + (tw - 1) / 2.0], axis=1)
    return BlockPartition(seq_len, num_blocks, GRID_2D, order, block_of_token, centroids,
                          block_coords, (h, w), (bh, bw))


@dataclass(frozen=True, eq=False)
class CoefficientMatrix:
    values: np.ndarray
    causal: bool = False

    def __post_init__(self):
        v = as_matrix(self.values, "coefficients")
        if v.shape[0] != v.shape[1]:
            raise CoefficientError(f"coefficient matrix must be square, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise CoefficientError("coefficient matrix has non-finite entries")
        if self.causal and np.any(np.triu(v, 1) != 0.0):
            raise CoefficientError("causal coefficient matrix has nonzero entries above the diagonal")
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def size(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other):
        if not isinstance(other, CoefficientMatrix):
            return NotImplemented
        return self.causal == other.causal and np.array_equal(self.values, other.values)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class SummaryStack:
    """Per-block key-value summaries (M, d, d) and normalizers (M, d)."""

    summaries: np.ndarray
    normalizers: np.ndarray = field(repr=False)

    def __len__(self):
        return self.summaries.shape[0]


def pad_tokens(x, num_blocks: int, layout: str = LINEAR_1D) -> np.ndarray:
    """Zero-pad token rows so ``x`` splits evenly into ``num_blocks`` blocks.

    linear-1d appends zero rows at the end. grid-2d treats the rows as a
    square image and pads its bottom and right edges up to the next multiple
    of the block-grid side, the way 224x224 inputs are padded to 256x256.
    """
    x = np.asarray(x)
    n = x.shape[0]
    if layout == LINEAR_1D:
        target = math.ceil(n / num_blocks) * num_blocks
        return np.concatenate([x, np.zeros((target - n,) + x.shape[1:], dtype=x.dtype)])
    if layout != GRID_2D:
        raise PartitionError(f"unknown layout {layout!r}; expected {LINEAR_1D!r} or {GRID_2D!r}")
    side = _square_side(n, "seq_len")
    bs = _square_side(num_blocks, "num_blocks")
    new_side = math.ceil(side / bs) * bs
    img = x.reshape((side, side) + x.shape[1:])
    pad = [(0, new_side - side), (0, new_side - side)] + [(0, 0)] * (x.ndim - 1)
    return np.pad(img, pad).reshape((new_side * new_side,) + x.shape[1:])


def locality_init(partition: BlockPartition, init_floor: float = 0.0) -> CoefficientMatrix:
    """Row-stochastic coefficients decaying linearly with block-centroid distance.

    Row ``i`` starts as ``1 - dist(i, j) / max_k dist(i, k)`` (plus an
    optional ``init_floor``) and is normalized to sum to one. The farthest
    block therefore starts at exactly zero unless a floor is given.
    """
    m = partition.num_blocks
    if m == 1:
        return CoefficientMatrix(np.ones((1, 1)))
    xy = partition.block_coords
    dist = np.sqrt(((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=-1))
    raw = 1.0 - dist / dist.max(axis=1, keepdims=True) + init_floor
    return CoefficientMatrix(raw / raw.sum(axis=1, keepdims=True))


def uniform_coefficients(num_blocks: int) -> CoefficientMatrix:
    return CoefficientMatrix(np.full((num_blocks, num_blocks), 1.0 / num_blocks))


def clip_coefficients(c: CoefficientMatrix, eps: float = CLIP_EPS) -> CoefficientMatrix:
    out = np.clip(c.values, eps, 1.0 - eps)
    if c.causal:
        out = np.tril(out)
    return CoefficientMatrix(out, c.causal)


def causal_mask(c: CoefficientMatrix) -> CoefficientMatrix:
    return CoefficientMatrix(np.tril(c.values), causal=True)


def _check_tokens(k_feat, v, partition):
    k_feat = as_matrix(k_feat, "k_feat")
    v = as_matrix(v, "v")
    if k_feat.shape != v.shape:
        raise ShapeError(f"keys {k_feat.shape} and values {v.shape} differ in shape")
    if k_feat.shape[0] != partition.seq_len:
        raise ShapeError(f"partition covers {partition.seq_len} tokens, got {k_feat.shape[0]}")
    return k_feat, v


def gather_blocks(x: np.ndarray, partition: BlockPartition) -> np.ndarray:
    """View/copy of token rows grouped per block: shape (M, n_b, cols)."""
    if partition.is_contiguous:
        return x.reshape(partition.num_blocks, partition.block_size, x.shape[1])
    return x[partition.token_order]


def scatter_blocks(xb: np.ndarray, partition: BlockPartition) -> np.ndarray:
    """Inverse of :func:`gather_blocks`."""
    if partition.is_contiguous:
        return np.ascontiguousarray(xb.reshape(partition.seq_len, xb.shape[-1]))
    out = np.empty((partition.seq_len, xb.shape[-1]), dtype=xb.dtype)
    out[partition.token_order.reshape(-1)] = xb.reshape(-1, xb.shape[-1])
    return out


def compute_local_summaries(k_feat, v, partition: BlockPartition) -> SummaryStack:
    k_feat, v = _check_tokens(k_feat, v, partition)
    kb = gather_blocks(k_feat, partition)
    vb = gather_blocks(v, partition)
    return SummaryStack(np.matmul(kb.transpose(0, 2, 1), vb), kb.sum(axis=1))


def mix_summaries(c: CoefficientMatrix, stack: SummaryStack) -> SummaryStack:
    """Mixed stack with entry ``i`` equal to ``sum_b c[i, b] * stack[b]``."""
    m, d, e = stack.summaries.shape
    if c.size != m:
        raise ShapeError(f"coefficient matrix is {c.size}x{c.size} but the stack has {m} summaries")
    w = c.values.astype(stack.summaries.dtype, copy=False)
    mixed = gemm(w, stack.summaries.reshape(m, d * e)).reshape(m, d, e)
    return SummaryStack(mixed, gemm(w, stack.normalizers))
