"""Dense matrix primitives: GEMM, row softmax, feature maps, singular values.

Matrices are 2-D numpy arrays in row-major (C) order, float64 unless a
benchmark passes float32 in. Only ``row_softmax_inplace`` mutates its argument.
"""

from __future__ import annotations

import enum

import numba
import numpy as np
import scipy.linalg

from .errors import ShapeError, SVDConvergenceError

JACOBI_MAX_SWEEPS = 100


class FeatureMap(str, enum.Enum):
    IDENTITY = "identity"
    RELU = "relu"
    ELU_PLUS_ONE = "elu-plus-one"

    @property
    def nonnegative(self) -> bool:
        return self is not FeatureMap.IDENTITY

    @classmethod
    def parse(cls, value) -> "FeatureMap":
        if isinstance(value, cls):
            return value
        return cls(str(value).lower().replace("_", "-"))


def as_real(m) -> np.ndarray:
    """float32 input stays float32 (benchmarks only); everything else becomes float64."""
    arr = np.asarray(m)
    return arr if arr.dtype in (np.float64, np.float32) else arr.astype(np.float64)


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    """Coerce ``m`` to a C-contiguous real 2-D array, rejecting other ranks."""
    arr = np.ascontiguousarray(as_real(m))
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {arr.shape}")
    return arr


def gemm(a, b, transpose_a: bool = False, transpose_b: bool = False) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if transpose_a:
        a = a.T
    if transpose_b:
        b = b.T
    if a.shape[1] != b.shape[0]:
        raise ShapeError(
            f"gemm inner dimensions disagree: op(a) is {a.shape[0]}x{a.shape[1]}, "
            f"op(b) is {b.shape[0]}x{b.shape[1]}"
        )
    return np.ascontiguousarray(a @ b)


def row_softmax(m, scale: float = 1.0) -> np.ndarray:
    """Softmax of ``scale * m`` along each row, stabilized by row-max subtraction."""
    return row_softmax_inplace(as_matrix(m, "m") * scale)


def row_softmax_inplace(out: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Row softmax overwriting ``out``; keeps peak memory at one N x N buffer."""
    if scale != 1.0:
        out *= scale
    out -= out.max(axis=1, keepdims=True)
    np.exp(out, out=out)
    out /= out.sum(axis=1, keepdims=True)
    return out


def apply_feature_map(m, kind=FeatureMap.ELU_PLUS_ONE) -> np.ndarray:
    kind = FeatureMap.parse(kind)
    m = as_real(m)
    if kind is FeatureMap.IDENTITY:
        return m.copy()
    if kind is FeatureMap.RELU:
        return np.maximum(m, 0.0)
    # elu(x) + 1: x + 1 for x > 0, exp(x) otherwise
    return np.where(m > 0, m + 1, np.exp(np.minimum(m, 0)))


def feature_map_derivative(m, kind=FeatureMap.ELU_PLUS_ONE) -> np.ndarray:
    """Elementwise derivative of the feature map. The relu subgradient at 0 is 0."""
    kind = FeatureMap.parse(kind)
    m = np.asarray(m, dtype=np.float64)
    if kind is FeatureMap.IDENTITY:
        return np.ones_like(m)
    if kind is FeatureMap.RELU:
        return (m > 0).astype(np.float64)
    return np.where(m > 0, 1.0, np.exp(np.minimum(m, 0.0)))


@numba.njit(cache=True)
def _jacobi_sweeps(a, max_sweeps, tol, floor):
    # One-sided cyclic Jacobi on the columns of a (in place).
    # Columns with squared norm <= floor are treated as zero and left alone.
    # Returns the number of sweeps used, or -1 if the cap was hit.
    m, n = a.shape
    for sweep in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = 0.0
                beta = 0.0
                gamma = 0.0
                for i in range(m):
                    x = a[i, p]
                    y = a[i, q]
                    alpha += x * x
                    beta += y * y
                    gamma += x * y
                if alpha <= floor or beta <= floor:
                    continue
                if gamma == 0.0 or abs(gamma) <= tol * np.sqrt(alpha) * np.sqrt(beta):
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                sign = 1.0 if zeta >= 0.0 else -1.0
                t = sign / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                c = 1.0 / np.sqrt(1.0 + t * t)
                s = c * t
                for i in range(m):
                    x = a[i, p]
                    y = a[i, q]
                    a[i, p] = c * x - s * y
                    a[i, q] = s * x + c * y
        if not rotated:
            return sweep + 1
    return -1


def _off_diagonal_residual(a: np.ndarray) -> float:
    g = a.T @ a
    d = np.sqrt(np.outer(np.diag(g), np.diag(g)))
    np.fill_diagonal(g, 0.0)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(d > 0, np.abs(g) / d, 0.0)
    return float(r.max(initial=0.0))


def singular_values(m, max_sweeps: int = JACOBI_MAX_SWEEPS) -> np.ndarray:
    """Singular values in descending order via one-sided Jacobi.

    The matrix is first reduced to a square triangular factor with a
    column-pivoted QR; Jacobi then runs on the transposed factor, which
    usually converges in a handful of sweeps. A pair of columns is rotated
    while ``|a_p . a_q| > rows * eps * |a_p| |a_q|``. Columns shorter than
    ``eps * ||m||_F`` are roundoff and are not rotated; they only affect
    singular values below the usual numerical-rank threshold.
    """
    a = as_matrix(m, "m")
    if not np.all(np.isfinite(a)):
        raise ValueError("singular_values requires finite input")
    if a.shape[0] < a.shape[1]:
        a = a.T
    if a.shape[1] == 0:
        return np.zeros(0)
    _, r, _ = scipy.linalg.qr(a, mode="economic", pivoting=True)
    work = np.asfortranarray(r.T)
    tol = work.shape[0] * np.finfo(np.float64).eps
    floor = (np.finfo(np.float64).eps * np.linalg.norm(work)) ** 2
    sweeps = _jacobi_sweeps(work, max_sweeps, tol, floor)
    if sweeps < 0:
        raise SVDConvergenceError(max_sweeps, _off_diagonal_residual(work))
    sv = np.sqrt(np.einsum("ij,ij->j", work, work))
    return np.sort(sv)[::-1]
