"""Dense and quantized vector/matrix kernels.

Conventions: vectors are 1-D float32 arrays, matrices are 2-D row-major
float32 arrays, and ``matvec(x, W)`` is the row-vector product ``x @ W``.
Reductions use ``einsum`` rather than BLAS so that each output element is
computed with a fixed reduction order that does not depend on how many
rows or columns are processed together.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

F32 = np.float32

# Rows processed per block by the fused kernels; must keep 1-bit blocks
# byte-aligned, so it is a multiple of 8.
_BLOCK_ROWS = 64


class ShapeError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class TrainingError(RuntimeError):
    """An iterative fit diverged (non-finite loss)."""


def as_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=F32)
    if x.ndim != 1:
        raise ShapeError(f"expected a vector, got shape {x.shape}")
    return x


def as_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=F32)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    return w


def matvec(x, w) -> np.ndarray:
    """Return ``out[j] = sum_i x[i] * w[i, j]``."""
    x = np.asarray(x, dtype=F32)
    w = as_matrix(w)
    if x.shape[-1] != w.shape[0]:
        raise ShapeError(f"cannot multiply {x.shape} by {w.shape}")
    return np.einsum("...i,ij->...j", x, w).astype(F32, copy=False)


def rowdot(a, x) -> np.ndarray:
    """Return ``a @ x`` with one independent dot product per row of ``a``.

    The result for a row is bit-identical whether the row is multiplied
    alone or as part of a larger matrix, which the hierarchical head relies
    on when comparing gathered shards to the dense head.
    """
    a = as_matrix(a)
    x = as_vector(x)
    if a.shape[1] != x.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {x.shape}")
    return np.einsum("ij,j->i", a, x)


def relu(x):
    return np.maximum(x, 0)


def sigmoid(x):
    x = np.asarray(x)
    # tanh form avoids overflow in exp for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(z, axis: int = -1):
    z = np.asarray(z, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


# --------------------------------------------------------------------------
# truncated SVD
# --------------------------------------------------------------------------


@dataclass
class SvdFactors:
    U: np.ndarray  # [M, r]
    sigma: np.ndarray  # [r], non-increasing
    V: np.ndarray  # [N, r]

    @property
    def rank(self) -> int:
        return self.sigma.shape[0]

    def reconstruct(self) -> np.ndarray:
        return ((self.U.astype(np.float64) * self.sigma) @ self.V.T.astype(np.float64)).astype(F32)


def _complete_orthonormal(q: np.ndarray, n_cols: int) -> np.ndarray:
    """Extend the orthonormal columns of ``q`` to ``n_cols`` columns."""
    m, have = q.shape
    if have >= n_cols:
        return q
    basis = np.concatenate([q, np.eye(m)], axis=1)
    qq, _ = np.linalg.qr(basis)
    # QR may flip signs of the leading columns; keep the originals.
    return np.concatenate([q, qq[:, have:n_cols]], axis=1)


def truncated_svd(w, r: int) -> SvdFactors:
    """Top-``r`` singular triplets of ``w`` from the eigendecomposition of ``w.T @ w``.

    Singular values come out as square roots of the Gram eigenvalues, right
    singular vectors as its eigenvectors, and ``U = W V / sigma``. Work is
    done in float64; factors are returned as float32. Each column of ``V`` is
    sign-normalized so its first nonzero entry is positive.
    """
    w = np.asarray(w)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    m, n = w.shape
    if not 1 <= r <= min(m, n):
        raise ValueError(f"rank {r} outside [1, {min(m, n)}]")
    if not np.all(np.isfinite(w)):
        raise NumericError("truncated_svd input contains non-finite values")

    w64 = w.astype(np.float64)
    evals, evecs = np.linalg.eigh(w64.T @ w64)
    order = np.argsort(evals)[::-1][:r]
    sigma = np.sqrt(np.clip(evals[order], 0.0, None))
    v = evecs[:, order]

    idx = np.argmax(np.abs(v) > 1e-12, axis=0)
    signs = np.sign(v[idx, np.arange(r)])
    signs[signs == 0] = 1.0
    v = v * signs

    # Columns whose singular value is numerically zero get an arbitrary
    # orthonormal completion; they contribute nothing to the reconstruction.
    tol = max(m, n) * np.finfo(np.float64).eps * (sigma[0] if r else 0.0)
    good = sigma > tol
    u = np.zeros((m, r))
    u[:, good] = (w64 @ v[:, good]) / sigma[good]
    sigma = np.where(good, sigma, 0.0)
    if not good.all():
        n_good = int(good.sum())
        u = _complete_orthonormal(u[:, :n_good], r)
    return SvdFactors(U=u.astype(F32), sigma=sigma.astype(F32), V=v.astype(F32))


# --------------------------------------------------------------------------
# quantization
# --------------------------------------------------------------------------


@dataclass
class QuantTensorI8:
    values: np.ndarray  # int8 [rows, cols]
    scales: np.ndarray  # float32 [rows]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]

    @property
    def nbytes(self) -> int:
        return self.values.nbytes + self.scales.nbytes


@dataclass
class QuantTensor1b:
    """Sign bits (1 = non-negative) packed row-major, little bit order."""

    sign_bits: np.ndarray  # uint8 [ceil(rows*cols/8)]
    scales: np.ndarray  # float32 [rows], mean |w| per row
    rows: int
    cols: int

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def n_bits(self) -> int:
        return self.rows * self.cols

    @property
    def nbytes(self) -> int:
        return self.sign_bits.nbytes + self.scales.nbytes

    def bits(self) -> np.ndarray:
        return np.unpackbits(self.sign_bits, count=self.n_bits, bitorder="little").reshape(self.rows, self.cols)


def quantize_int8_rowwise(w) -> QuantTensorI8:
    w = as_matrix(w)
    amax = np.abs(w).max(axis=1) if w.shape[1] else np.zeros(w.shape[0], F32)
    # the floor keeps rows of subnormal values from getting a zero scale
    scales = np.where(amax > 0, np.maximum(amax / 127.0, np.finfo(F32).smallest_subnormal), 1.0).astype(F32)
    # a scale rounded down would push the top level past 127 and clip it
    low = scales.astype(np.float64) * 127.0 < amax
    scales = np.where(low, np.nextafter(scales, np.float32(np.inf)), scales).astype(F32)
    # float64 quotient so rounding to the nearest level is exact: |q * s - w| <= s / 2
    values = np.clip(np.rint(w.astype(np.float64) / scales[:, None].astype(np.float64)), -127, 127).astype(np.int8)
    return QuantTensorI8(values=values, scales=scales)


def dequantize_int8(q: QuantTensorI8) -> np.ndarray:
    return (q.values.astype(F32) * q.scales[:, None]).astype(F32)


def quantize_1bit(w) -> QuantTensor1b:
    w = as_matrix(w)
    rows, cols = w.shape
    scales = (np.abs(w).mean(axis=1) if cols else np.zeros(rows)).astype(F32)
    bits = np.packbits((w >= 0).ravel(), bitorder="little")
    return QuantTensor1b(sign_bits=bits, scales=scales, rows=rows, cols=cols)


def dequantize_1bit(q: QuantTensor1b) -> np.ndarray:
    signs = q.bits().astype(F32) * 2.0 - 1.0
    return (signs * q.scales[:, None]).astype(F32)


def storage_bits_1bit(rows: int, cols: int) -> int:
    return rows * cols + 32 * rows


def fused_dequant_matvec(x, q: QuantTensorI8 | QuantTensor1b) -> np.ndarray:
    """``x @ dequantize(q)`` computed block by block from the quantized form.

    Row scales are folded into ``x`` first. For 1-bit weights the sign
    matrix is expanded from packed bits one block of rows at a time, using
    ``sum_i a_i * (2 b_ij - 1) = 2 * sum_i a_i b_ij - sum_i a_i``.
    """
    if not isinstance(q, (QuantTensorI8, QuantTensor1b)):
        raise TypeError(f"unsupported quantized tensor {type(q).__name__}")
    x = as_vector(x)
    if x.shape[0] != q.rows:
        raise ShapeError(f"vector of length {x.shape[0]} does not match {q.rows} quantized rows")
    a = x * q.scales
    out = np.zeros(q.cols, dtype=F32)
    if isinstance(q, QuantTensorI8):
        for start in range(0, q.rows, _BLOCK_ROWS):
            stop = min(start + _BLOCK_ROWS, q.rows)
            out += np.einsum("i,ij->j", a[start:stop], q.values[start:stop].astype(F32))
        return out
    for start in range(0, q.rows, _BLOCK_ROWS):
        stop = min(start + _BLOCK_ROWS, q.rows)
        b0, b1 = start * q.cols, stop * q.cols
        # Block boundaries are byte-aligned because _BLOCK_ROWS % 8 == 0.
        chunk = q.sign_bits[b0 // 8 : (b1 + 7) // 8]
        bits = np.unpackbits(chunk, count=b1 - b0, bitorder="little").reshape(stop - start, q.cols)
        out += 2.0 * np.einsum("i,ij->j", a[start:stop], bits.astype(F32)) - a[start:stop].sum()
    return out


# --------------------------------------------------------------------------
# statistics
# --------------------------------------------------------------------------


def nearest_rank_index(n: int, p: float) -> int:
    """0-based index of the ceil(p*n)-th smallest of ``n`` elements."""
    # round() guards against p*n landing a hair above an integer (0.7*10).
    return max(1, math.ceil(round(p * n, 9))) - 1


def percentile(v, p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p * n)``-th smallest element."""
    v = np.asarray(v).ravel()
    if v.size == 0:
        raise ValueError("percentile of an empty vector")
    if not 0.0 < p <= 1.0:
        raise ValueError(f"percentile fraction {p} outside (0, 1]")
    k = nearest_rank_index(v.size, p)
    return np.partition(v, k)[k].item()
