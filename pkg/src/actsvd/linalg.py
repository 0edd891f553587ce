"""Dense matrix helpers and SVD forward passes.

Matrices are plain ``numpy.ndarray`` objects. Every routine validates its
inputs through :func:`as_matrix` so that NaN/Inf never reach a factorization.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SvdError(RuntimeError):
    """Raised when an SVD cannot be computed."""


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD ``a = u @ diag(s) @ vt`` with ``s`` sorted descending."""

    u: np.ndarray
    s: np.ndarray
    vt: np.ndarray

    @property
    def q(self) -> int:
        return int(self.s.shape[-1])

    @property
    def v(self) -> np.ndarray:
        return np.swapaxes(self.vt, -1, -2)

    def reconstruct(self, k: int | None = None) -> np.ndarray:
        if k is None:
            k = self.q
        return (self.u[..., :, :k] * self.s[..., None, :k]) @ self.vt[..., :k, :]


def as_matrix(a, name: str = "matrix", dtype=np.float64) -> np.ndarray:
    """Return ``a`` as a 2-D finite array, raising ``ValueError`` otherwise."""
    arr = np.asarray(a, dtype=dtype)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"{name} must have positive dimensions, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


def svd_full(a) -> SvdFactors:
    """Thin SVD keeping all ``min(m, n)`` triplets.

    Accepts a single matrix or a stack ``(..., m, n)``; stacks are
    factorized in one LAPACK call.
    """
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim < 2:
        raise ValueError(f"expected a matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cannot take the SVD of a matrix with non-finite entries")
    try:
        u, s, vt = np.linalg.svd(arr, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise SvdError(f"SVD did not converge for shape {arr.shape}") from exc
    return SvdFactors(u, s, vt)


def svd_lowrank(
    a,
    q: int,
    niter: int = 2,
    oversample: int = 20,
    seed: int | np.random.Generator | None = 0,
) -> SvdFactors:
    """Randomized top-``q`` SVD (Gaussian range finder with power iteration).

    ``niter`` power passes are applied with QR re-orthonormalization between
    them. The sketch width is ``q + oversample`` capped at ``min(m, n)``; when
    the cap is hit the result coincides with the exact SVD.
    """
    arr = as_matrix(a, "a")
    m, n = arr.shape
    if not 1 <= q <= min(m, n):
        raise ValueError(f"q must lie in [1, {min(m, n)}], got {q}")
    if niter < 1:
        raise ValueError(f"niter must be >= 1, got {niter}")
    rng = np.random.default_rng(seed)
    width = min(q + max(oversample, 0), min(m, n))

    omega = rng.standard_normal((n, width))
    basis, _ = np.linalg.qr(arr @ omega)
    for _ in range(niter):
        z, _ = np.linalg.qr(arr.T @ basis)
        basis, _ = np.linalg.qr(arr @ z)

    small = svd_full(basis.T @ arr)
    u = basis @ small.u
    return SvdFactors(u[:, :q], small.s[:q], small.vt[:q, :])


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {b.shape}")
    return a @ b


def truncate(a, k: int) -> np.ndarray:
    """Best rank-``k`` approximation of ``a`` in Frobenius norm."""
    f = svd_full(a)
    if not 0 <= k <= f.q:
        raise ValueError(f"k must lie in [0, {f.q}], got {k}")
    return f.reconstruct(k)


def numerical_rank(a, rtol: float = 1e-10) -> int:
    s = np.linalg.svd(np.asarray(a, dtype=np.float64), compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def orthonormality_error(q: np.ndarray) -> float:
    """``||QᵀQ - I||_F`` for a matrix with (supposedly) orthonormal columns."""
    gram = q.T @ q
    return float(np.linalg.norm(gram - np.eye(gram.shape[0])))
