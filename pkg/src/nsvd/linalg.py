"""Dense decomposition kernels: SVD, truncated SVD, Cholesky, symmetric
eigendecomposition, and column interpolative decomposition.

Matrices are 64-bit numpy arrays in C (row-major) order.  All kernels are
deterministic: identical input bytes produce identical factor bytes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ArgumentError, DecompositionError, PositiveDefinitenessError

SYM_TOL = 1e-10


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Validate and normalize a 2-D real array to float64 C-order.

    Rejects non-2-D input and non-finite entries.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise ArgumentError(f"{name} must be 2-D, got ndim={a.ndim}")
    if a.size and not np.isfinite(a).all():
        raise ArgumentError(f"{name} contains non-finite entries")
    return a


def check_symmetric(g: np.ndarray, name: str = "matrix") -> np.ndarray:
    g = as_matrix(g, name)
    if g.shape[0] != g.shape[1]:
        raise ArgumentError(f"{name} must be square, got {g.shape}")
    scale = max(np.abs(g).max(), 1.0) if g.size else 1.0
    if g.size and np.abs(g - g.T).max() > SYM_TOL * scale:
        raise ArgumentError(f"{name} is not symmetric to {SYM_TOL}")
    return g


@dataclass(frozen=True)
class SvdFactors:
    """Thin SVD: u (m x r) with orthonormal columns, sigma non-increasing,
    vt (r x n) with orthonormal rows."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return len(self.sigma)

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt

    def truncate(self, k: int) -> "SvdFactors":
        return SvdFactors(np.ascontiguousarray(self.u[:, :k]),
                          self.sigma[:k].copy(),
                          np.ascontiguousarray(self.vt[:k, :]))


@dataclass(frozen=True)
class EigFactors:
    """Spectral decomposition of a symmetric matrix: p orthogonal,
    eigenvalues non-increasing."""

    p: np.ndarray
    lam: np.ndarray

    def clamped(self) -> np.ndarray:
        """Eigenvalues with roundoff negatives zeroed (PSD read path)."""
        return np.where(self.lam < 0.0, 0.0, self.lam)

    def reconstruct(self) -> np.ndarray:
        return (self.p * self.lam) @ self.p.T


@dataclass(frozen=True)
class IdFactors:
    """Interpolative decomposition: source[:, column_indices] @ interp
    approximates the source matrix."""

    column_indices: np.ndarray
    interp: np.ndarray


def svd(a: np.ndarray) -> SvdFactors:
    """Thin SVD with r = min(rows, cols)."""
    a = as_matrix(a, "a")
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"SVD did not converge on {a.shape} matrix") from exc
    return SvdFactors(np.ascontiguousarray(u), s, np.ascontiguousarray(vt))


def tsvd(a: np.ndarray, k: int) -> tuple[SvdFactors, float]:
    """Rank-k truncated SVD and the Frobenius loss of the discarded tail."""
    a = as_matrix(a, "a")
    r = min(a.shape)
    if not 1 <= k <= r:
        raise ArgumentError(f"k={k} out of range [1, {r}] for shape {a.shape}")
    full = svd(a)
    loss = float(np.sqrt(np.sum(full.sigma[k:] ** 2)))
    return full.truncate(k), loss


def cholesky(g: np.ndarray, damping: float = 0.0) -> np.ndarray:
    """Lower-triangular L with L @ L.T = g + damping * I."""
    g = check_symmetric(g, "g")
    if damping < 0:
        raise ArgumentError(f"damping must be nonnegative, got {damping}")
    gd = g + damping * np.eye(g.shape[0])
    gd = 0.5 * (gd + gd.T)
    try:
        return np.ascontiguousarray(np.linalg.cholesky(gd))
    except np.linalg.LinAlgError:
        raise PositiveDefinitenessError(_first_failing_pivot(gd)) from None


def _first_failing_pivot(g: np.ndarray) -> int:
    for j in range(1, g.shape[0] + 1):
        try:
            np.linalg.cholesky(g[:j, :j])
        except np.linalg.LinAlgError:
            return j - 1
    return g.shape[0] - 1


def eig_sym(g: np.ndarray) -> EigFactors:
    """Spectral decomposition of a symmetric matrix, eigenvalues descending."""
    g = check_symmetric(g, "g")
    try:
        lam, p = np.linalg.eigh(g)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError(f"eigendecomposition failed on {g.shape} matrix") from exc
    order = np.argsort(lam, kind="stable")[::-1]
    return EigFactors(np.ascontiguousarray(p[:, order]), lam[order].copy())


def column_id(a: np.ndarray, k: int) -> IdFactors:
    """Column interpolative decomposition via column-pivoted QR.

    Picks k skeleton columns greedily by maximum residual norm, then fits
    the interpolation matrix by least squares against the skeleton.
    """
    a = as_matrix(a, "a")
    n = a.shape[1]
    if not 1 <= k <= n:
        raise ArgumentError(f"k={k} out of range [1, {n}] for shape {a.shape}")
    _, _, piv = scipy.linalg.qr(a, mode="economic", pivoting=True)
    idx = np.sort(piv[:k])
    c = a[:, idx]
    interp, *_ = np.linalg.lstsq(c, a, rcond=None)
    # exact identity on the skeleton columns, independent of lstsq roundoff
    interp[:, idx] = np.eye(k)
    return IdFactors(idx, np.ascontiguousarray(interp))
