"""Streaming calibration statistics and whitener construction.

Activation batches are streamed into a Gram accumulator (G = X @ X.T plus
per-row absolute sums); whiteners of every method family are then built
from the accumulated statistics alone, so the full activation matrix never
needs to be materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import linalg
from .errors import ArgumentError, DegenerateActivationError, PositiveDefinitenessError

#: escalating Cholesky damping, as multiples of mean(diag(gram))
DAMPING_LADDER = (0.0, 1e-10, 1e-8, 1e-6)

#: default pseudo-inverse cutoff, as a multiple of the largest eigenvalue
DEFAULT_TAU = 1e-10


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a hash, used to fingerprint calibration statistics."""
    h = 0xCBF29CE484222325
    for b in data:
        h = ((h ^ b) * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class GramStats:
    """Kahan-compensated accumulator for G = X @ X.T over batches."""

    dim: int
    gram: np.ndarray = field(default=None)  # type: ignore[assignment]
    abs_sum: np.ndarray = field(default=None)  # type: ignore[assignment]
    sample_count: int = 0
    _comp: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self):
        if self.dim < 1:
            raise ArgumentError(f"dim must be positive, got {self.dim}")
        if self.gram is None:
            self.gram = np.zeros((self.dim, self.dim))
        if self.abs_sum is None:
            self.abs_sum = np.zeros(self.dim)
        if self._comp is None:
            self._comp = np.zeros((self.dim, self.dim))

    def accumulate(self, batch: np.ndarray) -> "GramStats":
        batch = linalg.as_matrix(batch, "batch")
        if batch.shape[0] != self.dim:
            raise ArgumentError(
                f"batch has {batch.shape[0]} rows, expected {self.dim}")
        outer = batch @ batch.T
        outer = 0.5 * (outer + outer.T)
        # Kahan step keeps accumulation order-insensitive to ~1e-12
        y = outer - self._comp
        t = self.gram + y
        self._comp = (t - self.gram) - y
        self.gram = t
        self.abs_sum += np.abs(batch).sum(axis=1)
        self.sample_count += batch.shape[1]
        return self

    def merge(self, other: "GramStats") -> "GramStats":
        if other.dim != self.dim:
            raise ArgumentError("cannot merge GramStats of different dims")
        y = (other.gram - other._comp) - self._comp
        t = self.gram + y
        self._comp = (t - self.gram) - y
        self.gram = t
        self.abs_sum += other.abs_sum
        self.sample_count += other.sample_count
        return self


def gram_accumulate(stats: GramStats, batch: np.ndarray) -> GramStats:
    """Functional alias for GramStats.accumulate."""
    return stats.accumulate(batch)


@dataclass(frozen=True)
class Whitener:
    """Right-multiplied transform S extracted from calibration statistics.

    kind selects the representation:
      - "diag-absmean": s_diag holds the diagonal of S
      - "cholesky":     s_matrix holds the lower-triangular L
      - "eigen-sqrt":   p / lam hold P and the Gram eigenvalues; S = P sqrt(L)
      - "eigen-gamma":  p / gamma; S = gamma * P
    """

    kind: str
    dim: int
    s_diag: np.ndarray | None = None
    s_matrix: np.ndarray | None = None
    p: np.ndarray | None = None
    lam: np.ndarray | None = None
    gamma: float | None = None
    tau: float = DEFAULT_TAU
    damping_used: float = 0.0
    fingerprint: int = 0

    def matrix(self) -> np.ndarray:
        """Materialize S as a dense dim x dim matrix."""
        if self.kind == "diag-absmean":
            return np.diag(self.s_diag)
        if self.kind == "cholesky":
            return self.s_matrix
        if self.kind == "eigen-sqrt":
            return self.p * np.sqrt(np.maximum(self.lam, 0.0))
        if self.kind == "eigen-gamma":
            return self.gamma * self.p
        raise ArgumentError(f"unknown whitener kind {self.kind!r}")

    def apply_right(self, a: np.ndarray) -> np.ndarray:
        """A @ S."""
        if a.shape[1] != self.dim:
            raise ArgumentError(f"expected {self.dim} cols, got {a.shape[1]}")
        if self.kind == "diag-absmean":
            return a * self.s_diag
        if self.kind == "cholesky":
            return a @ self.s_matrix
        if self.kind == "eigen-sqrt":
            return (a @ self.p) * np.sqrt(np.maximum(self.lam, 0.0))
        if self.kind == "eigen-gamma":
            return self.gamma * (a @ self.p)
        raise ArgumentError(f"unknown whitener kind {self.kind!r}")

    def apply_inverse_right(self, m: np.ndarray) -> np.ndarray:
        """M @ inv(S) (pseudo-inverse for eigen-sqrt below the tau cutoff)."""
        if m.shape[1] != self.dim:
            raise ArgumentError(f"expected {self.dim} cols, got {m.shape[1]}")
        if self.kind == "diag-absmean":
            return m / self.s_diag
        if self.kind == "cholesky":
            # M @ inv(L) == solve L.T y.T = m.T
            return scipy.linalg.solve_triangular(
                self.s_matrix.T, m.T, lower=False).T
        if self.kind == "eigen-sqrt":
            lam = np.maximum(self.lam, 0.0)
            cutoff = self.tau * lam.max() if lam.size else 0.0
            inv_sqrt = np.where(lam > cutoff, 1.0 / np.sqrt(np.where(lam > 0, lam, 1.0)), 0.0)
            return (m * inv_sqrt) @ self.p.T
        if self.kind == "eigen-gamma":
            return (m @ self.p.T) / self.gamma
        raise ArgumentError(f"unknown whitener kind {self.kind!r}")


def whitener_diag_absmean(stats_or_x) -> Whitener:
    """Diagonal whitener of per-row absolute means.

    Accepts either GramStats (streamed absolute sums) or a raw activation
    matrix.  Zero entries are replaced by a tiny epsilon so S stays
    invertible.
    """
    if isinstance(stats_or_x, GramStats):
        if stats_or_x.sample_count < 1:
            raise ArgumentError("no samples accumulated")
        s = stats_or_x.abs_sum / stats_or_x.sample_count
    else:
        x = linalg.as_matrix(stats_or_x, "x")
        if x.shape[1] < 1:
            raise ArgumentError("activation matrix has no columns")
        s = np.abs(x).mean(axis=1)
    eps = 1e-12 * s.max() if s.max() > 0 else 1e-12
    s = np.where(s == 0.0, eps, s)
    return Whitener(kind="diag-absmean", dim=len(s), s_diag=s,
                    fingerprint=fnv1a64(s.tobytes()))


def whitener_cholesky(stats: GramStats) -> Whitener:
    """Cholesky-factor whitener; escalates damping until the factorization
    succeeds and records the damping that was used."""
    if stats.sample_count < 1:
        raise ArgumentError("no samples accumulated")
    gram = 0.5 * (stats.gram + stats.gram.T)
    mean_diag = float(np.mean(np.diag(gram)))
    last: PositiveDefinitenessError | None = None
    for level in DAMPING_LADDER:
        delta = level * mean_diag
        try:
            ell = linalg.cholesky(gram, damping=delta)
        except PositiveDefinitenessError as exc:
            last = exc
            continue
        return Whitener(kind="cholesky", dim=stats.dim, s_matrix=ell,
                        damping_used=delta,
                        fingerprint=fnv1a64(gram.tobytes()))
    raise last  # type: ignore[misc]


def whitener_eigen(stats: GramStats, variant: str = "sqrt",
                   tau: float = DEFAULT_TAU) -> Whitener:
    """Eigendecomposition-based whitener.

    variant="sqrt":  S = P diag(sqrt(lam)), pseudo-inverse zeroes modes with
                     lam <= tau * max(lam).
    variant="gamma": S = gamma * P with gamma = max(sqrt(lam)); the inverse
                     P.T / gamma is always exact.
    """
    if stats.sample_count < 1:
        raise ArgumentError("no samples accumulated")
    if tau < 0:
        raise ArgumentError(f"tau must be nonnegative, got {tau}")
    gram = 0.5 * (stats.gram + stats.gram.T)
    eig = linalg.eig_sym(gram)
    lam = eig.clamped()
    if lam.max() <= 0 or np.all(lam <= tau * lam.max()):
        raise DegenerateActivationError(
            "all Gram eigenvalues fall below the pseudo-inverse cutoff")
    fp = fnv1a64(gram.tobytes())
    if variant == "sqrt":
        return Whitener(kind="eigen-sqrt", dim=stats.dim, p=eig.p, lam=lam,
                        tau=tau, fingerprint=fp)
    if variant == "gamma":
        gamma = float(np.sqrt(lam.max()))
        return Whitener(kind="eigen-gamma", dim=stats.dim, p=eig.p, lam=lam,
                        gamma=gamma, tau=tau, fingerprint=fp)
    raise ArgumentError(f"unknown eigen variant {variant!r}")
