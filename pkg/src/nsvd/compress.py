"""Rank budgeting and the nine compression methods.

Methods: svd (plain), asvd0/1/2/3 (activation-aware with diagonal,
Cholesky, eigen-sqrt, and eigen-gamma whiteners), nsvd1/2 (nested with an
SVD residual stage), nid1/2 (nested with an interpolative-decomposition
residual stage).  Singular values are absorbed into the left factor, so a
layer stores exactly (m + n) * (k1 + k2) factor entries.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import linalg
from .calibration import Whitener
from .errors import ArgumentError, InfeasibleBudgetError

METHODS = ("svd", "asvd0", "asvd1", "asvd2", "asvd3",
           "nsvd1", "nsvd2", "nid1", "nid2")

#: whitener kind used by each activation-aware / nested method
WHITENER_KIND = {
    "asvd0": "diag-absmean",
    "asvd1": "cholesky",
    "asvd2": "eigen-sqrt",
    "asvd3": "eigen-gamma",
    "nsvd1": "cholesky",
    "nsvd2": "eigen-sqrt",
    "nid1": "cholesky",
    "nid2": "eigen-sqrt",
}

#: flat method a nested method degenerates to when k2 == 0
FLAT_OF_NESTED = {"nsvd1": "asvd1", "nsvd2": "asvd2",
                  "nid1": "asvd1", "nid2": "asvd2"}


@dataclass(frozen=True)
class RankBudget:
    ratio: float
    k: int
    split: float
    k1: int
    k2: int


def rank_budget(m: int, n: int, ratio: float, split: float = 0.95) -> RankBudget:
    """Map a compression ratio to a rank budget.

    k = floor((1 - ratio) * m * n / (m + n)); k1 = round-half-up(split * k)
    clamped to at least 1; k2 = k - k1.
    """
    if m < 1 or n < 1:
        raise ArgumentError(f"dimensions must be positive, got {m}x{n}")
    if not 0.0 <= ratio < 1.0:
        raise ArgumentError(f"ratio must be in [0, 1), got {ratio}")
    if not 0.0 < split <= 1.0:
        raise ArgumentError(f"split must be in (0, 1], got {split}")
    k = int(math.floor((1.0 - ratio) * m * n / (m + n)))
    if k < 1:
        raise InfeasibleBudgetError(
            f"ratio {ratio} on a {m}x{n} matrix leaves no rank budget")
    k1 = max(1, int(math.floor(split * k + 0.5)))
    k2 = k - k1
    return RankBudget(ratio=ratio, k=k, split=split, k1=k1, k2=k2)


@dataclass(frozen=True)
class FactorPair:
    """Left factor w (m x k, singular values absorbed) and right factor
    z (k x n)."""

    w: np.ndarray
    z: np.ndarray

    @property
    def rank(self) -> int:
        return self.w.shape[1]

    def stored_entries(self) -> int:
        return self.w.size + self.z.size


@dataclass(frozen=True)
class CompressedLayer:
    method: str
    original_rows: int
    original_cols: int
    budget: RankBudget
    stage1: FactorPair
    stage2: FactorPair | None = None
    whitener_fingerprint: int = 0

    def reconstruct(self) -> np.ndarray:
        a = self.stage1.w @ self.stage1.z
        if self.stage2 is not None:
            a = a + self.stage2.w @ self.stage2.z
        return a

    def stored_entries(self) -> int:
        total = self.stage1.stored_entries()
        if self.stage2 is not None:
            total += self.stage2.stored_entries()
        return total


class FlopCounter:
    """Accumulates scalar multiply-add flops (2 per fused op) for apply()."""

    def __init__(self):
        self.matmul_flops = 0
        self.add_flops = 0

    def count_matmul(self, rows: int, inner: int, cols: int):
        self.matmul_flops += 2 * rows * inner * cols

    def count_add(self, size: int):
        self.add_flops += size

    @property
    def total(self) -> int:
        return self.matmul_flops + self.add_flops


def _check_rank(a: np.ndarray, k: int):
    if k > min(a.shape):
        raise ArgumentError(
            f"rank {k} exceeds min dimension of {a.shape[0]}x{a.shape[1]}")


def compress_plain_svd(a: np.ndarray, budget: RankBudget) -> CompressedLayer:
    """Optimal plain rank-k compression by truncated SVD."""
    a = linalg.as_matrix(a, "a")
    _check_rank(a, budget.k)
    factors, _ = linalg.tsvd(a, budget.k)
    stage1 = FactorPair(w=factors.u * factors.sigma, z=factors.vt)
    flat = RankBudget(budget.ratio, budget.k, 1.0, budget.k, 0)
    return CompressedLayer(method="svd", original_rows=a.shape[0],
                           original_cols=a.shape[1], budget=flat,
                           stage1=stage1)


def _method_of_whitener(w: Whitener) -> str:
    for method, kind in WHITENER_KIND.items():
        if method.startswith("asvd") and kind == w.kind:
            return method
    raise ArgumentError(f"no method for whitener kind {w.kind!r}")


def compress_activation_aware(a: np.ndarray, w: Whitener,
                              budget: RankBudget) -> CompressedLayer:
    """Whiten, truncate, and unwhiten: stage1 = (U_k S_k, V_k^T inv(S))."""
    a = linalg.as_matrix(a, "a")
    if w.dim != a.shape[1]:
        raise ArgumentError(
            f"whitener dim {w.dim} does not match matrix cols {a.shape[1]}")
    _check_rank(a, budget.k)
    whitened = w.apply_right(a)
    factors, _ = linalg.tsvd(whitened, budget.k)
    z = w.apply_inverse_right(factors.vt)
    stage1 = FactorPair(w=factors.u * factors.sigma, z=z)
    flat = RankBudget(budget.ratio, budget.k, 1.0, budget.k, 0)
    return CompressedLayer(method=_method_of_whitener(w),
                           original_rows=a.shape[0], original_cols=a.shape[1],
                           budget=flat, stage1=stage1,
                           whitener_fingerprint=w.fingerprint)


def compress_nested(a: np.ndarray, w: Whitener, budget: RankBudget,
                    stage2_kind: str = "svd") -> CompressedLayer:
    """Activation-aware stage at rank k1, then a plain residual stage at
    rank k2 (truncated SVD or column interpolative decomposition)."""
    a = linalg.as_matrix(a, "a")
    if budget.k2 < 1:
        raise ArgumentError("nested compression needs k2 >= 1; "
                            "use compress_activation_aware when k2 == 0")
    if budget.k1 + budget.k2 > min(a.shape):
        raise ArgumentError(
            f"k1 + k2 = {budget.k1 + budget.k2} exceeds min dimension "
            f"of {a.shape[0]}x{a.shape[1]}")
    if stage2_kind not in ("svd", "id"):
        raise ArgumentError(f"unknown stage2 kind {stage2_kind!r}")

    stage1_budget = RankBudget(budget.ratio, budget.k1, 1.0, budget.k1, 0)
    stage1_layer = compress_activation_aware(a, w, stage1_budget)
    residual = a - stage1_layer.reconstruct()

    if stage2_kind == "svd":
        factors, _ = linalg.tsvd(residual, budget.k2)
        stage2 = FactorPair(w=factors.u * factors.sigma, z=factors.vt)
        prefix = "nsvd"
    else:
        idf = linalg.column_id(residual, budget.k2)
        stage2 = FactorPair(w=np.ascontiguousarray(residual[:, idf.column_indices]),
                            z=idf.interp)
        prefix = "nid"
    suffix = "1" if w.kind == "cholesky" else "2"
    return CompressedLayer(method=prefix + suffix,
                           original_rows=a.shape[0], original_cols=a.shape[1],
                           budget=budget, stage1=stage1_layer.stage1,
                           stage2=stage2,
                           whitener_fingerprint=w.fingerprint)


def compress_layer(a: np.ndarray, method: str, budget: RankBudget,
             w: Whitener | None = None) -> CompressedLayer:
    """Dispatch a method tag to the matching compression routine.

    Nested methods with k2 == 0 collapse to their flat counterpart
    (including the method tag), so split=1.0 output is byte-identical to
    the corresponding activation-aware method.
    """
    if method not in METHODS:
        raise ArgumentError(f"unknown method {method!r}")
    if method == "svd":
        return compress_plain_svd(a, budget)
    if w is None:
        raise ArgumentError(f"method {method!r} requires a whitener")
    expected = WHITENER_KIND[method]
    if w.kind != expected:
        raise ArgumentError(
            f"method {method!r} requires a {expected!r} whitener, got {w.kind!r}")
    if method.startswith("asvd"):
        return compress_activation_aware(a, w, budget)
    if budget.k2 == 0:
        return compress_activation_aware(a, w, budget)
    return compress_nested(a, w, budget,
                           stage2_kind="id" if method.startswith("nid") else "svd")


def apply(layer: CompressedLayer, x_new: np.ndarray,
          counter: FlopCounter | None = None) -> np.ndarray:
    """Compute reconstruct(layer) @ x_new factor-first, never materializing
    the dense reconstruction."""
    x_new = linalg.as_matrix(x_new, "x_new")
    n = layer.original_cols
    if x_new.shape[0] != n:
        raise ArgumentError(
            f"x_new has {x_new.shape[0]} rows, expected {n}")
    q = x_new.shape[1]
    m = layer.original_rows
    k1 = layer.stage1.rank
    out = layer.stage1.w @ (layer.stage1.z @ x_new)
    if counter is not None:
        counter.count_matmul(k1, n, q)
        counter.count_matmul(m, k1, q)
    if layer.stage2 is not None:
        k2 = layer.stage2.rank
        out = out + layer.stage2.w @ (layer.stage2.z @ x_new)
        if counter is not None:
            counter.count_matmul(k2, n, q)
            counter.count_matmul(m, k2, q)
            counter.count_add(m * q)
    return out


def apply_flops(layer: CompressedLayer, q: int) -> int:
    """Predicted matmul flops of apply(): 2 (n + m) q (k1 + k2)."""
    k_total = layer.stage1.rank + (layer.stage2.rank if layer.stage2 else 0)
    return 2 * (layer.original_cols + layer.original_rows) * q * k_total
