"""Model-based and cluster-robust variance estimators for fixed effects.

All estimators work on per-cluster blocks ``(X_i, V_i, e_i)`` where ``V_i`` is
the working covariance of the linearized response and ``e_i`` the linearized
residual.  Blocks may be observation level (one row per observation) or the
cell-level reduction produced by the fitters, in which case ``D`` carries the
number of rows represented by each cell.  With ``M = sum X' V^-1 X`` and

    H_i = X_i M^-1 X_i' V_i^-1

the bias-corrected estimators replace ``e_i`` by ``F_i e_i`` with
``F = (I - H_i')^-1/2`` (KC) or ``(I - H_i')^-1`` (MD).  The inverse square
root is the principal one, computed through the symmetric similarity
transform ``I - H_i' = L^-T (I - Q) L'`` with ``V_i = L L'``.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    AdjustmentFailureError,
    InvalidParameterError,
    SingularBreadError,
)

__all__ = [
    "ClusterBlocks",
    "VarianceEstimate",
    "blocks_from_fit",
    "model_based",
    "classic",
    "kc",
    "md",
    "mbn",
    "estimate",
    "estimate_all",
    "ESTIMATORS",
]

ESTIMATORS = ("model", "classic", "kc", "md", "mbn")
EIG_TOL = 1e-10
PSD_TOL = 1e-10


@dataclass
class ClusterBlocks:
    """Stacked per-cluster blocks, padded to a common size.

    Attributes
    ----------
    X : (I, C, p) array
    V : (I, C, C) array
    resid : (I, C) array
    D : (I, C) array
        Observation count represented by each row (1 for observation-level blocks).
    N : int
        Total number of observations.
    """

    X: np.ndarray
    V: np.ndarray
    resid: np.ndarray
    D: np.ndarray
    N: int
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_dense(cls, X_list, V_list, e_list) -> "ClusterBlocks":
        """Pad observation-level blocks (lists over clusters) to a common size."""
        if not (len(X_list) == len(V_list) == len(e_list)) or not X_list:
            raise InvalidParameterError("need matching, non-empty lists of blocks")
        p = np.asarray(X_list[0]).shape[1]
        C = max(np.asarray(x).shape[0] for x in X_list)
        I = len(X_list)
        X = np.zeros((I, C, p))
        V = np.tile(np.eye(C), (I, 1, 1))
        e = np.zeros((I, C))
        N = 0
        for i, (x, v, r) in enumerate(zip(X_list, V_list, e_list)):
            x = np.asarray(x, dtype=float)
            n = x.shape[0]
            X[i, :n] = x
            V[i, :n, :n] = v
            e[i, :n] = r
            N += n
        return cls(X, V, e, np.ones((I, C)), N)

    @property
    def num_clusters(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    def _get(self, key, fn):
        if key not in self._cache:
            self._cache[key] = fn()
        return self._cache[key]

    @property
    def chol(self) -> np.ndarray:
        return self._get("chol", lambda: np.linalg.cholesky(self.V))

    @property
    def chol_inv(self) -> np.ndarray:
        return self._get("chol_inv", lambda: np.linalg.inv(self.chol))

    @property
    def Vinv(self) -> np.ndarray:
        def f():
            Li = self.chol_inv
            return np.swapaxes(Li, 1, 2) @ Li
        return self._get("Vinv", f)

    @property
    def bread(self) -> np.ndarray:
        return self._get("M", lambda: np.einsum("icp,icd,idq->pq", self.X, self.Vinv, self.X))

    @property
    def bread_inv(self) -> np.ndarray:
        def f():
            M = self.bread
            if np.linalg.matrix_rank(M) < M.shape[0]:
                raise SingularBreadError("bread matrix is singular")
            return np.linalg.inv(M)
        return self._get("Minv", f)

    @property
    def leverage_eig(self):
        """Eigen-decomposition of ``I - Q`` for every cluster."""
        def f():
            Li = self.chol_inv
            W = Li @ self.X
            Q = W @ self.bread_inv @ np.swapaxes(W, 1, 2)
            C = Q.shape[1]
            return np.linalg.eigh(np.eye(C) - 0.5 * (Q + np.swapaxes(Q, 1, 2)))
        return self._get("eig", f)


def blocks_from_fit(fitted) -> ClusterBlocks:
    """Cell-level blocks from a :class:`~stepwedge.fitting.FittedModel`."""
    cache = fitted.__dict__.setdefault("_blocks", None)
    if cache is None:
        cache = ClusterBlocks(fitted.X, fitted.V, fitted.resid, fitted.D, fitted.N)
        cache._cache["Vinv"] = fitted.Vinv
        fitted._blocks = cache
    return cache


def _as_blocks(obj) -> ClusterBlocks:
    return obj if isinstance(obj, ClusterBlocks) else blocks_from_fit(obj)


@dataclass
class VarianceEstimate:
    """Estimated covariance of the fixed effects.

    ``psd`` is False when an eigenvalue falls below ``-1e-10`` times the
    largest magnitude; the matrix is never clipped.
    """

    estimator: str
    matrix: np.ndarray
    num_clusters: int
    N: int
    p: int
    psd: bool = True
    asymmetry: float = 0.0
    meta: dict = field(default_factory=dict)

    def se(self, contrast) -> float:
        c = np.asarray(contrast, dtype=float)
        return float(np.sqrt(c @ self.matrix @ c))


def _finalize(name, B: ClusterBlocks, mat, **meta) -> VarianceEstimate:
    scale = max(np.max(np.abs(mat)), 1e-300)
    asym = float(np.max(np.abs(mat - mat.T)) / scale)
    mat = 0.5 * (mat + mat.T)
    ev = np.linalg.eigvalsh(mat)
    psd = bool(ev.min() >= -PSD_TOL * max(np.abs(ev).max(), 1e-300))
    return VarianceEstimate(name, mat, B.num_clusters, B.N, B.p, psd, asym, meta)


def model_based(fitted) -> VarianceEstimate:
    """Inverse of the working information ``M^-1``."""
    B = _as_blocks(fitted)
    return _finalize("model", B, B.bread_inv.copy())


def _meat_vectors(B: ClusterBlocks, power: float | None, singular: str = "raise") -> np.ndarray:
    """Per-cluster score vectors ``X' V^-1 F e`` with ``F = (I - H')^power``.

    ``singular="pinv"`` drops eigen-directions of ``I - H'`` at or below the
    tolerance (generalized-inverse power) instead of raising.
    """
    if power is None:
        return np.einsum("icp,icd,id->ip", B.X, B.Vinv, B.resid)
    if singular not in ("raise", "pinv"):
        raise InvalidParameterError(f"unknown singular policy {singular!r}")
    lam, U = B.leverage_eig
    bad = lam <= EIG_TOL
    if singular == "raise" and np.any(bad):
        i = int(np.flatnonzero(bad.any(axis=1))[0])
        what = "singular" if power == -1.0 else "not positive definite"
        raise AdjustmentFailureError(f"I - H' is {what} for cluster index {i}", cluster=i)
    scale = np.where(bad, 0.0, np.where(bad, 1.0, lam) ** power)
    L, Li = B.chol, B.chol_inv
    # F e = D^-1 L^-T U f(lam) U' L' D e
    de = B.D * B.resid
    t = np.einsum("idc,id->ic", L, de)                     # L' (D e)
    t = np.einsum("icq,ic->iq", U, t) * scale              # f(lam) U' ...
    t = np.einsum("icq,iq->ic", U, t)
    t = np.einsum("idc,id->ic", Li, t)                     # L^-T ...
    fe = t / B.D
    return np.einsum("icp,icd,id->ip", B.X, B.Vinv, fe)


def _sandwich(B: ClusterBlocks, power, singular="raise"):
    if B.num_clusters < 2:
        warnings.warn("sandwich from a single cluster is degenerate", RuntimeWarning, stacklevel=3)
    u = _meat_vectors(B, power, singular)
    Minv = B.bread_inv
    meat = u.T @ u
    return Minv @ meat @ Minv, meat


def classic(fitted) -> VarianceEstimate:
    """Uncorrected cluster-robust sandwich."""
    B = _as_blocks(fitted)
    return _finalize("classic", B, _sandwich(B, None)[0])


def kc(fitted, singular: str = "raise") -> VarianceEstimate:
    """Sandwich with residuals scaled by ``(I - H')^-1/2``.

    Raises :class:`AdjustmentFailureError` when ``I - H'`` has an eigenvalue
    at or below ``1e-10`` for some cluster, unless ``singular="pinv"``.
    """
    B = _as_blocks(fitted)
    return _finalize("kc", B, _sandwich(B, -0.5, singular)[0], singular=singular)


def md(fitted, singular: str = "raise") -> VarianceEstimate:
    """Sandwich with residuals scaled by ``(I - H')^-1``; see :func:`kc`."""
    B = _as_blocks(fitted)
    return _finalize("md", B, _sandwich(B, -1.0, singular)[0], singular=singular)


def mbn(fitted, r: float = 1.0, d: float = 2.0) -> VarianceEstimate:
    """Small-sample corrected sandwich with a model-based shrinkage term.

    ``c * classic + delta * phi * M^-1`` with the finite-sample factor
    ``c = (N-1)/(N-p) * I/(I-1)``, ``phi = max(r, tr(Omega)/p*)`` and
    ``delta = p/(I-p)`` when ``I > (d+1)p``, otherwise ``1/d``.
    """
    if not 0.0 <= r <= 1.0:
        raise InvalidParameterError("r must lie in [0, 1]")
    if d < 1.0:
        raise InvalidParameterError("d must be at least 1")
    B = _as_blocks(fitted)
    I, N, p = B.num_clusters, B.N, B.p
    if I < 2 or N <= p:
        raise InvalidParameterError("need at least two clusters and N > p")
    vc, meat = _sandwich(B, None)
    Minv = B.bread_inv
    c = (N - 1) / (N - p) * I / (I - 1)
    omega = Minv @ meat
    if I > p:
        p_star = p
    else:
        sv = np.linalg.svd(omega, compute_uv=False)
        p_star = int(np.sum(sv > 1e-10 * sv.max())) if sv.max() > 0 else 1
        p_star = max(p_star, 1)
    phi = max(r, float(np.trace(omega)) / p_star)
    delta = p / (I - p) if I > (d + 1) * p else 1.0 / d
    mat = c * vc + delta * phi * Minv
    return _finalize("mbn", B, mat, c=c, delta=delta, phi=phi, p_star=p_star, r=r, d=d)


_DISPATCH = {"model": model_based, "classic": classic, "kc": kc, "md": md}


def estimate(fitted, name: str, r: float = 1.0, d: float = 2.0, singular: str = "raise") -> VarianceEstimate:
    if name == "mbn":
        return mbn(fitted, r=r, d=d)
    if name in ("kc", "md"):
        return _DISPATCH[name](fitted, singular=singular)
    if name not in _DISPATCH:
        raise InvalidParameterError(f"unknown estimator {name!r}")
    return _DISPATCH[name](fitted)


def estimate_all(fitted, names=ESTIMATORS, r: float = 1.0, d: float = 2.0, singular: str = "raise"):
    """Compute several estimators; failures are returned in a separate dict.

    Returns ``(estimates, failures)`` mapping name -> VarianceEstimate and
    name -> error message.
    """
    out, failed = {}, {}
    for name in names:
        try:
            out[name] = estimate(fitted, name, r=r, d=d, singular=singular)
        except (AdjustmentFailureError, SingularBreadError, np.linalg.LinAlgError) as exc:
            failed[name] = f"{type(exc).__name__}: {exc}"
    return out, failed
