"""Linear (REML) and logistic (Laplace) mixed-model fitting.

Every working structure used here (EXCH, NE, NE_RI) gives all observations of
a cluster-period the same fixed-effect row and the same random-effect loading,
and the fitted residual weight is constant within a cluster-period.  The data
are therefore reduced to *cells* (a cluster-period, split further by the
number of trials per row for binomial data) before fitting.  For a cluster
with cell-indicator matrix ``A`` the marginal covariance satisfies
``V A = A (G D + S)`` and ``V w = S w`` for within-cell contrasts ``w``, so the
likelihood, the bread ``sum X' V^-1 X`` and every sandwich meat term can be
computed exactly from cell means and the cell-level covariance

    Vbar = Z R Z' + diag(s_c / n_c)

where ``n_c`` is the number of rows in cell ``c`` and ``s_c`` the per-row
residual (working) variance.  Clusters are padded to a common number of cells
with inert cells (zero design rows, unit variance) so all per-cluster linear
algebra runs as stacked numpy operations.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize
from scipy.special import expit, gammaln

from .design import FixedEffects
from .errors import (
    DegenerateWeightError,
    FamilyMismatchError,
    InvalidParameterError,
    NonConvergenceError,
    SingularDesignError,
)
from .simulate import Dataset
from .structures import normalize_kind, working_loading, working_parameters

__all__ = [
    "CellData",
    "FittedModel",
    "Linearization",
    "build_cells",
    "fit",
    "fit_lmm",
    "fit_glmm_logistic",
    "linearize",
]

MAX_ITER = 500
REL_TOL = 1e-9
SEPARATION_ETA = 15.0
DEGENERATE_PROB = 1e-10
GRAD_TOL = 1e-6
ABS_TOL = 1e-7


@dataclass
class CellData:
    """Cell-level sufficient statistics, padded to ``(I, C, ...)`` arrays."""

    family: str
    kind: str
    X: np.ndarray            # (I, C, p)
    Z: np.ndarray            # (I, C, q)
    owner: np.ndarray        # (q,) index of the SD parameter scaling each effect
    nrows: np.ndarray        # (I, C) rows per cell, 0 for padding
    ysum: np.ndarray         # (I, C)
    trials: np.ndarray       # (I, C) total trials in the cell
    ssw: float               # pooled within-cell sum of squares (continuous)
    num_rows: int
    cluster_ids: np.ndarray  # (I,)
    period: np.ndarray       # (I, C) period label, 0 for padding
    exposure: np.ndarray     # (I, C)
    row_cell: np.ndarray     # (N,) flat index i * C + c of each row
    y: np.ndarray            # (N,) raw outcomes
    row_trials: np.ndarray   # (N,)
    num_periods: int

    @property
    def mask(self) -> np.ndarray:
        return self.nrows > 0

    @property
    def shape(self):
        return self.X.shape

    @property
    def num_clusters(self) -> int:
        return self.X.shape[0]

    @property
    def num_params(self) -> int:
        return self.X.shape[2]

    @property
    def ybar(self) -> np.ndarray:
        return np.divide(self.ysum, self.nrows, out=np.zeros_like(self.ysum), where=self.nrows > 0)

    def cell_design(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Stacked (unpadded) design rows, successes and trials of all cells."""
        m = self.mask
        return self.X[m], self.ysum[m], self.trials[m]


def build_cells(cluster, period, X, y, num_periods, kind, family, trials=None, exposure=None) -> CellData:
    """Group rows into cells and pad clusters to a common cell count."""
    cluster = np.asarray(cluster)
    period = np.asarray(period, dtype=int)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N = y.shape[0]
    if X.ndim != 2 or X.shape[0] != N:
        raise InvalidParameterError("design matrix must have one row per observation")
    trials = np.ones(N, dtype=int) if trials is None else np.asarray(trials, dtype=int)
    exposure = np.zeros(N, dtype=int) if exposure is None else np.asarray(exposure, dtype=int)
    kind = normalize_kind(kind)
    working_parameters(kind)
    if np.any((period < 1) | (period > num_periods)):
        raise InvalidParameterError("period labels must lie in 1..num_periods")

    cluster_ids, cl_idx = np.unique(cluster, return_inverse=True)
    cl_idx = cl_idx.ravel()
    keys = [cl_idx, period]
    if family == "binary":
        keys.append(trials)
    key = np.stack(keys, axis=1)
    ukeys, cell_of_row = np.unique(key, axis=0, return_inverse=True)
    cell_of_row = cell_of_row.ravel()
    n_cells = ukeys.shape[0]
    cell_cluster = ukeys[:, 0]
    first_of_cluster = np.searchsorted(cell_cluster, np.arange(cluster_ids.shape[0]))
    pos = np.arange(n_cells) - first_of_cluster[cell_cluster]
    I = cluster_ids.shape[0]
    C = int(pos.max()) + 1

    nrows = np.bincount(cell_of_row, minlength=n_cells).astype(float)
    ysum = np.bincount(cell_of_row, weights=y, minlength=n_cells)
    tsum = np.bincount(cell_of_row, weights=trials, minlength=n_cells)
    first_row = np.full(n_cells, N, dtype=int)
    np.minimum.at(first_row, cell_of_row, np.arange(N))
    Xc = X[first_row]
    if np.max(np.abs(X - Xc[cell_of_row]), initial=0.0) > 0:
        raise InvalidParameterError("design rows differ within a cluster-period")
    expo_c = exposure[first_row]
    if np.any(exposure != expo_c[cell_of_row]):
        raise InvalidParameterError("exposure differs within a cluster-period")
    period_c = ukeys[:, 1]
    Zc, owner = working_loading(kind, period_c - 1, expo_c >= 1, num_periods)
    ybar = ysum / nrows
    ssw = float(np.sum((y - ybar[cell_of_row]) ** 2)) if family == "continuous" else 0.0

    p, q = X.shape[1], Zc.shape[1]

    def pad(values, width=None):
        shape = (I, C) if width is None else (I, C, width)
        out = np.zeros(shape)
        out[cell_cluster, pos] = values
        return out

    return CellData(
        family=family,
        kind=kind,
        X=pad(Xc, p),
        Z=pad(Zc, q),
        owner=owner,
        nrows=pad(nrows),
        ysum=pad(ysum),
        trials=pad(tsum),
        ssw=ssw,
        num_rows=N,
        cluster_ids=cluster_ids,
        period=pad(period_c).astype(int),
        exposure=pad(expo_c).astype(int),
        row_cell=cell_cluster[cell_of_row] * C + pos[cell_of_row],
        y=y,
        row_trials=trials,
        num_periods=num_periods,
    )


def cells_from_dataset(data: Dataset, fixed: FixedEffects, kind: str) -> CellData:
    if fixed.num_periods != data.num_periods:
        raise InvalidParameterError("fixed effects and dataset disagree on the number of periods")
    X = fixed.matrix(data.period, data.exposure)
    return build_cells(data.cluster, data.period, X, data.y, data.num_periods, kind,
                       data.family, trials=data.trials, exposure=data.exposure)


@dataclass
class FittedModel:
    """Estimates plus the per-cluster caches needed for sandwich estimation.

    Cell-level caches, stacked over clusters: ``V`` is the working covariance
    of cell means, ``resid`` the cell means of the linearized residual
    ``e = P - X beta``, ``D`` the number of rows per cell.
    """

    family: str
    kind: str
    columns: list[str]
    beta: np.ndarray
    variances: dict[str, float]
    residual_var: float | None
    converged: bool
    iterations: int
    objective: float
    message: str
    boundary: tuple[str, ...]
    quasi_separation: bool
    cells: CellData = field(repr=False)
    X: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)
    Vinv: np.ndarray = field(repr=False)
    D: np.ndarray = field(repr=False)
    resid: np.ndarray = field(repr=False)
    eta: np.ndarray = field(repr=False)
    mu: np.ndarray = field(repr=False)
    modes: np.ndarray = field(repr=False)
    M: np.ndarray = field(repr=False)
    fixed: FixedEffects | None = field(default=None, repr=False)

    @property
    def N(self) -> int:
        return self.cells.num_rows

    @property
    def num_clusters(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[2]

    @property
    def sds(self) -> dict[str, float]:
        return {k: float(np.sqrt(v)) for k, v in self.variances.items()}


def _check_rank(X2d: np.ndarray) -> None:
    if X2d.shape[0] < X2d.shape[1] or np.linalg.matrix_rank(X2d) < X2d.shape[1]:
        raise SingularDesignError("fixed-effects design is rank deficient")


def _batched_inv_logdet(V: np.ndarray):
    L = np.linalg.cholesky(V)
    logdet = 2.0 * np.log(np.diagonal(L, axis1=1, axis2=2)).sum(axis=1)
    Linv = np.linalg.inv(L)
    Vinv = np.swapaxes(Linv, 1, 2) @ Linv
    return Vinv, logdet


# --------------------------------------------------------------------------
# Linear mixed model, REML with beta and sigma^2 profiled out
# --------------------------------------------------------------------------

class _Reml:
    """Profiled REML in SD ratios, on outcomes divided by their SD.

    The standardization makes the fit exactly scale equivariant; ``solve``
    returns ``beta``, ``Q`` and ``r`` on the standardized scale.
    """

    def __init__(self, cells: CellData):
        self.cells = cells
        m = cells.mask
        self.inv_n = np.where(m, 1.0 / np.where(m, cells.nrows, 1.0), 1.0)
        sd = float(np.std(cells.y))
        self.scale = sd if sd > 0 and np.isfinite(sd) else 1.0
        self.ybar = cells.ybar / self.scale
        self.ssw = cells.ssw / self.scale**2
        self.N = cells.num_rows
        self.p = cells.num_params
        self.eye = np.eye(cells.X.shape[1])

    def vtilde(self, ratios):
        lam2 = np.asarray(ratios, dtype=float)[self.cells.owner] ** 2
        Z = self.cells.Z
        G = (Z * lam2) @ np.swapaxes(Z, 1, 2)
        idx = np.arange(Z.shape[1])
        G[:, idx, idx] += self.inv_n
        return G

    def solve(self, ratios):
        Vt = self.vtilde(ratios)
        Vinv, logdet = _batched_inv_logdet(Vt)
        X = self.cells.X
        VX = Vinv @ X
        Mt = np.einsum("icp,icq->pq", X, VX)
        rhs = np.einsum("icp,ic->p", VX, self.ybar)
        cM = np.linalg.cholesky(Mt)
        beta = np.linalg.solve(Mt, rhs)
        r = self.ybar - np.einsum("icp,p->ic", X, beta)
        Q = self.ssw + np.einsum("ic,icd,id->", r, Vinv, r)
        return beta, Q, Vt, Vinv, logdet.sum(), 2.0 * np.log(np.diag(cM)).sum(), r

    def objective(self, ratios):
        try:
            _, Q, _, _, ld_v, ld_m, _ = self.solve(ratios)
        except np.linalg.LinAlgError:
            return np.inf
        dof = self.N - self.p
        if Q <= 0:
            return -np.inf
        return dof * np.log(Q / dof) + ld_v + ld_m

    def gradient(self, ratios):
        """Exact derivative of :meth:`objective` with respect to the ratios."""
        ratios = np.asarray(ratios, dtype=float)
        beta, Q, Vt, Vinv, _, _, r = self.solve(ratios)
        X, Z = self.cells.X, self.cells.Z
        VZ = Vinv @ Z
        Mt_inv = np.linalg.inv(np.einsum("icp,icd,idq->pq", X, Vinv, X))
        W = np.einsum("icq,icp->iqp", VZ, X)                  # Z' V^-1 X
        z = np.einsum("icq,ic->iq", VZ, r)                     # Z' V^-1 r
        t_v = np.einsum("icq,icq->q", Z, VZ)                   # diag Z' V^-1 Z
        t_m = np.einsum("iqp,pd,iqd->q", W, Mt_inv, W)
        s_r = (z * z).sum(axis=0)
        per_effect = t_v - t_m - (self.N - self.p) * s_r / Q
        owner = self.cells.owner
        return 2.0 * ratios * np.bincount(owner, weights=per_effect, minlength=ratios.size)


def _newton_polish(reml: _Reml, x, fx, upper, max_steps=10):
    free = (x > 0) & (x < upper)
    if not free.any() or not np.all(np.isfinite(x)):
        return x, fx, 0
    idx = np.flatnonzero(free)
    g = reml.gradient(x)[idx]
    steps = 0
    for steps in range(1, max_steps + 1):
        if np.max(np.abs(g)) < 1e-13:
            break
        H = np.empty((idx.size, idx.size))
        for a, j in enumerate(idx):
            h = 1e-5 * max(x[j], 1e-3)
            up, dn = x.copy(), x.copy()
            up[j] += h
            dn[j] -= h
            H[:, a] = (reml.gradient(up)[idx] - reml.gradient(dn)[idx]) / (2 * h)
        try:
            step = np.linalg.solve(0.5 * (H + H.T), g)
        except np.linalg.LinAlgError:
            break
        trial = x.copy()
        trial[idx] = np.clip(x[idx] - step, 0.0, upper)
        g_new = reml.gradient(trial)[idx]
        f_new = reml.objective(trial)
        # accept only genuine improvements (objective within roundoff)
        if not (np.linalg.norm(g_new) < np.linalg.norm(g) and f_new <= fx + 1e-10 * (1 + abs(fx))):
            break
        x, fx, g = trial, min(fx, f_new), g_new
    return x, fx, steps


def fit_lmm(data: Dataset, fixed: FixedEffects, structure: str = "EXCH", *, upper: float = 50.0) -> FittedModel:
    """Fit a linear mixed model by REML.

    ``structure`` is the working random-effects structure (EXCH, NE or NE_RI).
    Random-effect SDs are optimized relative to the residual SD on
    ``[0, upper]``: a bounded Brent search for one parameter and bounded
    Nelder-Mead otherwise.
    """
    if data.family != "continuous":
        raise FamilyMismatchError("fit_lmm needs a continuous outcome")
    cells = cells_from_dataset(data, fixed, structure)
    return _fit_lmm_cells(cells, fixed.columns, fixed=fixed, upper=upper)


def _fit_lmm_cells(cells: CellData, columns, fixed=None, upper: float = 50.0) -> FittedModel:
    if cells.num_clusters < 2:
        raise InvalidParameterError("need at least two clusters")
    _check_rank(cells.cell_design()[0])
    if cells.num_rows - cells.num_params <= 0:
        raise SingularDesignError("no residual degrees of freedom")
    names = working_parameters(cells.kind)
    reml = _Reml(cells)
    k = len(names)

    if k == 1:
        res = optimize.minimize_scalar(
            lambda s: reml.objective([s]), bounds=(0.0, upper), method="bounded",
            options={"xatol": 1e-10, "maxiter": MAX_ITER},
        )
        x, fx, iters, ok = np.array([res.x]), res.fun, res.nfev, bool(res.success)
        msg = str(res.message)
    else:
        start = np.full(k, 0.5)
        best = None
        iters, ok, msg = 0, False, ""
        for _ in range(3):
            res = optimize.minimize(
                reml.objective, start, method="Nelder-Mead", bounds=[(0.0, upper)] * k,
                options={"maxiter": MAX_ITER, "xatol": 1e-9, "fatol": 1e-12, "adaptive": True},
            )
            iters += res.nit
            if best is not None and abs(best.fun - res.fun) <= REL_TOL * (1 + abs(res.fun)):
                best = res if res.fun < best.fun else best
                ok = bool(res.success)
                break
            best = res if best is None or res.fun < best.fun else best
            start = best.x
            ok = bool(res.success)
        x, fx, msg = np.clip(best.x, 0.0, upper), best.fun, str(best.message)

    # Derivative-free searches locate the optimum of this flat objective only
    # to about sqrt(machine eps); finish with Newton steps on the exact gradient.
    x, fx, extra = _newton_polish(reml, x, fx, upper)
    iters += extra

    # Snap to exact zero when the boundary is at least as good.
    for j in range(k):
        if x[j] > 0:
            trial = x.copy()
            trial[j] = 0.0
            ft = reml.objective(trial)
            if ft <= fx + 1e-12 * (1 + abs(fx)):
                x, fx = trial, ft
    if np.any(x >= upper * (1 - 1e-6)):
        ok = False
        msg = "variance ratio reached the search bound"

    beta, Q, Vt, Vt_inv, _, _, r = reml.solve(x)
    sc = reml.scale
    beta, Q, r = beta * sc, Q * sc**2, r * sc
    fx += (cells.num_rows - cells.num_params) * np.log(sc**2)
    sigma2 = Q / (cells.num_rows - cells.num_params)
    V = sigma2 * Vt
    Vinv = Vt_inv / sigma2
    M = np.einsum("icp,icd,idq->pq", cells.X, Vinv, cells.X)
    lam2 = x[cells.owner] ** 2
    modes = lam2 * np.einsum("icq,icd,id->iq", cells.Z, Vt_inv, r)
    eta = np.einsum("icp,p->ic", cells.X, beta) + np.einsum("icq,iq->ic", cells.Z, modes)
    variances = {n: float(sigma2 * x[j] ** 2) for j, n in enumerate(names)}
    return FittedModel(
        family="continuous",
        kind=cells.kind,
        columns=list(columns),
        beta=beta,
        variances=variances,
        residual_var=float(sigma2),
        converged=ok,
        iterations=int(iters),
        objective=float(fx),
        message=msg,
        boundary=tuple(n for j, n in enumerate(names) if x[j] == 0.0),
        quasi_separation=False,
        cells=cells,
        X=cells.X,
        V=V,
        Vinv=Vinv,
        D=np.where(cells.mask, cells.nrows, 1.0),
        resid=r * cells.mask,
        eta=eta,
        mu=eta,
        modes=modes,
        M=M,
        fixed=fixed,
    )


# --------------------------------------------------------------------------
# Logistic mixed model, Laplace approximation
# --------------------------------------------------------------------------

def _log1pexp(x):
    return np.logaddexp(0.0, x)


class _Laplace:
    """Laplace-approximated log-likelihood with spherical random effects.

    Each cluster's effects are written ``b = Lambda a`` with ``a ~ N(0, I)``
    and ``Lambda = diag(sd[owner])``, so zero SDs need no special handling.
    """

    def __init__(self, cells: CellData):
        self.cells = cells
        self.X = cells.X
        self.Z = cells.Z
        self.ysum = cells.ysum
        self.n = cells.trials
        self.p = cells.num_params
        self.k = int(cells.owner.max()) + 1
        self.q = cells.Z.shape[2]
        self.a = np.zeros((cells.num_clusters, self.q))
        self.eye = np.eye(self.q)
        # log binomial coefficients, constant in the parameters
        m = cells.row_trials
        ycount = cells.y
        self.const = float(np.sum(gammaln(m + 1) - gammaln(ycount + 1) - gammaln(m - ycount + 1)))

    def modes(self, beta, sd, a0=None, tol=1e-10, max_iter=100):
        lam = sd[self.cells.owner]
        ZL = self.Z * lam
        off = np.einsum("icp,p->ic", self.X, beta)
        a = self.a.copy() if a0 is None else a0.copy()

        def cond(a):
            eta = off + np.einsum("icq,iq->ic", ZL, a)
            return eta, (self.ysum * eta - self.n * _log1pexp(eta)).sum(axis=1) - 0.5 * (a * a).sum(axis=1)

        eta, val = cond(a)
        for it in range(max_iter):
            mu = expit(eta)
            w = self.n * mu * (1 - mu)
            grad = np.einsum("icq,ic->iq", ZL, self.ysum - self.n * mu) - a
            H = np.einsum("icq,ic,icr->iqr", ZL, w, ZL) + self.eye
            step = np.linalg.solve(H, grad[..., None])[..., 0]
            t = np.ones(a.shape[0])
            for _ in range(30):
                a_new = a + t[:, None] * step
                eta_new, val_new = cond(a_new)
                bad = val_new < val - 1e-12 * (1 + np.abs(val))
                if not bad.any():
                    break
                t = np.where(bad, 0.5 * t, t)
            a, eta, val = a_new, eta_new, val_new
            if np.max(np.abs(t[:, None] * step)) < tol:
                break
        mu = expit(eta)
        w = self.n * mu * (1 - mu)
        H = np.einsum("icq,ic,icr->iqr", ZL, w, ZL) + self.eye
        return a, eta, mu, w, H, val, ZL, it + 1

    def loglik(self, beta, sd, keep=True):
        a, eta, mu, w, H, val, _, _ = self.modes(beta, sd)
        if keep:
            self.a = a
        _, logdet = np.linalg.slogdet(H)
        return float(val.sum() - 0.5 * logdet.sum()) + self.const

    def value_and_grad(self, params):
        p = self.p
        beta, sd = params[:p], params[p:]
        a, eta, mu, w, H, val, ZL, _ = self.modes(beta, sd)
        self.a = a
        _, logdet = np.linalg.slogdet(H)
        ll = float(val.sum() - 0.5 * logdet.sum()) + self.const

        X, Z = self.X, self.Z
        resid = self.ysum - self.n * mu
        w1 = w * (1 - 2 * mu)
        Hinv = np.linalg.inv(H)
        h = np.einsum("icq,iqr,icr->ic", ZL, Hinv, ZL)
        wh = w1 * h

        # beta
        ZLWX = np.einsum("icq,ic,icp->iqp", ZL, w, X)
        da_db = -Hinv @ ZLWX
        deta_db = X + ZL @ da_db
        g_beta = np.einsum("icp,ic->p", X, resid) - 0.5 * np.einsum("icp,ic->p", deta_db, wh)

        # sds
        g_sd = np.zeros(self.k)
        ZWZL = np.einsum("icq,ic,icr->iqr", Z, w, ZL)
        B = ZWZL @ Hinv
        Bdiag = np.diagonal(B, axis1=1, axis2=2)
        for m in range(self.k):
            Em = (self.cells.owner == m).astype(float)
            ZEa = np.einsum("icq,iq->ic", Z, a * Em)
            direct = (resid * ZEa).sum()
            dg = (np.einsum("icq,ic->iq", Z, resid) * Em
                  - np.einsum("icq,ic,ic->iq", ZL, w, ZEa))
            da = np.einsum("iqr,ir->iq", Hinv, dg)
            deta = ZEa + np.einsum("icq,iq->ic", ZL, da)
            tr = 2.0 * (Bdiag * Em).sum() + (wh * deta).sum()
            g_sd[m] = direct - 0.5 * tr
        return ll, np.concatenate([g_beta, g_sd])


def _pooled_logistic(X, y, n, max_iter=100):
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        eta = X @ beta
        mu = expit(eta)
        w = n * mu * (1 - mu) + 1e-12
        step = np.linalg.lstsq((X * w[:, None]).T @ X, X.T @ (y - n * mu), rcond=None)[0]
        beta = beta + step
        beta = np.clip(beta, -30, 30)
        if np.max(np.abs(step)) < 1e-10:
            break
    return beta


def fit_glmm_logistic(data: Dataset, fixed: FixedEffects, structure: str = "EXCH") -> FittedModel:
    """Fit a logistic mixed model by maximizing the Laplace approximation.

    Conditional modes come from a damped Newton iteration per cluster; the
    outer problem over (beta, SDs) is solved by L-BFGS-B with the exact
    gradient of the Laplace approximation.
    """
    if data.family != "binary":
        raise FamilyMismatchError("fit_glmm_logistic needs a binary outcome")
    if np.any(data.y < 0) or np.any(data.y > data.trials):
        raise InvalidParameterError("binary outcomes must lie in 0..n")
    cells = cells_from_dataset(data, fixed, structure)
    return _fit_glmm_cells(cells, fixed.columns, fixed=fixed)


def _fit_glmm_cells(cells: CellData, columns, fixed=None, start_sd: float = 0.5) -> FittedModel:
    if cells.num_clusters < 2:
        raise InvalidParameterError("need at least two clusters")
    Xs, ys, ns = cells.cell_design()
    _check_rank(Xs)
    names = working_parameters(cells.kind)
    lap = _Laplace(cells)
    p, k = cells.num_params, len(names)
    # half-count adjustment keeps the start finite under separation
    x0 = np.concatenate([_pooled_logistic(Xs, ys + 0.5, ns + 1.0), np.full(k, start_sd)])

    def negative(params):
        ll, g = lap.value_and_grad(params)
        return -ll, -g

    # stop on an absolute change of the log-likelihood so separated cells
    # halt at a large but finite linear predictor
    f0 = abs(negative(x0)[0])
    res = optimize.minimize(
        negative, x0, jac=True, method="L-BFGS-B",
        bounds=[(None, None)] * p + [(0.0, None)] * k,
        options={"maxiter": MAX_ITER, "ftol": ABS_TOL / max(f0, 1.0), "gtol": GRAD_TOL, "maxcor": 20},
    )
    params = res.x
    beta, sd = params[:p], params[p:]
    a, eta, mu, w, H, _, ZL, _ = lap.modes(beta, sd)
    iters = res.nit
    if np.max(np.abs(eta[cells.mask])) <= SEPARATION_ETA:
        # no separated cell: polish to a tight optimum
        res = optimize.minimize(
            negative, params, jac=True, method="L-BFGS-B",
            bounds=[(None, None)] * p + [(0.0, None)] * k,
            options={"maxiter": MAX_ITER, "ftol": 1e-15, "gtol": 1e-9, "maxcor": 20},
        )
        iters += res.nit
        params = res.x
        beta, sd = params[:p], params[p:]
        a, eta, mu, w, H, _, ZL, _ = lap.modes(beta, sd)
    ll = lap.loglik(beta, sd, keep=False)
    # line-search stalls at the noise floor still count when the projected gradient is tiny
    pg = np.asarray(res.jac, dtype=float).copy()
    at_bound = (np.arange(p + k) >= p) & (params <= 0) & (pg > 0)
    pg[at_bound] = 0.0
    converged = bool(np.isfinite(ll)) and (bool(res.success) or np.max(np.abs(pg)) <= 1e-4)

    modes = a * sd[cells.owner]
    mask = cells.mask
    w_safe = np.where(mask, w, 1.0)
    G = np.einsum("icq,q,idq->icd", cells.Z, sd[cells.owner] ** 2, cells.Z)
    V = G.copy()
    idx = np.arange(V.shape[1])
    V[:, idx, idx] += np.where(mask, 1.0 / np.maximum(w_safe, 1e-300), 1.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        Vinv, _ = _batched_inv_logdet(V)
    M = np.einsum("icp,icd,idq->pq", cells.X, Vinv, cells.X)
    resid = np.where(mask, (cells.ysum - cells.trials * mu) / w_safe, 0.0) + np.einsum(
        "icq,iq->ic", cells.Z, modes) * mask
    sep = bool(np.max(np.abs(eta[mask])) > SEPARATION_ETA)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        sep = True
    return FittedModel(
        family="binary",
        kind=cells.kind,
        columns=list(columns),
        beta=beta,
        variances={n: float(sd[j] ** 2) for j, n in enumerate(names)},
        residual_var=None,
        converged=converged,
        iterations=int(iters),
        objective=float(ll),
        message=str(res.message),
        boundary=tuple(n for j, n in enumerate(names) if sd[j] <= 1e-6),
        quasi_separation=sep,
        cells=cells,
        X=cells.X,
        V=V,
        Vinv=Vinv,
        D=np.where(mask, cells.nrows, 1.0),
        resid=resid,
        eta=eta,
        mu=mu,
        modes=modes,
        M=M,
        fixed=fixed,
    )


def fit(data: Dataset, fixed: FixedEffects, structure: str = "EXCH") -> FittedModel:
    """Dispatch on the dataset family."""
    if data.family == "continuous":
        return fit_lmm(data, fixed, structure)
    return fit_glmm_logistic(data, fixed, structure)


# --------------------------------------------------------------------------
# Linearization
# --------------------------------------------------------------------------

@dataclass
class Linearization:
    """Per-cell linearization quantities (all ``(I, C)`` unless noted).

    ``delta`` and ``sigma`` are the per-row entries of the derivative matrix
    and conditional variance, ``pseudo`` and ``resid`` the cell means of the
    pseudo-response and linearized residual; ``V`` is ``(I, C, C)``.
    """

    fitted: FittedModel
    delta: np.ndarray
    sigma: np.ndarray
    V: np.ndarray
    pseudo: np.ndarray
    resid: np.ndarray

    def observation_level(self, cluster: int):
        """Dense row-level ``(X_i, Delta_i, Sigma_i, V_i, P_i, e_i)`` for one cluster index.

        Rows are ordered by cell.  Intended for checking and diagnostics, the
        estimators never need these matrices.
        """
        f = self.fitted
        cells = f.cells
        C = cells.X.shape[1]
        rows = np.flatnonzero(cells.row_cell // C == cluster)
        cell = cells.row_cell[rows] % C
        order = np.argsort(cell, kind="stable")
        rows, cell = rows[order], cell[order]
        Xi = cells.X[cluster, cell]
        Zi = cells.Z[cluster, cell]
        sd2 = np.array([f.variances[n] for n in working_parameters(f.kind)])[cells.owner]
        delta = self.delta[cluster, cell]
        sigma = self.sigma[cluster, cell]
        Vi = (Zi * sd2) @ Zi.T + np.diag(sigma / delta**2)
        eta = f.eta[cluster, cell]
        if f.family == "continuous":
            P = cells.y[rows]
        else:
            m = cells.row_trials[rows]
            P = (cells.y[rows] - m * f.mu[cluster, cell]) / delta + eta
        e = P - Xi @ f.beta
        return Xi, np.diag(delta), np.diag(sigma), Vi, P, e


def linearize(fitted: FittedModel, allow_unconverged: bool = True) -> Linearization:
    if not fitted.converged and not allow_unconverged:
        raise NonConvergenceError(fitted.message)
    cells = fitted.cells
    mask = cells.mask
    if fitted.family == "continuous":
        delta = np.ones_like(fitted.eta)
        sigma = np.full_like(fitted.eta, fitted.residual_var)
        pseudo = cells.ybar
    else:
        mu = fitted.mu
        if np.any(mask & ((mu < DEGENERATE_PROB) | (mu > 1 - DEGENERATE_PROB))):
            raise DegenerateWeightError("fitted probability within 1e-10 of 0 or 1")
        m = np.divide(cells.trials, cells.nrows, out=np.ones_like(cells.trials), where=mask)
        delta = m * mu * (1 - mu)
        sigma = delta.copy()
        pseudo = np.where(mask, (cells.ysum / np.where(mask, cells.nrows, 1) - m * mu)
                          / np.where(mask, delta, 1.0) + fitted.eta, 0.0)
    return Linearization(fitted, delta, sigma, fitted.V, pseudo, fitted.resid)
