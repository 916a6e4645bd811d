"""Blockwise imputation models and imputed views.

For every group r with missing covariates, every source group k in G(r),
and every missing coordinate j in m(r), a Lasso regression of X_j on the
overlap covariates X_{J(r,k)} is fitted over the samples of group k (or
the part of them inside the fit pool). The fitted coefficient vectors
define, for each sample of group r, one imputed view of its covariate
vector per source group: observed coordinates are copied through
unchanged, missing ones are linear predictions from the overlap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import GroupStructure, SemiSupervisedDataset
from .errors import InsufficientSamples
from .solvers import _cd_gram, lasso_cv


@dataclass(frozen=True)
class TauPolicy:
    """How the Lasso penalty is chosen for each imputation regression.

    mode "fixed": tau = c * sqrt(log(|J|) / m) with m the fitting rows;
    mode "value": a single explicit tau for every regression;
    mode "cv": per-regression K-fold cross-validation on a small grid.
    """

    mode: str = "fixed"
    c: float = 0.5
    value: float = None
    folds: int = 10
    grid_lo: float = 0.1
    grid_hi: float = 4.0
    grid_size: int = 8

    def __post_init__(self):
        if self.mode not in ("fixed", "value", "cv"):
            raise ValueError(f"unknown tau policy mode {self.mode!r}")
        if self.mode == "value" and (self.value is None or self.value < 0):
            raise ValueError("tau policy 'value' needs a nonnegative value")

    def rate(self, dim, m):
        return np.sqrt(np.log(max(dim, 2)) / m)

    def describe(self):
        if self.mode == "fixed":
            return f"fixed c={self.c}"
        if self.mode == "value":
            return f"value tau={self.value}"
        return f"cv folds={self.folds} grid=[{self.grid_lo},{self.grid_hi}]x{self.grid_size}"


@dataclass(frozen=True)
class ImputationModel:
    """Fitted coefficient vectors gamma[(r, k, j)] over J(r, k).

    Keys cover exactly the triples with k in G(r) and j in m(r); complete
    groups contribute nothing (their views are the raw covariates).
    """

    gamma: dict
    fit_pool: np.ndarray
    tau_policy: TauPolicy
    tau_used: dict = field(default_factory=dict)      # (r, k) -> tau (or per-j dict)
    diagnostics: dict = field(default_factory=dict)

    def gamma_matrix(self, groups: GroupStructure, r, k):
        """Stack gamma[(r, k, j)] for j in m(r) as a (|J|, |m(r)|) matrix."""
        cols = [self.gamma[(r, k, int(j))] for j in groups.m[r]]
        return np.column_stack(cols) if cols else np.empty((groups.J[(r, k)].size, 0))


def fit_imputation(dataset: SemiSupervisedDataset, groups: GroupStructure,
                   tau_policy: TauPolicy = TauPolicy(),
                   fit_pool=None) -> ImputationModel:
    """Fit all (r, k, j) imputation regressions.

    The per-(r, k) Gram matrix is shared across the j regressions, so the
    cost is one Gram plus one coordinate-descent run per missing
    coordinate. Deterministic for a fixed pool and policy.
    """
    X = dataset.X
    if fit_pool is None:
        fit_pool = np.arange(dataset.n_total)
    else:
        fit_pool = np.asarray(fit_pool, dtype=np.int64)

    gamma, tau_used, nonconv = {}, {}, 0
    for r in range(groups.R):
        mr = groups.m[r]
        if mr.size == 0:
            continue
        for k in groups.G[r]:
            rows = np.intersect1d(groups.H[k], fit_pool)
            if rows.size < 2:
                raise InsufficientSamples(
                    f"group {k} has {rows.size} fitting samples for the "
                    f"({r}, {k}) imputation block"
                )
            Jrk = groups.J[(r, k)]
            XJ = np.ascontiguousarray(X[np.ix_(rows, Jrk)])
            m_rows = rows.size
            if tau_policy.mode == "cv":
                taus = {}
                for j in mr:
                    target = X[rows, j]
                    rate = tau_policy.rate(Jrk.size, m_rows)
                    grid = np.geomspace(tau_policy.grid_hi * rate,
                                        tau_policy.grid_lo * rate,
                                        tau_policy.grid_size)
                    res = lasso_cv(XJ, target, tau_policy.folds, grid)
                    gamma[(r, k, int(j))] = res.gamma
                    taus[int(j)] = res.tau_star
                tau_used[(r, k)] = taus
                continue
            if tau_policy.mode == "fixed":
                tau = tau_policy.c * tau_policy.rate(Jrk.size, m_rows)
            else:
                tau = float(tau_policy.value)
            tau_used[(r, k)] = tau
            Gm = XJ.T @ XJ
            hist = np.empty(20_000)
            for j in mr:
                target = X[rows, j]
                b = XJ.T @ target
                g, sweeps, converged, kkt = _cd_gram(
                    Gm, b, float(target @ target), float(m_rows),
                    tau, 1e-8, 100_000, hist,
                )
                if not converged:
                    nonconv += 1
                gamma[(r, k, int(j))] = g

    return ImputationModel(
        gamma=gamma,
        fit_pool=fit_pool,
        tau_policy=tau_policy,
        tau_used=tau_used,
        diagnostics={"nonconverged_regressions": nonconv,
                     "regressions": len(gamma)},
    )


def imputed_view(model: ImputationModel, dataset: SemiSupervisedDataset,
                 groups: GroupStructure, i, k) -> np.ndarray:
    """The imputed view of sample i according to source group k in G(r).

    Observed coordinates (a(r)) are sample i's own values; missing ones
    are gamma[(r, k, j)] @ X_{i, J(r, k)}.
    """
    r = int(groups.group_of[i])
    if k not in groups.G[r]:
        raise ValueError(f"group {k} is not a source for group {r}")
    x = dataset.X[i].copy()
    mr = groups.m[r]
    if mr.size:
        xJ = dataset.X[i, groups.J[(r, k)]]
        for j in mr:
            x[j] = float(model.gamma[(r, k, int(j))] @ xJ)
    return x


def imputed_view_matrix(model: ImputationModel, dataset: SemiSupervisedDataset,
                        groups: GroupStructure, r, k) -> np.ndarray:
    """Imputed views for every sample of group r (rows follow H(r))."""
    rows = groups.H[r]
    V = dataset.X[rows].copy()
    mr = groups.m[r]
    if mr.size:
        V[:, mr] = dataset.X[np.ix_(rows, groups.J[(r, k)])] @ model.gamma_matrix(groups, r, k)
    return V


def view_cache(model, dataset, groups) -> dict:
    """Precompute every (r, k) view matrix once; shared downstream."""
    return {(r, k): imputed_view_matrix(model, dataset, groups, r, k)
            for (r, k) in groups.blocks()}
