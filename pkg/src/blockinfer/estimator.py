"""Sparse coefficient estimation from the stacked estimating system.

The point estimate is the minimum-l1 vector whose full estimating
function stays inside an l-infinity tube of radius lambda; lambda is
tuned by group-stratified K-fold cross-validation on the supervised
samples, scoring held-out prediction error averaged across a sample's
imputed views.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import GroupStructure, SemiSupervisedDataset
from .errors import DegenerateFolds, Infeasible
from .estimating import EstimatingSystem, build_system, eval_g
from .imputation import ImputationModel, view_cache
from .solvers import LinfFeasibleL1Problem, solve_l1_linf


@dataclass(frozen=True)
class FitResult:
    beta_hat: np.ndarray
    lam: float
    cv_table: tuple = None            # ((lam, mean CV loss), ...) or None
    feasibility_slack: float = np.nan
    diagnostics: dict = field(default_factory=dict)


def default_lambda_grid(p, n2, n_total, num=20, lo=0.05, hi=2.0):
    """Log-spaced grid (descending) around the theoretical radius order
    sqrt(log p / n) + sqrt(log p / (n + N))."""
    rate = np.sqrt(np.log(p) / n2) + np.sqrt(np.log(p) / n_total)
    return np.geomspace(hi * rate, lo * rate, num)


def fit_dantzig(system: EstimatingSystem, lam, feas_tol=1e-7, opt_tol=1e-6,
                warm=None) -> FitResult:
    """Minimum-l1 fit subject to ||g_n(beta)||_inf <= lam."""
    if lam < 0:
        raise ValueError("lam must be >= 0")
    sol = solve_l1_linf(
        LinfFeasibleL1Problem(system.B_full, system.q_full, float(lam),
                              feas_tol=feas_tol, opt_tol=opt_tol),
        warm=warm,
    )
    slack = float(np.abs(eval_g(system, sol.beta, "full")).max())
    return FitResult(
        beta_hat=sol.beta,
        lam=float(lam),
        feasibility_slack=slack,
        diagnostics={
            "lp_duality_gap": sol.duality_gap,
            "lp_feas_violation": sol.feas_violation,
            "lp_passes": sol.passes,
            "lp_used_fallback": sol.used_fallback,
            "warm": sol.warm,
        },
    )


def _stratified_folds(pool, groups, folds, rng):
    """Deal each group's pool members round-robin into folds."""
    out = [[] for _ in range(folds)]
    for r in range(groups.R):
        members = np.intersect1d(pool, groups.H[r])
        members = rng.permutation(members) if rng is not None else members
        for t, i in enumerate(members):
            out[t % folds].append(int(i))
    return [np.array(sorted(f), dtype=np.int64) for f in out]


def _plain_folds(pool, folds, rng):
    order = rng.permutation(pool) if rng is not None else np.array(pool)
    return [np.sort(f) for f in np.array_split(order, folds)]


def cv_fit(dataset: SemiSupervisedDataset, groups: GroupStructure,
           model: ImputationModel, folds=10, lambda_grid=None, rng=None,
           inference_pool=None, views=None, system_builder=build_system,
           final_system: EstimatingSystem = None) -> FitResult:
    """Tune lambda by stratified K-fold CV on the supervised pool, then
    refit on the whole pool at the winning radius (ties go larger).

    The imputation model is fitted once by the caller and reused across
    folds; only the estimating system is rebuilt per fold.
    """
    if folds < 2:
        raise ValueError("folds must be >= 2")
    if inference_pool is None:
        inference_pool = dataset.supervised
    inference_pool = np.asarray(inference_pool, dtype=np.int64)
    if views is None:
        views = view_cache(model, dataset, groups)
    p = dataset.p
    if lambda_grid is None:
        lambda_grid = default_lambda_grid(p, inference_pool.size, dataset.n_total)
    lams = np.sort(np.asarray(lambda_grid, dtype=np.float64))[::-1]
    if lams.size == 0:
        raise ValueError("lambda grid must be nonempty")

    fold_sets = _stratified_folds(inference_pool, groups, folds, rng)
    if any(f.size == 0 for f in fold_sets):
        raise DegenerateFolds("stratified folds leave an empty fold")

    def fold_ok(f):
        train = np.setdiff1d(inference_pool, f)
        return all(np.intersect1d(train, groups.H[r]).size > 0
                   for r in range(groups.R))

    if not all(fold_ok(f) for f in fold_sets):
        warnings.warn("stratified folds empty a group in training; "
                      "falling back to unstratified folds")
        fold_sets = _plain_folds(inference_pool, folds, rng)
        fold_sets = [f for f in fold_sets if f.size > 0 and fold_ok(f)]
        if not fold_sets:
            raise DegenerateFolds("no usable cross-validation fold")

    pos_in_H = {r: {int(i): t for t, i in enumerate(groups.H[r])}
                for r in range(groups.R)}

    cv_losses = np.zeros(lams.size)
    infeasible_count = 0
    # per-lambda warm sets inherited across folds: fold systems differ in
    # ~1/folds of the samples, so active sets transfer almost unchanged
    lam_warms = [None] * lams.size

    def merge_warm(a, b):
        if a is None or a[0] is None or len(a[0]) == 0:
            return b
        if b is None or b[0] is None or len(b[0]) == 0:
            return a
        return (np.union1d(a[0], b[0]), np.union1d(a[1], b[1]))

    for f in fold_sets:
        train = np.setdiff1d(inference_pool, f)
        sub = system_builder(dataset, groups, model, inference_pool=train,
                             views=views, with_projection=False)
        prob_kw = dict(A=sub.B_full, q=sub.q_full)
        warm = None
        dead = False
        # held-out scoring data, gathered once per fold
        per_i = []
        for i in f:
            r = int(groups.group_of[i])
            vs = np.stack([views[(r, k)][pos_in_H[r][int(i)]]
                           for k in groups.G[r]])
            per_i.append((float(dataset.y[i]), vs))
        for li, lam in enumerate(lams):
            if dead:
                cv_losses[li] += np.inf
                continue
            try:
                sol = solve_l1_linf(
                    LinfFeasibleL1Problem(lam=float(lam), **prob_kw),
                    warm=merge_warm(lam_warms[li], warm),
                    exact_infeasibility_min=False,
                )
            except Infeasible:
                # every smaller lam is infeasible too
                dead = True
                infeasible_count += 1
                cv_losses[li] += np.inf
                continue
            warm = sol.warm
            lam_warms[li] = sol.warm
            loss = 0.0
            for yi, vs in per_i:
                resid = yi - vs @ sol.beta
                loss += float(resid @ resid) / resid.size
            cv_losses[li] += loss / len(per_i)
        del per_i
    cv_losses /= len(fold_sets)

    if not np.isfinite(cv_losses).any():
        raise Infeasible(float("nan"), exact=False)
    best = int(np.argmin(cv_losses))   # first index = largest lam on ties
    lam_star = float(lams[best])

    if final_system is None:
        final_system = system_builder(dataset, groups, model,
                                      inference_pool=inference_pool,
                                      views=views, with_projection=False)
    fit = fit_dantzig(final_system, lam_star)
    diag = dict(fit.diagnostics)
    diag["cv_infeasible_folds"] = infeasible_count
    diag["imputation_refit_per_fold"] = False
    return FitResult(
        beta_hat=fit.beta_hat,
        lam=lam_star,
        cv_table=tuple((float(l), float(c)) for l, c in zip(lams, cv_losses)),
        feasibility_slack=fit.feasibility_slack,
        diagnostics=diag,
    )
