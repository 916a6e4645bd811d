"""Debiased per-coefficient inference and FDR-controlled selection.

A coordinate's projection vector minimizes the quadratic form v' Wn v
under the near-identity gradient constraint ||Gn' v - e_j||_inf <=
lambda', escalating lambda' when the program is infeasible. The
bias-corrected estimate is the exact root of the projected partial
estimating equation, treated as a univariate affine equation in the
j-th coordinate. Variances follow the supervised-sum formula, intervals
and Wald tests use normal quantiles, and simultaneous testing applies a
modified BH threshold capped at sqrt(2 log p - 2 log log p).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .data import GroupStructure, SemiSupervisedDataset
from .errors import (DegenerateDenominator, DegenerateVariance, Infeasible,
                     PersistentlyInfeasible)
from .estimating import EstimatingSystem, eval_g
from .estimator import FitResult
from .imputation import ImputationModel, view_cache
from .solvers import LinfConstrainedQP, solve_qp_linf


@dataclass(frozen=True)
class ProjectionVector:
    j: int
    v: np.ndarray
    lambda_prime_used: float
    escalations: int
    objective: float
    kkt_residual: float = np.nan


def default_lambda_prime(p, n2):
    return 0.1 * np.sqrt(np.log(p) / n2)


def projection_vector(system: EstimatingSystem, j, lambda_prime_init=None,
                      factor=1.5, max_escalations=20, feas_tol=1e-7,
                      opt_tol=1e-6) -> ProjectionVector:
    """Solve the projection program for coordinate j, scaling lambda' up
    by ``factor`` on infeasibility, at most ``max_escalations`` times."""
    if system.Gn is None:
        raise ValueError("system was built without projection matrices")
    p = system.p
    if not (0 <= j < p):
        raise ValueError(f"coordinate {j} out of range [0, {p})")
    lam = (default_lambda_prime(p, system.inference_pool.size)
           if lambda_prime_init is None else float(lambda_prime_init))
    if lam <= 0:
        raise ValueError("lambda_prime_init must be > 0")
    target = np.zeros(p)
    target[j] = 1.0
    Wn = system.Wn_sparse()
    for esc in range(max_escalations + 1):
        try:
            res = solve_qp_linf(LinfConstrainedQP(
                W=Wn, Gmat=system.Gn, target=target, lambda_prime=lam,
                feas_tol=feas_tol, opt_tol=opt_tol,
            ))
        except Infeasible:
            lam *= factor
            continue
        return ProjectionVector(j=int(j), v=res.v, lambda_prime_used=lam,
                                escalations=esc, objective=res.objective,
                                kkt_residual=res.kkt_residual)
    raise PersistentlyInfeasible(
        f"projection for coordinate {j} infeasible after "
        f"{max_escalations} escalations (last lambda'={lam:.4g})"
    )


def debias(system: EstimatingSystem, fit: FitResult, pv: ProjectionVector,
           denom_tol=1e-6) -> float:
    """Exact root of v' g*_n(beta-hat with coordinate j freed) = 0.

    The partial estimating function is affine, so the root is
    beta_hat_j + v' g*_n(beta_hat) / (v' B_partial e_j).
    """
    j = pv.j
    denom = float(pv.v @ system.B_partial[:, j])
    if abs(denom) <= denom_tol:
        raise DegenerateDenominator(
            f"coordinate {j}: |v' B_partial e_j| = {abs(denom):.3g}"
        )
    gstar = eval_g(system, fit.beta_hat, "partial")
    return float(fit.beta_hat[j] + (pv.v @ gstar) / denom)


def sigma_hat_sq(system: EstimatingSystem, dataset: SemiSupervisedDataset,
                 groups: GroupStructure, model: ImputationModel,
                 fit: FitResult, views=None) -> float:
    """Mean squared imputed-view residual over supervised samples and
    their source groups; denominator sum_r |G(r)| * |D2 ∩ H(r)|."""
    if views is None:
        views = view_cache(model, dataset, groups)
    pool = system.inference_pool
    num = 0.0
    den = 0
    for (r, k) in system.blocks:
        rows = np.intersect1d(pool, groups.H[r])
        pos = {int(i): t for t, i in enumerate(groups.H[r])}
        loc = np.array([pos[int(i)] for i in rows], dtype=np.int64)
        V = views[(r, k)][loc]
        resid = dataset.y[rows] - V @ fit.beta_hat
        num += float(resid @ resid)
        den += rows.size
    return num / den


def s_hat_j(system: EstimatingSystem, dataset: SemiSupervisedDataset,
            groups: GroupStructure, pv: ProjectionVector, sigma_sq) -> float:
    """Plug-in standard deviation of the debiased coordinate.

    s_hat^2 = sigma^2 * sum_{i in D2} sum_{(r,k)} (n2/n_r)^2
              1{group(i)=r} (v_{rk}' X_{i,J(r,k)})^2, supervised sums and
    weights regardless of the pools behind v.
    """
    D2 = dataset.supervised
    n2 = D2.size
    total = 0.0
    for (r, k) in system.blocks:
        rows = np.intersect1d(D2, groups.H[r])
        nr = rows.size
        vrk = pv.v[system.partial_index[(r, k)]]
        ips = dataset.X[np.ix_(rows, groups.J[(r, k)])] @ vrk
        total += (n2 ** 2 / nr ** 2) * float(ips @ ips)
    return float(np.sqrt(float(sigma_sq) * total))


def confidence_interval(beta_tilde, s_hat, n2, alpha):
    """Normal interval beta_tilde ∓ z_{alpha/2} * s_hat / n2."""
    if not (0 < alpha <= 1):
        raise ValueError("alpha must lie in (0, 1]")
    z = norm.ppf(1.0 - alpha / 2.0)
    half = z * s_hat / n2
    return float(beta_tilde - half), float(beta_tilde + half)


def test_statistic(beta_tilde, b_j, s_hat, n2):
    """Wald statistic n2 (beta_tilde - b_j)/s_hat and two-sided p-value."""
    if s_hat <= 0:
        raise DegenerateVariance("s_hat must be positive for testing")
    T = n2 * (beta_tilde - b_j) / s_hat
    p = 2.0 * (1.0 - norm.cdf(abs(T)))
    return float(T), float(p)


@dataclass(frozen=True)
class FdrSelection:
    t_hat: float
    rejected: np.ndarray       # sorted indices
    used_fallback: bool
    alpha: float


def fdr_select(T0, alpha) -> FdrSelection:
    """Modified BH threshold over |T0| with cap b_p.

    t_hat = inf{t in [0, b_p]: p(2 - 2 Phi(t)) / max(#{|T0_j| >= t}, 1)
    <= alpha}. The infimum is computed exactly: candidate thresholds are
    the |T0_j| values plus 0 and b_p, and within each open interval
    between candidates the continuous crossing point of the bound is
    included. When no t qualifies, rejection falls back to the
    conventional sqrt(2 log p) threshold.
    """
    T0 = np.asarray(T0, dtype=np.float64)
    p = T0.size
    if p < 3:
        raise ValueError("need at least 3 coordinates for the capped threshold")
    if not (0 <= alpha < 1):
        raise ValueError("alpha must lie in [0, 1)")
    b_p = np.sqrt(2.0 * np.log(p) - 2.0 * np.log(np.log(p)))
    absT = np.sort(np.abs(T0))

    def count_ge(t):
        return p - np.searchsorted(absT, t, side="left")

    def ratio_ok(t):
        return p * 2.0 * norm.sf(t) <= alpha * max(count_ge(t), 1)

    cands = np.unique(np.concatenate(
        [[0.0, b_p], absT[(absT >= 0.0) & (absT <= b_p)]]
    ))
    feasible = [float(c) for c in cands if ratio_ok(c)]
    # interior crossings: on (c_l, c_{l+1}] the count is constant
    for lo, hi in zip(cands[:-1], cands[1:]):
        m = max(count_ge(np.nextafter(lo, np.inf)), 1)
        t_cross = norm.isf(alpha * m / (2.0 * p))
        if np.isfinite(t_cross):
            if t_cross <= lo:
                feasible.append(float(lo))   # infimum of a fully feasible interval
            elif t_cross < hi:
                feasible.append(float(t_cross))
    if feasible:
        t_hat = min(feasible)
        fallback = False
    else:
        t_hat = float(np.sqrt(2.0 * np.log(p)))
        fallback = True
    rejected = np.flatnonzero(np.abs(T0) >= t_hat)
    return FdrSelection(t_hat=float(t_hat), rejected=rejected,
                        used_fallback=fallback, alpha=float(alpha))


@dataclass(frozen=True)
class CoordinateRecord:
    j: int
    status: str                 # ok | projection_infeasible | degenerate_denominator
    beta_tilde: float = np.nan
    s_hat: float = np.nan
    ci_lower: float = np.nan
    ci_upper: float = np.nan
    t_stat: float = np.nan
    p_value: float = np.nan
    lambda_prime_used: float = np.nan
    escalations: int = 0


@dataclass(frozen=True)
class InferenceReport:
    beta_hat: np.ndarray
    records: tuple              # CoordinateRecord per requested coordinate
    sigma_hat_sq: float
    alpha: float
    fdr: FdrSelection = None
    provenance: dict = field(default_factory=dict)


def build_report(dataset, groups, model, system, fit, coordinates=None,
                 alpha=0.05, lambda_prime_init=None, null_values=None,
                 with_fdr=False, views=None, denom_tol=1e-6,
                 provenance=None) -> InferenceReport:
    """Projection + debias + CI + test per coordinate; optional FDR pass.

    Per-coordinate failures are recorded as flagged rows, never raised.
    FDR needs every coordinate's statistic, so with_fdr=True forces the
    full coordinate range.
    """
    p = system.p
    if coordinates is None or with_fdr:
        coordinates = np.arange(p)
    coordinates = np.asarray(coordinates, dtype=np.int64)
    n2 = dataset.n2
    sig2 = sigma_hat_sq(system, dataset, groups, model, fit, views=views)
    records = []
    for j in coordinates:
        try:
            pv = projection_vector(system, int(j),
                                   lambda_prime_init=lambda_prime_init)
            btil = debias(system, fit, pv, denom_tol=denom_tol)
            sj = s_hat_j(system, dataset, groups, pv, sig2)
            lo, hi = confidence_interval(btil, sj, n2, alpha)
            b0 = 0.0 if null_values is None else float(null_values[int(j)])
            if sj > 0:
                T, pval = test_statistic(btil, b0, sj, n2)
            else:
                T, pval = np.nan, np.nan
            records.append(CoordinateRecord(
                j=int(j), status="ok", beta_tilde=btil, s_hat=sj,
                ci_lower=lo, ci_upper=hi, t_stat=T, p_value=pval,
                lambda_prime_used=pv.lambda_prime_used,
                escalations=pv.escalations,
            ))
        except PersistentlyInfeasible:
            records.append(CoordinateRecord(j=int(j), status="projection_infeasible"))
        except DegenerateDenominator:
            records.append(CoordinateRecord(j=int(j), status="degenerate_denominator"))
    fdr = None
    if with_fdr:
        ok = [r for r in records if r.status == "ok" and r.s_hat > 0]
        T0 = np.zeros(p)
        for r in ok:
            T0[r.j] = n2 * r.beta_tilde / r.s_hat
        fdr = fdr_select(T0, alpha)
    return InferenceReport(
        beta_hat=fit.beta_hat,
        records=tuple(records),
        sigma_hat_sq=sig2,
        alpha=float(alpha),
        fdr=fdr,
        provenance=provenance or {},
    )
