"""Self-contained numerical kernels.

Three problem families, each with an explicit optimality contract:

* coordinate-descent Lasso on the loss  mean squared residual + tau * l1,
  certified by the KKT subgradient residual;
* minimum-l1 vectors under an l-infinity residual constraint (a linear
  program), certified by an LP duality gap on the full problem;
* convex quadratic minimization under l-infinity linear constraints,
  certified by the KKT residual of the returned primal/dual pair.

The LP is solved through delayed row/column generation: the optimizer is
sparse and few constraints are active, so a sequence of small restricted
LPs (HiGHS via scipy) reaches the full optimum orders of magnitude
faster than solving the complete program, and the final primal/dual pair
is certified against the full data. A direct full-size solve remains as
a fallback. The QP is delegated to OSQP and re-verified locally.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .errors import DegenerateFolds, Infeasible, NumericalFailure

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in practice
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        return wrap if not (args and callable(args[0])) else args[0]


_LP_OPTS = {"presolve": False}

# ---------------------------------------------------------------------------
# Lasso
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LassoProblem:
    """Lasso instance: loss = mean_i (target_i - design_i @ gamma)^2 + tau*||gamma||_1."""

    design: np.ndarray
    target: np.ndarray
    tau: float
    tol: float = 1e-8
    max_iter: int = 100_000

    def __post_init__(self):
        X = np.asarray(self.design, dtype=np.float64)
        y = np.asarray(self.target, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] < 1 or X.shape[1] < 1:
            raise ValueError("design must be a nonempty 2-d matrix")
        if y.shape != (X.shape[0],):
            raise ValueError("target length must match design rows")
        if self.tau < 0 or self.tol <= 0 or self.max_iter < 1:
            raise ValueError("need tau >= 0, tol > 0, max_iter >= 1")
        object.__setattr__(self, "design", X)
        object.__setattr__(self, "target", y)


@dataclass(frozen=True)
class LassoFit:
    gamma: np.ndarray
    converged: bool
    sweeps: int
    kkt_residual: float
    objective_history: np.ndarray


@njit(cache=True)
def _cd_gram(Gm, b, yty, m, tau, tol, max_sweeps, history):
    """Cyclic coordinate descent on the Gram form of the Lasso objective.

    Gm = X'X, b = X'y. Maintains w = Gm @ gamma so one coordinate update
    costs O(d). Stops when the KKT subgradient residual drops below tol.
    """
    d = b.shape[0]
    gamma = np.zeros(d)
    w = np.zeros(d)
    thr = 0.5 * m * tau
    hist_cap = history.shape[0]
    kkt = np.inf
    for sweep in range(max_sweeps):
        for j in range(d):
            gjj = Gm[j, j]
            if gjj <= 0.0:
                continue
            rho = b[j] - w[j] + gjj * gamma[j]
            if rho > thr:
                new = (rho - thr) / gjj
            elif rho < -thr:
                new = (rho + thr) / gjj
            else:
                new = 0.0
            diff = new - gamma[j]
            if diff != 0.0:
                w += Gm[:, j] * diff
                gamma[j] = new
        # objective and KKT residual for this sweep
        quad = yty
        l1 = 0.0
        kkt = 0.0
        for j in range(d):
            quad += gamma[j] * (w[j] - 2.0 * b[j])
            l1 += abs(gamma[j])
            corr = 2.0 * (b[j] - w[j]) / m
            if gamma[j] > 0.0:
                viol = abs(corr - tau)
            elif gamma[j] < 0.0:
                viol = abs(corr + tau)
            else:
                viol = abs(corr) - tau
                if viol < 0.0:
                    viol = 0.0
            if viol > kkt:
                kkt = viol
        if sweep < hist_cap:
            history[sweep] = quad / m + tau * l1
        if kkt <= tol:
            return gamma, sweep + 1, True, kkt
    return gamma, max_sweeps, False, kkt


def lasso_cd(problem: LassoProblem) -> LassoFit:
    """Solve a LassoProblem by cyclic coordinate descent.

    Non-convergence within max_iter sweeps is reported through the
    ``converged`` flag; the best iterate is still returned.
    """
    X, y = problem.design, problem.target
    m = X.shape[0]
    Gm = X.T @ X
    b = X.T @ y
    yty = float(y @ y)
    cap = min(problem.max_iter, 20_000)
    history = np.empty(cap, dtype=np.float64)
    gamma, sweeps, converged, kkt = _cd_gram(
        np.ascontiguousarray(Gm), b, yty, float(m), float(problem.tau),
        float(problem.tol), int(problem.max_iter), history,
    )
    return LassoFit(
        gamma=gamma,
        converged=bool(converged),
        sweeps=int(sweeps),
        kkt_residual=float(kkt),
        objective_history=history[: min(sweeps, cap)].copy(),
    )


@dataclass(frozen=True)
class LassoCvResult:
    tau_star: float
    gamma: np.ndarray
    cv_table: tuple   # ((tau, mean heldout MSE), ...) sorted tau descending


def lasso_cv(design, target, folds, tau_grid, rng=None) -> LassoCvResult:
    """K-fold cross-validation over a tau grid; ties go to the larger tau.

    Folds are contiguous splits of the (optionally shuffled) row order,
    so results are reproducible for a fixed rng.
    """
    X = np.asarray(design, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    m = X.shape[0]
    if folds < 2:
        raise ValueError("folds must be >= 2")
    taus = sorted(set(float(t) for t in tau_grid), reverse=True)
    if not taus:
        raise ValueError("tau_grid must be nonempty")
    order = np.arange(m)
    if rng is not None:
        order = rng.permutation(m)
    splits = np.array_split(order, folds)
    if any(len(s) == 0 for s in splits):
        raise DegenerateFolds(f"{folds} folds over {m} rows leaves an empty fold")
    losses = np.zeros(len(taus))
    for heldout in splits:
        train = np.setdiff1d(order, heldout)
        Xt, yt = X[train], y[train]
        Xh, yh = X[heldout], y[heldout]
        for ti, tau in enumerate(taus):
            fit = lasso_cd(LassoProblem(Xt, yt, tau))
            resid = yh - Xh @ fit.gamma
            losses[ti] += float(resid @ resid) / len(heldout)
    losses /= folds
    best = int(np.argmin(losses))  # first index = largest tau on exact ties
    tau_star = taus[best]
    final = lasso_cd(LassoProblem(X, y, tau_star))
    return LassoCvResult(
        tau_star=tau_star,
        gamma=final.gamma,
        cv_table=tuple((t, float(l)) for t, l in zip(taus, losses)),
    )


# ---------------------------------------------------------------------------
# l1 minimization under an l-infinity residual constraint (LP)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinfFeasibleL1Problem:
    """min ||beta||_1  subject to  ||q - A beta||_inf <= lam."""

    A: np.ndarray
    q: np.ndarray
    lam: float
    feas_tol: float = 1e-7
    opt_tol: float = 1e-6

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        q = np.asarray(self.q, dtype=np.float64)
        if A.ndim != 2 or q.shape != (A.shape[0],):
            raise ValueError("A must be (M, d) with q of length M")
        if self.lam < 0:
            raise ValueError("lam must be >= 0")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "q", q)


@dataclass(frozen=True)
class L1LinfResult:
    beta: np.ndarray
    duality_gap: float
    feas_violation: float
    passes: int
    used_fallback: bool
    warm: tuple = field(default=(None, None), repr=False)


def _lp(c, A_ub, b_ub):
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=(0, None),
                  method="highs", options=_LP_OPTS)
    if res.status in (1, 4):  # iteration limit / numerical trouble
        res = linprog(c, A_ub=A_ub, b_ub=b_ub, bounds=(0, None), method="highs")
    return res


def _restricted_l1(A_sub, q_sub, lam):
    """Split-variable LP on a row/column restriction."""
    nr, nc = A_sub.shape
    A_ub = sp.csc_matrix(np.block([[A_sub, -A_sub], [-A_sub, A_sub]]))
    b_ub = np.concatenate([lam + q_sub, lam - q_sub])
    return _lp(np.ones(2 * nc), A_ub, b_ub)


def _rows_chebyshev(A, q, rows):
    """min_beta max_{i in rows} |q_i - A_i beta| over all columns.

    Returns (t*, beta*). Small because |rows| stays small.
    """
    Ar = A[rows]
    nr, d = Ar.shape
    ones = np.ones((nr, 1))
    A_ub = sp.csc_matrix(np.block([[Ar, -Ar, -ones], [-Ar, Ar, -ones]]))
    b_ub = np.concatenate([q[rows], -q[rows]])
    c = np.zeros(2 * d + 1)
    c[-1] = 1.0
    res = _lp(c, A_ub, b_ub)
    if res.status != 0:
        raise NumericalFailure(f"row-Chebyshev LP failed with status {res.status}")
    return float(res.x[-1]), res.x[:d] - res.x[d:2 * d]


def chebyshev_min(A, q, tol=1e-9, max_pass=200):
    """min_beta ||q - A beta||_inf.

    Solved through the dual  max q'y  s.t.  A'y = 0, ||y||_1 <= 1,
    whose LP has only d+1 constraint rows; the argmin is recovered from
    the equality duals. Falls back to primal row generation if the dual
    solve misbehaves.
    """
    A = np.asarray(A, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    M, d = A.shape
    c = np.concatenate([-q, q])
    A_eq = sp.csc_matrix(np.hstack([A.T, -A.T]))
    A_ub = sp.csc_matrix(np.ones((1, 2 * M)))
    res = linprog(c, A_ub=A_ub, b_ub=[1.0], A_eq=A_eq, b_eq=np.zeros(d),
                  bounds=(0, None), method="highs", options=_LP_OPTS)
    if res.status == 0:
        t = float(-res.fun)
        beta = -res.eqlin.marginals
        if float(np.abs(q - A @ beta).max()) <= t * (1 + 1e-7) + 1e-12:
            return t, beta
    # primal row generation fallback
    rows = set(int(i) for i in np.argsort(np.abs(q))[-min(30, M):])
    for _ in range(max_pass):
        Ri = np.array(sorted(rows), dtype=np.int64)
        t, beta = _rows_chebyshev(A, q, Ri)
        viol = np.abs(q - A @ beta) - t
        cand = np.flatnonzero(viol > tol)
        new = [int(i) for i in cand[np.argsort(viol[cand])[-200:]] if int(i) not in rows]
        if not new:
            return t, beta
        rows.update(new)
    raise NumericalFailure("Chebyshev row generation did not converge")


def _full_l1_linf(problem):
    """Direct full-size solve; authoritative but slow. Fallback path."""
    A, q, lam = problem.A, problem.q, problem.lam
    M, d = A.shape
    res = _restricted_l1(A, q, lam)
    if res.status in (2, 4):
        # simplex sometimes reports "numerical difficulties" on truly
        # infeasible instances near the frontier; settle it exactly
        t, _ = chebyshev_min(A, q)
        if t > lam * (1 + 1e-10) + 1e-14:
            raise Infeasible(t, exact=True)
        if res.status == 4:
            A_ub = sp.csc_matrix(np.block([[A, -A], [-A, A]]))
            b_ub = np.concatenate([lam + q, lam - q])
            res = linprog(np.ones(2 * d), A_ub=A_ub, b_ub=b_ub,
                          bounds=(0, None), method="highs-ipm")
    if res.status != 0:
        raise NumericalFailure(f"full LP failed with status {res.status}")
    beta = res.x[:d] - res.x[d:]
    marg = res.ineqlin.marginals
    y = marg[:M] - marg[M:]   # w - u with u = -marg_up, w = -marg_lo
    gap, viol = _certify_l1(A, q, lam, beta, y)
    return L1LinfResult(beta=beta, duality_gap=gap, feas_violation=viol,
                        passes=1, used_fallback=True,
                        warm=(np.arange(M), np.arange(d)))


def _certify_l1(A, q, lam, beta, y):
    """Full-problem certificate for a primal/dual candidate pair.

    Any y with ||A' y||_inf <= 1 gives the lower bound q'y - lam*||y||_1;
    a slightly dual-infeasible y is rescaled before use.
    """
    viol = max(0.0, float(np.abs(q - A @ beta).max()) - lam)
    dual_inf = float(np.abs(A.T @ y).max())
    scale = max(1.0, dual_inf)
    lower = (float(q @ y) - lam * float(np.abs(y).sum())) / scale
    gap = float(np.abs(beta).sum()) - lower
    return gap, viol


def solve_l1_linf(problem: LinfFeasibleL1Problem, warm=None,
                  exact_infeasibility_min=True, max_pass=300) -> L1LinfResult:
    """Solve min ||beta||_1 s.t. ||q - A beta||_inf <= lam.

    Row/column generation around restricted split-variable LPs. The
    returned point is feasible within feas_tol and optimal within a
    certified duality gap <= opt_tol (else the full solve takes over).

    Raises Infeasible when min ||q - A beta||_inf > lam; the exception
    carries the exact attained minimum (or, when
    exact_infeasibility_min=False, a certified lower bound > lam).
    ``warm`` accepts (rows, cols) index arrays from a related solve.
    """
    A, q, lam = problem.A, problem.q, problem.lam
    M, d = A.shape
    if lam >= np.abs(q).max():
        # zero is feasible and l1-minimal
        empty = np.array([], dtype=np.int64)
        return L1LinfResult(beta=np.zeros(d), duality_gap=0.0, feas_violation=0.0,
                            passes=0, used_fallback=False, warm=(empty, empty))

    if warm is not None and warm[0] is not None and len(warm[0]) > 0:
        rows = set(int(i) for i in warm[0])
        cols = set(int(j) for j in warm[1]) if warm[1] is not None else set()
    else:
        rows, cols = set(), set()
    if not rows:
        rows = set(int(i) for i in np.argsort(np.abs(q))[-min(30, M):])
    if not cols:
        cols = set(int(j) for j in np.argsort(np.abs(A.T @ q))[-min(30, d):])

    lam_solve = lam
    for it in range(max_pass):
        Ri = np.array(sorted(rows), dtype=np.int64)
        Ci = np.array(sorted(cols), dtype=np.int64)
        res = _restricted_l1(A[np.ix_(Ri, Ci)], q[Ri], lam_solve)
        if res.status in (2, 4):
            # infeasible, or numerical trouble that often masks
            # infeasibility: can the rows in Ri be satisfied at all?
            t, beta_all = _rows_chebyshev(A, q, Ri)
            if t > lam * (1 + 1e-10) + 1e-14:
                # a row subset already needs residual t > lam: infeasible
                if exact_infeasibility_min:
                    t_full, _ = chebyshev_min(A, q)
                    raise Infeasible(t_full, exact=True)
                raise Infeasible(t, exact=False)
            add = [int(j) for j in np.argsort(-np.abs(beta_all))
                   if abs(beta_all[j]) > 1e-14 and int(j) not in cols][:50]
            if add:
                cols.update(add)
                continue
            if lam_solve == lam:
                # boundary degeneracy: solver tolerance straddles lam
                lam_solve = lam + 1e-9 * (1.0 + lam)
                continue
            return _full_l1_linf(problem)
        if res.status != 0:
            return _full_l1_linf(problem)

        nr, nc = len(Ri), len(Ci)
        bc = res.x[:nc] - res.x[nc:]
        resid = q - A[:, Ci] @ bc
        rowviol = np.abs(resid) - lam
        marg = res.ineqlin.marginals
        yrow = marg[:nr] - marg[nr:]   # w - u with u = -marg_up, w = -marg_lo
        colviol = np.abs(A[Ri].T @ yrow) - 1.0
        # small prioritized additions keep the restricted LPs close to the
        # true active-set size, which is what their cost scales with
        rcand = np.flatnonzero(rowviol > 1e-9)
        ccand = np.flatnonzero(colviol > 1e-7)
        new_rows = [int(i) for i in rcand[np.argsort(rowviol[rcand])[-40:]]
                    if int(i) not in rows]
        new_cols = [int(j) for j in ccand[np.argsort(colviol[ccand])[-40:]]
                    if int(j) not in cols]
        if new_rows or new_cols:
            rows.update(new_rows)
            cols.update(new_cols)
            continue

        beta = np.zeros(d)
        beta[Ci] = bc
        yfull = np.zeros(M)
        yfull[Ri] = yrow
        gap, viol = _certify_l1(A, q, lam, beta, yfull)
        if gap > problem.opt_tol or viol > problem.feas_tol:
            return _full_l1_linf(problem)
        active_r = Ri[np.abs(np.abs(resid[Ri]) - lam) < 1e-7 * (1.0 + lam)]
        active_c = Ci[np.abs(bc) > 1e-12]
        return L1LinfResult(
            beta=beta, duality_gap=gap, feas_violation=viol,
            passes=it + 1, used_fallback=False,
            warm=(active_r if active_r.size else Ri, active_c if active_c.size else Ci),
        )
    return _full_l1_linf(problem)


# ---------------------------------------------------------------------------
# quadratic minimization under l-infinity linear constraints (QP)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LinfConstrainedQP:
    """min v' W v  subject to  ||Gmat' v - target||_inf <= lambda_prime."""

    W: object                     # (M', M') symmetric PSD, dense or sparse
    Gmat: np.ndarray              # (M', p)
    target: np.ndarray            # (p,)
    lambda_prime: float
    feas_tol: float = 1e-7
    opt_tol: float = 1e-6

    def __post_init__(self):
        G = np.asarray(self.Gmat, dtype=np.float64)
        t = np.asarray(self.target, dtype=np.float64)
        W = self.W
        if not sp.issparse(W):
            W = np.asarray(W, dtype=np.float64)
            if W.shape[0] != W.shape[1]:
                raise ValueError("W must be square")
            if np.abs(W - W.T).max(initial=0.0) > 1e-8 * (1 + np.abs(W).max(initial=0.0)):
                raise ValueError("W must be symmetric")
        if G.shape[0] != W.shape[0] or t.shape != (G.shape[1],):
            raise ValueError("dimension mismatch between W, Gmat, target")
        if self.lambda_prime < 0:
            raise ValueError("lambda_prime must be >= 0")
        object.__setattr__(self, "Gmat", G)
        object.__setattr__(self, "target", t)


@dataclass(frozen=True)
class QpResult:
    v: np.ndarray
    objective: float
    kkt_residual: float
    feas_violation: float
    duals: np.ndarray


def solve_qp_linf(problem: LinfConstrainedQP) -> QpResult:
    """Solve the constrained QP with OSQP and re-verify KKT locally.

    Raises Infeasible (with the distance of target to the reachable set)
    when no v satisfies the constraint, and NumericalFailure when OSQP
    cannot produce a point passing the KKT check.
    """
    import osqp

    W, G, t = problem.W, problem.Gmat, problem.target
    Mp = G.shape[0]
    Ws = sp.csc_matrix(W) if not sp.issparse(W) else W.tocsc()
    P = 2.0 * Ws
    Acon = sp.csc_matrix(G.T)
    lvec = t - problem.lambda_prime
    uvec = t + problem.lambda_prime

    eps = min(1e-8, problem.opt_tol * 1e-2)
    v = duals = None
    for attempt, max_iter in enumerate((100_000, 1_000_000)):
        solver = osqp.OSQP()
        solver.setup(P=P, q=np.zeros(Mp), A=Acon, l=lvec, u=uvec,
                     eps_abs=eps, eps_rel=eps, polish=True, verbose=False,
                     max_iter=max_iter)
        res = solver.solve()
        status = res.info.status
        if "infeasible" in status:
            attained, _ = chebyshev_min(G.T, t)
            raise Infeasible(attained, exact=True)
        if status in ("solved", "solved inaccurate") and res.x is not None:
            v, duals = res.x, res.y
            stat, comp, viol = _qp_kkt(Ws, G, t, problem.lambda_prime, v, duals)
            if max(stat, comp) <= problem.opt_tol and viol <= problem.feas_tol:
                return QpResult(v=v, objective=float(v @ (Ws @ v)),
                                kkt_residual=max(stat, comp),
                                feas_violation=viol, duals=duals)
    if v is None:
        raise NumericalFailure("OSQP returned no iterate")
    stat, comp, viol = _qp_kkt(Ws, G, t, problem.lambda_prime, v, duals)
    raise NumericalFailure(
        f"QP KKT residual {max(stat, comp):.3g} (feas {viol:.3g}) exceeds tolerance"
    )


def _qp_kkt(Ws, G, target, lam, v, y):
    """Stationarity, complementarity, and primal violation of a candidate."""
    stationarity = float(np.abs(2.0 * (Ws @ v) + G @ y).max(initial=0.0))
    gv = G.T @ v
    upper = target + lam
    lower = target - lam
    viol = float(max(np.max(gv - upper, initial=0.0), np.max(lower - gv, initial=0.0)))
    pos = np.clip(y, 0.0, None) * np.abs(upper - gv)
    neg = np.clip(-y, 0.0, None) * np.abs(gv - lower)
    comp = float(max(pos.max(initial=0.0), neg.max(initial=0.0)))
    return stationarity, comp, viol
