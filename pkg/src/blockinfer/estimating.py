"""Estimating-equation machinery over imputed views.

The stacked estimating function has one block per (r, k) pair, ordered r
ascending then k ascending within G(r). Each block of the full variant
is the per-group mean of (y_i - view_i @ beta) * view_{i, a(k)}; the
partial variant replaces the leading view subvector by the truly
observed overlap covariates X_{i, J(r, k)}, which shrinks every block to
|J(r, k)| rows and removes first-order imputation error from the
leading factor.

Both variants are affine in beta and are stored as (q, B) with
g(beta) = q - B @ beta. The gradient-type matrix Gn stacks per-group
means of X_{i, J(r, k)} view_i' over the projection pool (sign
convention: Gn is the negative of the literal beta-derivative, matching
the nonnegative-definite block layout used by the projection program),
and Wn is the block-diagonal weight with blocks built from
X_{i, J(r, k)} outer products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .data import GroupStructure, SemiSupervisedDataset
from .errors import EmptyGroupInPool
from .imputation import ImputationModel, view_cache


@dataclass(frozen=True)
class EstimatingSystem:
    """Block layout, rates, and the affine maps behind the estimating
    functions, plus the projection-side matrices Gn and Wn."""

    blocks: tuple                      # ordered (r, k) pairs
    full_index: dict                   # (r, k) -> slice into [0, M_g)
    partial_index: dict                # (r, k) -> slice into [0, M'_g)
    theta_hat: dict                    # r -> supervised rate within inference pool
    q_full: np.ndarray
    B_full: np.ndarray
    q_partial: np.ndarray
    B_partial: np.ndarray
    Gn: np.ndarray                     # (M'_g, p) or None if not built
    Wn_blocks: dict                    # (r, k) -> dense PSD block, or empty
    inference_pool: np.ndarray
    projection_pool: np.ndarray
    wn_pool: str = "all"
    pools_note: dict = field(default_factory=dict)

    @property
    def p(self):
        return self.B_full.shape[1]

    @property
    def M_g(self):
        return self.q_full.shape[0]

    @property
    def M_prime(self):
        return self.q_partial.shape[0]

    def Wn_sparse(self):
        return sp.block_diag(
            [sp.csc_matrix(self.Wn_blocks[bk]) for bk in self.blocks],
            format="csc",
        )


def build_system(dataset: SemiSupervisedDataset, groups: GroupStructure,
                 model: ImputationModel, inference_pool=None,
                 projection_pool=None, wn_pool="all", views=None,
                 with_projection=True) -> EstimatingSystem:
    """Assemble q/B for both variants and, optionally, Gn and Wn.

    inference_pool must be supervised samples (defaults to all of D2);
    projection_pool defaults to every sample. wn_pool="supervised"
    switches Wn to the literal supervised-only sums.
    """
    X, y = dataset.X, dataset.y
    if inference_pool is None:
        inference_pool = dataset.supervised
    inference_pool = np.asarray(inference_pool, dtype=np.int64)
    if inference_pool.size == 0:
        raise EmptyGroupInPool("inference pool is empty")
    if not dataset.y_observed[inference_pool].all():
        raise ValueError("inference pool must contain supervised samples only")
    if projection_pool is None:
        projection_pool = np.arange(dataset.n_total)
    projection_pool = np.asarray(projection_pool, dtype=np.int64)
    if wn_pool not in ("all", "supervised"):
        raise ValueError("wn_pool must be 'all' or 'supervised'")

    if views is None:
        views = view_cache(model, dataset, groups)
    blocks = tuple(groups.blocks())

    # positions of pool members inside each H(r) listing
    pos_in_H = {r: {int(i): t for t, i in enumerate(groups.H[r])}
                for r in range(groups.R)}

    def pool_rows(pool, r):
        rows = np.intersect1d(pool, groups.H[r])
        loc = np.array([pos_in_H[r][int(i)] for i in rows], dtype=np.int64)
        return rows, loc

    n_inf = inference_pool.size
    theta_hat = {}
    q_full_parts, B_full_parts = [], []
    q_part_parts, B_part_parts = [], []
    Gn_parts, Wn_blocks = [], {}
    full_index, partial_index = {}, {}
    off_f = off_p = 0

    w_pool = projection_pool if wn_pool == "all" else inference_pool

    for (r, k) in blocks:
        rows, loc = pool_rows(inference_pool, r)
        if rows.size == 0:
            raise EmptyGroupInPool(f"group {r} has no inference-pool sample")
        theta_hat[r] = rows.size / n_inf
        V = views[(r, k)][loc]
        a_k = groups.a[k]
        Jrk = groups.J[(r, k)]
        Va = V[:, a_k]
        XJ = X[np.ix_(rows, Jrk)]
        yr = y[rows]
        nr = rows.size
        q_full_parts.append(Va.T @ yr / nr)
        B_full_parts.append(Va.T @ V / nr)
        q_part_parts.append(XJ.T @ yr / nr)
        B_part_parts.append(XJ.T @ V / nr)
        full_index[(r, k)] = slice(off_f, off_f + a_k.size)
        partial_index[(r, k)] = slice(off_p, off_p + Jrk.size)
        off_f += a_k.size
        off_p += Jrk.size

        if with_projection:
            prow, ploc = pool_rows(projection_pool, r)
            if prow.size == 0:
                raise EmptyGroupInPool(f"group {r} has no projection-pool sample")
            Vp = views[(r, k)][ploc]
            XJp = X[np.ix_(prow, Jrk)]
            Gn_parts.append(XJp.T @ Vp / prow.size)

            wrow, _ = pool_rows(w_pool, r)
            if wrow.size == 0:
                raise EmptyGroupInPool(f"group {r} has no Wn-pool sample")
            XJw = X[np.ix_(wrow, Jrk)]
            # |pool|^2 / |pool ∩ H(r)|^2 block weights, normalized by |pool|
            # so Wn and Gn share a per-sample scale
            Wn_blocks[(r, k)] = (w_pool.size / wrow.size ** 2) * (XJw.T @ XJw)

    return EstimatingSystem(
        blocks=blocks,
        full_index=full_index,
        partial_index=partial_index,
        theta_hat=theta_hat,
        q_full=np.concatenate(q_full_parts),
        B_full=np.vstack(B_full_parts),
        q_partial=np.concatenate(q_part_parts),
        B_partial=np.vstack(B_part_parts),
        Gn=np.vstack(Gn_parts) if with_projection else None,
        Wn_blocks=Wn_blocks,
        inference_pool=inference_pool,
        projection_pool=projection_pool,
        wn_pool=wn_pool,
        pools_note={
            "inference_pool_size": int(n_inf),
            "projection_pool_size": int(projection_pool.size),
            "wn_pool": wn_pool,
        },
    )


def eval_g(system: EstimatingSystem, beta, which="full") -> np.ndarray:
    """Evaluate the affine estimating function q - B @ beta."""
    beta = np.asarray(beta, dtype=np.float64)
    if which == "full":
        return system.q_full - system.B_full @ beta
    if which == "partial":
        return system.q_partial - system.B_partial @ beta
    raise ValueError("which must be 'full' or 'partial'")
