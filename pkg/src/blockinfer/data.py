"""Dataset container and missing-pattern group structure.

Samples are rows. A boolean mask marks missing covariate cells, and a
boolean vector marks which samples have an observed response (the
supervised subset). Groups collect samples that share an identical
missing mask; all downstream estimating machinery is indexed by the
per-group observed sets a(r), missing sets m(r), imputation sources
G(r), and pairwise overlaps J(r, k).

Group labels are 0-based integers assigned in order of first appearance
of each distinct mask, which makes group derivation deterministic and
permutation-equivariant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import EmptySourceSet, NeverObservedCovariate, ValidationFailure


@dataclass(frozen=True)
class SemiSupervisedDataset:
    """Covariates with a missing mask plus a partially observed response.

    X values at masked positions are never read; y values at rows with
    ``y_observed == False`` are never read. Instances are treated as
    immutable after construction.
    """

    X: np.ndarray            # (n_total, p) float
    miss_mask: np.ndarray    # (n_total, p) bool, True = missing
    y: np.ndarray            # (n_total,) float, defined where y_observed
    y_observed: np.ndarray   # (n_total,) bool, True = supervised (D2)
    sample_ids: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "X", np.asarray(self.X, dtype=np.float64))
        object.__setattr__(self, "miss_mask", np.asarray(self.miss_mask, dtype=bool))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=np.float64))
        object.__setattr__(self, "y_observed", np.asarray(self.y_observed, dtype=bool))
        if not self.sample_ids:
            object.__setattr__(
                self, "sample_ids", tuple(range(self.X.shape[0]))
            )

    @property
    def n_total(self):
        return self.X.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def supervised(self):
        """Indices of D2 (observed response)."""
        return np.flatnonzero(self.y_observed)

    @property
    def unsupervised(self):
        """Indices of D1 (missing response)."""
        return np.flatnonzero(~self.y_observed)

    @property
    def n2(self):
        return int(self.y_observed.sum())


@dataclass(frozen=True)
class GroupStructure:
    """Missing-pattern groups and their imputation-source bookkeeping.

    ``a[r]``/``m[r]`` are the sorted observed/missing covariate index
    sets of group r, ``H[r]`` the member sample indices, ``G[r]`` the
    sorted imputation-source groups, and ``J[(r, k)]`` the covariates
    observed in both r and k. Complete groups use the identity
    convention G(r) = {r}, J(r, r) = all covariates.
    """

    R: int
    group_of: np.ndarray                  # (n_total,) int labels in [0, R)
    a: dict                               # r -> sorted int array
    m: dict                               # r -> sorted int array
    H: dict                               # r -> int array of sample indices
    G: dict                               # r -> sorted list of source groups
    J: dict                               # (r, k) -> sorted int array
    n_r: dict = field(default_factory=dict)   # supervised count per group
    N_r: dict = field(default_factory=dict)   # unsupervised count per group

    def blocks(self):
        """Ordered (r, k) pairs: r ascending, then k ascending within G(r)."""
        return [(r, k) for r in range(self.R) for k in self.G[r]]


def derive_groups(dataset: SemiSupervisedDataset) -> GroupStructure:
    """Group samples by identical missing masks and derive a, m, G, J.

    Raises EmptySourceSet if some incomplete group has no group that
    observes all of its missing covariates alongside at least one shared
    covariate, and NeverObservedCovariate if some covariate is missing
    everywhere.
    """
    mask = dataset.miss_mask
    n_total, p = mask.shape
    if mask.all(axis=0).any():
        j = int(np.flatnonzero(mask.all(axis=0))[0])
        raise NeverObservedCovariate(f"covariate {j} is missing in every sample")

    # label distinct mask rows in order of first appearance
    patterns = {}
    group_of = np.empty(n_total, dtype=np.int64)
    for i in range(n_total):
        key = mask[i].tobytes()
        if key not in patterns:
            patterns[key] = len(patterns)
        group_of[i] = patterns[key]
    R = len(patterns)

    all_cols = np.arange(p)
    a, m, H = {}, {}, {}
    for key, r in patterns.items():
        row = np.frombuffer(key, dtype=bool)
        a[r] = all_cols[~row]
        m[r] = all_cols[row]
        H[r] = np.flatnonzero(group_of == r)

    G, J = {}, {}
    for r in range(R):
        if m[r].size == 0:
            G[r] = [r]
            J[(r, r)] = all_cols.copy()
            continue
        sources = []
        for k in range(R):
            if k == r:
                continue
            if np.all(np.isin(m[r], a[k])):
                overlap = np.intersect1d(a[r], a[k])
                if overlap.size > 0:
                    sources.append(k)
                    J[(r, k)] = overlap
        if not sources:
            raise EmptySourceSet(
                f"group {r} (missing {m[r].size} covariates) has no source group"
            )
        G[r] = sorted(sources)

    n_r = {r: int(dataset.y_observed[H[r]].sum()) for r in range(R)}
    N_r = {r: int(H[r].size) - n_r[r] for r in range(R)}
    return GroupStructure(R=R, group_of=group_of, a=a, m=m, H=H, G=G, J=J,
                          n_r=n_r, N_r=N_r)


def validate(dataset: SemiSupervisedDataset, groups: GroupStructure) -> None:
    """Confirm every structural invariant; raise ValidationFailure naming
    the first violated one."""
    X, mask = dataset.X, dataset.miss_mask
    n_total, p = X.shape

    if mask.shape != (n_total, p):
        raise ValidationFailure("mask_shape", f"{mask.shape} != {(n_total, p)}")
    if dataset.y.shape != (n_total,) or dataset.y_observed.shape != (n_total,):
        raise ValidationFailure("response_shape")
    if len(dataset.sample_ids) != n_total:
        raise ValidationFailure("sample_ids_length")
    if not np.all(np.isfinite(X[~mask])):
        raise ValidationFailure("finite_observed_covariates")
    if dataset.n2 < 1:
        raise ValidationFailure("supervised_nonempty", "|D2| must be >= 1")
    if not np.all(np.isfinite(dataset.y[dataset.y_observed])):
        raise ValidationFailure("finite_observed_response")
    if mask.all(axis=0).any():
        raise ValidationFailure("covariate_never_observed")

    g = groups.group_of
    if g.shape != (n_total,):
        raise ValidationFailure("group_of_shape")
    if g.min(initial=0) < 0 or (g.max(initial=0) >= groups.R):
        raise ValidationFailure("group_label_range",
                                f"labels must lie in [0, {groups.R})")

    seen = np.zeros(n_total, dtype=bool)
    for r in range(groups.R):
        Hr = groups.H[r]
        if Hr.size == 0:
            raise ValidationFailure("group_nonempty", f"group {r} empty")
        if not np.array_equal(np.sort(Hr), np.flatnonzero(g == r)):
            raise ValidationFailure("H_matches_group_of", f"group {r}")
        if seen[Hr].any():
            raise ValidationFailure("groups_partition", "overlapping groups")
        seen[Hr] = True
        rows = mask[Hr]
        if not (rows == rows[0]).all():
            raise ValidationFailure("uniform_mask_within_group", f"group {r}")
        observed = np.flatnonzero(~rows[0])
        if not np.array_equal(groups.a[r], observed):
            raise ValidationFailure("a_matches_mask", f"group {r}")
        expect_m = np.setdiff1d(np.arange(p), groups.a[r])
        if not np.array_equal(groups.m[r], expect_m):
            raise ValidationFailure("m_is_complement", f"group {r}")
    if not seen.all():
        raise ValidationFailure("groups_partition", "unassigned samples")

    for r in range(groups.R):
        if len(groups.G[r]) < 1:
            raise ValidationFailure("source_set_nonempty", f"group {r}")
        for k in groups.G[r]:
            key = (r, k)
            if key not in groups.J:
                raise ValidationFailure("J_present", f"missing J{key}")
            if groups.m[r].size == 0:
                if k != r or not np.array_equal(groups.J[key], np.arange(p)):
                    raise ValidationFailure("complete_group_identity", f"group {r}")
                continue
            expect_J = np.intersect1d(groups.a[r], groups.a[k])
            if not np.array_equal(groups.J[key], expect_J):
                raise ValidationFailure("J_is_overlap", f"J{key}")
            if groups.J[key].size == 0:
                raise ValidationFailure("J_nonempty", f"J{key}")
            if not np.all(np.isin(groups.m[r], groups.a[k])):
                raise ValidationFailure("sources_cover_missing", f"J{key}")
            if not np.all(np.isin(groups.J[key], groups.a[k])):
                raise ValidationFailure("J_subset_of_source", f"J{key}")

    for r in range(groups.R):
        nr = int(dataset.y_observed[groups.H[r]].sum())
        if groups.n_r.get(r) != nr:
            raise ValidationFailure("n_r_consistent", f"group {r}")
        if groups.N_r.get(r) != groups.H[r].size - nr:
            raise ValidationFailure("N_r_consistent", f"group {r}")
