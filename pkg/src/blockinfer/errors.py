"""Exception hierarchy shared across the package."""


class BlockinferError(Exception):
    """Base class for all package-specific errors."""


class ValidationFailure(BlockinferError):
    """A dataset or group-structure invariant does not hold."""

    def __init__(self, invariant, detail=""):
        self.invariant = invariant
        msg = invariant if not detail else f"{invariant}: {detail}"
        super().__init__(msg)


class EmptySourceSet(BlockinferError):
    """Some group with missing covariates has no usable imputation source."""


class NeverObservedCovariate(BlockinferError):
    """Some covariate is missing in every group."""


class InsufficientSamples(BlockinferError):
    """Too few samples in a group to fit a required imputation regression."""


class EmptyGroupInPool(BlockinferError):
    """A sample pool contains no member of some missing-pattern group."""


class Infeasible(BlockinferError):
    """A constrained program has an empty feasible set.

    ``attained_min`` carries the best (or a certified lower bound on the)
    achievable constraint residual so callers can enlarge the radius.
    """

    def __init__(self, attained_min, exact=True):
        self.attained_min = float(attained_min)
        self.exact = exact
        kind = "minimum" if exact else "lower bound"
        super().__init__(
            f"infeasible: attained residual {kind} {self.attained_min:.6g}"
        )


class NumericalFailure(BlockinferError):
    """A solver broke down without producing a certified answer."""


class DegenerateFolds(BlockinferError):
    """A cross-validation fold is empty or unusable."""


class PersistentlyInfeasible(BlockinferError):
    """Projection program stayed infeasible through all radius escalations."""


class DegenerateDenominator(BlockinferError):
    """Debias denominator too close to zero to trust the corrected root."""


class DegenerateVariance(BlockinferError):
    """A test statistic was requested with a zero variance estimate."""


class QuotaMismatch(BlockinferError):
    """Group size quotas cannot be reconciled with the total sample count."""
