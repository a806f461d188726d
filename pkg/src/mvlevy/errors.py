"""Exception hierarchy shared by all modules."""


class LevyModelError(Exception):
    """Base class for library errors."""


class DomainError(LevyModelError, ValueError):
    """Parameters fall outside the admissible region of a model."""

    def __init__(self, violations):
        self.violations = list(violations)
        msg = "; ".join(str(v) for v in self.violations) or "invalid parameters"
        super().__init__(msg)


class NumericError(LevyModelError, ArithmeticError):
    """A characteristic exponent or price overflowed or became non-finite."""


class DegenerateParameterError(LevyModelError, ValueError):
    """A quantity needed as a denominator (e.g. a marginal variance) vanished."""


class InfeasibleCorrectionError(LevyModelError, ValueError):
    """The martingale correction does not exist: -i lies outside the analyticity strip."""


class PSDError(LevyModelError, ValueError):
    """The Brownian correlation matrix is not positive semidefinite."""


class MisuseError(LevyModelError, ValueError):
    """An operation was called on a model variant it does not apply to."""


class TruncationRangeError(LevyModelError, ValueError):
    """COS truncation range could not be built from the cumulants."""


class NoSolutionError(LevyModelError, ValueError):
    """Option price outside no-arbitrage bounds; no implied volatility exists."""


class BracketError(LevyModelError, ValueError):
    """Implied volatility lies outside the search bracket."""


class InfeasibleTargetError(LevyModelError, ValueError):
    """A dependence target cannot be attained inside the parameter domain."""


class ContractError(LevyModelError, ValueError):
    """Contract schema is inconsistent with the simulated paths."""
