"""Exception hierarchy.

Every error carries an ``exit_code`` used by the command line front end:
2 convergence failure, 3 input error, 4 numeric degeneracy.
"""


class IVCoxError(Exception):
    exit_code = 1
    code = "error"


class InputError(IVCoxError):
    exit_code = 3
    code = "input_error"


class ValidationError(InputError):
    code = "validation_error"

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [str(v) for v in self.violations[:10]]
        if len(self.violations) > 10:
            lines.append(f"... and {len(self.violations) - 10} more")
        super().__init__("dataset failed validation:\n  " + "\n  ".join(lines))


class SchemaError(InputError):
    code = "schema_error"


class ConvergenceError(IVCoxError):
    exit_code = 2
    code = "convergence_error"


class NoConvergence(ConvergenceError):
    """Raised by the PH fitter; ``fit`` holds the best candidate found."""

    code = "no_convergence"

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


class InsufficientConvergence(ConvergenceError):
    """Raised by the bootstrap; ``estimate`` holds the partial result."""

    code = "insufficient_convergence"

    def __init__(self, message, estimate=None):
        super().__init__(message)
        self.estimate = estimate


class NumericError(IVCoxError):
    exit_code = 4
    code = "numeric_error"


class Separation(NumericError):
    code = "separation"


class Singular(NumericError):
    code = "singular"


class DegeneratePropensity(NumericError):
    code = "degenerate_propensity"


class DegenerateRiskSet(NumericError):
    code = "degenerate_risk_set"


class StratumTooSmall(NumericError):
    code = "stratum_too_small"


class SingularCurvature(NumericError):
    code = "singular_curvature"
