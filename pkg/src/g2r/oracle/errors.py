class OracleError(RuntimeError):
    pass


class BudgetExceeded(OracleError):
    """The pair is larger than the configured exact-solve budget."""


class OracleTimeout(OracleError):
    pass


class InconsistentCount(OracleError, ValueError):
    """A supplied MCS count is impossible for the given graphs."""
