"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CivrepError(Exception):
    exit_code = 2


class UsageError(CivrepError):
    exit_code = 1


class ConfigError(UsageError):
    pass


class DataError(CivrepError):
    exit_code = 2


class ShapeError(DataError, ValueError):
    pass


class DomainError(DataError, ValueError):
    pass


class MetricUnavailableError(DataError):
    pass


class GraphError(DataError):
    pass


class DagSyntaxError(GraphError):
    def __init__(self, lineno: int, line: str, reason: str):
        super().__init__(f"line {lineno}: {reason}: {line!r}")
        self.lineno = lineno


class CycleError(GraphError):
    def __init__(self, cycle):
        super().__init__("directed cycle: " + " -> ".join(cycle))
        self.cycle = list(cycle)


class UnknownNodeError(GraphError, KeyError):
    def __str__(self):
        return Exception.__str__(self)


class NumericError(CivrepError, ArithmeticError):
    exit_code = 3


class WeakInstrumentError(NumericError):
    def __init__(self, stratum, denominator: float, threshold: float):
        super().__init__(
            f"weak instrument in stratum {stratum!r}: |denominator| = "
            f"{abs(denominator):.4g} < {threshold}"
        )
        self.stratum = stratum
        self.denominator = denominator
