"""Exception hierarchy shared by all modules.

Every error raised on purpose by the package derives from ``LhmmError`` so the
CLI can report it as structured JSON. The concrete classes also derive from
the closest builtin so callers that catch ``ValueError`` keep working.
"""

from __future__ import annotations


class LhmmError(Exception):
    """Base class. ``module`` names the pipeline stage that raised."""

    module = "lhmm_portfolio"

    def to_dict(self) -> dict:
        return {"error": type(self).__name__, "module": self.module, "message": str(self)}


class ParseError(LhmmError, ValueError):
    module = "data_ingest"

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where = f"{where}{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")

    def to_dict(self) -> dict:
        out = super().to_dict()
        out["line"] = self.line
        out["path"] = self.path
        return out


class ValidationError(LhmmError, ValueError):
    module = "data_ingest"


class DomainError(LhmmError, ValueError):
    """Argument outside the mathematical domain of a function."""

    module = "transforms"


class EstimationError(LhmmError, RuntimeError):
    """A fitting routine could not produce a usable estimate."""

    module = "hmm_core"


class CalibrationError(LhmmError, RuntimeError):
    module = "mmc_copula"


class InfeasibleError(LhmmError, ValueError):
    module = "portfolio"


class ConfigError(LhmmError, ValueError):
    module = "cli_backtest"
